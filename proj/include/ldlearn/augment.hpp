#pragma once

#include "ldlearn/common.hpp"
#include "ldlearn/losses.hpp"

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ldl {

/// One image of a dataset. `image` is [3, H, W] float32 in [0, 1]; `mask`, when
/// defined, is [1, H, W] with values in {0, 1}.
struct Sample {
  std::string id;
  torch::Tensor image;
  torch::Tensor mask;
  std::optional<Point> landmark;
};

using Dataset = std::vector<Sample>;

struct AugmentConfig {
  bool geometric = true;
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  bool rotate90 = true;

  bool photometric = true;
  double grayscale_prob = 0.2;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;

  double mixup_lambda_min = 0.2;
  double mixup_lambda_max = 0.8;

  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

// ---------------------------------------------------------------------------
// Field-of-view cropping

struct Box {
  int top, left, height, width;
  friend bool operator==(const Box&, const Box&) = default;
};

inline constexpr double kFovThreshold = 10.0 / 255.0;

/// Tight box around pixels whose max channel exceeds `threshold`.
std::optional<Box> fov_bbox(const torch::Tensor& image, double threshold = kFovThreshold);

/// Crops to the field of view and resizes (bilinear) to out_h x out_w. An image
/// with no pixel above threshold is returned unchanged with a warning.
torch::Tensor fov_crop(const torch::Tensor& image, int out_h, int out_w, double threshold = kFovThreshold);

/// Bilinear resize of a [C, H, W] tensor.
torch::Tensor resize_bilinear(const torch::Tensor& image, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Paired views

/// Geometric transform shared by both views of a pair: resized crop of the
/// source, optional horizontal flip, then k counter-clockwise quarter turns.
struct Geometry {
  int src_h = 0, src_w = 0;
  Box crop{0, 0, 0, 0};
  bool flip = false;
  int rot90 = 0;

  torch::Tensor apply(const torch::Tensor& image) const;
  /// Source-image coordinates (top, left, bottom, right; continuous, pixel
  /// edges) covered by output region `box`.
  std::array<double, 4> source_footprint(const PatchGrid::Box& box) const;
};

Geometry identity_geometry(int h, int w);
Geometry sample_geometry(int h, int w, const AugmentConfig& cfg, Rng& rng);

struct Photometric {
  bool grayscale = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;

  torch::Tensor apply(const torch::Tensor& image) const;
};

Photometric sample_photometric(const AugmentConfig& cfg, Rng& rng);

struct ViewPair {
  torch::Tensor x;
  torch::Tensor x_hat;
  Geometry geometry;
};

/// Samples one geometry applied to both views and independent photometric
/// jitter per view.
ViewPair make_view_pair(const torch::Tensor& x, const AugmentConfig& cfg, Rng& rng);

struct MixupSample {
  torch::Tensor x;
  double lambda;
  int parent1, parent2;
};

/// x = lambda * x1 + (1 - lambda) * x2, evaluated elementwise in the images' dtype.
MixupSample blend(const torch::Tensor& x1, const torch::Tensor& x2, double lambda, int parent1, int parent2);
MixupSample make_mixup(const torch::Tensor& x1, const torch::Tensor& x2, int parent1, int parent2,
                       const AugmentConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Invertible test-time augmentation: the 8 dihedral lattice transforms
// combined with photometric jitter. Transform 0 is the identity.

struct TtaTransform {
  bool flip = false;
  int rot90 = 0;
  std::optional<Photometric> photometric;
};

TtaTransform tta_transform(int index, const AugmentConfig& cfg, std::uint64_t seed);
torch::Tensor tta_forward(const torch::Tensor& image, const TtaTransform& t);
/// Maps a prediction made on the transformed image back to original coordinates.
torch::Tensor tta_inverse(const torch::Tensor& mask, const TtaTransform& t);

// ---------------------------------------------------------------------------
// Batches: `groups` images, each contributing two views and one mixup image.

struct TrainingBatch {
  torch::Tensor images;   // [3G, 3, H, W]: first views, second views, mixups
  torch::Tensor lambdas;  // [G], float64
  std::vector<int> sources;                  // dataset index per group
  std::vector<std::pair<int, int>> parents;  // mixup parents (group indices)
  int groups() const { return static_cast<int>(sources.size()); }
};

/// Deterministic in (seed, batch_id): the stream is derived from those alone.
TrainingBatch make_batch(const std::vector<torch::Tensor>& images, int groups, const AugmentConfig& cfg,
                         std::uint64_t seed, std::int64_t batch_id);

/// Prefetches batches on `workers` background threads (0 = synchronous).
/// Output for a batch id does not depend on the worker count.
class BatchProducer {
 public:
  BatchProducer(std::vector<torch::Tensor> images, int groups, AugmentConfig cfg, std::uint64_t seed,
                int workers = 0);
  TrainingBatch get(std::int64_t batch_id);

 private:
  std::vector<torch::Tensor> images_;
  int groups_;
  AugmentConfig cfg_;
  std::uint64_t seed_;
  int workers_;
  std::mutex mutex_;
  std::map<std::int64_t, std::shared_future<TrainingBatch>> pending_;
};

// ---------------------------------------------------------------------------
// Synthetic datasets: vessel-like random-walk curves on a textured
// background, optionally with one bright disc whose center is the landmark.

enum class SynthKind { Curves, DiscCurves };

struct SynthSpec {
  int count = 10;
  int height = 64;
  int width = 64;
  SynthKind kind = SynthKind::Curves;
  std::uint64_t seed = 0;
  double min_fraction = 0.03;  // curve pixel fraction band
  double max_fraction = 0.12;
  int disc_radius_min = 6;
  int disc_radius_max = 9;
};

SynthKind parse_synth_kind(const std::string& s);
std::string to_string(SynthKind k);

Dataset synth_dataset(const SynthSpec& spec);
/// Binary curve masks from an independent stream (the "donor" reference shapes).
std::vector<torch::Tensor> synth_reference_masks(int count, int height, int width, std::uint64_t seed);

std::vector<torch::Tensor> images_of(const Dataset& data);

}  // namespace ldl
