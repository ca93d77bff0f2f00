#pragma once

#include "ldlearn/pretrain.hpp"

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace ldl {

struct ShapeSegConfig {
  int target_channel = 0;
  int epochs = 80;            // adversarial stage, after the warmup in `train`
  double d_lr = 5e-5;
  double adv_weight = 1.0;
  bool augment_refs = true;   // flips, quarter turns and resized crops per D-step
  DiscriminatorConfig disc;
  int tta_count = 30;
  WeightMode weight_mode = WeightMode::Uncertainty;
  int refine_epochs = 100;
  double refine_lr = 1e-3;
  int refine_batch = 4;
  PretrainConfig train;  // warmup, loss weights, optimizer, batches

  void validate() const;
};

void to_json(nlohmann::json& j, const ShapeSegConfig& c);
void from_json(const nlohmann::json& j, ShapeSegConfig& c);

WeightMode parse_weight_mode(const std::string& s);
std::string to_string(WeightMode m);

/// Binary donor masks [1, H, W]; at least one.
struct ReferenceMaskSet {
  std::vector<torch::Tensor> masks;
  explicit ReferenceMaskSet(std::vector<torch::Tensor> m);
  /// A batch [n, 1, H, W] at the requested size, optionally augmented.
  torch::Tensor sample(int n, int height, int width, bool augment, Rng& rng) const;
};

/// Per-epoch discriminator diagnostics.
struct AdversarialEpoch {
  int epoch = 0;
  double disc_accuracy = 0.0;  // mean over the epoch's D-steps
  bool saturated = false;      // accuracy 1.0 at every D-step
  double kl = 0.0;             // KL(reference || generated) of mask-density histograms
};

struct ShapeGuidedResult {
  LossTrace trace;
  std::vector<AdversarialEpoch> epochs;
};

/// Alternating training: each iteration first updates the discriminator on
/// reference masks vs the detached target channel, then the embedding net on
/// the region objective plus adv_weight * BCE(d(r_m), 1).
ShapeGuidedResult train_shape_guided(PretrainSession& session, Discriminator& disc, const ReferenceMaskSet& refs,
                                     const ShapeSegConfig& cfg);

/// Per-pixel soft assignment to this image's region prototypes, [C, H, W]
/// (sums to 1 over c). v is [K, H, W], r is [C, H, W].
torch::Tensor cluster_refine_all(const torch::Tensor& v, const torch::Tensor& r, Temperature tau);
/// Channel m of cluster_refine_all, [H, W].
torch::Tensor cluster_refine(const torch::Tensor& v, const torch::Tensor& r, int m, Temperature tau);

struct UncertaintyBundle {
  torch::Tensor label;        // [H, W] {0, 1}
  torch::Tensor uncertainty;  // [H, W] float64 in [0, ln 2]
  torch::Tensor mean;         // [H, W] float64, ensemble mean
  int ensemble = 0;
};

/// Label = mean > 0.5 (strictly); uncertainty = mean binary entropy. preds is [E, H, W].
UncertaintyBundle bundle_from_predictions(const torch::Tensor& preds);

/// E test-time-augmented cluster_refine passes mapped back to the original frame.
UncertaintyBundle pseudo_label_uncertainty(EmbedNet& net, const torch::Tensor& image, int m, int ensemble,
                                           const AugmentConfig& augment, Temperature tau, std::uint64_t seed);

/// Weighted-BCE self-training on pseudo-labels. Each bundle's weight map
/// comes from its uncertainty via `mode`; WeightMode::Uniform ignores it.
LossTrace retrain_refiner(SegNet& net, const std::vector<torch::Tensor>& images,
                          const std::vector<UncertaintyBundle>& bundles, const ShapeSegConfig& cfg);

enum class PredictMode { Raw, Cluster, Refined };
PredictMode parse_predict_mode(const std::string& s);
std::string to_string(PredictMode m);

struct Prediction {
  torch::Tensor prob;  // [H, W] float32 in [0, 1]
  torch::Tensor mask;  // [H, W] float32, prob > 0.5
};

/// Raw and cluster modes need an "embed" checkpoint, refined a "seg" one.
std::vector<Prediction> predict_segmentation(const std::string& checkpoint, const std::vector<torch::Tensor>& images,
                                             PredictMode mode, int target_channel, double tau);
/// Same, on an already loaded net.
Prediction predict_embed(EmbedNet& net, const torch::Tensor& image, PredictMode mode, int target_channel,
                         Temperature tau);
Prediction predict_seg(SegNet& net, const torch::Tensor& image);

/// Writes <id>_label.png and <id>_uncertainty.pfm under `dir` plus bundles.txt
/// ("image label uncertainty" per line, relative paths).
void save_bundles(const std::string& dir, const std::vector<std::string>& ids,
                  const std::vector<UncertaintyBundle>& bundles);
std::vector<UncertaintyBundle> load_bundles(const std::string& dir, std::vector<std::string>* ids = nullptr);

/// Histogram over masks of their foreground fraction, `bins` equal bins on
/// [0, 1], normalized to sum 1.
std::vector<double> density_histogram(const std::vector<torch::Tensor>& masks, int bins = 20);

}  // namespace ldl
