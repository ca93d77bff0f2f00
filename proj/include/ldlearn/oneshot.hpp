#pragma once

#include "ldlearn/pretrain.hpp"

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <limits>
#include <string>
#include <vector>

namespace ldl {

/// Gaussian-like window weights W(h, w) = exp(-(dh^2 + dw^2) / (2 sigma^2)) with
/// dh = h / h_cen - 1 and h_cen = 0.5 * height (likewise for w). Not normalized.
/// sigma = +inf gives all ones.
struct CenterKernel {
  int height = 0, width = 0;
  double sigma = 0.5;
  torch::Tensor weights;  // [height, width], float64
};

CenterKernel center_kernel(int height, int width, double sigma);
inline CenterKernel uniform_kernel(int height, int width) {
  return center_kernel(height, width, std::numeric_limits<double>::infinity());
}

/// Grid form: non-overlapping windows of the kernel's size at stride equal to
/// the window, floor(H / kh) x floor(W / kw) of them from the top-left corner.
/// Returns unit vectors [N, P, K], patches in row-major order.
torch::Tensor center_sensitive_pool_grid(const torch::Tensor& v, const CenterKernel& kernel);

/// Dense form: the kernel slides over every pixel (zero padding, output the
/// same size as v), then each pixel is L2-normalized. The window of output
/// pixel (h, w) spans rows h - kh/2 .. h - kh/2 + kh - 1. Returns [N, K, H, W].
torch::Tensor center_sensitive_pool_dense(const torch::Tensor& v, const CenterKernel& kernel);

struct OneshotConfig {
  double sigma = 0.5;
  bool center_sensitive = true;  // false: uniform averaging
  bool multi_size = true;        // false: fixed grid from pretrain grid_rows/cols
  int pool_min = 28;
  int pool_max = 112;
  int epochs = 100;
  int test_pool = 64;
  double threshold_ratio = 0.95;
  std::vector<double> fractions{0.05, 0.1, 0.15, 0.2, 0.25};
  PretrainConfig train;  // optimizer, schedule, batch, tau and augmentation settings

  void validate() const;
};

void to_json(nlohmann::json& j, const OneshotConfig& c);
void from_json(const nlohmann::json& j, OneshotConfig& c);

/// Pooling size drawn for `iteration`, clamped to the image size.
int sample_pool_size(const OneshotConfig& cfg, int height, int width, std::uint64_t seed, std::int64_t iteration);

/// Patch discrimination + mixup training with center-sensitive pooling and a
/// per-iteration pooling size. Runs cfg.epochs from the session's position.
LossTrace train_center_sensitive(PretrainSession& session, const OneshotConfig& cfg);

struct Localization {
  Point point;           // refined (centroid) prediction
  Point argmax;
  torch::Tensor similarity;  // [H, W] float32, cosine in [-1, 1]
};

/// Matches the support embedding at `target` against every query pixel.
Localization localize(EmbedNet& net, const torch::Tensor& support, Point target, const torch::Tensor& query,
                      int pool_size, const OneshotConfig& cfg);

/// Same matching on precomputed dense embeddings ([K, H, W] each).
Localization localize_dense(const torch::Tensor& support_dense, Point target, const torch::Tensor& query_dense,
                            double threshold_ratio = 0.95);

/// Dense pooled embeddings for a stack of images [N, 3, H, W] -> [N, K, H, W].
torch::Tensor dense_embeddings(EmbedNet& net, const torch::Tensor& images, int pool_size, const OneshotConfig& cfg);

/// Refinement step on a similarity map: 8-connected component of pixels
/// strictly above ratio * max that contains the argmax, centroid rounded half-up.
Point refine_peak(const torch::Tensor& similarity, Point argmax, double ratio);
/// Row-major first occurrence of the maximum.
Point argmax_point(const torch::Tensor& similarity);

struct AccuracyReport {
  std::vector<double> fractions;
  std::vector<double> rates;
  double mean = 0.0;
};

/// Rate of predictions with distance < f * pool_size, for each fraction f.
AccuracyReport accuracy_at_thresholds(const std::vector<Point>& predictions, const std::vector<Point>& truths,
                                      double pool_size,
                                      const std::vector<double>& fractions = {0.05, 0.1, 0.15, 0.2, 0.25});

struct QueryResult {
  std::string id;
  Point predicted;
  Point truth;
  double distance = 0.0;
};

/// Localizes the support's landmark in every query. Queries need landmarks.
/// When `raster_dir` is non-empty, writes <id>_similarity.pfm per query.
std::vector<QueryResult> localize_queries(EmbedNet& net, const Sample& support, const Dataset& queries,
                                          const OneshotConfig& cfg, const std::string& raster_dir = "");

void write_localization_csv(const std::string& path, const std::vector<QueryResult>& rows);
void write_accuracy_csv(const std::string& path, const AccuracyReport& report);

}  // namespace ldl
