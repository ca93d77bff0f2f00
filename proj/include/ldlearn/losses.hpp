#pragma once

#include "ldlearn/common.hpp"

#include <torch/torch.h>

#include <span>
#include <string_view>

namespace ldl {

/// Softmax temperature, strictly positive.
class Temperature {
 public:
  explicit Temperature(double tau);
  double value() const { return tau_; }

 private:
  double tau_;
};

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDegenerateNorm = 1e-8;

/// Even H_p x W_p decomposition of an H x W image; patch i is row-major.
class PatchGrid {
 public:
  struct Box {
    int h_begin, h_end, w_begin, w_end;
  };

  PatchGrid(int rows, int cols, int height, int width);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int count() const { return rows_ * cols_; }
  int patch_height() const { return height_ / rows_; }
  int patch_width() const { return width_ / cols_; }
  Box box(int i) const;

 private:
  int rows_, cols_, height_, width_;
};

/// L2-normalizes along `dim`. Slices whose norm is below 1e-8 are replaced by
/// the first basis vector and a degeneracy warning is emitted.
torch::Tensor normalize_or_basis(const torch::Tensor& x, std::int64_t dim, std::string_view what);

/// v: [N, K, H, W] -> patch embeddings [N, P, K].
torch::Tensor patch_pool(const torch::Tensor& v, const PatchGrid& grid);

/// Softmax of cos(candidate_j, query) / tau over the candidates ([J, K]).
torch::Tensor recognition_prob(const torch::Tensor& query, const torch::Tensor& candidates, Temperature tau);

/// Negative log of the joint probability of classifying each query correctly:
/// -log P(pos | q) - sum_{j != pos} log(1 - P(j | q)), with probabilities
/// clamped to [1e-7, 1 - 1e-7]. queries [M, K], candidates [J, K], positive [M]
/// (int64 candidate index). Returns the per-query terms [M].
torch::Tensor joint_nll_terms(const torch::Tensor& queries, const torch::Tensor& candidates,
                              const torch::Tensor& positive, Temperature tau);

/// Patch discrimination: s, s_hat are [N, P, K]; the positive for s_hat(n, i)
/// is s(n, i) and every other patch of the batch is a negative.
torch::Tensor patch_discrimination_loss(const torch::Tensor& s, const torch::Tensor& s_hat, Temperature tau);

struct PrototypeBank {
  torch::Tensor t;  // [N, C, K] per-image region vectors
  torch::Tensor T;  // [C, K] per-class prototypes
};

/// v: [N, K, H, W], r: [N, C, H, W].
PrototypeBank region_prototypes(const torch::Tensor& v, const torch::Tensor& r);

torch::Tensor region_discrimination_loss(const PrototypeBank& bank, Temperature tau);

/// normalize(lambda * s1 + (1 - lambda) * s2). s1, s2: [G, P, K]; lambda is a
/// scalar or a [G] tensor.
torch::Tensor mixup_target(const torch::Tensor& s1, const torch::Tensor& s2, const torch::Tensor& lambda);
torch::Tensor mixup_target(const torch::Tensor& s1, const torch::Tensor& s2, double lambda);

/// Same joint form as patch discrimination with the mixup targets as the candidate set.
torch::Tensor hypersphere_mixup_loss(const torch::Tensor& s_mixed, const torch::Tensor& s_target, Temperature tau);

/// Mean binary entropy of every element of r (natural log, 0 log 0 = 0).
torch::Tensor entropy_loss(const torch::Tensor& r);

/// 1 - 2 (sum pred*target + eps) / (sum pred + sum target + eps).
torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double eps = 1.0);

torch::Tensor bce(const torch::Tensor& pred, const torch::Tensor& label);

/// -(1/N) sum w [y log p + (1 - y) log(1 - p)], N the element count.
torch::Tensor weighted_bce(const torch::Tensor& pred, const torch::Tensor& label, const torch::Tensor& weight);

enum class WeightMode { Uncertainty, Certainty, Uniform };

/// Per-pixel loss weights from an uncertainty map u in [0, ln 2]: u itself, or
/// the certainty 1 - u / ln 2, or all ones (plain self-training).
torch::Tensor uncertainty_weights(const torch::Tensor& u, WeightMode mode);

/// sum P log(P / Q); +inf where P > 0 and Q = 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

}  // namespace ldl
