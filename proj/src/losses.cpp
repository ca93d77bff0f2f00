#include "ldlearn/losses.hpp"

#include "ldlearn/common.hpp"

#include <cmath>
#include <limits>

namespace ldl {

Temperature::Temperature(double tau) : tau_(tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be a positive finite number");
}

PatchGrid::PatchGrid(int rows, int cols, int height, int width)
    : rows_(rows), cols_(cols), height_(height), width_(width) {
  if (rows < 1 || cols < 1) throw ConfigError("patch grid counts must be positive");
  if (height < 1 || width < 1) throw ConfigError("patch grid image size must be positive");
  if (height % rows != 0 || width % cols != 0)
    throw ConfigError("patch grid " + std::to_string(rows) + "x" + std::to_string(cols) + " does not divide image " +
                      std::to_string(height) + "x" + std::to_string(width));
}

PatchGrid::Box PatchGrid::box(int i) const {
  if (i < 0 || i >= count()) throw std::out_of_range("patch index out of range");
  const int ph = patch_height();
  const int pw = patch_width();
  const int row = i / cols_;
  const int col = i - cols_ * row;
  return {ph * row, ph * (row + 1), pw * col, pw * (col + 1)};
}

torch::Tensor normalize_or_basis(const torch::Tensor& x, std::int64_t dim, std::string_view what) {
  auto norm = x.norm(2, dim, true);
  auto degenerate = norm < kDegenerateNorm;
  auto normalized = x / norm.clamp_min(kDegenerateNorm);
  const auto n_bad = degenerate.sum().item<std::int64_t>();
  if (n_bad == 0) return normalized;
  warn(std::string(what) + ": " + std::to_string(n_bad) + " near-zero sum(s) replaced by the first basis vector");
  auto basis = torch::zeros({x.size(dim)}, x.options());
  basis[0] = 1.0;
  std::vector<std::int64_t> shape(x.dim(), 1);
  shape[dim < 0 ? dim + x.dim() : dim] = x.size(dim);
  return torch::where(degenerate, basis.view(shape), normalized);
}

torch::Tensor patch_pool(const torch::Tensor& v, const PatchGrid& grid) {
  TORCH_CHECK(v.dim() == 4, "patch_pool expects v as [N, K, H, W]");
  if (v.size(2) != grid.height() || v.size(3) != grid.width())
    throw ConfigError("patch grid does not match the embedding's spatial size");
  const auto n = v.size(0), k = v.size(1);
  auto sums = v.reshape({n, k, grid.rows(), grid.patch_height(), grid.cols(), grid.patch_width()}).sum({3, 5});
  sums = sums.reshape({n, k, grid.count()}).transpose(1, 2);  // [N, P, K]
  return normalize_or_basis(sums, 2, "patch_pool");
}

torch::Tensor recognition_prob(const torch::Tensor& query, const torch::Tensor& candidates, Temperature tau) {
  if (candidates.dim() != 2 || candidates.size(0) == 0)
    throw std::invalid_argument("recognition_prob needs a non-empty [J, K] candidate list");
  return torch::softmax(candidates.matmul(query) / tau.value(), 0);
}

torch::Tensor joint_nll_terms(const torch::Tensor& queries, const torch::Tensor& candidates,
                              const torch::Tensor& positive, Temperature tau) {
  TORCH_CHECK(queries.dim() == 2 && candidates.dim() == 2 && queries.size(1) == candidates.size(1),
              "joint_nll_terms expects [M, K] queries and [J, K] candidates");
  TORCH_CHECK(positive.dim() == 1 && positive.size(0) == queries.size(0), "one positive index per query");
  if (queries.size(0) == 0 || candidates.size(0) == 0) throw std::invalid_argument("empty batch");
  auto prob = torch::softmax(queries.matmul(candidates.t()) / tau.value(), 1)
                  .clamp(kProbClamp, 1.0 - kProbClamp);
  auto is_pos = torch::one_hot(positive, candidates.size(0)).to(prob.dtype());
  auto correct = (torch::log(prob) * is_pos).sum(1);
  auto wrong = (torch::log1p(-prob) * (1.0 - is_pos)).sum(1);
  return -(correct + wrong);
}

static torch::Tensor aligned_joint_loss(const torch::Tensor& anchors, const torch::Tensor& queries, Temperature tau) {
  if (anchors.numel() == 0) throw std::invalid_argument("empty batch");
  TORCH_CHECK(anchors.dim() == 3 && anchors.sizes() == queries.sizes(),
              "expected index-aligned [N, P, K] embeddings");
  const auto k = anchors.size(2);
  auto cand = anchors.reshape({-1, k});
  auto q = queries.reshape({-1, k});
  auto pos = torch::arange(q.size(0), torch::TensorOptions().dtype(torch::kLong).device(q.device()));
  return joint_nll_terms(q, cand, pos, tau).sum();
}

torch::Tensor patch_discrimination_loss(const torch::Tensor& s, const torch::Tensor& s_hat, Temperature tau) {
  return aligned_joint_loss(s, s_hat, tau);
}

PrototypeBank region_prototypes(const torch::Tensor& v, const torch::Tensor& r) {
  TORCH_CHECK(v.dim() == 4 && r.dim() == 4, "region_prototypes expects [N, K, H, W] and [N, C, H, W]");
  if (v.size(0) < 1) throw std::invalid_argument("region_prototypes needs at least one image");
  if (v.size(0) != r.size(0) || v.size(2) != r.size(2) || v.size(3) != r.size(3))
    throw std::invalid_argument("v and r must be spatially aligned");
  auto sums = torch::einsum("nchw,nkhw->nck", {r, v});
  auto t = normalize_or_basis(sums, 2, "region_prototypes");
  auto T = normalize_or_basis(t.sum(0), 1, "region_prototypes");
  return {t, T};
}

torch::Tensor region_discrimination_loss(const PrototypeBank& bank, Temperature tau) {
  const auto n = bank.t.size(0), c = bank.t.size(1), k = bank.t.size(2);
  if (n == 0) throw std::invalid_argument("empty prototype bank");
  auto pos = torch::arange(c, torch::TensorOptions().dtype(torch::kLong).device(bank.t.device())).repeat({n});
  return joint_nll_terms(bank.t.reshape({n * c, k}), bank.T, pos, tau).sum();
}

torch::Tensor mixup_target(const torch::Tensor& s1, const torch::Tensor& s2, const torch::Tensor& lambda) {
  TORCH_CHECK(s1.sizes() == s2.sizes(), "mixup parents must be index-aligned");
  auto lam = lambda.to(s1.dtype());
  if (lam.dim() == 1) {
    std::vector<std::int64_t> shape(s1.dim(), 1);
    shape[0] = lam.size(0);
    lam = lam.view(shape);
  }
  return normalize_or_basis(lam * s1 + (1.0 - lam) * s2, -1, "mixup_target");
}

torch::Tensor mixup_target(const torch::Tensor& s1, const torch::Tensor& s2, double lambda) {
  return mixup_target(s1, s2, torch::tensor(lambda, s1.options()));
}

torch::Tensor hypersphere_mixup_loss(const torch::Tensor& s_mixed, const torch::Tensor& s_target, Temperature tau) {
  return aligned_joint_loss(s_target, s_mixed, tau);
}

// y <= 1 here, so only the lower clamp matters; log(1) stays exactly 0
static torch::Tensor xlogy_clamped(const torch::Tensor& x, const torch::Tensor& y) {
  return x * torch::log(y.clamp_min(kProbClamp));
}

torch::Tensor entropy_loss(const torch::Tensor& r) {
  return -(xlogy_clamped(r, r) + xlogy_clamped(1.0 - r, 1.0 - r)).mean();
}

torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double eps) {
  TORCH_CHECK(pred.sizes() == target.sizes(), "dice_loss shape mismatch");
  return 1.0 - 2.0 * ((pred * target).sum() + eps) / (pred.sum() + target.sum() + eps);
}

torch::Tensor weighted_bce(const torch::Tensor& pred, const torch::Tensor& label, const torch::Tensor& weight) {
  TORCH_CHECK(pred.sizes() == label.sizes(), "weighted_bce shape mismatch");
  return -(weight * (xlogy_clamped(label, pred) + xlogy_clamped(1.0 - label, 1.0 - pred))).mean();
}

torch::Tensor bce(const torch::Tensor& pred, const torch::Tensor& label) {
  TORCH_CHECK(pred.sizes() == label.sizes(), "bce shape mismatch");
  return -(xlogy_clamped(label, pred) + xlogy_clamped(1.0 - label, 1.0 - pred)).mean();
}

torch::Tensor uncertainty_weights(const torch::Tensor& u, WeightMode mode) {
  if (mode == WeightMode::Uncertainty) return u;
  if (mode == WeightMode::Uniform) return torch::ones_like(u);
  return (1.0 - u / std::log(2.0)).clamp_min(0.0);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: distributions need the same support");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

}  // namespace ldl
