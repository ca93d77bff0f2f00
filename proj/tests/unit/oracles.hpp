#pragma once
// Brute-force reference implementations in plain double loops. They read
// tensors element by element and share no code with the library.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec row(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return Vec(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

inline Vec normalized(Vec v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double clamp_p(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

// -log P(pos|q) - sum_{j != pos} log(1 - P(j|q)), softmax of dot / tau.
inline double joint_term(const Vec& q, const std::vector<Vec>& cands, std::size_t pos, double tau) {
  std::vector<double> logits;
  double mx = -1e300;
  for (const auto& c : cands) {
    logits.push_back(dot(q, c) / tau);
    mx = std::max(mx, logits.back());
  }
  double z = 0;
  for (double l : logits) z += std::exp(l - mx);
  double m = 0;
  for (std::size_t j = 0; j < cands.size(); ++j) {
    const double p = clamp_p(std::exp(logits[j] - mx) / z);
    m += j == pos ? -std::log(p) : -std::log(1.0 - p);
  }
  return m;
}

// s, s_hat: [N, P, K] unit rows.
inline double patch_discrimination(const torch::Tensor& s, const torch::Tensor& s_hat, double tau) {
  const auto n = s.size(0), p = s.size(1);
  std::vector<Vec> cands;
  for (int a = 0; a < n; ++a)
    for (int i = 0; i < p; ++i) cands.push_back(row(s[a][i]));
  double total = 0;
  for (int a = 0; a < n; ++a)
    for (int i = 0; i < p; ++i) total += joint_term(row(s_hat[a][i]), cands, a * p + i, tau);
  return total;
}

// Patch sums over an even grid, then normalization. v: [N, K, H, W] -> [N][P] vectors.
inline std::vector<std::vector<Vec>> patch_vectors(const torch::Tensor& v, int rows, int cols) {
  auto a = v.to(torch::kFloat64).contiguous();
  const int n = a.size(0), k = a.size(1), h = a.size(2), w = a.size(3);
  const int ph = h / rows, pw = w / cols;
  auto acc = a.accessor<double, 4>();
  std::vector<std::vector<Vec>> out(n);
  for (int b = 0; b < n; ++b)
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        Vec s(k, 0.0);
        for (int y = r * ph; y < (r + 1) * ph; ++y)
          for (int x = c * pw; x < (c + 1) * pw; ++x)
            for (int d = 0; d < k; ++d) s[d] += acc[b][d][y][x];
        out[b].push_back(normalized(s));
      }
  return out;
}

struct Bank {
  std::vector<std::vector<Vec>> t;  // [N][C]
  std::vector<Vec> T;               // [C]
};

inline Bank prototypes(const torch::Tensor& v, const torch::Tensor& r) {
  auto av = v.to(torch::kFloat64).contiguous(), ar = r.to(torch::kFloat64).contiguous();
  const int n = av.size(0), k = av.size(1), h = av.size(2), w = av.size(3), c = ar.size(1);
  auto V = av.accessor<double, 4>();
  auto R = ar.accessor<double, 4>();
  Bank b;
  b.t.assign(n, {});
  b.T.assign(c, Vec(k, 0.0));
  for (int i = 0; i < n; ++i)
    for (int m = 0; m < c; ++m) {
      Vec s(k, 0.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int d = 0; d < k; ++d) s[d] += R[i][m][y][x] * V[i][d][y][x];
      b.t[i].push_back(normalized(s));
    }
  for (int m = 0; m < c; ++m) {
    Vec s(k, 0.0);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < k; ++d) s[d] += b.t[i][m][d];
    b.T[m] = normalized(s);
  }
  return b;
}

inline double region_discrimination(const Bank& b, double tau) {
  double total = 0;
  for (const auto& per_image : b.t)
    for (std::size_t m = 0; m < per_image.size(); ++m) total += joint_term(per_image[m], b.T, m, tau);
  return total;
}

// s_mixed, s_target: [G, P, K]; candidates are all targets.
inline double hypersphere_mixup(const torch::Tensor& s_mixed, const torch::Tensor& s_target, double tau) {
  const auto g = s_mixed.size(0), p = s_mixed.size(1);
  std::vector<Vec> cands;
  for (int a = 0; a < g; ++a)
    for (int i = 0; i < p; ++i) cands.push_back(row(s_target[a][i]));
  double total = 0;
  for (int a = 0; a < g; ++a)
    for (int i = 0; i < p; ++i) total += joint_term(row(s_mixed[a][i]), cands, a * p + i, tau);
  return total;
}

inline double binary_entropy(double r) {
  double h = 0;
  if (r > 0) h -= r * std::log(std::max(r, 1e-7));
  if (r < 1) h -= (1 - r) * std::log(std::max(1 - r, 1e-7));
  return h;
}

inline double entropy(const torch::Tensor& r) {
  const auto x = row(r);
  double s = 0;
  for (double v : x) s += binary_entropy(v);
  return s / static_cast<double>(x.size());
}

inline double dice(const torch::Tensor& pred, const torch::Tensor& target, double eps = 1.0) {
  const auto p = row(pred), t = row(target);
  double inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * t[i];
    sp += p[i];
    st += t[i];
  }
  return 1.0 - 2.0 * (inter + eps) / (sp + st + eps);
}

inline double weighted_bce(const torch::Tensor& pred, const torch::Tensor& label, const torch::Tensor& weight) {
  const auto p = row(pred), y = row(label), w = row(weight);
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double term = 0;
    if (y[i] > 0) term += y[i] * std::log(std::max(p[i], 1e-7));
    if (y[i] < 1) term += (1 - y[i]) * std::log(std::max(1 - p[i], 1e-7));
    s -= w[i] * term;
  }
  return s / static_cast<double>(p.size());
}

// Central finite differences of a scalar function of one tensor.
template <class F>
torch::Tensor numeric_grad(F&& f, const torch::Tensor& x, double step = 1e-5) {
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto g = torch::zeros_like(base);
  auto* p = base.data_ptr<double>();
  auto* gp = g.data_ptr<double>();
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    const double keep = p[i];
    p[i] = keep + step;
    const double up = f(base);
    p[i] = keep - step;
    const double down = f(base);
    p[i] = keep;
    gp[i] = (up - down) / (2 * step);
  }
  return g;
}

// max |a - b| / max(1, |b|) style relative error with an absolute floor so
// near-zero entries do not explode.
inline double max_rel_error(const torch::Tensor& analytic, const torch::Tensor& numeric) {
  auto a = analytic.to(torch::kFloat64), n = numeric.to(torch::kFloat64);
  auto denom = torch::maximum(a.abs(), n.abs()).clamp_min(1e-3);
  return ((a - n).abs() / denom).max().item<double>();
}

}  // namespace oracle
