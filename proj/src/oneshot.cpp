#include "ldlearn/oneshot.hpp"

#include "ldlearn/io.hpp"

#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>

namespace fs = std::filesystem;

namespace ldl {

CenterKernel center_kernel(int height, int width, double sigma) {
  if (height < 1 || width < 1) throw ConfigError("center kernel window must be positive");
  if (!(sigma > 0.0)) throw ConfigError("center kernel sigma must be positive");
  CenterKernel k{height, width, sigma, torch::empty({height, width}, torch::kFloat64)};
  const double h_cen = 0.5 * height, w_cen = 0.5 * width;
  const double denom = 2.0 * sigma * sigma;  // inf for sigma = inf, giving exp(-0) = 1
  auto acc = k.weights.accessor<double, 2>();
  for (int h = 0; h < height; ++h) {
    const double dh = h / h_cen - 1.0;
    for (int w = 0; w < width; ++w) {
      const double dw = w / w_cen - 1.0;
      acc[h][w] = std::exp(-(dh * dh + dw * dw) / denom);
    }
  }
  return k;
}

torch::Tensor center_sensitive_pool_grid(const torch::Tensor& v, const CenterKernel& kernel) {
  TORCH_CHECK(v.dim() == 4, "center_sensitive_pool_grid expects v as [N, K, H, W]");
  const int kh = kernel.height, kw = kernel.width;
  const auto rows = v.size(2) / kh, cols = v.size(3) / kw;
  if (rows < 1 || cols < 1) throw ConfigError("pooling window larger than the embedding");
  const auto n = v.size(0), k = v.size(1);
  auto cropped = v.slice(2, 0, rows * kh).slice(3, 0, cols * kw);
  auto weights = kernel.weights.to(v.options()).view({1, 1, 1, kh, 1, kw});
  auto sums = (cropped.reshape({n, k, rows, kh, cols, kw}) * weights).sum({3, 5});
  sums = sums.reshape({n, k, rows * cols}).transpose(1, 2);
  return normalize_or_basis(sums, 2, "center_sensitive_pool");
}

torch::Tensor center_sensitive_pool_dense(const torch::Tensor& v, const CenterKernel& kernel) {
  TORCH_CHECK(v.dim() == 4, "center_sensitive_pool_dense expects v as [N, K, H, W]");
  const int kh = kernel.height, kw = kernel.width;
  const auto k = v.size(1);
  namespace F = torch::nn::functional;
  auto padded = F::pad(v, F::PadFuncOptions({kw / 2, kw - 1 - kw / 2, kh / 2, kh - 1 - kh / 2}));
  auto weight = kernel.weights.to(v.options()).view({1, 1, kh, kw}).expand({k, 1, kh, kw}).contiguous();
  auto sums = F::conv2d(padded, weight, F::Conv2dFuncOptions().groups(k));
  return normalize_or_basis(sums, 1, "center_sensitive_pool_dense");
}

// ---------------------------------------------------------------------------

void OneshotConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("oneshot.sigma must be positive");
  if (pool_min < 1 || pool_max < pool_min) throw ConfigError("oneshot pooling range must satisfy 1 <= pool_min <= pool_max");
  if (epochs < 0) throw ConfigError("oneshot.epochs must be non-negative");
  if (test_pool < 1) throw ConfigError("oneshot.test_pool must be positive");
  if (!(threshold_ratio > 0.0 && threshold_ratio <= 1.0)) throw ConfigError("oneshot.threshold_ratio must be in (0, 1]");
  if (fractions.empty()) throw ConfigError("oneshot.fractions must not be empty");
  for (double f : fractions)
    if (!(f > 0.0)) throw ConfigError("oneshot.fractions must be positive");
  train.validate();
}

void to_json(nlohmann::json& j, const OneshotConfig& c) {
  j = nlohmann::json{{"sigma", c.sigma},         {"center_sensitive", c.center_sensitive},
                     {"multi_size", c.multi_size}, {"pool_min", c.pool_min},
                     {"pool_max", c.pool_max},     {"epochs", c.epochs},
                     {"test_pool", c.test_pool},   {"threshold_ratio", c.threshold_ratio},
                     {"fractions", c.fractions}};
}

void from_json(const nlohmann::json& j, OneshotConfig& c) {
  c.sigma = j.value("sigma", c.sigma);
  c.center_sensitive = j.value("center_sensitive", c.center_sensitive);
  c.multi_size = j.value("multi_size", c.multi_size);
  c.pool_min = j.value("pool_min", c.pool_min);
  c.pool_max = j.value("pool_max", c.pool_max);
  c.epochs = j.value("epochs", c.epochs);
  c.test_pool = j.value("test_pool", c.test_pool);
  c.threshold_ratio = j.value("threshold_ratio", c.threshold_ratio);
  c.fractions = j.value("fractions", c.fractions);
}

int sample_pool_size(const OneshotConfig& cfg, int height, int width, std::uint64_t seed, std::int64_t iteration) {
  const int hi = std::min({cfg.pool_max, height, width});
  const int lo = std::min(cfg.pool_min, hi);
  Rng rng(derive_seed(seed, "pool", static_cast<std::uint64_t>(iteration)));
  return static_cast<int>(rng.uniform_int(lo, hi));
}

namespace {

CenterKernel make_kernel(const OneshotConfig& cfg, int h, int w) {
  return cfg.center_sensitive ? center_kernel(h, w, cfg.sigma) : uniform_kernel(h, w);
}

}  // namespace

LossTrace train_center_sensitive(PretrainSession& session, const OneshotConfig& cfg) {
  cfg.validate();
  const auto& net_cfg = session.net()->config();
  const auto& tcfg = session.config();
  const ObjectiveWeights w{1.0, 1.0, 0.0, 0.0};
  const std::int64_t steps = static_cast<std::int64_t>(cfg.epochs) * tcfg.iters_per_epoch;
  LossTrace trace;
  trace.reserve(steps);
  const auto fixed = session.grid();
  for (std::int64_t i = 0; i < steps; ++i) {
    CenterKernel kernel;
    if (cfg.multi_size) {
      const int p = sample_pool_size(cfg, net_cfg.height, net_cfg.width, tcfg.seed, session.iteration());
      kernel = make_kernel(cfg, p, p);
    } else {
      kernel = make_kernel(cfg, fixed.patch_height(), fixed.patch_width());
    }
    trace.push_back(session.step(w, [&kernel](const torch::Tensor& v) {
      return center_sensitive_pool_grid(v, kernel);
    }));
  }
  return trace;
}

// ---------------------------------------------------------------------------

torch::Tensor dense_embeddings(EmbedNet& net, const torch::Tensor& images, int pool_size, const OneshotConfig& cfg) {
  if (pool_size < 1 || pool_size > images.size(2) || pool_size > images.size(3))
    throw ConfigError("pooling size " + std::to_string(pool_size) + " exceeds the image size");
  auto v = embed_images(net, images).v;
  torch::NoGradGuard guard;
  return center_sensitive_pool_dense(v, make_kernel(cfg, pool_size, pool_size));
}

Point argmax_point(const torch::Tensor& similarity) {
  auto s = similarity.to(torch::kFloat64).contiguous();
  auto acc = s.accessor<double, 2>();
  Point best{0, 0};
  double best_value = -std::numeric_limits<double>::infinity();
  for (int h = 0; h < s.size(0); ++h)
    for (int w = 0; w < s.size(1); ++w)
      if (acc[h][w] > best_value) {
        best_value = acc[h][w];
        best = {h, w};
      }
  return best;
}

Point refine_peak(const torch::Tensor& similarity, Point argmax, double ratio) {
  auto s = similarity.to(torch::kFloat64).contiguous();
  auto acc = s.accessor<double, 2>();
  const int height = static_cast<int>(s.size(0)), width = static_cast<int>(s.size(1));
  const double threshold = ratio * acc[argmax.h][argmax.w];
  std::vector<char> seen(static_cast<std::size_t>(height) * width, 0);
  std::deque<Point> todo{argmax};
  seen[argmax.h * width + argmax.w] = 1;
  double sum_h = 0.0, sum_w = 0.0;
  std::int64_t count = 0;
  while (!todo.empty()) {
    const Point p = todo.front();
    todo.pop_front();
    sum_h += p.h;
    sum_w += p.w;
    ++count;
    for (int dh = -1; dh <= 1; ++dh)
      for (int dw = -1; dw <= 1; ++dw) {
        const int h = p.h + dh, w = p.w + dw;
        if (h < 0 || w < 0 || h >= height || w >= width || seen[h * width + w]) continue;
        if (!(acc[h][w] > threshold)) continue;
        seen[h * width + w] = 1;
        todo.push_back({h, w});
      }
  }
  return {static_cast<int>(std::floor(sum_h / count + 0.5)), static_cast<int>(std::floor(sum_w / count + 0.5))};
}

Localization localize_dense(const torch::Tensor& support_dense, Point target, const torch::Tensor& query_dense,
                            double threshold_ratio) {
  TORCH_CHECK(support_dense.dim() == 3 && query_dense.dim() == 3, "dense embeddings must be [K, H, W]");
  if (target.h < 0 || target.w < 0 || target.h >= support_dense.size(1) || target.w >= support_dense.size(2))
    throw ConfigError("support point outside the image");
  // cosine in double so the support pixel scores exactly its own maximum
  auto s = support_dense.index({torch::indexing::Slice(), target.h, target.w}).to(torch::kFloat64);
  s = s / s.norm().clamp_min(kDegenerateNorm);
  auto q = query_dense.to(torch::kFloat64);
  q = q / q.norm(2, 0, true).clamp_min(kDegenerateNorm);
  auto sim = torch::einsum("k,khw->hw", {s, q}).clamp(-1.0, 1.0);
  Localization out;
  out.argmax = argmax_point(sim);
  out.point = refine_peak(sim, out.argmax, threshold_ratio);
  out.similarity = sim.to(torch::kFloat32);
  return out;
}

Localization localize(EmbedNet& net, const torch::Tensor& support, Point target, const torch::Tensor& query,
                      int pool_size, const OneshotConfig& cfg) {
  auto dense = dense_embeddings(net, torch::stack({support, query}), pool_size, cfg);
  return localize_dense(dense[0], target, dense[1], cfg.threshold_ratio);
}

AccuracyReport accuracy_at_thresholds(const std::vector<Point>& predictions, const std::vector<Point>& truths,
                                      double pool_size, const std::vector<double>& fractions) {
  if (predictions.empty()) throw std::invalid_argument("accuracy_at_thresholds: empty prediction list");
  if (predictions.size() != truths.size())
    throw std::invalid_argument("accuracy_at_thresholds: predictions and truths differ in length");
  if (fractions.empty()) throw std::invalid_argument("accuracy_at_thresholds: no fractions");
  AccuracyReport r;
  r.fractions = fractions;
  for (double f : fractions) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
      if (distance(predictions[i], truths[i]) < f * pool_size) ++hits;
    r.rates.push_back(static_cast<double>(hits) / predictions.size());
  }
  double sum = 0.0;
  for (double x : r.rates) sum += x;
  r.mean = sum / r.rates.size();
  return r;
}

std::vector<QueryResult> localize_queries(EmbedNet& net, const Sample& support, const Dataset& queries,
                                          const OneshotConfig& cfg, const std::string& raster_dir) {
  if (!support.landmark) throw ConfigError("support image '" + support.id + "' has no landmark");
  const int pool = cfg.test_pool;
  auto support_dense = dense_embeddings(net, support.image.unsqueeze(0), pool, cfg)[0];
  std::vector<QueryResult> rows;
  for (const auto& q : queries) {
    if (!q.landmark) throw ConfigError("query image '" + q.id + "' has no landmark");
    auto query_dense = dense_embeddings(net, q.image.unsqueeze(0), pool, cfg)[0];
    auto loc = localize_dense(support_dense, *support.landmark, query_dense, cfg.threshold_ratio);
    rows.push_back({q.id, loc.point, *q.landmark, distance(loc.point, *q.landmark)});
    if (!raster_dir.empty()) write_raster((fs::path(raster_dir) / (q.id + "_similarity.pfm")).string(), loc.similarity);
  }
  return rows;
}

void write_localization_csv(const std::string& path, const std::vector<QueryResult>& rows) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << "query_id,h_d,w_d,h_t,w_t,distance\n" << std::setprecision(10);
  for (const auto& r : rows)
    out << r.id << ',' << r.predicted.h << ',' << r.predicted.w << ',' << r.truth.h << ',' << r.truth.w << ','
        << r.distance << '\n';
}

void write_accuracy_csv(const std::string& path, const AccuracyReport& report) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << "fraction,rate\n" << std::setprecision(10);
  for (std::size_t i = 0; i < report.rates.size(); ++i) out << report.fractions[i] << ',' << report.rates[i] << '\n';
  out << "mean," << report.mean << '\n';
}

}  // namespace ldl
