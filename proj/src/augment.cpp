#include "ldlearn/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ldl {

namespace F = torch::nn::functional;

void AugmentConfig::validate() const {
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
    throw ConfigError("augment crop scale range must satisfy 0 < min <= max <= 1");
  if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max))
    throw ConfigError("augment crop ratio range must be positive and ordered");
  if (flip_prob < 0.0 || flip_prob > 1.0 || grayscale_prob < 0.0 || grayscale_prob > 1.0)
    throw ConfigError("augment probabilities must lie in [0, 1]");
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0 || brightness >= 1.0 || contrast >= 1.0 ||
      saturation >= 1.0)
    throw ConfigError("color jitter strengths must lie in [0, 1)");
  if (!(mixup_lambda_min > 0.0 && mixup_lambda_min <= mixup_lambda_max && mixup_lambda_max <= 1.0))
    throw ConfigError("mixup lambda range must satisfy 0 < min <= max <= 1");
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"geometric", c.geometric},
                     {"crop_scale_min", c.crop_scale_min},
                     {"crop_scale_max", c.crop_scale_max},
                     {"crop_ratio_min", c.crop_ratio_min},
                     {"crop_ratio_max", c.crop_ratio_max},
                     {"flip_prob", c.flip_prob},
                     {"rotate90", c.rotate90},
                     {"photometric", c.photometric},
                     {"grayscale_prob", c.grayscale_prob},
                     {"brightness", c.brightness},
                     {"contrast", c.contrast},
                     {"saturation", c.saturation},
                     {"mixup_lambda_min", c.mixup_lambda_min},
                     {"mixup_lambda_max", c.mixup_lambda_max}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c.geometric = j.value("geometric", c.geometric);
  c.crop_scale_min = j.value("crop_scale_min", c.crop_scale_min);
  c.crop_scale_max = j.value("crop_scale_max", c.crop_scale_max);
  c.crop_ratio_min = j.value("crop_ratio_min", c.crop_ratio_min);
  c.crop_ratio_max = j.value("crop_ratio_max", c.crop_ratio_max);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.rotate90 = j.value("rotate90", c.rotate90);
  c.photometric = j.value("photometric", c.photometric);
  c.grayscale_prob = j.value("grayscale_prob", c.grayscale_prob);
  c.brightness = j.value("brightness", c.brightness);
  c.contrast = j.value("contrast", c.contrast);
  c.saturation = j.value("saturation", c.saturation);
  c.mixup_lambda_min = j.value("mixup_lambda_min", c.mixup_lambda_min);
  c.mixup_lambda_max = j.value("mixup_lambda_max", c.mixup_lambda_max);
}

// ---------------------------------------------------------------------------

torch::Tensor resize_bilinear(const torch::Tensor& image, int out_h, int out_w) {
  if (image.size(1) == out_h && image.size(2) == out_w) return image.clone();
  return F::interpolate(image.unsqueeze(0), F::InterpolateFuncOptions()
                                                .size(std::vector<std::int64_t>{out_h, out_w})
                                                .mode(torch::kBilinear)
                                                .align_corners(false))
      .squeeze(0);
}

std::optional<Box> fov_bbox(const torch::Tensor& image, double threshold) {
  auto bright = std::get<0>(image.max(0)) > threshold;  // [H, W]
  auto rows = torch::nonzero(bright.any(1)).flatten();
  auto cols = torch::nonzero(bright.any(0)).flatten();
  if (rows.numel() == 0) return std::nullopt;
  const int top = rows.min().item<int>(), bottom = rows.max().item<int>();
  const int left = cols.min().item<int>(), right = cols.max().item<int>();
  return Box{top, left, bottom - top + 1, right - left + 1};
}

torch::Tensor fov_crop(const torch::Tensor& image, int out_h, int out_w, double threshold) {
  auto box = fov_bbox(image, threshold);
  if (!box) {
    warn("fov_crop: no pixel above threshold, returning the image unchanged");
    return image;
  }
  auto cropped = image.slice(1, box->top, box->top + box->height).slice(2, box->left, box->left + box->width);
  return resize_bilinear(cropped, out_h, out_w);
}

// ---------------------------------------------------------------------------

torch::Tensor Geometry::apply(const torch::Tensor& image) const {
  auto out = image.slice(-2, crop.top, crop.top + crop.height).slice(-1, crop.left, crop.left + crop.width);
  out = resize_bilinear(out, src_h, src_w);
  if (flip) out = torch::flip(out, {-1});
  if (rot90 % 4 != 0) out = torch::rot90(out, rot90, {-2, -1});
  return out.contiguous();
}

std::array<double, 4> Geometry::source_footprint(const PatchGrid::Box& box) const {
  // Push a map of source pixel coordinates through the transform: bilinear
  // resampling of a linear function is exact, so each output pixel carries the
  // source position it samples.
  auto hh = torch::arange(src_h, torch::kFloat64).view({src_h, 1}).expand({src_h, src_w});
  auto ww = torch::arange(src_w, torch::kFloat64).view({1, src_w}).expand({src_h, src_w});
  auto coords = apply(torch::stack({hh, ww}));
  auto region = coords.slice(1, box.h_begin, box.h_end).slice(2, box.w_begin, box.w_end);
  return {region[0].min().item<double>(), region[1].min().item<double>(), region[0].max().item<double>(),
          region[1].max().item<double>()};
}

Geometry identity_geometry(int h, int w) { return Geometry{h, w, Box{0, 0, h, w}, false, 0}; }

Geometry sample_geometry(int h, int w, const AugmentConfig& cfg, Rng& rng) {
  Geometry g = identity_geometry(h, w);
  const double area = static_cast<double>(h) * w;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
    const double ratio =
        std::exp(rng.uniform(std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max)));
    const int cw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int ch = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (cw > 0 && ch > 0 && cw <= w && ch <= h && ch * cw >= cfg.crop_scale_min * area &&
        ch * cw <= cfg.crop_scale_max * area) {
      g.crop = Box{rng.uniform_int(0, h - ch), rng.uniform_int(0, w - cw), ch, cw};
      break;
    }
  }
  g.flip = rng.bernoulli(cfg.flip_prob);
  if (cfg.rotate90) g.rot90 = h == w ? rng.uniform_int(0, 3) : 2 * rng.uniform_int(0, 1);
  return g;
}

static torch::Tensor luminance(const torch::Tensor& image) {
  if (image.size(0) != 3) return image.mean(0, true);
  return (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]).unsqueeze(0);
}

torch::Tensor Photometric::apply(const torch::Tensor& image) const {
  auto out = (image * brightness).clamp(0.0, 1.0);
  auto mean = luminance(out).mean();
  out = (mean + (out - mean) * contrast).clamp(0.0, 1.0);
  auto gray = luminance(out);
  out = (gray + (out - gray) * saturation).clamp(0.0, 1.0);
  if (grayscale) out = luminance(out).expand_as(out).contiguous();
  return out;
}

Photometric sample_photometric(const AugmentConfig& cfg, Rng& rng) {
  Photometric p;
  if (!cfg.photometric) return p;
  p.brightness = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  p.contrast = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
  p.saturation = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
  p.grayscale = rng.bernoulli(cfg.grayscale_prob);
  return p;
}

ViewPair make_view_pair(const torch::Tensor& x, const AugmentConfig& cfg, Rng& rng) {
  const int h = static_cast<int>(x.size(-2)), w = static_cast<int>(x.size(-1));
  const Geometry g = cfg.geometric ? sample_geometry(h, w, cfg, rng) : identity_geometry(h, w);
  auto base = g.apply(x);
  const auto p1 = sample_photometric(cfg, rng);
  const auto p2 = sample_photometric(cfg, rng);
  return {p1.apply(base), p2.apply(base), g};
}

MixupSample blend(const torch::Tensor& x1, const torch::Tensor& x2, double lambda, int parent1, int parent2) {
  TORCH_CHECK(x1.sizes() == x2.sizes(), "mixup parents must share a shape");
  return {x1 * lambda + x2 * (1.0 - lambda), lambda, parent1, parent2};
}

MixupSample make_mixup(const torch::Tensor& x1, const torch::Tensor& x2, int parent1, int parent2,
                       const AugmentConfig& cfg, Rng& rng) {
  if (parent1 == parent2) throw std::invalid_argument("mixup parents must be distinct images");
  return blend(x1, x2, rng.uniform(cfg.mixup_lambda_min, cfg.mixup_lambda_max), parent1, parent2);
}

// ---------------------------------------------------------------------------

TtaTransform tta_transform(int index, const AugmentConfig& cfg, std::uint64_t seed) {
  TtaTransform t;
  const int d = index % 8;
  t.flip = d >= 4;
  t.rot90 = d % 4;
  if (index >= 8 && cfg.photometric) {
    Rng rng(derive_seed(seed, "tta", static_cast<std::uint64_t>(index)));
    t.photometric = sample_photometric(cfg, rng);
  }
  return t;
}

torch::Tensor tta_forward(const torch::Tensor& image, const TtaTransform& t) {
  auto out = t.photometric ? t.photometric->apply(image) : image;
  if (t.flip) out = torch::flip(out, {-1});
  if (t.rot90 != 0) out = torch::rot90(out, t.rot90, {-2, -1});
  return out.contiguous();
}

torch::Tensor tta_inverse(const torch::Tensor& mask, const TtaTransform& t) {
  auto out = mask;
  if (t.rot90 != 0) out = torch::rot90(out, -t.rot90, {-2, -1});
  if (t.flip) out = torch::flip(out, {-1});
  return out.contiguous();
}

// ---------------------------------------------------------------------------

TrainingBatch make_batch(const std::vector<torch::Tensor>& images, int groups, const AugmentConfig& cfg,
                         std::uint64_t seed, std::int64_t batch_id) {
  if (groups < 2) throw ConfigError("a batch needs at least two groups so mixup parents are distinct");
  if (static_cast<int>(images.size()) < groups)
    throw ConfigError("dataset has fewer images (" + std::to_string(images.size()) + ") than batch groups (" +
                      std::to_string(groups) + ")");
  Rng rng(derive_seed(seed, "batch", static_cast<std::uint64_t>(batch_id)));
  std::vector<int> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  for (int g = 0; g < groups; ++g) std::swap(order[g], order[rng.uniform_int(g, static_cast<int>(order.size()) - 1)]);

  TrainingBatch batch;
  std::vector<torch::Tensor> first, second, mixed;
  std::vector<double> lambdas;
  for (int g = 0; g < groups; ++g) {
    auto pair = make_view_pair(images[order[g]], cfg, rng);
    first.push_back(pair.x);
    second.push_back(pair.x_hat);
    batch.sources.push_back(order[g]);
  }
  for (int g = 0; g < groups; ++g) {
    const int partner = (g + 1) % groups;
    auto mix = make_mixup(first[g], first[partner], g, partner, cfg, rng);
    mixed.push_back(mix.x);
    lambdas.push_back(mix.lambda);
    batch.parents.emplace_back(g, partner);
  }
  std::vector<torch::Tensor> all;
  all.insert(all.end(), first.begin(), first.end());
  all.insert(all.end(), second.begin(), second.end());
  all.insert(all.end(), mixed.begin(), mixed.end());
  batch.images = torch::stack(all);
  batch.lambdas = torch::tensor(lambdas, torch::kFloat64);
  return batch;
}

BatchProducer::BatchProducer(std::vector<torch::Tensor> images, int groups, AugmentConfig cfg, std::uint64_t seed,
                             int workers)
    : images_(std::move(images)), groups_(groups), cfg_(cfg), seed_(seed), workers_(std::max(0, workers)) {}

TrainingBatch BatchProducer::get(std::int64_t batch_id) {
  if (workers_ == 0) return make_batch(images_, groups_, cfg_, seed_, batch_id);
  std::shared_future<TrainingBatch> ready;
  {
    std::lock_guard lock(mutex_);
    for (std::int64_t id = batch_id; id < batch_id + workers_; ++id) {
      if (pending_.count(id)) continue;
      pending_[id] = std::async(std::launch::async, [this, id] {
                       return make_batch(images_, groups_, cfg_, seed_, id);
                     }).share();
    }
    ready = pending_.at(batch_id);
    pending_.erase(batch_id);
  }
  return ready.get();
}

// ---------------------------------------------------------------------------

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "curves") return SynthKind::Curves;
  if (s == "disc+curves" || s == "disc_curves") return SynthKind::DiscCurves;
  throw ConfigError("unknown synthetic structure type '" + s + "' (expected curves or disc+curves)");
}

std::string to_string(SynthKind k) { return k == SynthKind::Curves ? "curves" : "disc+curves"; }

namespace {

struct Canvas {
  int h, w;
  std::vector<double> rgb;  // planar, 3 * h * w
  std::vector<std::uint8_t> mask;
  int mask_count = 0;

  Canvas(int h_, int w_) : h(h_), w(w_), rgb(3 * h_ * w_, 0.0), mask(h_ * w_, 0) {}
  double& at(int c, int y, int x) { return rgb[(c * h + y) * w + x]; }
};

void paint_background(Canvas& cv, Rng& rng) {
  // per-image exposure and tint, as between different cameras
  const double gain = rng.uniform(0.6, 1.15);
  const double base[3] = {gain * (0.72 + rng.uniform(-0.12, 0.12)), gain * (0.38 + rng.uniform(-0.12, 0.12)),
                          gain * (0.22 + rng.uniform(-0.1, 0.1))};
  struct Wave {
    double fy, fx, phase, amp;
  } waves[3];
  for (auto& wv : waves) {
    const double freq = rng.uniform(0.05, 0.25), angle = rng.uniform(0.0, 2.0 * M_PI);
    wv = {freq * std::sin(angle), freq * std::cos(angle), rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.02, 0.06)};
  }
  // uneven illumination, darker away from a random bright spot
  const double ly = rng.uniform(0.0, cv.h - 1.0), lx = rng.uniform(0.0, cv.w - 1.0);
  const double falloff = rng.uniform(0.25, 0.45) / (cv.h * cv.h + cv.w * cv.w);
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x) {
      double tex = 0.0;
      for (const auto& wv : waves) tex += wv.amp * std::sin(wv.fy * y + wv.fx * x + wv.phase);
      const double light = 1.0 - falloff * ((y - ly) * (y - ly) + (x - lx) * (x - lx));
      const double noise = 0.03 * rng.normal();
      for (int c = 0; c < 3; ++c) cv.at(c, y, x) = base[c] * light * (1.0 + tex) + noise;
    }
  // a few dark blobs that are not part of the structure
  const int blobs = rng.uniform_int(0, 3);
  for (int b = 0; b < blobs; ++b) {
    const double cy = rng.uniform(0.0, cv.h - 1.0), cx = rng.uniform(0.0, cv.w - 1.0);
    const double radius = rng.uniform(1.5, 3.5), strength = rng.uniform(0.25, 0.45);
    for (int y = 0; y < cv.h; ++y)
      for (int x = 0; x < cv.w; ++x) {
        const double a = strength * std::clamp(radius + 0.5 - std::hypot(y - cy, x - cx), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) cv.at(c, y, x) *= 1.0 - a;
      }
  }
}

void paint_disc(Canvas& cv, double cy, double cx, double radius) {
  const double color[3] = {0.97, 0.88, 0.6};
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x) {
      const double d = std::hypot(y - cy, x - cx);
      const double alpha = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      if (alpha <= 0.0) continue;
      for (int c = 0; c < 3; ++c) cv.at(c, y, x) = (1.0 - alpha) * cv.at(c, y, x) + alpha * color[c];
    }
}

/// Random-walk curves stamped into the mask (and the image when `paint`) until
/// the covered fraction reaches a target drawn inside [min_fraction, max_fraction].
void draw_curves(Canvas& cv, Rng& rng, double min_fraction, double max_fraction, bool paint,
                 std::optional<std::array<double, 2>> anchor) {
  const int total = cv.h * cv.w;
  const int cap = static_cast<int>(std::floor(max_fraction * total));
  const double lo = min_fraction, hi = std::max(min_fraction, max_fraction - 0.02);
  const int target = static_cast<int>(std::ceil(rng.uniform(lo, hi) * total));
  const double vessel[3] = {0.42 + rng.uniform(-0.05, 0.05), 0.13 + rng.uniform(-0.03, 0.03),
                            0.09 + rng.uniform(-0.02, 0.02)};
  const double contrast = rng.uniform(0.3, 0.7);
  auto stamp = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= cv.h || x >= cv.w || cv.mask_count >= cap) return;
    auto& m = cv.mask[y * cv.w + x];
    if (!m) {
      m = 1;
      ++cv.mask_count;
    }
    if (paint)
      for (int c = 0; c < 3; ++c) cv.at(c, y, x) = (1.0 - contrast) * cv.at(c, y, x) + contrast * vessel[c];
  };
  for (int attempt = 0; attempt < 200 && cv.mask_count < target; ++attempt) {
    double y, x;
    if (anchor && rng.bernoulli(0.5)) {
      y = (*anchor)[0] + rng.uniform(-3.0, 3.0);
      x = (*anchor)[1] + rng.uniform(-3.0, 3.0);
    } else {
      y = rng.uniform(0.0, cv.h - 1.0);
      x = rng.uniform(0.0, cv.w - 1.0);
    }
    double heading = rng.uniform(0.0, 2.0 * M_PI);
    const int length = rng.uniform_int(30, 90);
    const bool thick = rng.bernoulli(0.5);
    for (int step = 0; step < length && cv.mask_count < target; ++step) {
      const int iy = static_cast<int>(std::floor(y)), ix = static_cast<int>(std::floor(x));
      if (iy < 0 || ix < 0 || iy >= cv.h || ix >= cv.w) break;
      stamp(iy, ix);
      if (thick) {
        stamp(iy + 1, ix);
        stamp(iy, ix + 1);
        stamp(iy + 1, ix + 1);
      }
      heading += 0.2 * rng.normal();
      y += std::sin(heading);
      x += std::cos(heading);
    }
  }
}

torch::Tensor quantized_image(const Canvas& cv) {
  auto t = torch::empty({3, cv.h, cv.w}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < cv.rgb.size(); ++i)
    p[i] = static_cast<float>(std::lround(std::clamp(cv.rgb[i], 0.0, 1.0) * 255.0)) / 255.0f;
  return t;
}

torch::Tensor mask_tensor(const Canvas& cv) {
  auto t = torch::empty({1, cv.h, cv.w}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < cv.mask.size(); ++i) p[i] = cv.mask[i] ? 1.0f : 0.0f;
  return t;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.count < 1 || spec.height < 8 || spec.width < 8) throw ConfigError("synthetic dataset spec too small");
  if (!(spec.min_fraction > 0.0 && spec.min_fraction < spec.max_fraction && spec.max_fraction < 1.0))
    throw ConfigError("synthetic curve fraction band must satisfy 0 < min < max < 1");
  Dataset out;
  out.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(spec.seed, "synth", static_cast<std::uint64_t>(i)));
    Canvas cv(spec.height, spec.width);
    paint_background(cv, rng);
    Sample s;
    char id[32];
    std::snprintf(id, sizeof id, "img_%04d", i);
    s.id = id;
    std::optional<std::array<double, 2>> anchor;
    if (spec.kind == SynthKind::DiscCurves) {
      const int radius = rng.uniform_int(spec.disc_radius_min, spec.disc_radius_max);
      const int margin = radius + 4;
      const int cy = rng.uniform_int(margin, spec.height - 1 - margin);
      const int cx = rng.uniform_int(margin, spec.width - 1 - margin);
      paint_disc(cv, cy, cx, radius);
      s.landmark = Point{cy, cx};
      anchor = std::array<double, 2>{static_cast<double>(cy), static_cast<double>(cx)};
    }
    draw_curves(cv, rng, spec.min_fraction, spec.max_fraction, true, anchor);
    s.image = quantized_image(cv);
    s.mask = mask_tensor(cv);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<torch::Tensor> synth_reference_masks(int count, int height, int width, std::uint64_t seed) {
  std::vector<torch::Tensor> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "reference", static_cast<std::uint64_t>(i)));
    Canvas cv(height, width);
    draw_curves(cv, rng, 0.03, 0.12, false, std::nullopt);
    out.push_back(mask_tensor(cv));
  }
  return out;
}

std::vector<torch::Tensor> images_of(const Dataset& data) {
  std::vector<torch::Tensor> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(s.image);
  return out;
}

}  // namespace ldl
