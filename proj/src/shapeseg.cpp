#include "ldlearn/shapeseg.hpp"

#include "ldlearn/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace ldl {

void ShapeSegConfig::validate() const {
  if (target_channel < 0) throw ConfigError("shapeseg.target_channel must be non-negative");
  if (epochs < 0 || refine_epochs < 0) throw ConfigError("shapeseg epoch counts must be non-negative");
  if (!(d_lr > 0.0) || !(refine_lr > 0.0)) throw ConfigError("shapeseg learning rates must be positive");
  if (adv_weight < 0.0) throw ConfigError("shapeseg.adv_weight must be non-negative");
  if (tta_count < 1) throw ConfigError("shapeseg.tta_count must be at least 1");
  if (refine_batch < 1) throw ConfigError("shapeseg.refine_batch must be positive");
  if (disc.conv_channels.empty() || disc.fc_sizes.empty() || disc.fc_sizes.back() != 1)
    throw ConfigError("discriminator needs conv layers and a final fully-connected layer of size 1");
  train.validate();
}

WeightMode parse_weight_mode(const std::string& s) {
  if (s == "uncertainty") return WeightMode::Uncertainty;
  if (s == "certainty") return WeightMode::Certainty;
  if (s == "uniform") return WeightMode::Uniform;
  throw ConfigError("unknown weight mode '" + s + "' (expected uncertainty, certainty or uniform)");
}

std::string to_string(WeightMode m) {
  switch (m) {
    case WeightMode::Uncertainty: return "uncertainty";
    case WeightMode::Certainty: return "certainty";
    case WeightMode::Uniform: return "uniform";
  }
  return "?";
}

void to_json(nlohmann::json& j, const ShapeSegConfig& c) {
  j = nlohmann::json{{"target_channel", c.target_channel},
                     {"epochs", c.epochs},
                     {"d_lr", c.d_lr},
                     {"adv_weight", c.adv_weight},
                     {"augment_refs", c.augment_refs},
                     {"discriminator", c.disc},
                     {"tta_count", c.tta_count},
                     {"weight_mode", to_string(c.weight_mode)},
                     {"refine_epochs", c.refine_epochs},
                     {"refine_lr", c.refine_lr},
                     {"refine_batch", c.refine_batch}};
}

void from_json(const nlohmann::json& j, ShapeSegConfig& c) {
  c.target_channel = j.value("target_channel", c.target_channel);
  c.epochs = j.value("epochs", c.epochs);
  c.d_lr = j.value("d_lr", c.d_lr);
  c.adv_weight = j.value("adv_weight", c.adv_weight);
  c.augment_refs = j.value("augment_refs", c.augment_refs);
  if (j.contains("discriminator")) c.disc = j.at("discriminator").get<DiscriminatorConfig>();
  c.tta_count = j.value("tta_count", c.tta_count);
  if (j.contains("weight_mode")) c.weight_mode = parse_weight_mode(j.at("weight_mode").get<std::string>());
  c.refine_epochs = j.value("refine_epochs", c.refine_epochs);
  c.refine_lr = j.value("refine_lr", c.refine_lr);
  c.refine_batch = j.value("refine_batch", c.refine_batch);
}

// ---------------------------------------------------------------------------

ReferenceMaskSet::ReferenceMaskSet(std::vector<torch::Tensor> m) : masks(std::move(m)) {
  if (masks.empty()) throw ConfigError("reference mask set is empty");
  for (auto& x : masks) {
    if (x.dim() == 2) x = x.unsqueeze(0);
    if (x.dim() != 3 || x.size(0) != 1) throw ConfigError("reference masks must be single-channel");
    if (!torch::logical_or(x == 0, x == 1).all().item<bool>()) throw ConfigError("reference masks must be binary");
    x = x.to(torch::kFloat32);
  }
}

torch::Tensor ReferenceMaskSet::sample(int n, int height, int width, bool augment, Rng& rng) const {
  AugmentConfig geo;  // geometric defaults only
  std::vector<torch::Tensor> out;
  for (int i = 0; i < n; ++i) {
    auto m = masks[rng.uniform_int(0, static_cast<int>(masks.size()) - 1)];
    if (augment) m = sample_geometry(static_cast<int>(m.size(1)), static_cast<int>(m.size(2)), geo, rng).apply(m);
    if (m.size(1) != height || m.size(2) != width) m = resize_bilinear(m, height, width);
    out.push_back((m > 0.5).to(torch::kFloat32));
  }
  return torch::stack(out);
}

std::vector<double> density_histogram(const std::vector<torch::Tensor>& masks, int bins) {
  std::vector<double> h(bins, 0.0);
  if (masks.empty()) return h;
  for (const auto& m : masks) {
    const double f = (m > 0.5).to(torch::kFloat64).mean().item<double>();
    h[std::min(bins - 1, static_cast<int>(f * bins))] += 1.0;
  }
  for (auto& x : h) x /= static_cast<double>(masks.size());
  return h;
}

ShapeGuidedResult train_shape_guided(PretrainSession& session, Discriminator& disc, const ReferenceMaskSet& refs,
                                     const ShapeSegConfig& cfg) {
  cfg.validate();
  const auto& net_cfg = session.net()->config();
  if (cfg.target_channel >= net_cfg.num_clusters)
    throw ConfigError("shapeseg.target_channel exceeds the number of clusters");
  if (std::min(net_cfg.height, net_cfg.width) < disc->config().min_input_size())
    throw ConfigError("discriminator has too many pooling layers for " + std::to_string(net_cfg.height) + "x" +
                      std::to_string(net_cfg.width) + " masks");
  torch::optim::Adam d_opt(disc->parameters(), torch::optim::AdamOptions(cfg.d_lr));
  const std::uint64_t seed = session.config().seed;
  const int iters = session.config().iters_per_epoch;
  const int m = cfg.target_channel;

  ShapeGuidedResult res;
  std::vector<torch::Tensor> ref_masks, generated;
  double acc_sum = 0.0;
  bool all_saturated = true;
  int d_steps = 0;

  ExtraTerm extra = [&](const EmbedNetOutput& out, const TrainingBatch& batch, LossTerms& terms) {
    const int n = 2 * batch.groups();
    auto r_m = out.r.slice(0, 0, n).select(1, m).unsqueeze(1);

    Rng rng(derive_seed(seed, "refs", static_cast<std::uint64_t>(session.iteration())));
    auto real = refs.sample(n, net_cfg.height, net_cfg.width, cfg.augment_refs, rng);
    auto fake = r_m.detach();
    auto real_logits = disc->logits(real);
    auto fake_logits = disc->logits(fake);
    auto l_d = F::binary_cross_entropy_with_logits(real_logits, torch::ones_like(real_logits)) +
               F::binary_cross_entropy_with_logits(fake_logits, torch::zeros_like(fake_logits));
    d_opt.zero_grad();
    l_d.backward();
    d_opt.step();
    terms.disc = l_d.item<double>();
    const double acc =
        ((real_logits > 0).sum() + (fake_logits < 0).sum()).item<double>() / static_cast<double>(2 * n);
    acc_sum += acc;
    all_saturated = all_saturated && acc == 1.0;
    ++d_steps;
    for (int i = 0; i < n; ++i) {
      ref_masks.push_back(real[i]);
      generated.push_back(fake[i]);
    }

    if (cfg.adv_weight == 0.0) {
      torch::NoGradGuard guard;
      auto logits = disc->logits(r_m);
      terms.adv = F::binary_cross_entropy_with_logits(logits, torch::ones_like(logits)).item<double>();
      return torch::zeros({}, out.r.options());
    }
    auto logits = disc->logits(r_m);
    auto l_adv = F::binary_cross_entropy_with_logits(logits, torch::ones_like(logits));
    terms.adv = l_adv.item<double>();
    return cfg.adv_weight * l_adv;
  };

  const auto weights = session.region_weights();
  for (int e = 0; e < cfg.epochs; ++e) {
    for (int i = 0; i < iters; ++i) res.trace.push_back(session.step(weights, [g = session.grid()](const torch::Tensor& v) {
      return patch_pool(v, g);
    }, extra));
    AdversarialEpoch ep;
    ep.epoch = session.epoch() - 1;
    ep.disc_accuracy = acc_sum / std::max(1, d_steps);
    ep.saturated = d_steps > 0 && all_saturated;
    // smoothed so an empty generated bin does not make the diagnostic infinite
    auto p = density_histogram(ref_masks), q = density_histogram(generated);
    for (auto& x : q) x = (x + 1e-3) / (1.0 + 1e-3 * q.size());
    ep.kl = kl_divergence(p, q);
    if (ep.saturated)
      warn("discriminator accuracy stayed at 1.0 for all of epoch " + std::to_string(ep.epoch) +
           " (possible mode collapse)");
    std::ostringstream msg;
    msg << "shapeseg epoch " << ep.epoch << ": D accuracy " << ep.disc_accuracy << ", density KL " << ep.kl;
    log(LogLevel::Debug, msg.str());
    res.epochs.push_back(ep);
    ref_masks.clear();
    generated.clear();
    acc_sum = 0.0;
    all_saturated = true;
    d_steps = 0;
  }
  return res;
}

// ---------------------------------------------------------------------------

torch::Tensor cluster_refine_all(const torch::Tensor& v, const torch::Tensor& r, Temperature tau) {
  TORCH_CHECK(v.dim() == 3 && r.dim() == 3 && v.size(1) == r.size(1) && v.size(2) == r.size(2),
              "cluster_refine expects v [K, H, W] and r [C, H, W]");
  auto t = region_prototypes(v.unsqueeze(0), r.unsqueeze(0)).t[0];  // [C, K], unit rows
  auto v_unit = v / v.norm(2, 0, true).clamp_min(kDegenerateNorm);
  auto cos = torch::einsum("ck,khw->chw", {t, v_unit});
  return torch::softmax(cos / tau.value(), 0);
}

torch::Tensor cluster_refine(const torch::Tensor& v, const torch::Tensor& r, int m, Temperature tau) {
  if (m < 0 || m >= r.size(0)) throw ConfigError("cluster index out of range");
  return cluster_refine_all(v, r, tau)[m];
}

UncertaintyBundle bundle_from_predictions(const torch::Tensor& preds) {
  TORCH_CHECK(preds.dim() == 3 && preds.size(0) >= 1, "expected predictions [E, H, W]");
  auto p = preds.to(torch::kFloat64);
  auto q = 1.0 - p;
  // 0 log 0 = 0 and 1 log 1 = 0 exactly; the floor only guards the log argument
  auto h = -(p * torch::log(p.clamp_min(kProbClamp)) + q * torch::log(q.clamp_min(kProbClamp)));
  UncertaintyBundle b;
  b.mean = p.mean(0);
  b.label = (b.mean > 0.5).to(torch::kFloat32);
  b.uncertainty = h.mean(0).clamp(0.0, std::log(2.0));
  b.ensemble = static_cast<int>(preds.size(0));
  return b;
}

UncertaintyBundle pseudo_label_uncertainty(EmbedNet& net, const torch::Tensor& image, int m, int ensemble,
                                           const AugmentConfig& augment, Temperature tau, std::uint64_t seed) {
  if (ensemble < 1) throw ConfigError("ensemble size must be at least 1");
  std::vector<TtaTransform> transforms;
  std::vector<torch::Tensor> inputs;
  for (int e = 0; e < ensemble; ++e) {
    transforms.push_back(tta_transform(e, augment, seed));
    inputs.push_back(tta_forward(image, transforms.back()));
  }
  auto out = embed_images(net, torch::stack(inputs));
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> preds;
  for (int e = 0; e < ensemble; ++e) preds.push_back(tta_inverse(cluster_refine(out.v[e], out.r[e], m, tau), transforms[e]));
  return bundle_from_predictions(torch::stack(preds));
}

LossTrace retrain_refiner(SegNet& net, const std::vector<torch::Tensor>& images,
                          const std::vector<UncertaintyBundle>& bundles, const ShapeSegConfig& cfg) {
  if (images.empty() || images.size() != bundles.size())
    throw ConfigError("refiner training needs one bundle per image");
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.refine_lr));
  std::vector<torch::Tensor> labels, weights;
  for (const auto& b : bundles) {
    labels.push_back(b.label.to(torch::kFloat32).unsqueeze(0));
    weights.push_back(uncertainty_weights(b.uncertainty, cfg.weight_mode).to(torch::kFloat32).unsqueeze(0));
  }
  const int n = static_cast<int>(images.size());
  LossTrace trace;
  std::int64_t iteration = 0;
  net->train();
  for (int epoch = 0; epoch < cfg.refine_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.train.seed, "refine", static_cast<std::uint64_t>(epoch)));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    for (int start = 0; start < n; start += cfg.refine_batch) {
      std::vector<torch::Tensor> xb, yb, wb;
      for (int i = start; i < std::min(n, start + cfg.refine_batch); ++i) {
        TtaTransform t{rng.bernoulli(0.5), rng.uniform_int(0, 3), std::nullopt};
        if (images[order[i]].size(1) != images[order[i]].size(2)) t.rot90 = 2 * (t.rot90 % 2);
        xb.push_back(tta_forward(images[order[i]], t));
        yb.push_back(tta_forward(labels[order[i]], t));
        wb.push_back(tta_forward(weights[order[i]], t));
      }
      auto pred = net->forward(torch::stack(xb));
      auto loss = weighted_bce(pred, torch::stack(yb), torch::stack(wb));
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw RuntimeFailure("non-finite refiner loss at iteration " + std::to_string(iteration));
      opt.zero_grad();
      loss.backward();
      opt.step();
      TraceRow row{iteration++, epoch, {}};
      row.terms.total = value;
      trace.push_back(row);
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------

PredictMode parse_predict_mode(const std::string& s) {
  if (s == "raw") return PredictMode::Raw;
  if (s == "cluster") return PredictMode::Cluster;
  if (s == "refined") return PredictMode::Refined;
  throw ConfigError("unknown prediction mode '" + s + "' (expected raw, cluster or refined)");
}

std::string to_string(PredictMode m) {
  switch (m) {
    case PredictMode::Raw: return "raw";
    case PredictMode::Cluster: return "cluster";
    case PredictMode::Refined: return "refined";
  }
  return "?";
}

Prediction predict_embed(EmbedNet& net, const torch::Tensor& image, PredictMode mode, int target_channel,
                         Temperature tau) {
  if (mode == PredictMode::Refined) throw ConfigError("refined prediction needs a segmentation checkpoint");
  if (target_channel < 0 || target_channel >= net->config().num_clusters)
    throw ConfigError("target channel out of range");
  auto out = embed_images(net, image.unsqueeze(0));
  torch::NoGradGuard guard;
  auto prob = mode == PredictMode::Raw ? out.r[0][target_channel] : cluster_refine(out.v[0], out.r[0], target_channel, tau);
  prob = prob.to(torch::kFloat32).contiguous();
  return {prob, (prob > 0.5).to(torch::kFloat32)};
}

Prediction predict_seg(SegNet& net, const torch::Tensor& image) {
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  auto prob = net->forward(image.unsqueeze(0))[0][0].contiguous();
  net->train(was_training);
  return {prob, (prob > 0.5).to(torch::kFloat32)};
}

std::vector<Prediction> predict_segmentation(const std::string& checkpoint, const std::vector<torch::Tensor>& images,
                                             PredictMode mode, int target_channel, double tau) {
  const auto meta = read_checkpoint_meta(checkpoint);
  const bool wants_seg = mode == PredictMode::Refined;
  if (wants_seg != (meta.kind == "seg"))
    throw ConfigError("prediction mode '" + to_string(mode) + "' does not match the '" + meta.kind +
                      "' checkpoint " + checkpoint);
  std::vector<Prediction> out;
  if (wants_seg) {
    auto net = load_seg_net(checkpoint);
    for (const auto& x : images) out.push_back(predict_seg(net, x));
  } else {
    auto net = load_embed_net(checkpoint);
    Temperature t(tau);
    for (const auto& x : images) out.push_back(predict_embed(net, x, mode, target_channel, t));
  }
  return out;
}

// ---------------------------------------------------------------------------

void save_bundles(const std::string& dir, const std::vector<std::string>& ids,
                  const std::vector<UncertaintyBundle>& bundles) {
  if (ids.size() != bundles.size()) throw std::invalid_argument("save_bundles: one id per bundle");
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "bundles.txt");
  if (!manifest) throw RuntimeFailure("cannot write bundle manifest in " + dir);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto label = ids[i] + "_label.png", unc = ids[i] + "_uncertainty.pfm";
    write_mask((fs::path(dir) / label).string(), bundles[i].label);
    write_raster((fs::path(dir) / unc).string(), bundles[i].uncertainty);
    manifest << ids[i] << ' ' << label << ' ' << unc << '\n';
  }
}

std::vector<UncertaintyBundle> load_bundles(const std::string& dir, std::vector<std::string>* ids) {
  std::ifstream in(fs::path(dir) / "bundles.txt");
  if (!in) throw ConfigError("bundle manifest not found in " + dir);
  std::vector<UncertaintyBundle> out;
  std::string id, label, unc;
  while (in >> id >> label >> unc) {
    UncertaintyBundle b;
    b.label = read_mask((fs::path(dir) / label).string())[0];
    b.uncertainty = read_raster((fs::path(dir) / unc).string()).to(torch::kFloat64);
    out.push_back(std::move(b));
    if (ids) ids->push_back(id);
  }
  return out;
}

}  // namespace ldl
