#include "ldlearn/transfer.hpp"

#include "ldlearn/losses.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace ldl {

void FinetuneConfig::validate() const {
  if (decoder_only_epochs < 1 || full_epochs < 1) throw ConfigError("finetune epoch counts must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("finetune.lr must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("finetune.val_fraction must be in [0, 1)");
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be positive");
  for (double f : label_fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("finetune.label_fractions must lie in (0, 1]");
}

void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"decoder_only_epochs", c.decoder_only_epochs},
                     {"full_epochs", c.full_epochs},
                     {"lr", c.lr},
                     {"val_fraction", c.val_fraction},
                     {"label_fractions", c.label_fractions},
                     {"batch_size", c.batch_size},
                     {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  c.decoder_only_epochs = j.value("decoder_only_epochs", c.decoder_only_epochs);
  c.full_epochs = j.value("full_epochs", c.full_epochs);
  c.lr = j.value("lr", c.lr);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.label_fractions = j.value("label_fractions", c.label_fractions);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.augment = j.value("augment", c.augment);
}

namespace {

std::vector<int> permutation(int n, std::uint64_t seed) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
  return order;
}

// Named parameters and buffers, cloned, for best-model bookkeeping.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
  return out;
}

void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard guard;
  std::size_t i = 0;
  for (auto& p : m.parameters()) p.copy_(state[i++]);
  for (auto& b : m.buffers()) b.copy_(state[i++]);
}

torch::Tensor predict_probs(SegNet& net, const torch::Tensor& images, int batch = 16) {
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  std::vector<torch::Tensor> out;
  for (std::int64_t i = 0; i < images.size(0); i += batch)
    out.push_back(net->forward(images.slice(0, i, std::min<std::int64_t>(i + batch, images.size(0)))));
  net->train(was_training);
  return torch::cat(out);
}

void set_encoder_trainable(SegNet& net, bool trainable) {
  for (auto& p : net->encoder->parameters()) p.set_requires_grad(trainable);
}

}  // namespace

Split split_train_val(int n, double val_fraction, std::uint64_t seed) {
  if (n < 1) throw ConfigError("cannot split an empty dataset");
  auto order = permutation(n, seed);
  int n_val = static_cast<int>(std::lround(val_fraction * n));
  if (val_fraction > 0.0 && n >= 2) n_val = std::clamp(n_val, 1, n - 1);
  Split s;
  s.val.assign(order.begin(), order.begin() + n_val);
  s.train.assign(order.begin() + n_val, order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

FinetuneResult finetune(const std::optional<std::string>& pretrained, const NetworkConfig& scratch_cfg,
                        const Dataset& labeled, const FinetuneConfig& cfg) {
  cfg.validate();
  if (labeled.size() < 2) throw ConfigError("fine-tuning needs at least 2 labeled images");
  for (const auto& s : labeled)
    if (!s.mask.defined()) throw ConfigError("image '" + s.id + "' has no mask");

  torch::manual_seed(derive_seed(cfg.seed, "init"));
  FinetuneResult res;
  if (pretrained) {
    auto meta = read_checkpoint_meta(*pretrained);
    if (meta.kind != "embed") throw ConfigError("expected a pretrained embedding checkpoint: " + *pretrained);
    auto src = load_embed_net(*pretrained);
    res.net = SegNet(src->config(), 1);
    copy_encoder(src->encoder, res.net->encoder);
  } else {
    res.net = SegNet(scratch_cfg, 1);
  }
  auto& net = res.net;
  const auto& nc = net->config();
  for (const auto& s : labeled)
    if (s.image.size(1) != nc.height || s.image.size(2) != nc.width)
      throw ConfigError("image '" + s.id + "' does not match the network input size");

  const auto split = split_train_val(static_cast<int>(labeled.size()), cfg.val_fraction, derive_seed(cfg.seed, "split"));
  std::vector<torch::Tensor> val_x, val_y;
  for (int i : split.val) {
    val_x.push_back(labeled[i].image);
    val_y.push_back(labeled[i].mask);
  }
  const auto val_images = val_x.empty() ? torch::Tensor() : torch::stack(val_x);
  const auto val_masks = val_y.empty() ? torch::Tensor() : torch::stack(val_y);

  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  std::vector<torch::Tensor> best;
  res.best_val_loss = std::numeric_limits<double>::infinity();
  res.encoder_hash_before = parameter_hash(*net->encoder);
  const int total_epochs = cfg.decoder_only_epochs + cfg.full_epochs;
  net->train();
  set_encoder_trainable(net, false);
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const int phase = epoch < cfg.decoder_only_epochs ? 1 : 2;
    if (epoch == cfg.decoder_only_epochs) {
      res.encoder_hash_after_phase1 = parameter_hash(*net->encoder);
      set_encoder_trainable(net, true);
    }
    Rng rng(derive_seed(cfg.seed, "finetune", static_cast<std::uint64_t>(epoch)));
    auto order = split.train;
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<torch::Tensor> xb, yb;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        TtaTransform t;
        if (cfg.augment) {
          t.flip = rng.bernoulli(0.5);
          t.rot90 = nc.height == nc.width ? rng.uniform_int(0, 3) : 2 * rng.uniform_int(0, 1);
        }
        xb.push_back(tta_forward(labeled[order[i]].image, t));
        yb.push_back(tta_forward(labeled[order[i]].mask, t));
      }
      auto loss = dice_loss(net->forward(torch::stack(xb)), torch::stack(yb));
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw RuntimeFailure("non-finite fine-tuning loss in epoch " + std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += value;
      ++batches;
    }
    FinetuneEpoch row{epoch, phase, loss_sum / std::max(1, batches), 0.0};
    // without a validation split the training loss drives selection
    row.val_loss = val_images.defined() ? dice_loss(predict_probs(net, val_images), val_masks).item<double>()
                                        : row.train_loss;
    if (row.val_loss < res.best_val_loss) {
      res.best_val_loss = row.val_loss;
      res.best_epoch = epoch;
      best = snapshot(*net);
    }
    res.trace.push_back(row);
    std::ostringstream msg;
    msg << "finetune epoch " << epoch << " (phase " << phase << "): train " << row.train_loss << ", val "
        << row.val_loss;
    log(LogLevel::Debug, msg.str());
  }
  if (!best.empty()) restore(*net, best);
  net->eval();
  return res;
}

// ---------------------------------------------------------------------------

double dsc(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (pred.sizes() != truth.sizes()) throw ConfigError("DSC: prediction and truth shapes differ");
  auto a = pred > 0.5, b = truth > 0.5;
  const double inter = torch::logical_and(a, b).sum().item<double>();
  const double total = a.sum().item<double>() + b.sum().item<double>();
  return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

DscReport evaluate_masks(const std::vector<std::string>& ids, const std::vector<torch::Tensor>& preds,
                         const std::vector<torch::Tensor>& truths) {
  if (preds.size() != truths.size() || ids.size() != preds.size())
    throw ConfigError("DSC evaluation needs one prediction per ground-truth mask");
  if (preds.empty()) throw ConfigError("DSC evaluation on an empty set");
  DscReport r;
  r.ids = ids;
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto p = preds[i].squeeze(), t = truths[i].squeeze();
    r.per_image.push_back(dsc(p, t));
    sum += r.per_image.back();
  }
  r.mean = sum / preds.size();
  return r;
}

DscReport evaluate_dsc(SegNet& net, const Dataset& test) {
  std::vector<std::string> ids;
  std::vector<torch::Tensor> images, truths;
  for (const auto& s : test) {
    if (!s.mask.defined()) throw ConfigError("test image '" + s.id + "' has no mask");
    ids.push_back(s.id);
    images.push_back(s.image);
    truths.push_back(s.mask);
  }
  if (images.empty()) throw ConfigError("DSC evaluation on an empty set");
  auto probs = predict_probs(net, torch::stack(images));
  std::vector<torch::Tensor> preds;
  for (std::int64_t i = 0; i < probs.size(0); ++i) preds.push_back((probs[i] > 0.5).to(torch::kFloat32));
  return evaluate_masks(ids, preds, truths);
}

void write_dsc_csv(const std::string& path, const DscReport& report) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << "image_id,dsc\n" << std::setprecision(10);
  for (std::size_t i = 0; i < report.ids.size(); ++i) out << report.ids[i] << ',' << report.per_image[i] << '\n';
  out << "mean," << report.mean << '\n';
}

std::vector<int> fraction_subset(int n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("label fraction must lie in (0, 1]");
  auto order = permutation(n, seed);
  const int k = static_cast<int>(std::ceil(fraction * n - 1e-9));
  std::vector<int> subset(order.begin(), order.begin() + k);
  std::sort(subset.begin(), subset.end());
  return subset;
}

std::vector<SweepRow> fraction_sweep(const std::string& pretrained, const Dataset& labeled, const Dataset& test,
                                     const FinetuneConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const auto meta = read_checkpoint_meta(pretrained);
  const auto net_cfg = meta.meta.at("network").get<NetworkConfig>();
  std::vector<std::vector<int>> subsets;
  for (double f : cfg.label_fractions) {
    subsets.push_back(fraction_subset(static_cast<int>(labeled.size()), f, derive_seed(cfg.seed, "fraction")));
    if (subsets.back().size() < 2) {
      std::ostringstream msg;
      msg << "label fraction " << f << " leaves " << subsets.back().size() << " training image(s); at least 2 needed";
      throw ConfigError(msg.str());
    }
  }
  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < subsets.size(); ++k) {
    Dataset subset;
    for (int i : subsets[k]) subset.push_back(labeled[i]);
    for (const bool use_pretrained : {true, false}) {
      auto res = finetune(use_pretrained ? std::optional<std::string>(pretrained) : std::nullopt, net_cfg, subset, cfg);
      auto report = evaluate_dsc(res.net, test);
      SweepRow row{cfg.label_fractions[k], use_pretrained ? "pretrained" : "scratch", report.mean, ""};
      if (!out_dir.empty()) {
        std::ostringstream name;
        name << "dsc_" << row.init << "_f" << std::fixed << std::setprecision(2) << row.fraction << ".csv";
        row.per_image_csv = (fs::path(out_dir) / name.str()).string();
        write_dsc_csv(row.per_image_csv, report);
      }
      rows.push_back(row);
    }
  }
  return rows;
}

void write_results_csv(const std::string& path, const std::string& task, const std::vector<SweepRow>& rows) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << "task,init,fraction,mean_dsc,per_image_csv\n" << std::setprecision(10);
  for (const auto& r : rows)
    out << task << ',' << r.init << ',' << r.fraction << ',' << r.mean_dsc << ',' << r.per_image_csv << '\n';
}

}  // namespace ldl
