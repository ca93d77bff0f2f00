#include "ldlearn/pretrain.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;

namespace ldl {

void PretrainConfig::validate() const {
  if (warmup_epochs < 0 || region_epochs < 0) throw ConfigError("pretrain epoch counts must be non-negative");
  if (iters_per_epoch < 1) throw ConfigError("pretrain.iters_per_epoch must be positive");
  if (!(lr > 0.0)) throw ConfigError("pretrain.lr must be positive");
  if (lr_halving_period < 1) throw ConfigError("pretrain.lr_halving_period must be positive");
  if (w_rd < 0.0 || w_entropy < 0.0) throw ConfigError("pretrain loss weights must be non-negative");
  if (grid_rows < 1 || grid_cols < 1) throw ConfigError("pretrain grid counts must be positive");
  if (groups < 2) throw ConfigError("pretrain.groups must be at least 2 (mixup needs two parents)");
  if (clip_norm < 0.0) throw ConfigError("pretrain.clip_norm must be non-negative");
  Temperature{tau};
  augment.validate();
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"warmup_epochs", c.warmup_epochs},
                     {"region_epochs", c.region_epochs},
                     {"iters_per_epoch", c.iters_per_epoch},
                     {"lr", c.lr},
                     {"lr_halving_period", c.lr_halving_period},
                     {"w_rd", c.w_rd},
                     {"w_entropy", c.w_entropy},
                     {"grid_rows", c.grid_rows},
                     {"grid_cols", c.grid_cols},
                     {"tau", c.tau},
                     {"groups", c.groups},
                     {"clip_norm", c.clip_norm},
                     {"workers", c.workers},
                     {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.region_epochs = j.value("region_epochs", c.region_epochs);
  c.iters_per_epoch = j.value("iters_per_epoch", c.iters_per_epoch);
  c.lr = j.value("lr", c.lr);
  c.lr_halving_period = j.value("lr_halving_period", c.lr_halving_period);
  c.w_rd = j.value("w_rd", c.w_rd);
  c.w_entropy = j.value("w_entropy", c.w_entropy);
  c.grid_rows = j.value("grid_rows", c.grid_rows);
  c.grid_cols = j.value("grid_cols", c.grid_cols);
  c.tau = j.value("tau", c.tau);
  c.groups = j.value("groups", c.groups);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.workers = j.value("workers", c.workers);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
}

double lr_at_epoch(double lr0, int halving_period, int epoch) {
  return std::ldexp(lr0, -(epoch / halving_period));
}

void write_trace_csv(const std::string& path, const LossTrace& trace, bool adversarial) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write trace: " + path);
  out << "iteration,epoch,L_Pd,L_Hm,L_Rd,L_entropy,total";
  if (adversarial) out << ",L_adv,L_d";
  out << '\n' << std::setprecision(10);
  for (const auto& r : trace) {
    const auto& t = r.terms;
    out << r.iteration << ',' << r.epoch << ',' << t.pd << ',' << t.hm << ',' << t.rd << ',' << t.entropy << ','
        << t.total;
    if (adversarial) out << ',' << t.adv << ',' << t.disc;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

BatchLosses batch_objective(const EmbedNetOutput& out, const TrainingBatch& batch, const PatchPooler& pool,
                            Temperature tau, const ObjectiveWeights& w) {
  const int g = batch.groups();
  auto patches = pool(out.v);  // [3G, P, K]
  auto s = patches.slice(0, 0, g);
  auto s_hat = patches.slice(0, g, 2 * g);
  auto s_mixed = patches.slice(0, 2 * g, 3 * g);

  std::vector<std::int64_t> first, second;
  for (const auto& [a, b] : batch.parents) {
    first.push_back(a);
    second.push_back(b);
  }
  auto idx = [&](const std::vector<std::int64_t>& v) {
    return torch::tensor(v, torch::TensorOptions().dtype(torch::kLong).device(s.device()));
  };

  BatchLosses res;
  auto total = torch::zeros({}, out.v.options());
  auto add = [&](double weight, const std::function<torch::Tensor()>& term, double& logged) {
    if (weight == 0.0) {
      torch::NoGradGuard guard;
      logged = term().item<double>();
      return;
    }
    auto value = term();
    logged = value.item<double>();
    total = total + weight * value;
  };

  add(w.pd, [&] { return patch_discrimination_loss(s, s_hat, tau); }, res.terms.pd);
  add(w.hm, [&] {
        auto target = mixup_target(s.index_select(0, idx(first)), s.index_select(0, idx(second)),
                                   batch.lambdas.to(s.device()));
        return hypersphere_mixup_loss(s_mixed, target, tau);
      },
      res.terms.hm);
  auto v_views = out.v.slice(0, 0, 2 * g);
  auto r_views = out.r.slice(0, 0, 2 * g);
  add(w.rd, [&] { return region_discrimination_loss(region_prototypes(v_views, r_views), tau); }, res.terms.rd);
  add(w.entropy, [&] { return entropy_loss(r_views); }, res.terms.entropy);
  res.total = total;
  res.terms.total = total.item<double>();
  return res;
}

// ---------------------------------------------------------------------------

PretrainSession::PretrainSession(EmbedNet net, PretrainConfig cfg, std::vector<torch::Tensor> images)
    : net_(std::move(net)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (images.empty()) throw ConfigError("pretraining needs at least one image");
  if (images.front().size(1) != net_->config().height || images.front().size(2) != net_->config().width)
    throw ConfigError("image size does not match the network input size");
  grid();  // validates divisibility
  optimizer_ = std::make_unique<torch::optim::Adam>(net_->parameters(), torch::optim::AdamOptions(cfg_.lr));
  producer_ = std::make_unique<BatchProducer>(std::move(images), cfg_.groups, cfg_.augment,
                                              derive_seed(cfg_.seed, "data"), cfg_.workers);
}

PretrainSession PretrainSession::resume(const std::string& checkpoint, PretrainConfig cfg,
                                        std::vector<torch::Tensor> images) {
  auto meta = read_checkpoint_meta(checkpoint);
  if (meta.kind != "embed") throw ConfigError("cannot resume pretraining from a '" + meta.kind + "' checkpoint");
  PretrainSession session(EmbedNet(meta.meta.at("network").get<NetworkConfig>()), std::move(cfg), std::move(images));
  load_checkpoint(checkpoint, *session.net_, session.optimizer_.get());
  session.iteration_ = meta.meta.value("iteration", std::int64_t{0});
  return session;
}

PatchGrid PretrainSession::grid() const {
  return PatchGrid(cfg_.grid_rows, cfg_.grid_cols, net_->config().height, net_->config().width);
}

int PretrainSession::epoch() const { return static_cast<int>(iteration_ / cfg_.iters_per_epoch); }

TraceRow PretrainSession::step(const ObjectiveWeights& w) {
  const auto g = grid();
  return step(w, [g](const torch::Tensor& v) { return patch_pool(v, g); });
}

TraceRow PretrainSession::step(const ObjectiveWeights& w, const PatchPooler& pool, const ExtraTerm& extra) {
  const double lr = current_lr();
  for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

  auto batch = producer_->get(iteration_);
  net_->train();
  auto out = net_->forward(batch.images);
  auto losses = batch_objective(out, batch, pool, Temperature(cfg_.tau), w);
  auto total = losses.total;
  if (extra) {
    total = total + extra(out, batch, losses.terms);
    losses.terms.total = total.item<double>();
  }
  TraceRow row{iteration_, epoch(), losses.terms};
  if (!std::isfinite(row.terms.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << iteration_ << " (L_Pd=" << row.terms.pd << ", L_Hm=" << row.terms.hm
        << ", L_Rd=" << row.terms.rd << ", L_entropy=" << row.terms.entropy << ", L_adv=" << row.terms.adv << ")";
    throw RuntimeFailure(msg.str());
  }
  optimizer_->zero_grad();
  if (total.requires_grad()) {
    total.backward();
    if (cfg_.clip_norm > 0.0) torch::nn::utils::clip_grad_norm_(net_->parameters(), cfg_.clip_norm);
    optimizer_->step();
  }
  ++iteration_;
  return row;
}

LossTrace PretrainSession::run(int epochs, const ObjectiveWeights& w) {
  LossTrace trace;
  const std::int64_t steps = static_cast<std::int64_t>(epochs) * cfg_.iters_per_epoch;
  trace.reserve(steps);
  for (std::int64_t i = 0; i < steps; ++i) {
    trace.push_back(step(w));
    if (iteration_ % cfg_.iters_per_epoch == 0) {
      std::ostringstream msg;
      msg << "epoch " << epoch() << " done, loss " << trace.back().terms.total;
      log(LogLevel::Debug, msg.str());
    }
  }
  return trace;
}

void PretrainSession::save(const std::string& path, const std::string& stage) const {
  CheckpointMeta meta{"embed", {{"network", net_->config()},
                                {"iteration", iteration_},
                                {"epoch", epoch()},
                                {"stage", stage},
                                {"pretrain", cfg_}}};
  save_checkpoint(path, *net_, meta, optimizer_.get());
}

// ---------------------------------------------------------------------------

EmbedNetOutput embed_images(EmbedNet& net, const torch::Tensor& images, int batch_size) {
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  std::vector<torch::Tensor> vs, rs;
  for (std::int64_t i = 0; i < images.size(0); i += batch_size) {
    auto out = net->forward(images.slice(0, i, std::min<std::int64_t>(i + batch_size, images.size(0))));
    vs.push_back(out.v);
    rs.push_back(out.r);
  }
  net->train(was_training);
  return {torch::cat(vs), torch::cat(rs)};
}

double mean_cluster_entropy(EmbedNet& net, const torch::Tensor& images) {
  return entropy_loss(embed_images(net, images).r).item<double>();
}

PretrainResult pretrain(const NetworkConfig& net_cfg, const PretrainConfig& cfg, const Dataset& data,
                        const std::string& run_dir) {
  torch::manual_seed(derive_seed(cfg.seed, "init"));
  PretrainSession session(EmbedNet(net_cfg), cfg, images_of(data));
  PretrainResult res;
  res.trace = session.run_warmup();
  res.warmup_checkpoint = (fs::path(run_dir) / "checkpoints" / "warmup.ckpt").string();
  session.save(res.warmup_checkpoint, "warmup");
  auto region = session.run_region_stage();
  res.trace.insert(res.trace.end(), region.begin(), region.end());
  res.checkpoint = (fs::path(run_dir) / "checkpoints" / "pretrain.ckpt").string();
  session.save(res.checkpoint, "region");
  write_trace_csv((fs::path(run_dir) / "traces" / "pretrain_loss.csv").string(), res.trace);
  return res;
}

}  // namespace ldl
