#pragma once

#include "ldlearn/augment.hpp"
#include "ldlearn/losses.hpp"
#include "ldlearn/nets.hpp"

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ldl {

struct PretrainConfig {
  int warmup_epochs = 20;
  int region_epochs = 80;
  int iters_per_epoch = 1000;
  double lr = 1e-3;
  int lr_halving_period = 10;
  double w_rd = 10.0;
  double w_entropy = 0.1;
  int grid_rows = 8;
  int grid_cols = 8;
  double tau = 0.1;
  int groups = 4;
  double clip_norm = 0.0;  // global gradient norm clip, 0 disables
  std::uint64_t seed = 0;
  int workers = 0;
  AugmentConfig augment;

  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// lr0 * 2^-floor(epoch / period).
double lr_at_epoch(double lr0, int halving_period, int epoch);

struct LossTerms {
  double pd = 0, hm = 0, rd = 0, entropy = 0, adv = 0, disc = 0, total = 0;
};

struct TraceRow {
  std::int64_t iteration = 0;
  int epoch = 0;
  LossTerms terms;
};

using LossTrace = std::vector<TraceRow>;

/// CSV with columns iteration,epoch,L_Pd,L_Hm,L_Rd,L_entropy,total (plus
/// L_adv,L_d when `adversarial`).
void write_trace_csv(const std::string& path, const LossTrace& trace, bool adversarial = false);

struct ObjectiveWeights {
  double pd = 1.0;
  double hm = 1.0;
  double rd = 0.0;
  double entropy = 0.0;
};

/// Turns pixel embeddings [N, K, H, W] into patch embeddings [N, P, K].
using PatchPooler = std::function<torch::Tensor(const torch::Tensor&)>;

/// Extra differentiable term added to the objective (already weighted). It is
/// called after the forward pass and may run its own updates (the
/// discriminator step) before returning.
using ExtraTerm = std::function<torch::Tensor(const EmbedNetOutput&, const TrainingBatch&, LossTerms&)>;

struct BatchLosses {
  torch::Tensor total;
  LossTerms terms;
};

/// Patch discrimination, hypersphere mixup, region discrimination and entropy
/// on one forward pass over a TrainingBatch. Terms with zero weight are logged
/// but kept out of the graph.
BatchLosses batch_objective(const EmbedNetOutput& out, const TrainingBatch& batch, const PatchPooler& pool,
                            Temperature tau, const ObjectiveWeights& w);

/// Training state of an embedding net: model, Adam, a global epoch/iteration
/// counter (the learning-rate schedule spans all stages) and the batch stream.
class PretrainSession {
 public:
  PretrainSession(EmbedNet net, PretrainConfig cfg, std::vector<torch::Tensor> images);

  /// Restores model, optimizer and counters from a checkpoint written by save().
  static PretrainSession resume(const std::string& checkpoint, PretrainConfig cfg, std::vector<torch::Tensor> images);

  TraceRow step(const ObjectiveWeights& w);
  TraceRow step(const ObjectiveWeights& w, const PatchPooler& pool, const ExtraTerm& extra = nullptr);

  /// Runs `epochs` epochs from the current position.
  LossTrace run(int epochs, const ObjectiveWeights& w);
  LossTrace run_warmup() { return run(cfg_.warmup_epochs, warmup_weights()); }
  LossTrace run_region_stage() { return run(cfg_.region_epochs, region_weights()); }

  ObjectiveWeights warmup_weights() const { return {}; }
  ObjectiveWeights region_weights() const { return {1.0, 1.0, cfg_.w_rd, cfg_.w_entropy}; }

  void save(const std::string& path, const std::string& stage) const;

  EmbedNet& net() { return net_; }
  const PretrainConfig& config() const { return cfg_; }
  PatchGrid grid() const;
  int epoch() const;
  std::int64_t iteration() const { return iteration_; }
  double current_lr() const { return lr_at_epoch(cfg_.lr, cfg_.lr_halving_period, epoch()); }

 private:
  EmbedNet net_;
  PretrainConfig cfg_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::unique_ptr<BatchProducer> producer_;
  std::int64_t iteration_ = 0;
};

/// Evaluation-mode forward pass, batched, without gradients.
EmbedNetOutput embed_images(EmbedNet& net, const torch::Tensor& images, int batch_size = 16);

/// Mean binary entropy of the clustering output over `images` (evaluation mode).
double mean_cluster_entropy(EmbedNet& net, const torch::Tensor& images);

/// Runs warmup then region stage, writing checkpoints/warmup.ckpt,
/// checkpoints/pretrain.ckpt and traces/pretrain_loss.csv under `run_dir`.
struct PretrainResult {
  LossTrace trace;
  std::string warmup_checkpoint;
  std::string checkpoint;
};
PretrainResult pretrain(const NetworkConfig& net_cfg, const PretrainConfig& cfg, const Dataset& data,
                        const std::string& run_dir);

}  // namespace ldl
