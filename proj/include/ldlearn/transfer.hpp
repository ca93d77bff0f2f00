#pragma once

#include "ldlearn/augment.hpp"
#include "ldlearn/nets.hpp"

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace ldl {

struct FinetuneConfig {
  int decoder_only_epochs = 100;
  int full_epochs = 100;
  double lr = 1e-3;
  double val_fraction = 0.2;
  std::vector<double> label_fractions{0.2, 0.4, 0.6, 0.8, 1.0};
  int batch_size = 4;
  bool augment = true;  // random flips and quarter turns of image and mask
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const FinetuneConfig& c);
void from_json(const nlohmann::json& j, FinetuneConfig& c);

struct Split {
  std::vector<int> train;
  std::vector<int> val;
};

/// Seeded shuffle; the first round(val_fraction * n) indices (at least 1 when
/// n >= 2 and val_fraction > 0) go to validation.
Split split_train_val(int n, double val_fraction, std::uint64_t seed);

struct FinetuneEpoch {
  int epoch = 0;
  int phase = 1;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct FinetuneResult {
  SegNet net{nullptr};  // best-validation weights
  std::vector<FinetuneEpoch> trace;
  double best_val_loss = 0.0;
  int best_epoch = -1;
  std::uint64_t encoder_hash_before = 0;  // phase-1 freeze check
  std::uint64_t encoder_hash_after_phase1 = 0;
};

/// Two-phase dice-loss fine-tuning of a one-channel SegNet. With a pretrained
/// checkpoint the network config comes from it and its encoder is copied in;
/// otherwise `scratch_cfg` defines a randomly initialized network.
FinetuneResult finetune(const std::optional<std::string>& pretrained, const NetworkConfig& scratch_cfg,
                        const Dataset& labeled, const FinetuneConfig& cfg);

/// 2|A n B| / (|A| + |B|) of binarized inputs; 1 when both are empty.
double dsc(const torch::Tensor& pred, const torch::Tensor& truth);

struct DscReport {
  std::vector<std::string> ids;
  std::vector<double> per_image;
  double mean = 0.0;
};

DscReport evaluate_dsc(SegNet& net, const Dataset& test);
/// DSC of precomputed binary masks against the test set's masks.
DscReport evaluate_masks(const std::vector<std::string>& ids, const std::vector<torch::Tensor>& preds,
                         const std::vector<torch::Tensor>& truths);

void write_dsc_csv(const std::string& path, const DscReport& report);

/// The first ceil(f * n) entries of a seeded permutation, sorted ascending, so
/// subsets for growing f are nested and f = 1 keeps the original order.
std::vector<int> fraction_subset(int n, double fraction, std::uint64_t seed);

struct SweepRow {
  double fraction = 0.0;
  std::string init;  // "pretrained" or "scratch"
  double mean_dsc = 0.0;
  std::string per_image_csv;
};

/// Fine-tunes both initializations (scratch uses the checkpoint's network
/// config) on nested label subsets and evaluates each on `test`. Per-image
/// CSVs go under `out_dir` when non-empty.
std::vector<SweepRow> fraction_sweep(const std::string& pretrained, const Dataset& labeled, const Dataset& test,
                                     const FinetuneConfig& cfg, const std::string& out_dir = "");

/// CSV columns task,init,fraction,mean_dsc,per_image_csv.
void write_results_csv(const std::string& path, const std::string& task, const std::vector<SweepRow>& rows);

}  // namespace ldl
