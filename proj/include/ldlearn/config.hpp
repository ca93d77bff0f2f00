#pragma once

#include "ldlearn/augment.hpp"
#include "ldlearn/nets.hpp"
#include "ldlearn/oneshot.hpp"
#include "ldlearn/pretrain.hpp"
#include "ldlearn/shapeseg.hpp"
#include "ldlearn/transfer.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace ldl {

struct DataConfig {
  std::string train_manifest;      // images (masks/landmarks optional)
  std::string test_manifest;       // held-out images with masks or landmarks
  std::string reference_manifest;  // donor masks for shapeseg (the image column is the mask)
  bool fov_crop = false;
};

struct SynthConfig {
  std::string kind = "curves";  // curves | disc_curves
  int train_count = 200;
  int test_count = 40;
  int reference_count = 10;
  std::string out_dir = "data";  // relative to output_dir
};

struct EvalConfig {
  std::string checkpoint;  // seg or embed checkpoint; empty: predictions dir
  std::string mode = "refined";
  std::string pred_dir;   // binary masks named <id>.png
  std::string truth_dir;  // binary masks named <id>.png
};

/// Whole-run configuration. Every section has defaults; unknown keys are errors.
/// The optimizer/batch settings in `pretrain` also drive shapeseg and oneshot
/// training; the root seed feeds every section.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::string device = "cpu";
  std::string log_level = "info";
  DataConfig data;
  SynthConfig synth;
  NetworkConfig network;
  PretrainConfig pretrain;
  ShapeSegConfig shapeseg;
  OneshotConfig oneshot;
  FinetuneConfig finetune;
  EvalConfig eval;

  /// Propagates the root seed and shared training settings into
  /// the sections, then validates everything.
  void finalize();
};

nlohmann::json to_json(const RunConfig& c);
/// Throws ConfigError naming the first unknown key or mistyped value.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
/// Writes <output_dir>/config.resolved (JSON, every field explicit).
std::string write_resolved(const RunConfig& c);

/// "cpu" unless LDLEARN_DEVICE says otherwise; only the CPU backend is built in.
std::string resolve_device(const std::string& configured);

/// Standard run-directory layout.
struct RunLayout {
  std::string root;
  std::string checkpoints() const;
  std::string traces() const;
  std::string predictions() const;
  std::string figures() const;
  void create() const;
};

}  // namespace ldl
