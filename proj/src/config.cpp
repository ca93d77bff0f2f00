#include "ldlearn/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ldl {

namespace {

json data_json(const DataConfig& d) {
  return {{"train_manifest", d.train_manifest},
          {"test_manifest", d.test_manifest},
          {"reference_manifest", d.reference_manifest},
          {"fov_crop", d.fov_crop}};
}

json synth_json(const SynthConfig& s) {
  return {{"kind", s.kind},
          {"train_count", s.train_count},
          {"test_count", s.test_count},
          {"reference_count", s.reference_count},
          {"out_dir", s.out_dir}};
}

json eval_json(const EvalConfig& e) {
  return {{"checkpoint", e.checkpoint}, {"mode", e.mode}, {"pred_dir", e.pred_dir}, {"truth_dir", e.truth_dir}};
}

// Every key of `user` must exist in `defaults` (objects recurse; arrays and
// scalars are leaves).
void reject_unknown(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
    if (defaults.at(key).is_object()) reject_unknown(value, defaults.at(key), here);
  }
}

LogLevel parse_log_level(const std::string& s) {
  if (s == "debug") return LogLevel::Debug;
  if (s == "info") return LogLevel::Info;
  if (s == "warn") return LogLevel::Warn;
  if (s == "error") return LogLevel::Error;
  throw ConfigError("config: log_level must be debug, info, warn or error");
}

}  // namespace

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"device", c.device},
          {"log_level", c.log_level},
          {"data", data_json(c.data)},
          {"synth", synth_json(c.synth)},
          {"network", c.network},
          {"pretrain", c.pretrain},
          {"shapeseg", c.shapeseg},
          {"oneshot", c.oneshot},
          {"finetune", c.finetune},
          {"eval", eval_json(c.eval)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  reject_unknown(j, to_json(c), "");
  try {
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.device = j.value("device", c.device);
    c.log_level = j.value("log_level", c.log_level);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.train_manifest = d.value("train_manifest", c.data.train_manifest);
      c.data.test_manifest = d.value("test_manifest", c.data.test_manifest);
      c.data.reference_manifest = d.value("reference_manifest", c.data.reference_manifest);
      c.data.fov_crop = d.value("fov_crop", c.data.fov_crop);
    }
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      c.synth.kind = s.value("kind", c.synth.kind);
      c.synth.train_count = s.value("train_count", c.synth.train_count);
      c.synth.test_count = s.value("test_count", c.synth.test_count);
      c.synth.reference_count = s.value("reference_count", c.synth.reference_count);
      c.synth.out_dir = s.value("out_dir", c.synth.out_dir);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      c.eval.checkpoint = e.value("checkpoint", c.eval.checkpoint);
      c.eval.mode = e.value("mode", c.eval.mode);
      c.eval.pred_dir = e.value("pred_dir", c.eval.pred_dir);
      c.eval.truth_dir = e.value("truth_dir", c.eval.truth_dir);
    }
    // section from_json functions start from the struct's current values
    if (j.contains("network")) from_json(j.at("network"), c.network);
    if (j.contains("pretrain")) from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("shapeseg")) from_json(j.at("shapeseg"), c.shapeseg);
    if (j.contains("oneshot")) from_json(j.at("oneshot"), c.oneshot);
    if (j.contains("finetune")) from_json(j.at("finetune"), c.finetune);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  pretrain.seed = seed;
  finetune.seed = seed;
  shapeseg.train = pretrain;
  oneshot.train = pretrain;
  network.validate();
  pretrain.validate();
  shapeseg.validate();
  oneshot.validate();
  finetune.validate();
  parse_log_level(log_level);
  parse_synth_kind(synth.kind);
  parse_predict_mode(eval.mode);
  if (synth.train_count < 1 || synth.test_count < 1 || synth.reference_count < 1)
    throw ConfigError("config: synth counts must be positive");
  if (output_dir.empty()) throw ConfigError("config: output_dir must not be empty");
  if (shapeseg.target_channel >= network.num_clusters)
    throw ConfigError("config: shapeseg.target_channel must be below network.num_clusters");
  device = resolve_device(device);
  set_log_level(parse_log_level(log_level));
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string write_resolved(const RunConfig& c) {
  fs::create_directories(c.output_dir);
  const auto path = (fs::path(c.output_dir) / "config.resolved").string();
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << to_json(c).dump(2) << '\n';
  return path;
}

std::string resolve_device(const std::string& configured) {
  std::string device = configured;
  if (const char* env = std::getenv("LDLEARN_DEVICE"); env && *env) device = env;
  if (device == "cpu" || device == "auto") return "cpu";
  throw ConfigError("device '" + device + "' is not supported by this build (only cpu)");
}

std::string RunLayout::checkpoints() const { return (fs::path(root) / "checkpoints").string(); }
std::string RunLayout::traces() const { return (fs::path(root) / "traces").string(); }
std::string RunLayout::predictions() const { return (fs::path(root) / "predictions").string(); }
std::string RunLayout::figures() const { return (fs::path(root) / "figures").string(); }

void RunLayout::create() const {
  for (const auto& d : {checkpoints(), traces(), predictions(), figures()}) fs::create_directories(d);
}

}  // namespace ldl
