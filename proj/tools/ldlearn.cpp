// ldlearn: command-line driver for the self-supervised local discrimination
// toolkit. One subcommand per pipeline stage; all artifacts of a run live
// under the configured output directory.

#include "ldlearn/config.hpp"
#include "ldlearn/io.hpp"
#include "ldlearn/oneshot.hpp"
#include "ldlearn/plot.hpp"
#include "ldlearn/pretrain.hpp"
#include "ldlearn/shapeseg.hpp"
#include "ldlearn/transfer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace ldl;

namespace {

struct Common {
  std::string config;
  std::string output;
  std::int64_t seed = -1;
  bool dry_run = false;
};

RunConfig load(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("config file not found: " + c.config);
    try {
      j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + c.config + ": " + e.what());
    }
  }
  if (!c.output.empty()) j["output_dir"] = c.output;
  if (c.seed >= 0) j["seed"] = c.seed;
  return run_config_from_json(j);
}

// torch errors append a C++ backtrace; the diagnostic stays on one line.
std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::string data_dir(const RunConfig& rc) { return (fs::path(rc.output_dir) / rc.synth.out_dir).string(); }

std::string manifest_or_default(const std::string& configured, const RunConfig& rc, const std::string& split) {
  return configured.empty() ? (fs::path(data_dir(rc)) / split / "manifest.txt").string() : configured;
}

Dataset load_split(const RunConfig& rc, const std::string& configured, const std::string& split) {
  return load_dataset(manifest_or_default(configured, rc, split),
                      LoadOptions{rc.data.fov_crop, rc.network.height, rc.network.width});
}

std::vector<torch::Tensor> load_references(const RunConfig& rc) {
  const auto path = manifest_or_default(rc.data.reference_manifest, rc, "references");
  std::vector<torch::Tensor> masks;
  for (const auto& e : read_manifest(path)) masks.push_back(read_mask(e.image));
  if (masks.empty()) throw ConfigError("reference manifest lists no masks: " + path);
  return masks;
}

void print_schedule(const RunConfig& rc, const std::string& command) {
  const auto& p = rc.pretrain;
  std::cout << "command: " << command << "\noutput_dir: " << rc.output_dir << "\nseed: " << rc.seed
            << "\ndevice: " << rc.device << '\n';
  auto stage = [&](const std::string& name, int first_epoch, int epochs) {
    std::cout << "  " << name << ": epochs " << first_epoch << ".." << first_epoch + epochs - 1 << " ("
              << static_cast<std::int64_t>(epochs) * p.iters_per_epoch << " iterations), lr "
              << lr_at_epoch(p.lr, p.lr_halving_period, first_epoch) << " -> "
              << lr_at_epoch(p.lr, p.lr_halving_period, first_epoch + std::max(0, epochs - 1)) << '\n';
  };
  std::cout << "schedule:\n";
  if (command == "pretrain") {
    stage("warmup (Pd + Hm)", 0, p.warmup_epochs);
    stage("region (Pd + Hm + Rd + entropy)", p.warmup_epochs, p.region_epochs);
  } else if (command == "shapeseg") {
    stage("warmup (Pd + Hm)", 0, p.warmup_epochs);
    stage("adversarial (region objective + L_adv)", p.warmup_epochs, rc.shapeseg.epochs);
    std::cout << "  pseudo-labels: " << rc.shapeseg.tta_count << " TTA passes per image\n"
              << "  refiner: " << rc.shapeseg.refine_epochs << " epochs, weights " << to_string(rc.shapeseg.weight_mode)
              << '\n';
  } else if (command == "oneshot") {
    stage(rc.oneshot.center_sensitive ? "center-sensitive Pd + Hm" : "Pd + Hm", 0, rc.oneshot.epochs);
    std::cout << "  pooling sizes: "
              << (rc.oneshot.multi_size ? std::to_string(rc.oneshot.pool_min) + ".." + std::to_string(rc.oneshot.pool_max)
                                        : std::string("fixed grid"))
              << ", test pooling " << rc.oneshot.test_pool << '\n';
  } else if (command == "finetune") {
    const auto& f = rc.finetune;
    std::cout << "  phase 1 (encoder frozen): " << f.decoder_only_epochs << " epochs\n  phase 2 (all layers): "
              << f.full_epochs << " epochs\n  lr " << f.lr << ", validation fraction " << f.val_fraction << '\n';
  }
}

void save_seg(const std::string& path, SegNet& net) {
  save_checkpoint(path, *net, {"seg", {{"network", net->config()}, {"out_channels", net->out_channels()}}});
}

void write_simple_trace(const std::string& path, const LossTrace& trace) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  out << "iteration,epoch,loss\n" << std::setprecision(10);
  for (const auto& r : trace) out << r.iteration << ',' << r.epoch << ',' << r.terms.total << '\n';
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& rc) {
  const auto kind = parse_synth_kind(rc.synth.kind);
  auto spec = [&](int count, const char* stream) {
    SynthSpec s;
    s.count = count;
    s.height = rc.network.height;
    s.width = rc.network.width;
    s.kind = kind;
    s.seed = derive_seed(rc.seed, stream);
    return s;
  };
  const auto dir = fs::path(data_dir(rc));
  const auto train = save_dataset((dir / "train").string(), "manifest.txt", synth_dataset(spec(rc.synth.train_count, "synth-train")));
  const auto test = save_dataset((dir / "test").string(), "manifest.txt", synth_dataset(spec(rc.synth.test_count, "synth-test")));
  auto refs = synth_reference_masks(rc.synth.reference_count, rc.network.height, rc.network.width,
                                    derive_seed(rc.seed, "synth-references"));
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    std::ostringstream name;
    name << "ref_" << std::setw(4) << std::setfill('0') << i << ".png";
    write_mask((dir / "references" / name.str()).string(), refs[i]);
    entries.push_back({name.str(), std::nullopt, std::nullopt});
  }
  write_manifest((dir / "references" / "manifest.txt").string(), entries);
  info("wrote " + train + ", " + test + " and " + std::to_string(refs.size()) + " reference masks");
  return 0;
}

int cmd_pretrain(const RunConfig& rc) {
  const auto data = load_split(rc, rc.data.train_manifest, "train");
  RunLayout layout{rc.output_dir};
  layout.create();
  auto res = pretrain(rc.network, rc.pretrain, data, rc.output_dir);
  std::ostringstream msg;
  msg << "pretraining done: " << res.trace.size() << " iterations, final loss " << res.trace.back().terms.total
      << ", checkpoint " << res.checkpoint;
  info(msg.str());
  return 0;
}

int cmd_shapeseg(const RunConfig& rc, const std::string& warmup_ckpt) {
  const auto train = load_split(rc, rc.data.train_manifest, "train");
  const auto test = load_split(rc, rc.data.test_manifest, "test");
  ReferenceMaskSet refs(load_references(rc));
  RunLayout layout{rc.output_dir};
  layout.create();
  const auto& cfg = rc.shapeseg;

  torch::manual_seed(derive_seed(rc.seed, "init"));
  auto session = warmup_ckpt.empty() ? PretrainSession(EmbedNet(rc.network), cfg.train, images_of(train))
                                     : PretrainSession::resume(warmup_ckpt, cfg.train, images_of(train));
  LossTrace trace;
  if (warmup_ckpt.empty()) trace = session.run_warmup();
  Discriminator disc(cfg.disc);
  auto adv = train_shape_guided(session, disc, refs, cfg);
  trace.insert(trace.end(), adv.trace.begin(), adv.trace.end());
  write_trace_csv((fs::path(layout.traces()) / "shapeseg_loss.csv").string(), trace, true);
  const auto gen_ckpt = (fs::path(layout.checkpoints()) / "shapeseg.ckpt").string();
  session.save(gen_ckpt, "shapeseg");
  save_checkpoint((fs::path(layout.checkpoints()) / "discriminator.ckpt").string(), *disc,
                  {"disc", {{"discriminator", cfg.disc}}});

  const Temperature tau(cfg.train.tau);
  const auto pred_root = fs::path(layout.predictions()) / "shapeseg";
  std::vector<UncertaintyBundle> bundles;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < train.size(); ++i) {
    bundles.push_back(pseudo_label_uncertainty(session.net(), train[i].image, cfg.target_channel, cfg.tta_count,
                                               cfg.train.augment, tau, derive_seed(rc.seed, "tta", i)));
    ids.push_back(train[i].id);
  }
  save_bundles((pred_root / "bundles").string(), ids, bundles);

  torch::manual_seed(derive_seed(rc.seed, "refiner-init"));
  SegNet refiner(rc.network, 1);
  auto refine_trace = retrain_refiner(refiner, images_of(train), bundles, cfg);
  write_simple_trace((fs::path(layout.traces()) / "refiner_loss.csv").string(), refine_trace);
  save_seg((fs::path(layout.checkpoints()) / "refiner.ckpt").string(), refiner);

  std::ofstream summary(pred_root / "summary.csv");
  summary << "mode,mean_dsc\n" << std::setprecision(10);
  for (auto mode : {PredictMode::Raw, PredictMode::Cluster, PredictMode::Refined}) {
    const auto dir = pred_root / to_string(mode);
    std::vector<std::string> test_ids;
    std::vector<torch::Tensor> masks, truths;
    for (const auto& s : test) {
      auto p = mode == PredictMode::Refined ? predict_seg(refiner, s.image)
                                            : predict_embed(session.net(), s.image, mode, cfg.target_channel, tau);
      write_mask((dir / (s.id + "_mask.png")).string(), p.mask);
      write_image((dir / (s.id + "_image.png")).string(), s.image);
      if (s.mask.defined()) {
        test_ids.push_back(s.id);
        masks.push_back(p.mask);
        truths.push_back(s.mask);
      }
    }
    if (!truths.empty()) {
      auto report = evaluate_masks(test_ids, masks, truths);
      write_dsc_csv((pred_root / ("dsc_" + to_string(mode) + ".csv")).string(), report);
      summary << to_string(mode) << ',' << report.mean << '\n';
      std::ostringstream msg;
      msg << "shapeseg " << to_string(mode) << " mean DSC " << report.mean;
      info(msg.str());
    }
  }
  return 0;
}

int cmd_oneshot(const RunConfig& rc, const std::string& checkpoint, bool self_mode, int support_index) {
  const auto test = load_split(rc, rc.data.test_manifest, "test");
  RunLayout layout{rc.output_dir};
  layout.create();
  EmbedNet net{nullptr};
  if (checkpoint.empty()) {
    const auto train = load_split(rc, rc.data.train_manifest, "train");
    torch::manual_seed(derive_seed(rc.seed, "init"));
    PretrainSession session(EmbedNet(rc.network), rc.oneshot.train, images_of(train));
    auto trace = train_center_sensitive(session, rc.oneshot);
    write_trace_csv((fs::path(layout.traces()) / "oneshot_loss.csv").string(), trace);
    session.save((fs::path(layout.checkpoints()) / "oneshot.ckpt").string(), "oneshot");
    net = session.net();
  } else {
    net = load_embed_net(checkpoint);
  }
  const auto out_dir = fs::path(layout.predictions()) / "oneshot";
  std::vector<QueryResult> rows;
  if (self_mode) {
    for (const auto& s : test) {
      auto r = localize_queries(net, s, Dataset{s}, rc.oneshot, (out_dir / "self").string());
      rows.insert(rows.end(), r.begin(), r.end());
    }
  } else {
    if (support_index < 0 || support_index >= static_cast<int>(test.size()))
      throw ConfigError("support index out of range");
    Dataset queries;
    for (int i = 0; i < static_cast<int>(test.size()); ++i)
      if (i != support_index) queries.push_back(test[i]);
    rows = localize_queries(net, test[support_index], queries, rc.oneshot, out_dir.string());
  }
  const std::string tag = self_mode ? "self_" : "";
  write_localization_csv((out_dir / (tag + "localization.csv")).string(), rows);
  std::vector<Point> pred, truth;
  double max_dist = 0.0;
  for (const auto& r : rows) {
    pred.push_back(r.predicted);
    truth.push_back(r.truth);
    max_dist = std::max(max_dist, r.distance);
  }
  auto acc = accuracy_at_thresholds(pred, truth, rc.oneshot.test_pool, rc.oneshot.fractions);
  write_accuracy_csv((out_dir / (tag + "accuracy.csv")).string(), acc);
  std::ostringstream msg;
  msg << "oneshot: " << rows.size() << " queries, mean accuracy " << acc.mean << ", max distance " << max_dist;
  info(msg.str());
  return 0;
}

int cmd_finetune(const RunConfig& rc, const std::string& checkpoint_arg, const std::string& init, bool sweep,
                 int labels) {
  auto labeled = load_split(rc, rc.data.train_manifest, "train");
  if (labels > 0 && labels < static_cast<int>(labeled.size())) labeled.resize(labels);
  const auto test = load_split(rc, rc.data.test_manifest, "test");
  RunLayout layout{rc.output_dir};
  layout.create();
  const auto checkpoint =
      checkpoint_arg.empty() ? (fs::path(layout.checkpoints()) / "pretrain.ckpt").string() : checkpoint_arg;
  const auto out_dir = fs::path(layout.predictions()) / "finetune";
  if (init != "pretrained" && init != "scratch" && init != "both")
    throw ConfigError("--init must be pretrained, scratch or both");
  const bool need_ckpt = init != "scratch" || sweep;
  if (need_ckpt && !fs::exists(checkpoint)) throw ConfigError("pretrained checkpoint not found: " + checkpoint);

  if (sweep) {
    auto rows = fraction_sweep(checkpoint, labeled, test, rc.finetune, out_dir.string());
    write_results_csv((out_dir / "results.csv").string(), "segmentation", rows);
    return 0;
  }
  std::vector<SweepRow> rows;
  for (const std::string which : {"pretrained", "scratch"}) {
    if (init != "both" && init != which) continue;
    auto net_cfg = rc.network;
    if (need_ckpt) net_cfg = read_checkpoint_meta(checkpoint).meta.at("network").get<NetworkConfig>();
    auto res = finetune(which == "pretrained" ? std::optional<std::string>(checkpoint) : std::nullopt, net_cfg,
                        labeled, rc.finetune);
    save_seg((fs::path(layout.checkpoints()) / ("finetune_" + which + ".ckpt")).string(), res.net);
    std::ofstream trace(fs::path(layout.traces()) / ("finetune_" + which + ".csv"));
    trace << "epoch,phase,train_loss,val_loss\n" << std::setprecision(10);
    for (const auto& e : res.trace) trace << e.epoch << ',' << e.phase << ',' << e.train_loss << ',' << e.val_loss << '\n';
    auto report = evaluate_dsc(res.net, test);
    const auto csv = (out_dir / ("dsc_" + which + ".csv")).string();
    write_dsc_csv(csv, report);
    rows.push_back({1.0, which, report.mean, csv});
    std::ostringstream msg;
    msg << "finetune (" << which << "): best epoch " << res.best_epoch << ", test mean DSC " << report.mean;
    info(msg.str());
  }
  write_results_csv((out_dir / "results.csv").string(), "segmentation", rows);
  return 0;
}

int cmd_eval(const RunConfig& rc, std::string checkpoint, std::string pred_dir, std::string truth_dir) {
  if (checkpoint.empty()) checkpoint = rc.eval.checkpoint;
  if (pred_dir.empty()) pred_dir = rc.eval.pred_dir;
  if (truth_dir.empty()) truth_dir = rc.eval.truth_dir;
  RunLayout layout{rc.output_dir};
  layout.create();
  const auto out_dir = fs::path(layout.predictions()) / "eval";
  DscReport report;
  if (!pred_dir.empty() || !truth_dir.empty()) {
    if (pred_dir.empty() || truth_dir.empty()) throw ConfigError("eval needs both a prediction and a truth directory");
    if (!fs::is_directory(pred_dir)) throw ConfigError("prediction directory not found: " + pred_dir);
    if (!fs::is_directory(truth_dir)) throw ConfigError("truth directory not found: " + truth_dir);
    std::vector<fs::path> truths;
    for (const auto& e : fs::directory_iterator(truth_dir))
      if (e.path().extension() == ".png") truths.push_back(e.path());
    std::sort(truths.begin(), truths.end());
    std::vector<std::string> ids;
    std::vector<torch::Tensor> p, t;
    for (const auto& path : truths) {
      const auto pred = fs::path(pred_dir) / path.filename();
      if (!fs::exists(pred)) throw ConfigError("no prediction for " + path.filename().string() + " in " + pred_dir);
      ids.push_back(path.stem().string());
      p.push_back(read_mask(pred.string()));
      t.push_back(read_mask(path.string()));
    }
    report = evaluate_masks(ids, p, t);
  } else {
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --pred-dir/--truth-dir");
    const auto test = load_split(rc, rc.data.test_manifest, "test");
    const auto mode = read_checkpoint_meta(checkpoint).kind == "seg" ? PredictMode::Refined : parse_predict_mode(rc.eval.mode);
    std::vector<torch::Tensor> images;
    for (const auto& s : test) images.push_back(s.image);
    auto preds = predict_segmentation(checkpoint, images, mode, rc.shapeseg.target_channel, rc.pretrain.tau);
    std::vector<std::string> ids;
    std::vector<torch::Tensor> masks, truths;
    for (std::size_t i = 0; i < test.size(); ++i) {
      write_mask((out_dir / (test[i].id + "_mask.png")).string(), preds[i].mask);
      write_image((out_dir / (test[i].id + "_image.png")).string(), test[i].image);
      if (!test[i].mask.defined()) continue;
      ids.push_back(test[i].id);
      masks.push_back(preds[i].mask);
      truths.push_back(test[i].mask);
    }
    report = evaluate_masks(ids, masks, truths);
  }
  write_dsc_csv((out_dir / "dsc.csv").string(), report);
  std::cout << "mean DSC " << std::setprecision(6) << report.mean << " over " << report.per_image.size() << " images\n";
  return 0;
}

int cmd_plot(const std::string& run_dir) {
  if (!fs::is_directory(run_dir)) throw ConfigError("run directory not found: " + run_dir);
  auto summary = plot_run(run_dir);
  std::cout << "figures: " << summary.written.size() << ", warnings: " << summary.warnings << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ldlearn: self-supervised local discrimination toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "JSON run configuration");
    sub->add_option("-o,--output", common.output, "output directory (overrides output_dir)");
    sub->add_option("--seed", common.seed, "root seed (overrides seed)");
    sub->add_flag("--dry-run", common.dry_run, "validate the configuration, print the schedule and exit");
  };
  auto* synth = app.add_subcommand("synth", "generate synthetic train/test/reference data");
  auto* pre = app.add_subcommand("pretrain", "patch + region discrimination pretraining");
  auto* shape = app.add_subcommand("shapeseg", "shape-guided segmentation with uncertainty refinement");
  auto* one = app.add_subcommand("oneshot", "center-sensitive one-shot landmark localization");
  auto* fine = app.add_subcommand("finetune", "fine-tune a segmentation net from a pretrained encoder");
  auto* eval = app.add_subcommand("eval", "Dice evaluation of a checkpoint or of mask directories");
  auto* plot = app.add_subcommand("plot", "render figures for a run directory");
  for (auto* s : {synth, pre, shape, one, fine, eval}) add_common(s);

  std::string warmup_ckpt, ckpt, init = "both", pred_dir, truth_dir, run_dir;
  bool self_mode = false, sweep = false;
  int support_index = 0, labels = 0;
  shape->add_option("--warmup-checkpoint", warmup_ckpt, "start from this warmup checkpoint instead of warming up");
  one->add_option("--checkpoint", ckpt, "skip training and localize with this embedding checkpoint");
  one->add_flag("--self", self_mode, "self-localization: every test image is its own support");
  one->add_option("--support", support_index, "index of the support image in the test set");
  fine->add_option("--checkpoint", ckpt, "pretrained checkpoint (default <output>/checkpoints/pretrain.ckpt)");
  fine->add_option("--init", init, "pretrained, scratch or both");
  fine->add_flag("--sweep", sweep, "label-fraction sweep over finetune.label_fractions");
  fine->add_option("--labels", labels, "use only the first N labeled training images");
  eval->add_option("--checkpoint", ckpt, "checkpoint to evaluate on the test manifest");
  eval->add_option("--pred-dir", pred_dir, "directory of predicted masks <id>.png");
  eval->add_option("--truth-dir", truth_dir, "directory of ground-truth masks <id>.png");
  plot->add_option("run_dir", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (plot->parsed()) return cmd_plot(run_dir);
    const auto rc = load(common);
    const std::string name = app.get_subcommands().front()->get_name();
    if (common.dry_run) {
      std::cout << to_json(rc).dump(2) << '\n';
      print_schedule(rc, name);
      return 0;
    }
    write_resolved(rc);
    if (synth->parsed()) return cmd_synth(rc);
    if (pre->parsed()) return cmd_pretrain(rc);
    if (shape->parsed()) return cmd_shapeseg(rc, warmup_ckpt);
    if (one->parsed()) return cmd_oneshot(rc, ckpt, self_mode, support_index);
    if (fine->parsed()) return cmd_finetune(rc, ckpt, init, sweep, labels);
    if (eval->parsed()) return cmd_eval(rc, ckpt, pred_dir, truth_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << first_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << first_line(e.what()) << '\n';
    return 2;
  }
  return 0;
}
