#include "ldlearn/shapeseg.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <iomanip>

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using namespace ldl;

namespace {

NetworkConfig tiny_net(int c = 4) {
  NetworkConfig n;
  n.width_divisor = 8;
  n.embed_dim = 8;
  n.num_clusters = c;
  n.height = 32;
  n.width = 32;
  return n;
}

ShapeSegConfig tiny_shape_cfg() {
  ShapeSegConfig c;
  c.epochs = 2;
  c.disc.conv_channels = {8, 8, 8};
  c.disc.fc_sizes = {8, 1};
  c.tta_count = 4;
  c.refine_epochs = 2;
  c.train.warmup_epochs = 1;
  c.train.iters_per_epoch = 4;
  c.train.grid_rows = 4;
  c.train.grid_cols = 4;
  c.train.tau = 0.5;
  c.train.clip_norm = 5.0;
  c.train.seed = 5;
  return c;
}

std::vector<torch::Tensor> tiny_images(int n, std::uint64_t seed = 3) {
  return images_of(synth_dataset({n, 32, 32, SynthKind::Curves, seed}));
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("ldlearn_shapeseg_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Brute-force cluster_refine: prototypes from the oracle, then a per-pixel
// softmax of cosine similarities.
torch::Tensor refine_oracle(const torch::Tensor& v, const torch::Tensor& r, double tau) {
  const auto bank = oracle::prototypes(v.unsqueeze(0), r.unsqueeze(0));
  const auto& t = bank.t[0];
  auto av = v.to(torch::kFloat64).contiguous();
  const int k = av.size(0), h = av.size(1), w = av.size(2), c = static_cast<int>(t.size());
  auto V = av.accessor<double, 3>();
  auto out = torch::zeros({c, h, w}, torch::kFloat64);
  auto O = out.accessor<double, 3>();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      oracle::Vec px(k);
      for (int d = 0; d < k; ++d) px[d] = V[d][y][x];
      px = oracle::normalized(px);
      std::vector<double> logits(c);
      double mx = -1e300, z = 0;
      for (int m = 0; m < c; ++m) mx = std::max(mx, logits[m] = oracle::dot(t[m], px) / tau);
      for (int m = 0; m < c; ++m) z += std::exp(logits[m] - mx);
      for (int m = 0; m < c; ++m) O[m][y][x] = std::exp(logits[m] - mx) / z;
    }
  return out;
}

}  // namespace

TEST(ShapeSegConfig, ValidationAndModes) {
  auto c = tiny_shape_cfg();
  EXPECT_NO_THROW(c.validate());
  c.adv_weight = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_shape_cfg();
  c.tta_count = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  for (auto m : {WeightMode::Uncertainty, WeightMode::Certainty, WeightMode::Uniform})
    EXPECT_EQ(parse_weight_mode(to_string(m)), m);
  EXPECT_THROW(parse_weight_mode("sometimes"), ConfigError);
  for (auto m : {PredictMode::Raw, PredictMode::Cluster, PredictMode::Refined})
    EXPECT_EQ(parse_predict_mode(to_string(m)), m);
  EXPECT_THROW(parse_predict_mode("best"), ConfigError);
}

TEST(ReferenceMasks, Validation) {
  EXPECT_THROW(ReferenceMaskSet({}), ConfigError);
  EXPECT_THROW(ReferenceMaskSet({torch::full({1, 8, 8}, 0.5)}), ConfigError);
  ReferenceMaskSet refs(synth_reference_masks(3, 64, 64, 1));
  Rng rng(0);
  auto batch = refs.sample(5, 32, 32, true, rng);
  EXPECT_EQ(batch.sizes(), (std::vector<std::int64_t>{5, 1, 32, 32}));
  EXPECT_TRUE(torch::logical_or(batch == 0, batch == 1).all().item<bool>());
}

TEST(ClusterRefine, SingleClusterIsOne) {
  auto v = torch::randn({4, 6, 6}, torch::kFloat64);
  auto r = torch::ones({1, 6, 6}, torch::kFloat64);
  EXPECT_TRUE(torch::equal(cluster_refine(v, r, 0, Temperature(0.3)), torch::ones({6, 6}, torch::kFloat64)));
}

TEST(ClusterRefine, OrthogonalPrototypesClosedForm) {
  // pixel 0 carries (1, 0) and belongs to cluster 0, pixel 1 carries (0, 1) in cluster 1
  auto v = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kFloat64).view({2, 1, 2});
  auto r = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kFloat64).view({2, 1, 2});
  auto p = cluster_refine(v, r, 0, Temperature(1.0));
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0][0].item<double>(), e / (e + 1), 1e-12);
  EXPECT_NEAR(p[0][0].item<double>(), 0.7311, 1e-4);
  EXPECT_NEAR(p[0][1].item<double>(), 1 / (e + 1), 1e-12);
  EXPECT_THROW(cluster_refine(v, r, 2, Temperature(1.0)), ConfigError);
}

TEST(ClusterRefine, MatchesPerPixelOracle) {
  for (int seed = 0; seed < 12; ++seed) {
    torch::manual_seed(seed);
    const int c = 1 + seed % 4;
    auto v = torch::randn({4, 8, 8}, torch::kFloat64);
    v = v / v.norm(2, 0, true);
    auto r = torch::softmax(torch::randn({c, 8, 8}, torch::kFloat64) * 2, 0);
    const double tau = 0.1 + 0.15 * (seed % 5);
    auto got = cluster_refine_all(v, r, Temperature(tau));
    auto want = refine_oracle(v, r, tau);
    EXPECT_LE((got - want).abs().max().item<double>(), 1e-8) << seed;
    EXPECT_LE((got.sum(0) - 1).abs().max().item<double>(), 1e-12) << seed;
  }
}

TEST(Bundle, ClosedForms) {
  auto ones = bundle_from_predictions(torch::ones({5, 4, 4}));
  EXPECT_TRUE(torch::equal(ones.label, torch::ones({4, 4})));
  EXPECT_EQ(ones.uncertainty.abs().max().item<double>(), 0.0);
  EXPECT_EQ(ones.ensemble, 5);

  auto zeros = bundle_from_predictions(torch::zeros({3, 4, 4}));
  EXPECT_TRUE(torch::equal(zeros.label, torch::zeros({4, 4})));
  EXPECT_EQ(zeros.uncertainty.abs().max().item<double>(), 0.0);

  auto half = bundle_from_predictions(torch::full({30, 4, 4}, 0.5));
  EXPECT_TRUE(torch::equal(half.label, torch::zeros({4, 4})));  // strict > 0.5
  EXPECT_NEAR(half.uncertainty.min().item<double>(), std::log(2.0), 1e-12);

  auto pair = bundle_from_predictions(torch::tensor({0.2, 0.8}, torch::kFloat64).view({2, 1, 1}));
  EXPECT_EQ(pair.label.item<float>(), 0.0f);
  const double h02 = -(0.2 * std::log(0.2) + 0.8 * std::log(0.8));
  EXPECT_NEAR(pair.uncertainty.item<double>(), h02, 1e-12);
  EXPECT_NEAR(pair.uncertainty.item<double>(), 0.5004, 1e-4);
}

TEST(Bundle, UncertaintyBoundsOverRandomEnsembles) {
  const double ln2 = std::log(2.0);
  for (int trial = 0; trial < 100; ++trial) {
    torch::manual_seed(trial);
    const int e = 1 + trial % 30;
    auto p = torch::rand({e, 6, 6}, torch::kFloat64);
    // sprinkle exact 0, 1 and 0.5 values
    p = torch::where(torch::rand_like(p) < 0.1, torch::round(p), p);
    p = torch::where(torch::rand_like(p) < 0.05, torch::full_like(p, 0.5), p);
    auto b = bundle_from_predictions(p);
    ASSERT_GE(b.uncertainty.min().item<double>(), 0.0) << trial;
    ASSERT_LE(b.uncertainty.max().item<double>(), ln2 + 1e-9) << trial;
    ASSERT_TRUE(torch::logical_or(b.label == 0, b.label == 1).all().item<bool>());
    // per-pixel oracle of the mean entropy
    auto acc = p.accessor<double, 3>();
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        double u = 0, mean = 0;
        for (int i = 0; i < e; ++i) {
          u += oracle::binary_entropy(acc[i][y][x]);
          mean += acc[i][y][x];
        }
        ASSERT_NEAR(b.uncertainty[y][x].item<double>(), u / e, 1e-12);
        ASSERT_EQ(b.label[y][x].item<float>(), mean / e > 0.5 ? 1.0f : 0.0f);
      }
  }
}

TEST(PseudoLabel, LandmarkSurvivesEveryTransform) {
  AugmentConfig aug;
  for (int e = 0; e < 30; ++e) {
    auto dot = torch::zeros({1, 16, 16});
    dot[0][3][11] = 1.0;
    const auto t = tta_transform(e, aug, 4);
    auto back = tta_inverse(tta_forward(dot.expand({3, 16, 16}).contiguous(), TtaTransform{t.flip, t.rot90, {}}), t);
    EXPECT_EQ(back[0].argmax().item<std::int64_t>(), 3 * 16 + 11) << e;
  }
}

TEST(PseudoLabel, SinglePassEqualsClusterRefine) {
  torch::manual_seed(1);
  auto net = build_embed_net(tiny_net());
  auto img = tiny_images(1)[0];
  AugmentConfig aug;
  auto b = pseudo_label_uncertainty(net, img, 1, 1, aug, Temperature(0.5), 0);
  auto out = embed_images(net, img.unsqueeze(0));
  auto want = cluster_refine(out.v[0], out.r[0], 1, Temperature(0.5)).to(torch::kFloat64);
  EXPECT_LE((b.mean - want).abs().max().item<double>(), 1e-6);

  auto eight = pseudo_label_uncertainty(net, img, 1, 8, aug, Temperature(0.5), 0);
  EXPECT_EQ(eight.ensemble, 8);
  EXPECT_EQ(eight.label.sizes(), (std::vector<std::int64_t>{32, 32}));
  EXPECT_LE(eight.uncertainty.max().item<double>(), std::log(2.0) + 1e-9);
}

// Perfectly separable toy: dense curve references against blank masks.
TEST(Adversarial, DStepSeparatesToyMasks) {
  torch::manual_seed(2);
  auto disc = build_discriminator(DiscriminatorConfig{});
  torch::optim::Adam opt(disc->parameters(), torch::optim::AdamOptions(5e-5));
  ReferenceMaskSet refs(synth_reference_masks(10, 128, 128, 3));
  auto fake = torch::zeros({4, 1, 128, 128});
  double l_d = 0;
  int steps = 0;
  for (; steps < 200; ++steps) {
    Rng rng(steps);
    auto real = refs.sample(4, 128, 128, true, rng);
    auto rl = disc->logits(real), fl = disc->logits(fake);
    auto loss = F::binary_cross_entropy_with_logits(rl, torch::ones_like(rl)) +
                F::binary_cross_entropy_with_logits(fl, torch::zeros_like(fl));
    l_d = loss.item<double>();
    if (l_d < std::log(2.0)) break;
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  EXPECT_LT(l_d, std::log(2.0)) << "after " << steps << " steps";
}

TEST(Adversarial, GStepLowersAdvLossAgainstFrozenDiscriminator) {
  torch::manual_seed(4);
  auto net = build_embed_net(tiny_net());
  auto disc = build_discriminator(tiny_shape_cfg().disc);
  // double precision so a small step is resolvable
  net->to(torch::kFloat64);
  disc->to(torch::kFloat64);
  net->eval();
  disc->eval();
  for (auto& p : disc->parameters()) p.set_requires_grad(false);
  auto x = torch::stack(tiny_images(2)).to(torch::kFloat64);
  auto adv = [&] {
    auto logits = disc->logits(net->forward(x).r.select(1, 0).unsqueeze(1));
    return F::binary_cross_entropy_with_logits(logits, torch::ones_like(logits));
  };
  const auto before_disc = parameter_hash(*disc);
  torch::optim::SGD opt(net->parameters(), torch::optim::SGDOptions(1e-3));
  auto l0 = adv();
  opt.zero_grad();
  l0.backward();
  opt.step();
  torch::NoGradGuard ng;
  const double l1 = adv().item<double>();
  EXPECT_LT(l1, l0.item<double>()) << std::setprecision(17) << l1 << " vs " << l0.item<double>();
  EXPECT_EQ(parameter_hash(*disc), before_disc);
}

TEST(Adversarial, ZeroWeightReducesToRegionStage) {
  auto cfg = tiny_shape_cfg();
  cfg.adv_weight = 0.0;
  auto images = tiny_images(8);
  ReferenceMaskSet refs(synth_reference_masks(4, 32, 32, 1));

  torch::manual_seed(7);
  PretrainSession a(build_embed_net(tiny_net()), cfg.train, images);
  a.run_warmup();
  auto disc = build_discriminator(cfg.disc);
  auto adv = train_shape_guided(a, disc, refs, cfg);

  torch::manual_seed(7);
  PretrainSession b(build_embed_net(tiny_net()), cfg.train, images);
  b.run_warmup();
  auto plain = b.run(cfg.epochs, b.region_weights());

  ASSERT_EQ(adv.trace.size(), plain.size());
  for (std::size_t i = 0; i < plain.size(); ++i) {
    EXPECT_NEAR(adv.trace[i].terms.total, plain[i].terms.total, 1e-6) << i;
    EXPECT_GT(adv.trace[i].terms.disc, 0.0);
  }
  ASSERT_EQ(adv.epochs.size(), 2u);
  for (const auto& ep : adv.epochs) {
    EXPECT_GE(ep.disc_accuracy, 0.0);
    EXPECT_LE(ep.disc_accuracy, 1.0);
    EXPECT_TRUE(std::isfinite(ep.kl));
  }
}

TEST(Adversarial, RejectsOversizedDiscriminatorAndBadChannel) {
  auto cfg = tiny_shape_cfg();
  PretrainSession s(build_embed_net(tiny_net()), cfg.train, tiny_images(4));
  ReferenceMaskSet refs(synth_reference_masks(2, 32, 32, 1));
  auto big = build_discriminator(DiscriminatorConfig{});  // needs 128 px
  EXPECT_THROW(train_shape_guided(s, big, refs, cfg), ConfigError);
  cfg.target_channel = 4;
  auto disc = build_discriminator(cfg.disc);
  EXPECT_THROW(train_shape_guided(s, disc, refs, cfg), ConfigError);
}

TEST(Refiner, LossDecreases) {
  torch::manual_seed(6);
  auto data = synth_dataset({4, 32, 32, SynthKind::Curves, 8});
  std::vector<torch::Tensor> images;
  std::vector<UncertaintyBundle> bundles;
  for (const auto& s : data) {
    images.push_back(s.image);
    // two slightly different "predictions" around the true mask
    auto m = s.mask[0].to(torch::kFloat64);
    bundles.push_back(bundle_from_predictions(torch::stack({m * 0.9 + 0.05, m * 0.8 + 0.1})));
  }
  auto cfg = tiny_shape_cfg();
  cfg.refine_epochs = 15;
  cfg.refine_batch = 2;
  auto net = build_seg_net(tiny_net(), 1);
  auto trace = retrain_refiner(net, images, bundles, cfg);
  ASSERT_EQ(trace.size(), 30u);
  auto mean = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t i = a; i < b; ++i) s += trace[i].terms.total;
    return s / static_cast<double>(b - a);
  };
  EXPECT_LT(mean(24, 30), mean(0, 6));
  EXPECT_THROW(retrain_refiner(net, images, {}, cfg), ConfigError);
}

TEST(Predict, ModesAndCheckpointKinds) {
  const auto dir = temp_dir("predict");
  torch::manual_seed(8);
  auto net = build_embed_net(tiny_net());
  save_checkpoint((dir / "embed.ckpt").string(), *net, {"embed", {{"network", tiny_net()}}});
  auto seg = build_seg_net(tiny_net(), 1);
  save_checkpoint((dir / "seg.ckpt").string(), *seg, {"seg", {{"network", tiny_net()}, {"out_channels", 1}}});
  auto images = tiny_images(2);

  auto raw = predict_segmentation((dir / "embed.ckpt").string(), images, PredictMode::Raw, 2, 0.5);
  auto out = embed_images(net, torch::stack(images));
  for (std::size_t i = 0; i < images.size(); ++i) {
    EXPECT_TRUE(torch::allclose(raw[i].prob, out.r[i][2], 0, 1e-6));
    EXPECT_TRUE(torch::equal(raw[i].mask, (raw[i].prob > 0.5).to(torch::kFloat32)));
  }
  auto clu = predict_segmentation((dir / "embed.ckpt").string(), images, PredictMode::Cluster, 2, 0.5);
  auto ref = predict_segmentation((dir / "seg.ckpt").string(), images, PredictMode::Refined, 0, 0.5);
  for (const auto& preds : {clu, ref})
    for (const auto& p : preds) {
      EXPECT_GE(p.prob.min().item<double>(), 0.0);
      EXPECT_LE(p.prob.max().item<double>(), 1.0);
      EXPECT_TRUE(torch::equal(p.mask, (p.prob > 0.5).to(torch::kFloat32)));
    }
  EXPECT_THROW(predict_segmentation((dir / "embed.ckpt").string(), images, PredictMode::Refined, 0, 0.5), ConfigError);
  EXPECT_THROW(predict_segmentation((dir / "seg.ckpt").string(), images, PredictMode::Raw, 0, 0.5), ConfigError);
  EXPECT_THROW(predict_segmentation((dir / "embed.ckpt").string(), images, PredictMode::Raw, 4, 0.5), ConfigError);
}

TEST(Bundles, RoundTrip) {
  const auto dir = temp_dir("bundles");
  std::vector<UncertaintyBundle> bundles;
  for (int i = 0; i < 3; ++i) bundles.push_back(bundle_from_predictions(torch::rand({4, 8, 8}, torch::kFloat64)));
  save_bundles(dir.string(), {"a", "b", "c"}, bundles);
  std::vector<std::string> ids;
  auto back = load_bundles(dir.string(), &ids);
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "b", "c"}));
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_TRUE(torch::equal(back[i].label.to(torch::kFloat32), bundles[i].label.to(torch::kFloat32)));
    EXPECT_LE((back[i].uncertainty.to(torch::kFloat64) - bundles[i].uncertainty).abs().max().item<double>(), 1e-7);
  }
}

TEST(DensityHistogram, BinsAndKl) {
  std::vector<torch::Tensor> masks{torch::zeros({1, 10, 10}), torch::ones({1, 10, 10})};
  auto h = density_histogram(masks, 10);
  ASSERT_EQ(h.size(), 10u);
  EXPECT_EQ(h[0], 0.5);
  EXPECT_EQ(h[9], 0.5);
  EXPECT_EQ(kl_divergence(h, h), 0.0);
}
