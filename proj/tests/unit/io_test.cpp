#include "ldlearn/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace ldl;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("ldlearn_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Image, PngRoundTripIsExactOnQuantizedValues) {
  const auto dir = temp_dir("png");
  auto img = torch::randint(0, 256, {3, 12, 17}).to(torch::kFloat32) / 255.0;
  write_image((dir / "a.png").string(), img);
  auto back = read_image((dir / "a.png").string());
  EXPECT_TRUE(torch::allclose(back, img, 0, 1e-6));

  auto gray = torch::randint(0, 256, {1, 8, 8}).to(torch::kFloat32) / 255.0;
  write_image((dir / "g.png").string(), gray);
  auto g3 = read_image((dir / "g.png").string());
  EXPECT_EQ(g3.size(0), 3);
  EXPECT_TRUE(torch::allclose(g3[0], gray[0], 0, 1e-6));
  EXPECT_TRUE(torch::equal(g3[1], g3[2]));
}

TEST(Image, MissingAndUndecodable) {
  const auto dir = temp_dir("bad");
  EXPECT_THROW(read_image((dir / "none.png").string()), ConfigError);
  {
    std::ofstream f(dir / "bad.png");
    f << "garbage";
  }
  EXPECT_THROW(read_image((dir / "bad.png").string()), RuntimeFailure);
}

TEST(Mask, RoundTripBinary) {
  const auto dir = temp_dir("mask");
  auto m = (torch::rand({1, 10, 9}) > 0.5).to(torch::kFloat32);
  write_mask((dir / "m.png").string(), m);
  EXPECT_TRUE(torch::equal(read_mask((dir / "m.png").string()), m));
  write_mask((dir / "m2.png").string(), m[0]);
  EXPECT_TRUE(torch::equal(read_mask((dir / "m2.png").string()), m));
}

TEST(Raster, PfmRoundTripIsExact) {
  const auto dir = temp_dir("pfm");
  auto r = torch::randn({7, 13});
  write_raster((dir / "r.pfm").string(), r);
  EXPECT_TRUE(torch::equal(read_raster((dir / "r.pfm").string()), r));
  write_image((dir / "i.png").string(), torch::rand({3, 4, 4}));
  EXPECT_THROW(read_raster((dir / "i.png").string()), RuntimeFailure);
}

TEST(Manifest, ParsesFieldsAndComments) {
  const auto dir = temp_dir("manifest");
  {
    std::ofstream f(dir / "list.txt");
    f << "# comment\n\n"
      << "images/a.png masks/a.png 3,4\n"
      << "images/b.png\r\n"
      << "/abs/c.png 10,2\n";
  }
  auto entries = read_manifest((dir / "list.txt").string());
  ASSERT_EQ(entries.size(), 3u);
  EXPECT_EQ(entries[0].image, (dir / "images/a.png").string());
  EXPECT_EQ(*entries[0].mask, (dir / "masks/a.png").string());
  EXPECT_EQ(*entries[0].landmark, (Point{3, 4}));
  EXPECT_FALSE(entries[1].mask);
  EXPECT_FALSE(entries[1].landmark);
  EXPECT_EQ(entries[2].image, "/abs/c.png");
  EXPECT_FALSE(entries[2].mask);
  EXPECT_EQ(*entries[2].landmark, (Point{10, 2}));
}

TEST(Manifest, RejectsExtraFieldsAndMissingFile) {
  const auto dir = temp_dir("manifest_bad");
  {
    std::ofstream f(dir / "list.txt");
    f << "a.png b.png c.png\n";
  }
  EXPECT_THROW(read_manifest((dir / "list.txt").string()), ConfigError);
  EXPECT_THROW(read_manifest((dir / "nope.txt").string()), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = temp_dir("dataset");
  auto data = synth_dataset({4, 32, 32, SynthKind::DiscCurves, 5});
  const auto manifest = save_dataset(dir.string(), "all.txt", data);
  auto back = load_dataset(manifest);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_TRUE(torch::allclose(back[i].image, data[i].image, 0, 1e-6));
    EXPECT_TRUE(torch::equal(back[i].mask, data[i].mask));
    EXPECT_EQ(back[i].landmark, data[i].landmark);
  }
  // resizing scales the landmark with the image
  LoadOptions opts;
  opts.height = 64;
  opts.width = 64;
  auto big = load_dataset(manifest, opts);
  EXPECT_EQ(big[0].image.sizes(), (std::vector<std::int64_t>{3, 64, 64}));
  EXPECT_NEAR(big[0].landmark->h, 2 * data[0].landmark->h + 0.5, 1.0);
}

TEST(Dataset, EmptyManifestRejected) {
  const auto dir = temp_dir("empty");
  { std::ofstream f(dir / "list.txt"); }
  EXPECT_THROW(load_dataset((dir / "list.txt").string()), ConfigError);
}

TEST(Csv, HeaderAndRows) {
  const auto dir = temp_dir("csv");
  {
    std::ofstream f(dir / "t.csv");
    f << "epoch,loss\n0,1.5\n1,0.75\n";
  }
  auto t = read_csv((dir / "t.csv").string());
  EXPECT_EQ(t.header, (std::vector<std::string>{"epoch", "loss"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[1][1], "0.75");
}
