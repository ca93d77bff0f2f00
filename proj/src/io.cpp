#include "ldlearn/io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;

namespace ldl {

namespace {

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

cv::Mat imread_or_throw(const std::string& path, int flags) {
  if (!fs::exists(path)) throw ConfigError("file not found: " + path);
  cv::Mat m = cv::imread(path, flags);
  if (m.empty()) throw RuntimeFailure("cannot decode image: " + path);
  return m;
}

}  // namespace

torch::Tensor read_image(const std::string& path) {
  cv::Mat m = imread_or_throw(path, cv::IMREAD_COLOR);
  cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(m.data, {m.rows, m.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor read_mask(const std::string& path) {
  cv::Mat m = imread_or_throw(path, cv::IMREAD_GRAYSCALE);
  auto t = torch::from_blob(m.data, {1, m.rows, m.cols}, torch::kUInt8).clone();
  return (t > 127).to(torch::kFloat32);
}

void write_image(const std::string& path, const torch::Tensor& image) {
  auto t = image.detach().cpu().to(torch::kFloat32);
  if (t.dim() == 2) t = t.unsqueeze(0);
  TORCH_CHECK(t.dim() == 3 && (t.size(0) == 1 || t.size(0) == 3), "write_image expects [1|3, H, W]");
  auto bytes = t.clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  const int h = static_cast<int>(bytes.size(0)), w = static_cast<int>(bytes.size(1));
  cv::Mat m(h, w, t.size(0) == 3 ? CV_8UC3 : CV_8UC1, bytes.data_ptr<std::uint8_t>());
  cv::Mat out;
  if (t.size(0) == 3)
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  else
    out = m.clone();
  ensure_parent(path);
  if (!cv::imwrite(path, out)) throw RuntimeFailure("cannot write image: " + path);
}

void write_mask(const std::string& path, const torch::Tensor& mask) {
  auto t = mask.detach().cpu();
  if (t.dim() == 3) t = t.squeeze(0);
  write_image(path, (t > 0.5).to(torch::kFloat32));
}

void write_raster(const std::string& path, const torch::Tensor& raster) {
  auto t = raster.detach().cpu().to(torch::kFloat32).contiguous();
  if (t.dim() == 3) t = t.squeeze(0);
  TORCH_CHECK(t.dim() == 2, "write_raster expects [H, W]");
  cv::Mat m(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32FC1, t.data_ptr<float>());
  ensure_parent(path);
  if (!cv::imwrite(path, m)) throw RuntimeFailure("cannot write raster: " + path);
}

torch::Tensor read_raster(const std::string& path) {
  cv::Mat m = imread_or_throw(path, cv::IMREAD_UNCHANGED);
  if (m.type() != CV_32FC1) throw RuntimeFailure("not a single-channel float raster: " + path);
  return torch::from_blob(m.data, {m.rows, m.cols}, torch::kFloat32).clone();
}

// ---------------------------------------------------------------------------

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("manifest not found: " + path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&base](const std::string& p) {
    fs::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
  };
  static const std::regex kLandmark(R"(^(\d+),(\d+)$)");
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream tokens(line);
    std::vector<std::string> parts;
    for (std::string tok; tokens >> tok;) parts.push_back(tok);
    if (parts.empty() || parts[0][0] == '#') continue;
    ManifestEntry e;
    e.image = resolve(parts[0]);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      std::smatch m;
      if (std::regex_match(parts[i], m, kLandmark)) {
        e.landmark = Point{std::stoi(m[1]), std::stoi(m[2])};
      } else if (!e.mask && !e.landmark) {
        e.mask = resolve(parts[i]);
      } else {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": unexpected field '" + parts[i] + "'");
      }
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write manifest: " + path);
  for (const auto& e : entries) {
    out << e.image;
    if (e.mask) out << ' ' << *e.mask;
    if (e.landmark) out << ' ' << e.landmark->h << ',' << e.landmark->w;
    out << '\n';
  }
}

Dataset load_dataset(const std::string& manifest, const LoadOptions& opts) {
  Dataset data;
  for (const auto& e : read_manifest(manifest)) {
    Sample s;
    s.id = fs::path(e.image).stem().string();
    auto image = read_image(e.image);
    torch::Tensor mask = e.mask ? read_mask(*e.mask) : torch::Tensor();
    if (mask.defined() && (mask.size(1) != image.size(1) || mask.size(2) != image.size(2)))
      throw ConfigError("mask size differs from image size: " + *e.mask);
    const int h = static_cast<int>(image.size(1)), w = static_cast<int>(image.size(2));
    Box box{0, 0, h, w};
    if (opts.fov_crop) {
      if (auto b = fov_bbox(image))
        box = *b;
      else
        warn("fov_crop: no pixel above threshold in " + e.image + ", keeping the full frame");
    }
    const int out_h = opts.height > 0 ? opts.height : box.height;
    const int out_w = opts.width > 0 ? opts.width : box.width;
    auto crop = [&](const torch::Tensor& t) {
      return t.slice(1, box.top, box.top + box.height).slice(2, box.left, box.left + box.width);
    };
    s.image = resize_bilinear(crop(image), out_h, out_w);
    if (mask.defined()) s.mask = (resize_bilinear(crop(mask), out_h, out_w) > 0.5).to(torch::kFloat32);
    if (e.landmark) {
      const double sh = static_cast<double>(out_h) / box.height, sw = static_cast<double>(out_w) / box.width;
      s.landmark = Point{static_cast<int>(std::lround((e.landmark->h - box.top + 0.5) * sh - 0.5)),
                         static_cast<int>(std::lround((e.landmark->w - box.left + 0.5) * sw - 0.5))};
    }
    data.push_back(std::move(s));
  }
  if (data.empty()) throw ConfigError("manifest lists no images: " + manifest);
  return data;
}

std::string save_dataset(const std::string& dir, const std::string& manifest_name, const Dataset& data) {
  fs::create_directories(fs::path(dir) / "images");
  std::vector<ManifestEntry> entries;
  for (const auto& s : data) {
    ManifestEntry e;
    e.image = "images/" + s.id + ".png";
    write_image((fs::path(dir) / e.image).string(), s.image);
    if (s.mask.defined()) {
      fs::create_directories(fs::path(dir) / "masks");
      e.mask = "masks/" + s.id + ".png";
      write_mask((fs::path(dir) / *e.mask).string(), s.mask);
    }
    e.landmark = s.landmark;
    entries.push_back(e);
  }
  const auto manifest = (fs::path(dir) / manifest_name).string();
  write_manifest(manifest, entries);
  return manifest;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("csv not found: " + path);
  CsvTable table;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
  };
  if (std::getline(in, line)) table.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) table.rows.push_back(split(line));
  return table;
}

}  // namespace ldl
