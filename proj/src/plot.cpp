#include "ldlearn/plot.hpp"

#include "ldlearn/common.hpp"
#include "ldlearn/io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>

namespace fs = std::filesystem;

namespace ldl {

namespace {

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},  {40, 39, 214},
                               {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

void write_png(const std::string& path, const cv::Mat& m) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  if (!cv::imwrite(path, m)) throw RuntimeFailure("cannot write figure " + path);
}

double parse_cell(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    return used == s.size() ? v : std::numeric_limits<double>::quiet_NaN();
  } catch (const std::exception&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

std::string format_value(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

}  // namespace

bool plot_loss_curves(const std::string& csv_path, const std::string& png_path) {
  const auto table = read_csv(csv_path);
  if (table.header.empty() || table.rows.empty()) {
    warn("plot: no rows in " + csv_path);
    return false;
  }
  std::vector<std::size_t> columns;
  for (std::size_t c = 1; c < table.header.size(); ++c)
    if (table.header[c] != "epoch" && table.header[c] != "iteration") columns.push_back(c);
  if (columns.empty()) {
    warn("plot: no value columns in " + csv_path);
    return false;
  }
  const int panel_h = 140, width = 640, left = 70, right = 15, top = 22, bottom = 18;
  cv::Mat canvas(panel_h * static_cast<int>(columns.size()), width, CV_8UC3, cv::Scalar(255, 255, 255));
  std::vector<double> xs;
  for (const auto& row : table.rows) xs.push_back(row.empty() ? std::nan("") : parse_cell(row[0]));
  const auto [xmin_it, xmax_it] = std::minmax_element(xs.begin(), xs.end());
  double xmin = *xmin_it, xmax = *xmax_it;
  if (!(xmax > xmin)) xmax = xmin + 1.0;

  for (std::size_t k = 0; k < columns.size(); ++k) {
    const int y0 = static_cast<int>(k) * panel_h;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      if (columns[k] >= table.rows[r].size()) continue;
      const double y = parse_cell(table.rows[r][columns[k]]);
      if (std::isfinite(y) && std::isfinite(xs[r])) pts.emplace_back(xs[r], y);
    }
    cv::rectangle(canvas, {left, y0 + top}, {width - right, y0 + panel_h - bottom}, cv::Scalar(200, 200, 200));
    cv::putText(canvas, table.header[columns[k]], {left, y0 + 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
                cv::LINE_AA);
    if (pts.empty()) continue;
    double ymin = pts[0].second, ymax = pts[0].second;
    for (const auto& p : pts) {
      ymin = std::min(ymin, p.second);
      ymax = std::max(ymax, p.second);
    }
    if (!(ymax > ymin)) ymax = ymin + 1.0;
    auto to_px = [&](const std::pair<double, double>& p) {
      const double fx = (p.first - xmin) / (xmax - xmin), fy = (p.second - ymin) / (ymax - ymin);
      return cv::Point(left + static_cast<int>(std::lround(fx * (width - left - right))),
                       y0 + panel_h - bottom - static_cast<int>(std::lround(fy * (panel_h - top - bottom))));
    };
    const auto color = kPalette[k % std::size(kPalette)];
    for (std::size_t i = 1; i < pts.size(); ++i) cv::line(canvas, to_px(pts[i - 1]), to_px(pts[i]), color, 1, cv::LINE_AA);
    if (pts.size() == 1) cv::circle(canvas, to_px(pts[0]), 2, color, cv::FILLED);
    cv::putText(canvas, format_value(ymax), {4, y0 + top + 8}, cv::FONT_HERSHEY_SIMPLEX, 0.35, {80, 80, 80}, 1,
                cv::LINE_AA);
    cv::putText(canvas, format_value(ymin), {4, y0 + panel_h - bottom}, cv::FONT_HERSHEY_SIMPLEX, 0.35, {80, 80, 80},
                1, cv::LINE_AA);
  }
  write_png(png_path, canvas);
  return true;
}

void plot_heatmap(const torch::Tensor& raster, const std::string& png_path, int scale) {
  auto t = raster.detach().cpu().to(torch::kFloat32).contiguous();
  TORCH_CHECK(t.dim() == 2, "plot_heatmap expects [H, W]");
  const int h = static_cast<int>(t.size(0)), w = static_cast<int>(t.size(1));
  const double lo = t.min().item<double>(), hi = t.max().item<double>();
  auto norm = hi > lo ? (t - lo) / (hi - lo) : torch::zeros_like(t);
  auto bytes = norm.mul(255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat gray(h, w, CV_8UC1, bytes.data_ptr<std::uint8_t>()), color, big;
  cv::applyColorMap(gray, color, cv::COLORMAP_JET);
  cv::resize(color, big, {w * scale, h * scale}, 0, 0, cv::INTER_NEAREST);
  const auto flat = t.argmax().item<std::int64_t>();  // first maximum in row-major order
  const cv::Point peak(static_cast<int>(flat % w) * scale + scale / 2, static_cast<int>(flat / w) * scale + scale / 2);
  cv::drawMarker(big, peak, {255, 255, 255}, cv::MARKER_CROSS, 4 * scale, 2);
  write_png(png_path, big);
}

void plot_overlay(const torch::Tensor& image, const torch::Tensor& mask, const std::string& png_path, int scale) {
  auto img = image.detach().cpu().to(torch::kFloat32);
  auto m = (mask.detach().cpu().squeeze() > 0.5).to(torch::kFloat32);
  TORCH_CHECK(img.dim() == 3 && img.size(0) == 3 && m.dim() == 2 && m.size(0) == img.size(1) && m.size(1) == img.size(2),
              "plot_overlay expects a [3, H, W] image and a matching mask");
  auto red = torch::zeros_like(img);
  red[0] = 1.0;
  auto blended = img * (1.0 - 0.5 * m) + red * (0.5 * m);
  auto bytes = blended.clamp(0, 1).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  const int h = static_cast<int>(img.size(1)), w = static_cast<int>(img.size(2));
  cv::Mat rgb(h, w, CV_8UC3, bytes.data_ptr<std::uint8_t>()), bgr, big;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  cv::resize(bgr, big, {w * scale, h * scale}, 0, 0, cv::INTER_NEAREST);
  write_png(png_path, big);
}

PlotSummary plot_run(const std::string& run_dir) {
  PlotSummary s;
  const auto warnings_before = warning_count();
  const fs::path root(run_dir), figures = root / "figures";
  auto attempt = [&](const fs::path& src, const std::function<bool()>& fn, const fs::path& out) {
    try {
      if (fn()) s.written.push_back(out.string());
    } catch (const std::exception& e) {
      warn("plot: skipping " + src.string() + ": " + e.what());
    }
  };

  const auto traces = root / "traces";
  std::vector<fs::path> csvs;
  if (fs::is_directory(traces)) {
    for (const auto& e : fs::directory_iterator(traces))
      if (e.path().extension() == ".csv") csvs.push_back(e.path());
  } else {
    warn("plot: no traces directory in " + run_dir);
  }
  std::sort(csvs.begin(), csvs.end());
  for (const auto& p : csvs) {
    const auto out = figures / (p.stem().string() + ".png");
    attempt(p, [&] { return plot_loss_curves(p.string(), out.string()); }, out);
  }

  const auto preds = root / "predictions";
  std::vector<fs::path> rasters, masks;
  if (fs::is_directory(preds)) {
    for (const auto& e : fs::recursive_directory_iterator(preds)) {
      const auto name = e.path().filename().string();
      if (name.ends_with("_similarity.pfm")) rasters.push_back(e.path());
      if (name.ends_with("_mask.png")) masks.push_back(e.path());
    }
  } else {
    warn("plot: no predictions directory in " + run_dir);
  }
  std::sort(rasters.begin(), rasters.end());
  std::sort(masks.begin(), masks.end());
  auto relative_name = [&](const fs::path& p, const std::string& suffix_from, const std::string& suffix_to) {
    auto rel = fs::relative(p, preds).string();
    std::replace(rel.begin(), rel.end(), '/', '_');
    return rel.substr(0, rel.size() - suffix_from.size()) + suffix_to;
  };
  for (const auto& p : rasters) {
    const auto out = figures / relative_name(p, "_similarity.pfm", "_heatmap.png");
    attempt(p, [&] {
      plot_heatmap(read_raster(p.string()), out.string());
      return true;
    }, out);
  }
  for (const auto& p : masks) {
    const auto name = p.filename().string();
    const auto image = p.parent_path() / (name.substr(0, name.size() - 9) + "_image.png");
    if (!fs::exists(image)) {
      warn("plot: no source image next to " + p.string());
      continue;
    }
    const auto out = figures / relative_name(p, "_mask.png", "_overlay.png");
    attempt(p, [&] {
      plot_overlay(read_image(image.string()), read_mask(p.string()), out.string());
      return true;
    }, out);
  }
  s.warnings = warning_count() - warnings_before;
  return s;
}

}  // namespace ldl
