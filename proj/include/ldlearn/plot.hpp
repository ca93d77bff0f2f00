#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

namespace ldl {

/// Line chart of every numeric column (after `iteration` and `epoch`) of a
/// trace CSV against its first column. Returns false (with a warning) when the
/// file has no plottable data.
bool plot_loss_curves(const std::string& csv_path, const std::string& png_path);

/// Jet-colored heat map of a [H, W] raster with the argmax marked by a cross.
void plot_heatmap(const torch::Tensor& raster, const std::string& png_path, int scale = 4);

/// Image with the mask's foreground tinted red.
void plot_overlay(const torch::Tensor& image, const torch::Tensor& mask, const std::string& png_path, int scale = 4);

struct PlotSummary {
  std::vector<std::string> written;
  std::int64_t warnings = 0;
};

/// Renders everything found under a run directory into <run>/figures:
/// traces/*.csv -> curves, predictions/**/*_similarity.pfm -> heat maps,
/// predictions/**/<id>_mask.png with a sibling <id>_image.png -> overlays.
/// Missing or unreadable artifacts are skipped with a warning.
PlotSummary plot_run(const std::string& run_dir);

}  // namespace ldl
