#pragma once

#include "ldlearn/augment.hpp"

#include <torch/torch.h>

#include <optional>
#include <string>
#include <vector>

namespace ldl {

/// 8-bit PNG/JPEG -> [3, H, W] float32 in [0, 1]. Grayscale files are replicated to three channels.
torch::Tensor read_image(const std::string& path);
/// Any 8-bit image -> [1, H, W] float32, 1 where the pixel is above 127.
torch::Tensor read_mask(const std::string& path);
/// [C, H, W] in [0, 1] -> 8-bit file (format from the extension).
void write_image(const std::string& path, const torch::Tensor& image);
/// Binary mask ([H, W] or [1, H, W]) -> 0/255 8-bit PNG.
void write_mask(const std::string& path, const torch::Tensor& mask);
/// 32-bit float raster ([H, W]) as a portable float map (.pfm).
void write_raster(const std::string& path, const torch::Tensor& raster);
torch::Tensor read_raster(const std::string& path);

/// One manifest line: whitespace-separated image path, optional mask path and
/// optional "h,w" landmark. Blank lines and lines starting with '#' are skipped.
/// Relative paths are resolved against the manifest's directory.
struct ManifestEntry {
  std::string image;
  std::optional<std::string> mask;
  std::optional<Point> landmark;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

struct LoadOptions {
  bool fov_crop = false;
  int height = 0;  // 0 keeps the file's size
  int width = 0;
};

Dataset load_dataset(const std::string& manifest, const LoadOptions& opts = {});

/// Writes images (and masks) as PNG under `dir` plus a manifest with relative
/// paths. Returns the manifest path.
std::string save_dataset(const std::string& dir, const std::string& manifest_name, const Dataset& data);

/// Reads a CSV file with a header row; values kept as strings.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv(const std::string& path);

}  // namespace ldl
