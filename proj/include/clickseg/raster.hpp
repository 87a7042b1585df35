#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/tensor.hpp"

namespace clickseg {

/// Image with intensities normalized to [0,1], stored channel-major.
struct RasterImage {
  Tensor3<float> pixels;
  std::string resolution_tag;

  int height() const { return pixels.height; }
  int width() const { return pixels.width; }
  int channels() const { return pixels.channels; }
};

/// Label files mark ignored pixels with this value.
inline constexpr int kIgnoreFileValue = 255;

/// Per-pixel class indices. The value `class_count` marks ignored pixels.
struct LabelMask {
  int height = 0;
  int width = 0;
  int class_count = 0;
  std::vector<int> labels;

  LabelMask() = default;
  LabelMask(int h, int w, int n, int fill = 0)
      : height(h), width(w), class_count(n), labels(static_cast<std::size_t>(h) * w, fill) {}

  int ignore_value() const { return class_count; }
  int& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool ignored(std::size_t i) const { return labels[i] == class_count; }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

LabelMask crop(const LabelMask& mask, const Window& window);
RasterImage crop(const RasterImage& image, const Window& window);

/// Throws a validation error naming the first out-of-range label.
void validate(const LabelMask& mask);

// ---------------------------------------------------------------------------
// Tiling

struct Tile {
  int row_index = 0;  ///< position in the grid, top to bottom
  int col_index = 0;  ///< position in the grid, left to right
  Window window;
};

struct TileGrid {
  int tile_size = 0;
  int overlap = 0;
  int image_height = 0;
  int image_width = 0;
  int rows = 0;
  int cols = 0;
  std::vector<Tile> tiles;  ///< row-major

  std::size_t size() const { return tiles.size(); }
};

/// Window start offsets along one axis of length `extent`.
std::vector<int> tile_offsets(int extent, int tile_size, int overlap);

/// Covers a `height` x `width` image with overlapping windows; the last row and
/// column are clamped to the border. Windows shrink to the image when it is
/// smaller than `tile_size`.
TileGrid tile(int height, int width, int tile_size, int overlap);
TileGrid tile(const RasterImage& image, int tile_size, int overlap);

/// Averages overlapping per-tile maps into a full-size map.
Tensor3<float> stitch_average(const TileGrid& grid, const std::vector<Tensor3<float>>& per_tile);

// ---------------------------------------------------------------------------
// File I/O

struct LoadedRaster {
  RasterImage image;
  std::optional<LabelMask> labels;
};

/// Reads a PNG or TIFF raster. When `class_count` > 0 and a sidecar
/// `<stem>.labels.png` exists next to `path`, it is loaded and validated.
LoadedRaster load_raster(const std::filesystem::path& path, int class_count = 0);
LabelMask load_labels(const std::filesystem::path& path, int class_count);

/// 8-bit PNG, or TIFF for a .tif/.tiff extension; values are rounded to the nearest 1/255 step.
void save_raster(const std::filesystem::path& path, const RasterImage& image);
/// 8-bit single-channel index PNG; ignored pixels are written as kIgnoreFileValue.
void save_labels(const std::filesystem::path& path, const LabelMask& mask);

/// Bilinear resampling with pixel-center alignment (no prefiltering).
RasterImage resample_bilinear(const RasterImage& image, int height, int width);
/// Nearest-neighbour resampling for label rasters.
LabelMask resample_nearest(const LabelMask& mask, int height, int width);

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the synthetic rooftop / land-cover generator.
struct ToyConfig {
  int height = 64;
  int width = 64;
  int class_count = 2;      ///< 2 (background/building) or 6 (land cover)
  int count = 1;            ///< number of images
  double density = 0.25;    ///< target fraction of building pixels
  double noise = 0.04;      ///< per-pixel gaussian noise std
  double ambiguity = 0.3;   ///< fraction of roofs / paved areas drawn with the shared grey palette
  bool domain_shift = false;
  double shift = 0.04;      ///< minimum per-channel mean change of the shifted palette
  bool sparse = false;      ///< lifts the 1 % minimum class share
};

/// Deterministic for a fixed seed. The shifted variant reuses the geometry of
/// the source variant for the same seed and alters palette and texture.
std::vector<std::pair<RasterImage, LabelMask>> generate_toy(std::uint64_t seed, const ToyConfig& config);

ToyConfig load_toy_config(const std::filesystem::path& path);
void save_toy_config(const std::filesystem::path& path, const ToyConfig& config);

}  // namespace clickseg
