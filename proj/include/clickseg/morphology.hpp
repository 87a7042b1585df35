#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace clickseg {

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Labels 8-connected foreground components of a binary mask.
/// Returns per-pixel component ids (-1 for background) and their sizes.
struct Components {
  std::vector<int> id;
  std::vector<long long> sizes;
  int count() const { return static_cast<int>(sizes.size()); }
};

Components connected_components(std::span<const std::uint8_t> mask, int height, int width);

/// Pixels 8-connected to `seed` that share its value in `values`.
std::vector<std::uint8_t> flood_fill_equal(std::span<const int> values, int height, int width, Pixel seed);

/// Exact squared Euclidean distance from each pixel to the nearest pixel
/// where `mask` is zero. Pixels outside the image count as zero, so a
/// component touching the border is measured against the border too.
std::vector<double> squared_distance_to_background(std::span<const std::uint8_t> mask, int height, int width);

/// Point of the component farthest from its boundary; ties go to the first
/// pixel in row-major order.
Pixel interior_point(std::span<const std::uint8_t> component_mask, int height, int width);

}  // namespace clickseg
