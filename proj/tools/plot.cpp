#include "plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "clickseg/raster.hpp"

namespace clickseg::tools {

namespace {

constexpr std::array<std::array<float, 3>, 6> kColors{{{0.85F, 0.1F, 0.1F},
                                                      {0.1F, 0.35F, 0.85F},
                                                      {0.1F, 0.6F, 0.2F},
                                                      {0.9F, 0.55F, 0.0F},
                                                      {0.55F, 0.1F, 0.7F},
                                                      {0.3F, 0.3F, 0.3F}}};

void put(RasterImage& img, int r, int c, const std::array<float, 3>& rgb) {
  if (r < 0 || c < 0 || r >= img.height() || c >= img.width()) return;
  for (int k = 0; k < 3; ++k) img.pixels.at(k, r, c) = rgb[k];
}

void line(RasterImage& img, double r0, double c0, double r1, double c1, const std::array<float, 3>& rgb) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(r1 - r0), std::abs(c1 - c0)))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int r = static_cast<int>(std::lround(r0 + t * (r1 - r0)));
    const int c = static_cast<int>(std::lround(c0 + t * (c1 - c0)));
    put(img, r, c, rgb);
    put(img, r + 1, c, rgb);
  }
}

}  // namespace

void plot_curves(const std::filesystem::path& path, const std::vector<Curve>& curves, int width, int height) {
  RasterImage img{Tensor3<float>(3, height, width, 1.0F), ""};
  const int left = 40, right = width - 20, top = 20, bottom = height - 30;
  double lo = 1.0, hi = 0.0;
  std::size_t steps = 1;
  for (const auto& c : curves) {
    for (double v : c.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    steps = std::max(steps, c.values.size() > 1 ? c.values.size() - 1 : 1);
  }
  if (hi <= lo) {
    lo -= 0.05;
    hi += 0.05;
  }
  const std::array<float, 3> black{0, 0, 0}, grey{0.85F, 0.85F, 0.85F};
  for (int g = 0; g <= 4; ++g) {
    const double r = bottom - (bottom - top) * g / 4.0;
    line(img, r, left, r, right, grey);
  }
  line(img, bottom, left, bottom, right, black);
  line(img, top, left, bottom, left, black);
  auto x = [&](std::size_t i) { return left + (right - left) * static_cast<double>(i) / static_cast<double>(steps); };
  auto y = [&](double v) { return bottom - (bottom - top) * (v - lo) / (hi - lo); };
  for (std::size_t i = 0; i <= steps; ++i) line(img, bottom, x(i), bottom + 4, x(i), black);
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& rgb = kColors[k % kColors.size()];
    const auto& v = curves[k].values;
    for (std::size_t i = 1; i < v.size(); ++i) line(img, y(v[i - 1]), x(i - 1), y(v[i]), x(i), rgb);
    // legend swatch
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 14; ++c) put(img, top + 4 + static_cast<int>(k) * 10 + r, right - 20 + c, rgb);
  }
  save_raster(path, img);
}

}  // namespace clickseg::tools
