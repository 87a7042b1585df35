#include "clickseg/morphology.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace clickseg {

Components connected_components(std::span<const std::uint8_t> mask, int height, int width) {
  if (mask.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("connected_components: mask size mismatch");
  Components out;
  out.id.assign(mask.size(), -1);
  std::vector<int> stack;
  for (int start = 0; start < static_cast<int>(mask.size()); ++start) {
    if (!mask[start] || out.id[start] >= 0) continue;
    const int label = out.count();
    long long size = 0;
    out.id[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++size;
      const int r = p / width, c = p % width;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= height || cc < 0 || cc >= width) continue;
          const int q = rr * width + cc;
          if (mask[q] && out.id[q] < 0) {
            out.id[q] = label;
            stack.push_back(q);
          }
        }
    }
    out.sizes.push_back(size);
  }
  return out;
}

std::vector<std::uint8_t> flood_fill_equal(std::span<const int> values, int height, int width, Pixel seed) {
  std::vector<std::uint8_t> same(values.size());
  const int target = values[static_cast<std::size_t>(seed.row) * width + seed.col];
  for (std::size_t i = 0; i < values.size(); ++i) same[i] = values[i] == target;
  const Components cc = connected_components(same, height, width);
  const int label = cc.id[static_cast<std::size_t>(seed.row) * width + seed.col];
  std::vector<std::uint8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = cc.id[i] == label;
  return out;
}

namespace {

// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
void distance_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = f[v[k]] == inf ? inf : dq * dq + f[v[k]];
  }
}

}  // namespace

std::vector<double> squared_distance_to_background(std::span<const std::uint8_t> mask, int height, int width) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int ph = height + 2, pw = width + 2;
  std::vector<double> grid(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      grid[static_cast<std::size_t>(r + 1) * pw + c + 1] = mask[static_cast<std::size_t>(r) * width + c] ? inf : 0.0;

  const int longest = std::max(ph, pw);
  std::vector<double> f(longest), d(longest), z(longest + 1);
  std::vector<int> v(longest);
  for (int c = 0; c < pw; ++c) {
    f.resize(ph);
    d.resize(ph);
    for (int r = 0; r < ph; ++r) f[r] = grid[static_cast<std::size_t>(r) * pw + c];
    distance_1d(f, d, v, z);
    for (int r = 0; r < ph; ++r) grid[static_cast<std::size_t>(r) * pw + c] = d[r];
  }
  for (int r = 0; r < ph; ++r) {
    f.resize(pw);
    d.resize(pw);
    for (int c = 0; c < pw; ++c) f[c] = grid[static_cast<std::size_t>(r) * pw + c];
    distance_1d(f, d, v, z);
    for (int c = 0; c < pw; ++c) grid[static_cast<std::size_t>(r) * pw + c] = d[c];
  }
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      out[static_cast<std::size_t>(r) * width + c] = grid[static_cast<std::size_t>(r + 1) * pw + c + 1];
  return out;
}

Pixel interior_point(std::span<const std::uint8_t> component_mask, int height, int width) {
  const auto dist = squared_distance_to_background(component_mask, height, width);
  double best = -1.0;
  Pixel point{-1, -1};
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * width + c;
      if (component_mask[i] && dist[i] > best) {
        best = dist[i];
        point = {r, c};
      }
    }
  if (point.row < 0) throw std::invalid_argument("interior_point: empty component");
  return point;
}

}  // namespace clickseg
