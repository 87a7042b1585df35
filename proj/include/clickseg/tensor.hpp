#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clickseg {

/// Planar channel-major (C x H x W) dense array.
template <typename T>
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  T& at(int c, int r, int col) { return data[c * plane() + static_cast<std::size_t>(r) * width + col]; }
  const T& at(int c, int r, int col) const {
    return data[c * plane() + static_cast<std::size_t>(r) * width + col];
  }

  std::span<T> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const { return {data.data() + c * plane(), plane()}; }

  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  friend bool operator==(const Tensor3&, const Tensor3&) = default;
};

/// Rectangular pixel region; `row`/`col` is the top-left corner.
struct Window {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  bool contains(int r, int c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
  long long area() const { return static_cast<long long>(height) * width; }

  friend bool operator==(const Window&, const Window&) = default;
};

/// Copies `window` out of every channel of `src`.
template <typename T>
Tensor3<T> crop(const Tensor3<T>& src, const Window& window) {
  Tensor3<T> out(src.channels, window.height, window.width);
  for (int c = 0; c < src.channels; ++c)
    for (int r = 0; r < window.height; ++r)
      for (int q = 0; q < window.width; ++q)
        out.at(c, r, q) = src.at(c, window.row + r, window.col + q);
  return out;
}

/// Writes `patch` into `dst` at the window's position.
template <typename T>
void paste(Tensor3<T>& dst, const Tensor3<T>& patch, const Window& window) {
  if (patch.channels != dst.channels || patch.height != window.height || patch.width != window.width)
    throw std::invalid_argument("paste: patch does not match window");
  for (int c = 0; c < dst.channels; ++c)
    for (int r = 0; r < window.height; ++r)
      for (int q = 0; q < window.width; ++q)
        dst.at(c, window.row + r, window.col + q) = patch.at(c, r, q);
}

/// Stacks the channels of `a` then `b` (same spatial size).
template <typename T>
Tensor3<T> concat_channels(const Tensor3<T>& a, const Tensor3<T>& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("concat_channels: spatial size mismatch");
  Tensor3<T> out(a.channels + b.channels, a.height, a.width);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

}  // namespace clickseg
