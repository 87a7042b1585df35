#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "clickseg/raster.hpp"

namespace testsupport {

/// Directory holding the pretrained fixture checkpoint (set by CMake).
inline std::filesystem::path fixture_dir() { return CLICKSEG_FIXTURE_DIR; }
inline std::filesystem::path fixture_checkpoint() { return fixture_dir() / "toy.ckpt"; }
inline std::filesystem::path fixture_confidnet() { return fixture_dir() / "toy.ckpt.confidnet"; }

/// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::path(CLICKSEG_SCRATCH_DIR) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline clickseg::RasterImage random_image(int c, int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0F, 1.0F);
  clickseg::RasterImage img{clickseg::Tensor3<float>(c, h, w), "test"};
  for (auto& v : img.pixels.data) v = u(rng);
  return img;
}

inline clickseg::LabelMask random_labels(int h, int w, int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, n - 1);
  clickseg::LabelMask m(h, w, n);
  for (auto& v : m.labels) v = u(rng);
  return m;
}

}  // namespace testsupport
