#pragma once

#include <string>
#include <vector>

#include "clickseg/tensor.hpp"

namespace clickseg {

/// Per-pixel class probabilities (N x H x W, each pixel a simplex).
struct PredictionMap {
  Tensor3<float> probabilities;
  bool frozen = false;  ///< set on the initial prediction used as regularization anchor

  int class_count() const { return probabilities.channels; }
  int height() const { return probabilities.height; }
  int width() const { return probabilities.width; }

  /// Argmax class per pixel, row-major; ties resolve to the lowest class.
  std::vector<int> argmax() const;
};

/// Per-pixel uncertainty, higher means more uncertain.
struct UncertaintyMap {
  int height = 0;
  int width = 0;
  std::vector<float> scores;
  std::string method;
  double wall_time = 0.0;  ///< seconds, including the forward passes the method needs

  float at(int r, int c) const { return scores[static_cast<std::size_t>(r) * width + c]; }
};

}  // namespace clickseg
