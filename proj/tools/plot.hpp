#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace clickseg::tools {

struct Curve {
  std::string label;
  std::vector<double> values;  ///< IoU after 0..budget clicks
};

/// Line chart of IoU against budget as an RGB PNG. The y axis spans the data range.
void plot_curves(const std::filesystem::path& path, const std::vector<Curve>& curves, int width = 640, int height = 400);

}  // namespace clickseg::tools
