#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "clickseg/annotation.hpp"
#include "clickseg/morphology.hpp"
#include "clickseg/prediction.hpp"
#include "clickseg/raster.hpp"

namespace clickseg {

/// How the simulated annotator picks its click. `random_anywhere` is the
/// unconstrained uniform baseline for `uncertainty_only`.
enum class AgentStrategy { max_error_center, random_in_error, uncertainty_in_error, uncertainty_only, random_anywhere };

const char* to_string(AgentStrategy s);
AgentStrategy agent_strategy_from_string(const std::string& name);

struct AgentConfig {
  AgentStrategy strategy = AgentStrategy::max_error_center;
  double quantile = 0.9;  ///< uncertainty threshold quantile over the region
  std::uint64_t seed = 3;

  void validate() const;
};

struct ErrorComponent {
  std::vector<int> pixels;  ///< flat image indices, row-major
  long long size = 0;
  Pixel interior;           ///< image coordinates
};

/// 8-connected misclassified regions inside `region`, largest first
/// (ties keep the order of their first pixel).
std::vector<ErrorComponent> error_components(const std::vector<int>& predicted, const LabelMask& labels,
                                             const Window& region);
std::vector<ErrorComponent> error_components(const PredictionMap& prediction, const LabelMask& labels);

struct AgentDecision {
  std::optional<ClickAnnotation> click;  ///< empty when no candidate pixel exists
  long long candidates = 0;              ///< size of the set the click was drawn from
  long long searched = 0;                ///< pixels inspected (region area)
  long long component_size = 0;          ///< error component containing the click (0 if none)
};

/// Draws one simulated click inside `region`. Label always comes from ground truth.
/// `uncertainty` is required by the uncertainty strategies.
AgentDecision sample_click(const Window& region, const std::vector<int>& predicted, const LabelMask& labels,
                           const UncertaintyMap* uncertainty, const AgentConfig& config, std::mt19937_64& rng);

/// Value at the nearest-rank `q` quantile of `values`.
float quantile_threshold(std::vector<float> values, double q);

}  // namespace clickseg
