#pragma once

#include <vector>

#include "clickseg/prediction.hpp"
#include "clickseg/raster.hpp"

namespace clickseg {

struct IouResult {
  double mean = 0.0;
  std::vector<double> per_class;  ///< NaN for classes absent from both prediction and labels
};

/// Intersection over union from the argmax prediction; ignored pixels excluded.
IouResult iou(const std::vector<int>& predicted, const LabelMask& labels);
IouResult iou(const PredictionMap& prediction, const LabelMask& labels);

/// Number of non-ignored pixels whose argmax differs from the label.
long long misclassification_count(const PredictionMap& prediction, const LabelMask& labels);
long long misclassification_count(const std::vector<int>& predicted, const LabelMask& labels);

/// Trapezoid area under a curve sampled at unit budget steps.
double curve_area(const std::vector<double>& values);

struct RankTest {
  int n = 0;               ///< non-zero differences used
  double statistic = 0.0;  ///< W+ (sum of ranks of positive differences)
  double p_value = 1.0;    ///< P(W+ >= statistic) under the null
};

/// Exact one-sided Wilcoxon signed-rank test of H1: differences tend to be
/// positive. Zeros are dropped; tied magnitudes get average ranks.
RankTest wilcoxon_signed_rank_greater(const std::vector<double>& differences);

}  // namespace clickseg
