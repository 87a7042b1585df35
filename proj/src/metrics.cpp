#include "clickseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "clickseg/error.hpp"

namespace clickseg {

IouResult iou(const std::vector<int>& predicted, const LabelMask& labels) {
  if (predicted.size() != labels.labels.size()) throw Error(ErrorCode::mismatch, "iou: size mismatch");
  const int n = labels.class_count;
  std::vector<long long> inter(n, 0), uni(n, 0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (labels.ignored(i)) continue;
    const int p = predicted[i], y = labels.labels[i];
    if (p == y) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[y];
    }
  }
  IouResult r;
  r.per_class.assign(n, std::numeric_limits<double>::quiet_NaN());
  int present = 0;
  for (int k = 0; k < n; ++k) {
    if (uni[k] == 0) continue;
    r.per_class[k] = static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
    r.mean += r.per_class[k];
    ++present;
  }
  r.mean = present ? r.mean / present : 1.0;
  return r;
}

IouResult iou(const PredictionMap& prediction, const LabelMask& labels) {
  if (prediction.class_count() != labels.class_count) throw Error(ErrorCode::mismatch, "iou: class count mismatch");
  return iou(prediction.argmax(), labels);
}

long long misclassification_count(const std::vector<int>& predicted, const LabelMask& labels) {
  if (predicted.size() != labels.labels.size()) throw Error(ErrorCode::mismatch, "misclassification_count: size mismatch");
  long long wrong = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) wrong += !labels.ignored(i) && predicted[i] != labels.labels[i];
  return wrong;
}

long long misclassification_count(const PredictionMap& prediction, const LabelMask& labels) {
  if (prediction.height() != labels.height || prediction.width() != labels.width)
    throw Error(ErrorCode::mismatch, "misclassification_count: shape mismatch");
  return misclassification_count(prediction.argmax(), labels);
}

double curve_area(const std::vector<double>& values) {
  double area = 0.0;
  for (std::size_t i = 1; i < values.size(); ++i) area += 0.5 * (values[i - 1] + values[i]);
  return area;
}

RankTest wilcoxon_signed_rank_greater(const std::vector<double>& differences) {
  std::vector<double> d;
  for (double x : differences)
    if (x != 0.0) d.push_back(x);
  RankTest out;
  out.n = static_cast<int>(d.size());
  if (d.empty()) return out;

  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  // Doubled ranks keep average ranks integral.
  std::vector<int> rank2(d.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const int r2 = static_cast<int>(i + j + 2);  // 2 * mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    i = j + 1;
  }
  int observed2 = 0, total2 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    total2 += rank2[i];
    if (d[i] > 0) observed2 += rank2[i];
  }
  // Null distribution: each rank enters W+ independently with probability 1/2.
  std::vector<double> dist(total2 + 1, 0.0);
  dist[0] = 1.0;
  int reach = 0;
  for (int r2 : rank2) {
    for (int s = reach; s >= 0; --s)
      if (dist[s] != 0.0) dist[s + r2] += dist[s];
    reach += r2;
    for (int s = 0; s <= reach; ++s) dist[s] *= 0.5;
  }
  double p = 0.0;
  for (int s = observed2; s <= total2; ++s) p += dist[s];
  out.statistic = observed2 / 2.0;
  out.p_value = std::min(1.0, p);
  return out;
}

}  // namespace clickseg
