#include "clickseg/agent.hpp"

#include <algorithm>
#include <cmath>

#include "clickseg/error.hpp"

namespace clickseg {

const char* to_string(AgentStrategy s) {
  switch (s) {
    case AgentStrategy::max_error_center: return "max_error_center";
    case AgentStrategy::random_in_error: return "random_in_error";
    case AgentStrategy::uncertainty_in_error: return "uncertainty_in_error";
    case AgentStrategy::uncertainty_only: return "uncertainty_only";
    case AgentStrategy::random_anywhere: return "random_anywhere";
  }
  return "unknown";
}

AgentStrategy agent_strategy_from_string(const std::string& name) {
  for (auto s : {AgentStrategy::max_error_center, AgentStrategy::random_in_error, AgentStrategy::uncertainty_in_error,
                 AgentStrategy::uncertainty_only, AgentStrategy::random_anywhere})
    if (name == to_string(s)) return s;
  throw Error(ErrorCode::invalid_argument, "unknown agent strategy '" + name + "'");
}

void AgentConfig::validate() const {
  if (!(quantile > 0.0 && quantile < 1.0)) throw Error(ErrorCode::invalid_argument, "agent quantile must lie in (0,1)");
}

std::vector<ErrorComponent> error_components(const std::vector<int>& predicted, const LabelMask& labels,
                                             const Window& region) {
  if (predicted.size() != labels.labels.size()) throw Error(ErrorCode::mismatch, "error_components: size mismatch");
  const int h = region.height, w = region.width;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(region.row + r) * labels.width + region.col + c;
      mask[static_cast<std::size_t>(r) * w + c] = !labels.ignored(i) && predicted[i] != labels.labels[i];
    }
  const Components comps = connected_components(mask, h, w);
  std::vector<ErrorComponent> out(static_cast<std::size_t>(comps.count()));
  for (std::size_t j = 0; j < mask.size(); ++j) {
    const int id = comps.id[j];
    if (id < 0) continue;
    const int r = static_cast<int>(j) / w + region.row, c = static_cast<int>(j) % w + region.col;
    out[id].pixels.push_back(r * labels.width + c);
  }
  // Distance transforms on each component's bounding box grown by one pixel
  // (clipped to the region, whose border counts as background).
  for (int id = 0; id < comps.count(); ++id) {
    auto& comp = out[id];
    comp.size = comps.sizes[id];
    int r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (int flat : comp.pixels) {
      const int r = flat / labels.width - region.row, c = flat % labels.width - region.col;
      r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
    }
    r0 = std::max(0, r0 - 1), c0 = std::max(0, c0 - 1), r1 = std::min(h - 1, r1 + 1), c1 = std::min(w - 1, c1 + 1);
    const int bh = r1 - r0 + 1, bw = c1 - c0 + 1;
    std::vector<std::uint8_t> single(static_cast<std::size_t>(bh) * bw, 0);
    for (int flat : comp.pixels) {
      const int r = flat / labels.width - region.row - r0, c = flat % labels.width - region.col - c0;
      single[static_cast<std::size_t>(r) * bw + c] = 1;
    }
    const Pixel p = interior_point(single, bh, bw);
    comp.interior = {p.row + r0 + region.row, p.col + c0 + region.col};
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.size > b.size; });
  return out;
}

std::vector<ErrorComponent> error_components(const PredictionMap& prediction, const LabelMask& labels) {
  if (prediction.height() != labels.height || prediction.width() != labels.width)
    throw Error(ErrorCode::mismatch, "error_components: shape mismatch");
  return error_components(prediction.argmax(), labels, Window{0, 0, labels.height, labels.width});
}

float quantile_threshold(std::vector<float> values, double q) {
  if (values.empty()) return 0.0F;
  const std::size_t rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  const std::size_t k = std::clamp<std::size_t>(rank, 1, values.size()) - 1;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

AgentDecision sample_click(const Window& region, const std::vector<int>& predicted, const LabelMask& labels,
                           const UncertaintyMap* uncertainty, const AgentConfig& config, std::mt19937_64& rng) {
  config.validate();
  if (region.row < 0 || region.col < 0 || region.row + region.height > labels.height ||
      region.col + region.width > labels.width)
    throw Error(ErrorCode::invalid_argument, "sample_click: region outside the image");
  const bool needs_uncertainty =
      config.strategy == AgentStrategy::uncertainty_in_error || config.strategy == AgentStrategy::uncertainty_only;
  if (needs_uncertainty && (!uncertainty || uncertainty->height != labels.height || uncertainty->width != labels.width))
    throw Error(ErrorCode::invalid_argument, std::string("agent strategy '") + to_string(config.strategy) +
                                                 "' needs an uncertainty map covering the image");

  AgentDecision decision;
  decision.searched = region.area();
  auto is_error = [&](std::size_t i) { return !labels.ignored(i) && predicted[i] != labels.labels[i]; };
  auto emit = [&](int flat) {
    decision.click = ClickAnnotation{flat / labels.width, flat % labels.width, labels.labels[flat],
                                     ClickOrigin::simulated};
  };

  if (config.strategy == AgentStrategy::max_error_center) {
    const auto comps = error_components(predicted, labels, region);
    if (comps.empty()) return decision;
    decision.candidates = comps.front().size;
    decision.component_size = comps.front().size;
    emit(comps.front().interior.row * labels.width + comps.front().interior.col);
    return decision;
  }

  float threshold = 0.0F;
  if (needs_uncertainty) {
    std::vector<float> region_scores;
    region_scores.reserve(static_cast<std::size_t>(region.area()));
    for (int r = region.row; r < region.row + region.height; ++r)
      for (int c = region.col; c < region.col + region.width; ++c) region_scores.push_back(uncertainty->at(r, c));
    threshold = quantile_threshold(std::move(region_scores), config.quantile);
  }
  std::vector<int> candidates;
  for (int r = region.row; r < region.row + region.height; ++r)
    for (int c = region.col; c < region.col + region.width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * labels.width + c;
      bool keep = false;
      switch (config.strategy) {
        case AgentStrategy::random_in_error: keep = is_error(i); break;
        case AgentStrategy::uncertainty_in_error: keep = is_error(i) && uncertainty->scores[i] >= threshold; break;
        case AgentStrategy::uncertainty_only: keep = !labels.ignored(i) && uncertainty->scores[i] >= threshold; break;
        case AgentStrategy::random_anywhere: keep = !labels.ignored(i); break;
        default: break;
      }
      if (keep) candidates.push_back(static_cast<int>(i));
    }
  decision.candidates = static_cast<long long>(candidates.size());
  if (candidates.empty()) return decision;
  const int pick = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
  emit(pick);
  if (is_error(static_cast<std::size_t>(pick))) {
    for (const auto& comp : error_components(predicted, labels, region))
      if (std::binary_search(comp.pixels.begin(), comp.pixels.end(), pick)) decision.component_size = comp.size;
  }
  return decision;
}

}  // namespace clickseg
