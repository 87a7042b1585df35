#include "clickseg/active_query.hpp"

#include <algorithm>
#include <numeric>

#include "clickseg/error.hpp"

namespace clickseg {

std::vector<PatchQuery> score_patches(const UncertaintyMap& uncertainty, const TileGrid& grid) {
  if (uncertainty.height != grid.image_height || uncertainty.width != grid.image_width)
    throw Error(ErrorCode::mismatch, "score_patches: uncertainty map does not cover the grid");
  std::vector<PatchQuery> out;
  out.reserve(grid.size());
  for (std::size_t t = 0; t < grid.size(); ++t) {
    const Window& w = grid.tiles[t].window;
    double sum = 0.0;
    for (int r = w.row; r < w.row + w.height; ++r)
      for (int c = w.col; c < w.col + w.width; ++c) sum += uncertainty.at(r, c);
    out.push_back({static_cast<int>(t), w, sum / static_cast<double>(w.area()), 0, PatchStatus::pending});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i) + 1;
  return out;
}

const char* to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::random: return "random";
    case StrategyKind::active: return "active";
    case StrategyKind::whole_image_oracle: return "whole_image_oracle";
  }
  return "unknown";
}

StrategyKind strategy_kind_from_string(const std::string& name) {
  for (auto k : {StrategyKind::random, StrategyKind::active, StrategyKind::whole_image_oracle})
    if (name == to_string(k)) return k;
  throw Error(ErrorCode::invalid_argument, "unknown strategy '" + name + "'");
}

void StrategyConfig::validate() const {
  if ((kind == StrategyKind::active) != acquisition.has_value())
    throw Error(ErrorCode::invalid_argument, "an acquisition method is required exactly for the active strategy");
}

QueryCampaign::QueryCampaign(TileGrid grid, StrategyConfig strategy)
    : grid_(std::move(grid)), strategy_(strategy), rng_(strategy.seed) {
  strategy_.validate();
  for (std::size_t t = 0; t < grid_.size(); ++t)
    patches_.push_back({static_cast<int>(t), grid_.tiles[t].window, 0.0, static_cast<int>(t) + 1, PatchStatus::pending});
}

void QueryCampaign::set_scores(const std::vector<PatchQuery>& scored) {
  if (scored.size() != patches_.size()) throw Error(ErrorCode::mismatch, "set_scores: wrong patch count");
  for (const auto& q : scored) {
    patches_.at(q.index).score = q.score;
    patches_.at(q.index).rank = q.rank;
  }
  scored_ = true;
}

int QueryCampaign::pending_count() const {
  return static_cast<int>(std::count_if(patches_.begin(), patches_.end(),
                                        [](const auto& p) { return p.status == PatchStatus::pending; }));
}

std::vector<PatchQuery> QueryCampaign::top_pending(int k) const {
  std::vector<PatchQuery> pending;
  for (const auto& p : patches_)
    if (p.status == PatchStatus::pending) pending.push_back(p);
  std::sort(pending.begin(), pending.end(), [](const auto& a, const auto& b) { return a.rank < b.rank; });
  if (k >= 0 && static_cast<std::size_t>(k) < pending.size()) pending.resize(static_cast<std::size_t>(k));
  return pending;
}

QueryTarget QueryCampaign::next_query() {
  QueryTarget target;
  if (strategy_.kind == StrategyKind::whole_image_oracle) {
    target.region = Window{0, 0, grid_.image_height, grid_.image_width};
    target.search_space = target.region.area();
    search_log_.push_back(target.search_space);
    return target;
  }
  std::vector<int> pending;
  for (const auto& p : patches_)
    if (p.status == PatchStatus::pending) pending.push_back(p.index);
  if (pending.empty()) throw Error(ErrorCode::exhausted, "campaign exhausted: every patch is annotated");
  int chosen = pending.front();
  if (strategy_.kind == StrategyKind::random) {
    chosen = pending[std::uniform_int_distribution<std::size_t>(0, pending.size() - 1)(rng_)];
  } else {
    if (!scored_) throw Error(ErrorCode::invalid_argument, "active strategy queried before scores were set");
    for (int idx : pending)
      if (patches_[idx].rank < patches_[chosen].rank) chosen = idx;
  }
  target.patch = patches_[chosen];
  target.region = patches_[chosen].window;
  target.search_space = target.region.area();
  search_log_.push_back(target.search_space);
  return target;
}

void QueryCampaign::mark_annotated(int index) {
  auto& p = patches_.at(index);
  if (p.status == PatchStatus::annotated) throw Error(ErrorCode::validation, "patch already annotated");
  p.status = PatchStatus::annotated;
}

}  // namespace clickseg
