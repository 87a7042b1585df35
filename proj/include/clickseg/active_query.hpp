#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "clickseg/acquisition.hpp"
#include "clickseg/prediction.hpp"
#include "clickseg/raster.hpp"

namespace clickseg {

enum class PatchStatus { pending, annotated };

struct PatchQuery {
  int index = 0;  ///< row-major tile index in the grid
  Window window;
  double score = 0.0;
  int rank = 0;  ///< 1 = most uncertain
  PatchStatus status = PatchStatus::pending;
};

/// Mean uncertainty per tile, sorted by descending score (rank 1 first);
/// ties keep row-major tile order.
std::vector<PatchQuery> score_patches(const UncertaintyMap& uncertainty, const TileGrid& grid);

enum class StrategyKind { random, active, whole_image_oracle };

const char* to_string(StrategyKind k);
StrategyKind strategy_kind_from_string(const std::string& name);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::active;
  std::optional<AcquisitionMethod> acquisition = AcquisitionMethod::entropy;  ///< set iff kind == active
  std::uint64_t seed = 1;
  /// Rescore pending patches after each AC-only step too (DISCA always rescores).
  bool refresh_ac_only = false;

  void validate() const;
};

/// What to annotate next: a pending patch, or the whole image for the oracle.
struct QueryTarget {
  std::optional<PatchQuery> patch;
  Window region;
  long long search_space = 0;  ///< pixels the agent must inspect for this click
};

/// Campaign bookkeeping: pending patches, current scores and search-space counters.
class QueryCampaign {
 public:
  QueryCampaign(TileGrid grid, StrategyConfig strategy);

  const TileGrid& grid() const { return grid_; }
  const StrategyConfig& strategy() const { return strategy_; }

  /// Replaces the scores of all patches (status is kept) and re-ranks.
  void set_scores(const std::vector<PatchQuery>& scored);
  bool needs_scores() const { return strategy_.kind == StrategyKind::active && !scored_; }

  /// Throws ErrorCode::exhausted when no patch is pending (patch strategies).
  QueryTarget next_query();
  void mark_annotated(int index);

  int pending_count() const;
  const std::vector<PatchQuery>& patches() const { return patches_; }  ///< row-major
  /// Pending patches by rank, at most `k`.
  std::vector<PatchQuery> top_pending(int k) const;

  const std::vector<long long>& search_space_log() const { return search_log_; }

 private:
  TileGrid grid_;
  StrategyConfig strategy_;
  std::vector<PatchQuery> patches_;
  std::mt19937_64 rng_;
  bool scored_ = false;
  std::vector<long long> search_log_;
};

}  // namespace clickseg
