#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clickseg/acquisition.hpp"
#include "clickseg/active_query.hpp"
#include "clickseg/agent.hpp"
#include "clickseg/model.hpp"
#include "clickseg/retrain.hpp"

namespace clickseg {

enum class RefineMode { ac_only, disca };

const char* to_string(RefineMode m);
RefineMode refine_mode_from_string(const std::string& name);

struct CampaignConfig {
  StrategyConfig strategy;
  RefineMode mode = RefineMode::ac_only;
  AgentConfig agent;
  int budget = 10;  ///< clicks (one per queried patch)
  DiscaConfig disca;
  int tile_size = 64;
  int overlap = 16;
  AcquisitionSettings acquisition;  ///< only read by the active strategy

  void validate() const;
};

nlohmann::json to_json(const CampaignConfig& c);
/// Reads the fields written by to_json; missing fields keep their defaults.
CampaignConfig campaign_config_from_json(const nlohmann::json& j);

struct StepRecord {
  int step = 0;  ///< 1-based budget spent
  std::optional<Window> window;  ///< queried patch (none for the whole-image oracle)
  std::optional<ClickAnnotation> click;
  double iou_before = 0.0;
  double iou_after = 0.0;
  std::vector<double> per_class_after;
  double patch_iou_before = 0.0;  ///< inside the refined region
  double patch_iou_after = 0.0;
  long long search_space = 0;
  long long candidates = 0;
  long long component_size = 0;
  double query_time = 0.0;
  double refine_time = 0.0;
  double wall_time = 0.0;
};

struct CampaignResult {
  double initial_iou = 0.0;
  std::vector<double> initial_per_class;
  std::vector<StepRecord> steps;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string checkpoint_hash;

  /// Initial IoU followed by the IoU after every step.
  std::vector<double> curve() const;
  double final_iou() const { return steps.empty() ? initial_iou : steps.back().iou_after; }
  /// Hash of every field except timings.
  std::string fingerprint() const;
};

/// Query, annotate, refine, measure on one image. `model` is updated in place
/// in disca mode.
CampaignResult run_campaign(SegmentationModel& model, const RasterImage& image, const LabelMask& labels,
                            const CampaignConfig& config);

/// Same with a private copy of the model.
CampaignResult run_campaign_copy(const SegmentationModel& model, const RasterImage& image, const LabelMask& labels,
                                 const CampaignConfig& config);

/// Tiled uncertainty for the current model and clicks. The entropy method
/// reuses `prediction` when given.
UncertaintyMap tiled_uncertainty(AcquisitionMethod method, const SegmentationModel& model, const RasterImage& image,
                                 const std::vector<ClickAnnotation>& clicks, const TileGrid& grid,
                                 const AcquisitionSettings& settings, const PredictionMap* prediction = nullptr);

/// Tiled prediction with all clicks encoded per tile.
PredictionMap predict_with_clicks(const SegmentationModel& model, const RasterImage& image,
                                  const std::vector<ClickAnnotation>& clicks, const TileGrid& grid,
                                  const PredictionMap* p0 = nullptr);

void write_campaign_log(const std::filesystem::path& path, const CampaignResult& result, const std::string& label);
nlohmann::json step_to_json(const StepRecord& s);

// ---------------------------------------------------------------------------

struct AblationArm {
  std::string name;
  RefineMode mode = RefineMode::disca;
  bool ac_enabled = true;
  bool regularization_enabled = true;
  double lambda = 1.0;
};

/// AC, WTP, WTP+reg, AC+WTP, DISCA(lambda=1), DISCA(lambda=10).
std::vector<AblationArm> default_ablation_arms();

struct AblationRow {
  AblationArm arm;
  std::vector<CampaignResult> runs;  ///< one per image
  double mean_initial = 0.0;
  double mean_final = 0.0;
};

/// One campaign per arm and image with shared seeds; `base` supplies everything but the arm toggles.
std::vector<AblationRow> run_ablation(const SegmentationModel& model,
                                      const std::vector<std::pair<RasterImage, LabelMask>>& images,
                                      const CampaignConfig& base, const std::vector<AblationArm>& arms);

struct CropRecord {
  Window window;
  long long component_size = 0;
  double initial_accuracy = 0.0;
  double ac_gain = 0.0;
  double disca_gain = 0.0;
  std::string best;  ///< "ac", "disca" or "tie"
};

struct StudyConfig {
  int crops = 500;
  int crop_size = 64;
  DiscaConfig disca;
  std::uint64_t seed = 17;
};

/// One max-error click per random crop; crops without errors are skipped.
std::vector<CropRecord> size_vs_method_study(const SegmentationModel& model,
                                             const std::vector<std::pair<RasterImage, LabelMask>>& images,
                                             const StudyConfig& config);

struct SingleClickGain {
  double initial = 0.0;
  double after = 0.0;
  bool clicked = false;
};

/// Initial prediction, one agent click from `agent`, AC-only re-prediction on a crop.
SingleClickGain single_click_gain(const SegmentationModel& model, const RasterImage& crop_image,
                                  const LabelMask& crop_labels, const AgentConfig& agent);

// ---------------------------------------------------------------------------

/// Toy-scale setup shared by the CLI and the test fixtures.
struct ToyPreset {
  ToyConfig train;
  ToyConfig test;          ///< large images for campaigns
  ToyConfig shifted;       ///< domain-shifted test images
  ModelConfig model;
  PretrainConfig pretrain;
  ConfidNetTrainConfig confidnet;
  std::array<int, 5> confidnet_widths{8, 30, 16, 8, 1};
  DiscaConfig disca;
  int tile_size = 64;
  int overlap = 16;
  std::uint64_t train_seed = 1000;
  std::uint64_t confidnet_seed = 2000;
  std::uint64_t test_seed = 3000;
  std::uint64_t init_seed = 42;
};

ToyPreset toy_preset();

}  // namespace clickseg
