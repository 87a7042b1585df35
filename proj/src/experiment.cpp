#include "clickseg/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "clickseg/error.hpp"
#include "clickseg/hash.hpp"
#include "clickseg/metrics.hpp"

namespace clickseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double region_iou(const std::vector<int>& predicted, const LabelMask& labels, const Window& w) {
  LabelMask sub = crop(labels, w);
  std::vector<int> p;
  p.reserve(static_cast<std::size_t>(w.area()));
  for (int r = w.row; r < w.row + w.height; ++r)
    for (int c = w.col; c < w.col + w.width; ++c) p.push_back(predicted[static_cast<std::size_t>(r) * labels.width + c]);
  return iou(p, sub).mean;
}

Tensor3<float> predict_tile(const SegmentationModel& model, const RasterImage& image,
                            const std::vector<ClickAnnotation>& clicks, const Window& window,
                            const PredictionMap* p0_tile) {
  const RasterImage tile_image = crop(image, window);
  const auto local = clicks_in_window(clicks, window);
  const AnnotationTensor enc =
      encode_with_sources(local, model.class_count(), model.config().encoding, tile_image, p0_tile, nullptr);
  return forward(model, tile_image, enc).probabilities;
}

int nearest_tile(const TileGrid& grid, const ClickAnnotation& click) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < grid.size(); ++t) {
    const Window& w = grid.tiles[t].window;
    if (!w.contains(click.row, click.col)) continue;
    const double dr = click.row - (w.row + (w.height - 1) / 2.0), dc = click.col - (w.col + (w.width - 1) / 2.0);
    const double d = dr * dr + dc * dc;
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(t);
    }
  }
  return best;
}

}  // namespace

const char* to_string(RefineMode m) { return m == RefineMode::disca ? "disca" : "ac_only"; }

RefineMode refine_mode_from_string(const std::string& name) {
  if (name == "ac_only") return RefineMode::ac_only;
  if (name == "disca") return RefineMode::disca;
  throw Error(ErrorCode::invalid_argument, "unknown refine mode '" + name + "'");
}

void CampaignConfig::validate() const {
  strategy.validate();
  agent.validate();
  disca.validate();
  if (budget < 0) throw Error(ErrorCode::invalid_argument, "budget must be >= 0");
  if (tile_size < 1 || overlap < 0 || overlap >= tile_size)
    throw Error(ErrorCode::invalid_argument, "tile size must exceed the overlap");
  if (strategy.acquisition == AcquisitionMethod::confidnet && !acquisition.confidnet)
    throw Error(ErrorCode::invalid_argument, "confidnet strategy needs a trained head");
}

nlohmann::json to_json(const CampaignConfig& c) {
  nlohmann::json j;
  j["strategy"] = {{"kind", to_string(c.strategy.kind)},
                   {"acquisition", c.strategy.acquisition ? nlohmann::json(to_string(*c.strategy.acquisition))
                                                          : nlohmann::json(nullptr)},
                   {"seed", c.strategy.seed},
                   {"refresh_ac_only", c.strategy.refresh_ac_only}};
  j["mode"] = to_string(c.mode);
  j["agent"] = {{"strategy", to_string(c.agent.strategy)}, {"quantile", c.agent.quantile}, {"seed", c.agent.seed}};
  j["budget"] = c.budget;
  j["disca"] = c.disca;
  j["tile_size"] = c.tile_size;
  j["overlap"] = c.overlap;
  j["mc_dropout"] = {{"passes", c.acquisition.mc.passes},
                     {"dropout_rate", c.acquisition.mc.dropout_rate},
                     {"seed", c.acquisition.mc.seed}};
  j["odin"] = {{"epsilon", c.acquisition.odin.epsilon},
               {"temperature", c.acquisition.odin.temperature},
               {"toward_prediction", c.acquisition.odin.toward_prediction}};
  return j;
}

CampaignConfig campaign_config_from_json(const nlohmann::json& j) {
  CampaignConfig c;
  if (j.contains("strategy")) {
    const auto& s = j["strategy"];
    c.strategy.kind = strategy_kind_from_string(s.value("kind", std::string(to_string(c.strategy.kind))));
    if (s.contains("acquisition") && !s["acquisition"].is_null())
      c.strategy.acquisition = acquisition_from_string(s["acquisition"].get<std::string>());
    else if (c.strategy.kind != StrategyKind::active)
      c.strategy.acquisition.reset();
    c.strategy.seed = s.value("seed", c.strategy.seed);
    c.strategy.refresh_ac_only = s.value("refresh_ac_only", c.strategy.refresh_ac_only);
  }
  if (j.contains("mode")) c.mode = refine_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("agent")) {
    const auto& a = j["agent"];
    c.agent.strategy = agent_strategy_from_string(a.value("strategy", std::string(to_string(c.agent.strategy))));
    c.agent.quantile = a.value("quantile", c.agent.quantile);
    c.agent.seed = a.value("seed", c.agent.seed);
  }
  c.budget = j.value("budget", c.budget);
  if (j.contains("disca")) c.disca = j["disca"].get<DiscaConfig>();
  c.tile_size = j.value("tile_size", c.tile_size);
  c.overlap = j.value("overlap", c.overlap);
  if (j.contains("mc_dropout")) {
    const auto& m = j["mc_dropout"];
    c.acquisition.mc.passes = m.value("passes", c.acquisition.mc.passes);
    c.acquisition.mc.dropout_rate = m.value("dropout_rate", c.acquisition.mc.dropout_rate);
    c.acquisition.mc.seed = m.value("seed", c.acquisition.mc.seed);
  }
  if (j.contains("odin")) {
    const auto& o = j["odin"];
    c.acquisition.odin.epsilon = o.value("epsilon", c.acquisition.odin.epsilon);
    c.acquisition.odin.temperature = o.value("temperature", c.acquisition.odin.temperature);
    c.acquisition.odin.toward_prediction = o.value("toward_prediction", c.acquisition.odin.toward_prediction);
  }
  return c;
}

std::vector<double> CampaignResult::curve() const {
  std::vector<double> out{initial_iou};
  for (const auto& s : steps) out.push_back(s.iou_after);
  return out;
}

nlohmann::json step_to_json(const StepRecord& s) {
  nlohmann::json j;
  j["step"] = s.step;
  j["window"] = s.window ? nlohmann::json{{"row", s.window->row},
                                          {"col", s.window->col},
                                          {"height", s.window->height},
                                          {"width", s.window->width}}
                         : nlohmann::json(nullptr);
  j["click"] = s.click ? nlohmann::json(*s.click) : nlohmann::json(nullptr);
  j["iou_before"] = s.iou_before;
  j["iou_after"] = s.iou_after;
  nlohmann::json per_class = nlohmann::json::array();
  for (double v : s.per_class_after) per_class.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j["per_class_iou"] = per_class;
  j["patch_iou_before"] = s.patch_iou_before;
  j["patch_iou_after"] = s.patch_iou_after;
  j["search_space"] = s.search_space;
  j["candidates"] = s.candidates;
  j["component_size"] = s.component_size;
  j["query_time"] = s.query_time;
  j["refine_time"] = s.refine_time;
  j["wall_time"] = s.wall_time;
  return j;
}

std::string CampaignResult::fingerprint() const {
  nlohmann::json j;
  j["initial_iou"] = initial_iou;
  j["config"] = config;
  j["seed"] = seed;
  j["checkpoint"] = checkpoint_hash;
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) {
    nlohmann::json sj = step_to_json(s);
    sj.erase("query_time");
    sj.erase("refine_time");
    sj.erase("wall_time");
    steps_json.push_back(sj);
  }
  j["steps"] = steps_json;
  return sha256_hex(j.dump());
}

void write_campaign_log(const std::filesystem::path& path, const CampaignResult& result, const std::string& label) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorCode::io, "cannot write campaign log " + path.string());
  out << nlohmann::json{{"record", "campaign"},
                        {"label", label},
                        {"config", result.config},
                        {"seed", result.seed},
                        {"checkpoint", result.checkpoint_hash},
                        {"initial_iou", result.initial_iou}}
             .dump()
      << '\n';
  for (const auto& s : result.steps) {
    nlohmann::json j = step_to_json(s);
    j["record"] = "step";
    j["label"] = label;
    j["strategy"] = result.config.at("strategy").at("kind");
    out << j.dump() << '\n';
  }
}

PredictionMap predict_with_clicks(const SegmentationModel& model, const RasterImage& image,
                                  const std::vector<ClickAnnotation>& clicks, const TileGrid& grid,
                                  const PredictionMap* p0) {
  auto probs = apply_tiled(grid, [&](const Window& w) {
    if (p0) {
      const PredictionMap p0_tile{crop(p0->probabilities, w), true};
      return predict_tile(model, image, clicks, w, &p0_tile);
    }
    return predict_tile(model, image, clicks, w, nullptr);
  });
  return {std::move(probs), false};
}

UncertaintyMap tiled_uncertainty(AcquisitionMethod method, const SegmentationModel& model, const RasterImage& image,
                                 const std::vector<ClickAnnotation>& clicks, const TileGrid& grid,
                                 const AcquisitionSettings& settings, const PredictionMap* prediction) {
  const auto start = Clock::now();
  if (method == AcquisitionMethod::entropy && prediction) {
    UncertaintyMap m = entropy(*prediction);
    m.wall_time = seconds_since(start);
    return m;
  }
  const Tensor3<float> stitched = apply_tiled(grid, [&](const Window& w) {
    const RasterImage tile_image = crop(image, w);
    const auto local = clicks_in_window(clicks, w);
    const AnnotationTensor enc =
        encode_with_sources(local, model.class_count(), model.config().encoding, tile_image, nullptr, nullptr);
    const UncertaintyMap m = estimate_uncertainty(method, model, tile_image, enc, settings);
    Tensor3<float> t(1, m.height, m.width);
    t.data = m.scores;
    return t;
  });
  UncertaintyMap out{stitched.height, stitched.width, stitched.data, to_string(method), 0.0};
  out.wall_time = seconds_since(start);
  return out;
}

CampaignResult run_campaign(SegmentationModel& model, const RasterImage& image, const LabelMask& labels,
                            const CampaignConfig& config) {
  config.validate();
  if (labels.height != image.height() || labels.width != image.width() || labels.class_count != model.class_count())
    throw Error(ErrorCode::mismatch, "run_campaign: labels do not match image or model");

  CampaignResult result;
  result.config = to_json(config);
  result.seed = config.strategy.seed;
  result.checkpoint_hash = model.hash();

  const TileGrid grid = tile(image, config.tile_size, config.overlap);
  QueryCampaign campaign(grid, config.strategy);
  std::mt19937_64 agent_rng(config.agent.seed);
  std::mt19937_64 disca_rng(config.disca.seed);

  // Frozen image-only predictions per tile (the regularization anchor) and the live tile cache.
  std::vector<PredictionMap> p0_tiles;
  std::vector<Tensor3<float>> tile_probs;
  for (const auto& t : grid.tiles) {
    p0_tiles.push_back({forward(model, crop(image, t.window)).probabilities, true});
    tile_probs.push_back(p0_tiles.back().probabilities);
  }
  PredictionMap current{stitch_average(grid, tile_probs), false};
  std::vector<int> predicted = current.argmax();
  const IouResult initial = iou(predicted, labels);
  result.initial_iou = initial.mean;
  result.initial_per_class = initial.per_class;

  std::vector<ClickAnnotation> clicks;
  const bool active = config.strategy.kind == StrategyKind::active;
  const bool needs_uncertainty = config.agent.strategy == AgentStrategy::uncertainty_in_error ||
                                 config.agent.strategy == AgentStrategy::uncertainty_only;
  const AcquisitionMethod method = config.strategy.acquisition.value_or(AcquisitionMethod::entropy);
  AcquisitionSettings settings = config.acquisition;
  settings.check_confidnet_identity = false;
  UncertaintyMap uncertainty;
  auto rescore = [&] {
    uncertainty = tiled_uncertainty(method, model, image, clicks, grid, settings, &current);
    if (active) campaign.set_scores(score_patches(uncertainty, grid));
  };
  if (active || needs_uncertainty) rescore();

  auto refresh_tiles = [&](const std::vector<int>& which) {
    for (int t : which) tile_probs[t] = predict_tile(model, image, clicks, grid.tiles[t].window, &p0_tiles[t]);
    current = PredictionMap{stitch_average(grid, tile_probs), false};
    predicted = current.argmax();
  };

  for (int step = 1; step <= config.budget; ++step) {
    const auto step_start = Clock::now();
    StepRecord rec;
    rec.step = step;
    rec.iou_before = result.steps.empty() ? result.initial_iou : result.steps.back().iou_after;

    QueryTarget target;
    try {
      target = campaign.next_query();
    } catch (const Error& e) {
      throw Error(e.code(), "step " + std::to_string(step) + ": " + e.what());
    }
    if (target.patch) {
      rec.window = target.patch->window;
      campaign.mark_annotated(target.patch->index);
    }
    rec.search_space = target.search_space;
    const AgentDecision decision =
        sample_click(target.region, predicted, labels, needs_uncertainty ? &uncertainty : nullptr, config.agent, agent_rng);
    rec.candidates = decision.candidates;
    rec.component_size = decision.component_size;
    rec.click = decision.click;
    rec.query_time = seconds_since(step_start);

    Window refined_region = target.region;
    const auto refine_start = Clock::now();
    if (decision.click) {
      clicks.push_back(*decision.click);
      const int home = target.patch ? target.patch->index : nearest_tile(grid, *decision.click);
      if (!target.patch) refined_region = grid.tiles[home].window;
      rec.patch_iou_before = region_iou(predicted, labels, refined_region);

      if (config.mode == RefineMode::ac_only) {
        std::vector<int> which;
        if (target.patch) {
          which.push_back(home);
        } else {
          for (std::size_t t = 0; t < grid.size(); ++t)
            if (grid.tiles[t].window.contains(decision.click->row, decision.click->col)) which.push_back(static_cast<int>(t));
        }
        refresh_tiles(which);
      } else {
        const Window& w = grid.tiles[home].window;
        const RasterImage tile_image = crop(image, w);
        try {
          refine(model, tile_image, clicks_in_window(clicks, w), p0_tiles[home], config.disca, disca_rng);
        } catch (const Error& e) {
          throw Error(e.code(), "step " + std::to_string(step) + ": " + e.what());
        }
        std::vector<int> all(grid.size());
        for (std::size_t t = 0; t < grid.size(); ++t) all[t] = static_cast<int>(t);
        refresh_tiles(all);
      }
      rec.patch_iou_after = region_iou(predicted, labels, refined_region);
    } else {
      rec.patch_iou_before = rec.patch_iou_after = region_iou(predicted, labels, refined_region);
    }
    rec.refine_time = seconds_since(refine_start);

    const bool rescore_now = decision.click && (config.mode == RefineMode::disca || config.strategy.refresh_ac_only ||
                                                (needs_uncertainty && config.mode == RefineMode::ac_only));
    if ((active || needs_uncertainty) && rescore_now) rescore();

    const IouResult after = iou(predicted, labels);
    rec.iou_after = after.mean;
    rec.per_class_after = after.per_class;
    rec.wall_time = seconds_since(step_start);
    result.steps.push_back(std::move(rec));
    if (!target.patch && !decision.click) {
      // The oracle found nothing left to fix; further steps would repeat this one.
      for (int s = step + 1; s <= config.budget; ++s) {
        StepRecord idle = result.steps.back();
        idle.step = s;
        idle.iou_before = idle.iou_after;
        idle.query_time = idle.refine_time = idle.wall_time = 0.0;
        result.steps.push_back(idle);
      }
      break;
    }
  }
  return result;
}

CampaignResult run_campaign_copy(const SegmentationModel& model, const RasterImage& image, const LabelMask& labels,
                                 const CampaignConfig& config) {
  SegmentationModel copy = model;
  return run_campaign(copy, image, labels, config);
}

// ---------------------------------------------------------------------------

std::vector<AblationArm> default_ablation_arms() {
  return {
      {"AC", RefineMode::ac_only, true, false, 0.0},
      {"WTP", RefineMode::disca, false, false, 0.0},
      {"WTP+reg", RefineMode::disca, false, true, 1.0},
      {"AC+WTP", RefineMode::disca, true, false, 0.0},
      {"DISCA(lambda=1)", RefineMode::disca, true, true, 1.0},
      {"DISCA(lambda=10)", RefineMode::disca, true, true, 10.0},
  };
}

std::vector<AblationRow> run_ablation(const SegmentationModel& model,
                                      const std::vector<std::pair<RasterImage, LabelMask>>& images,
                                      const CampaignConfig& base, const std::vector<AblationArm>& arms) {
  std::vector<AblationRow> rows;
  for (const auto& arm : arms) {
    AblationRow row{arm, {}, 0.0, 0.0};
    CampaignConfig cfg = base;
    cfg.mode = arm.mode;
    cfg.disca.ac_enabled = arm.ac_enabled;
    cfg.disca.regularization_enabled = arm.regularization_enabled;
    cfg.disca.lambda = arm.lambda;
    for (const auto& [image, labels] : images) {
      row.runs.push_back(run_campaign_copy(model, image, labels, cfg));
      row.mean_initial += row.runs.back().initial_iou;
      row.mean_final += row.runs.back().final_iou();
    }
    if (!images.empty()) {
      row.mean_initial /= static_cast<double>(images.size());
      row.mean_final /= static_cast<double>(images.size());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<CropRecord> size_vs_method_study(const SegmentationModel& model,
                                             const std::vector<std::pair<RasterImage, LabelMask>>& images,
                                             const StudyConfig& config) {
  if (images.empty()) throw Error(ErrorCode::invalid_argument, "study: no images");
  std::mt19937_64 rng(config.seed);
  std::vector<CropRecord> out;
  for (int n = 0; n < config.crops; ++n) {
    const auto& [image, labels] = images[std::uniform_int_distribution<std::size_t>(0, images.size() - 1)(rng)];
    const int ch = std::min(config.crop_size, image.height()), cw = std::min(config.crop_size, image.width());
    const Window w{std::uniform_int_distribution<int>(0, image.height() - ch)(rng),
                   std::uniform_int_distribution<int>(0, image.width() - cw)(rng), ch, cw};
    const RasterImage ci = crop(image, w);
    const LabelMask cl = crop(labels, w);
    const PredictionMap initial{forward(model, ci).probabilities, true};
    const std::vector<int> predicted = initial.argmax();
    std::mt19937_64 agent_rng(config.seed + static_cast<std::uint64_t>(n));
    const AgentDecision d = sample_click(Window{0, 0, ch, cw}, predicted, cl, nullptr, AgentConfig{}, agent_rng);
    if (!d.click) continue;
    const std::vector<ClickAnnotation> clicks{*d.click};
    const double before = iou(predicted, cl).mean;

    const AnnotationTensor enc =
        encode_with_sources(clicks, model.class_count(), model.config().encoding, ci, &initial, &cl);
    const double ac_after = iou(forward(model, ci, enc), cl).mean;
    SegmentationModel copy = model;
    std::mt19937_64 disca_rng(config.disca.seed + static_cast<std::uint64_t>(n));
    const RefineResult refined = refine(copy, ci, clicks, initial, config.disca, disca_rng);
    const double disca_after = iou(refined.prediction, cl).mean;

    CropRecord rec;
    rec.window = w;
    rec.component_size = d.component_size;
    rec.initial_accuracy =
        1.0 - static_cast<double>(misclassification_count(predicted, cl)) / static_cast<double>(w.area());
    rec.ac_gain = ac_after - before;
    rec.disca_gain = disca_after - before;
    rec.best = rec.ac_gain > rec.disca_gain ? "ac" : (rec.disca_gain > rec.ac_gain ? "disca" : "tie");
    out.push_back(rec);
  }
  return out;
}

SingleClickGain single_click_gain(const SegmentationModel& model, const RasterImage& crop_image,
                                  const LabelMask& crop_labels, const AgentConfig& agent) {
  const PredictionMap initial{forward(model, crop_image).probabilities, true};
  const std::vector<int> predicted = initial.argmax();
  const UncertaintyMap unc = entropy(initial);
  std::mt19937_64 rng(agent.seed);
  const AgentDecision d = sample_click(Window{0, 0, crop_image.height(), crop_image.width()}, predicted, crop_labels,
                                       &unc, agent, rng);
  SingleClickGain g;
  g.initial = iou(predicted, crop_labels).mean;
  g.after = g.initial;
  if (!d.click) return g;
  g.clicked = true;
  const AnnotationTensor enc = encode_with_sources({*d.click}, model.class_count(), model.config().encoding,
                                                   crop_image, &initial, &crop_labels);
  g.after = iou(forward(model, crop_image, enc), crop_labels).mean;
  return g;
}

// ---------------------------------------------------------------------------

ToyPreset toy_preset() {
  ToyPreset p;
  p.train.height = p.train.width = 64;
  p.train.count = 96;
  p.test.height = p.test.width = 256;
  p.test.count = 10;
  p.shifted = p.test;
  p.shifted.domain_shift = true;
  p.model.dropout_rate = 0.1;
  p.pretrain.epochs = 20;
  p.pretrain.max_clicks = 20;
  return p;
}

}  // namespace clickseg
