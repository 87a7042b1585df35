#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "clickseg/error.hpp"
#include "clickseg/experiment.hpp"
#include "clickseg/metrics.hpp"
#include "clickseg/service.hpp"
#include "plot.hpp"

using namespace clickseg;
namespace fs = std::filesystem;

namespace {

using Dataset = std::vector<std::pair<RasterImage, LabelMask>>;

struct DataOptions {
  std::vector<std::string> images;  // rasters with `<stem>.labels.png` sidecars
  int count = 10;
  bool shifted = false;
  std::uint64_t seed = 0;  // 0: preset test seed
  int size = 0;            // 0: preset size
};

void add_data_flags(CLI::App& app, DataOptions& d) {
  app.add_option("--image", d.images, "Raster with a <stem>.labels.png sidecar (repeatable); default: toy images");
  app.add_option("--count", d.count, "Number of toy images")->check(CLI::PositiveNumber);
  app.add_flag("--shifted", d.shifted, "Use the domain-shifted toy variant");
  app.add_option("--data-seed", d.seed, "Toy generation seed (default: preset test seed)");
  app.add_option("--size", d.size, "Toy image side length (default: preset)");
}

Dataset load_data(const DataOptions& d, int class_count) {
  Dataset out;
  if (!d.images.empty()) {
    for (const auto& path : d.images) {
      LoadedRaster r = load_raster(path, class_count);
      if (!r.labels) throw Error(ErrorCode::not_found, "no label sidecar for " + path);
      out.emplace_back(std::move(r.image), std::move(*r.labels));
    }
    return out;
  }
  const ToyPreset p = toy_preset();
  ToyConfig cfg = d.shifted ? p.shifted : p.test;
  cfg.class_count = class_count;
  cfg.count = d.count;
  if (d.size > 0) cfg.height = cfg.width = d.size;
  return generate_toy(d.seed ? d.seed : p.test_seed, cfg);
}

struct CampaignOptions {
  std::vector<std::string> strategies{"random", "entropy"};
  std::string mode = "ac_only";
  std::string agent = "max_error_center";
  int budget = 10;
  int tile = 64;
  int overlap = 16;
  std::uint64_t seed = 1;
  double lambda = 1.0;
  double lr = 2e-6;
  int steps = 10;
  double ac_dropout = 0.5;
  double quantile = 0.9;
  std::string config_path;
};

void add_campaign_flags(CLI::App& app, CampaignOptions& c) {
  app.add_option("--mode", c.mode, "ac_only or disca");
  app.add_option("--agent", c.agent, "Simulated annotator strategy");
  app.add_option("--budget", c.budget, "Clicks per image")->check(CLI::NonNegativeNumber);
  app.add_option("--tile", c.tile, "Patch side length");
  app.add_option("--overlap", c.overlap, "Patch overlap");
  app.add_option("--seed", c.seed, "Base seed; image i uses seed + i");
  app.add_option("--lambda", c.lambda, "Recall term weight");
  app.add_option("--lr", c.lr, "Retraining learning rate");
  app.add_option("--steps", c.steps, "Retraining steps per click");
  app.add_option("--ac-dropout", c.ac_dropout, "Probability of dropping the annotation channels in a step");
  app.add_option("--quantile", c.quantile, "Agent uncertainty quantile");
  app.add_option("--config", c.config_path, "CampaignConfig JSON; flags given explicitly still apply on top");
}

/// "random", "oracle"/"whole_image_oracle" or an acquisition method name.
StrategyConfig parse_strategy(const std::string& name) {
  StrategyConfig s;
  if (name == "random") {
    s.kind = StrategyKind::random;
    s.acquisition.reset();
  } else if (name == "oracle" || name == "whole_image_oracle") {
    s.kind = StrategyKind::whole_image_oracle;
    s.acquisition.reset();
  } else {
    s.kind = StrategyKind::active;
    s.acquisition = acquisition_from_string(name);
  }
  return s;
}

CampaignConfig base_config(const CLI::App& app, const CampaignOptions& c) {
  CampaignConfig cfg;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw Error(ErrorCode::io, "cannot read " + c.config_path);
    cfg = campaign_config_from_json(nlohmann::json::parse(in));
  }
  auto given = [&](const char* flag) { return c.config_path.empty() || app.count(flag) > 0; };
  if (given("--mode")) cfg.mode = refine_mode_from_string(c.mode);
  if (given("--agent")) cfg.agent.strategy = agent_strategy_from_string(c.agent);
  if (given("--quantile")) cfg.agent.quantile = c.quantile;
  if (given("--budget")) cfg.budget = c.budget;
  if (given("--tile")) cfg.tile_size = c.tile;
  if (given("--overlap")) cfg.overlap = c.overlap;
  if (given("--lambda")) cfg.disca.lambda = c.lambda;
  if (given("--lr")) cfg.disca.learning_rate = c.lr;
  if (given("--steps")) cfg.disca.steps = c.steps;
  if (given("--ac-dropout")) cfg.disca.ac_dropout_probability = c.ac_dropout;
  return cfg;
}

void reseed(CampaignConfig& cfg, std::uint64_t seed) {
  cfg.strategy.seed = seed;
  cfg.agent.seed = seed;
  cfg.disca.seed = seed;
}

std::optional<ConfidNetHead> load_head(const std::string& checkpoint, const std::string& explicit_path) {
  const fs::path p = explicit_path.empty() ? fs::path(checkpoint + ".confidnet") : fs::path(explicit_path);
  if (!fs::exists(p)) return std::nullopt;
  return ConfidNetHead::load(p);
}

void print_row(const std::string& label, const std::vector<CampaignResult>& runs) {
  double init = 0, fin = 0, auc = 0;
  for (const auto& r : runs) {
    init += r.initial_iou;
    fin += r.final_iou();
    auc += curve_area(r.curve());
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, runs.size()));
  std::printf("%-22s %6zu %9.4f %9.4f %9.4f %9.4f\n", label.c_str(), runs.size(), init / n, fin / n, (fin - init) / n,
              auc / n);
}

void print_header() {
  std::printf("%-22s %6s %9s %9s %9s %9s\n", "arm", "images", "initial", "final", "gain", "auc");
}

std::vector<double> mean_curve(const std::vector<CampaignResult>& runs) {
  std::vector<double> out;
  for (const auto& r : runs) {
    const auto c = r.curve();
    if (out.size() < c.size()) out.resize(c.size(), 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) out[i] += c[i] / static_cast<double>(runs.size());
  }
  return out;
}

// ---------------------------------------------------------------------------

struct PretrainOptions {
  std::string out = "toy.ckpt";
  int classes = 2;
  int epochs = 0;
  int train_count = 0;
  std::uint64_t seed = 0;
  bool confidnet = true;
  int confidnet_epochs = 0;
  std::string encoding;
};

int run_pretrain(const PretrainOptions& o) {
  ToyPreset p = toy_preset();
  p.train.class_count = o.classes;
  p.model.class_count = o.classes;
  if (o.train_count > 0) p.train.count = o.train_count;
  if (o.epochs > 0) p.pretrain.epochs = o.epochs;
  if (o.seed) p.init_seed = o.seed;
  if (!o.encoding.empty()) p.model.encoding.kind = encoding_kind_from_string(o.encoding);
  const Dataset train = generate_toy(p.train_seed, p.train);
  PretrainReport report;
  SegmentationModel model = pretrain(SegmentationModel(p.model, p.init_seed), train, p.pretrain, &report);
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e)
    std::printf("epoch %2zu loss %.5f\n", e + 1, report.epoch_loss[e]);
  if (const auto dir = std::filesystem::path(o.out).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
  model.save(o.out);
  std::printf("checkpoint %s %s\n", o.out.c_str(), model.hash().c_str());
  if (o.confidnet) {
    Dataset aux = generate_toy(p.confidnet_seed, p.train);
    ConfidNetTrainConfig cc = p.confidnet;
    if (o.confidnet_epochs > 0) cc.epochs = o.confidnet_epochs;
    ConfidNetReport cr;
    ConfidNetHead head(model.network().feature_tap_channels(), p.confidnet_widths, p.init_seed + 1);
    head = confidnet_train(model, std::move(head), aux, cc, &cr);
    head.save(o.out + ".confidnet");
    std::printf("confidnet %s.confidnet final loss %.5f\n", o.out.c_str(),
                cr.epoch_loss.empty() ? 0.0 : cr.epoch_loss.back());
  }
  return 0;
}

struct ModelOptions {
  std::string checkpoint;
  std::string confidnet;
  std::string log;
  std::string plot;
};

void add_model_flags(CLI::App& app, ModelOptions& m) {
  app.add_option("--checkpoint", m.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  app.add_option("--confidnet", m.confidnet, "ConfidNet head (default: <checkpoint>.confidnet)");
  app.add_option("--log", m.log, "Append JSONL campaign records here");
}

int run_simulate(const CLI::App& app, const ModelOptions& m, const DataOptions& d, const CampaignOptions& c) {
  SegmentationModel model = SegmentationModel::load(m.checkpoint);
  const auto head = load_head(m.checkpoint, m.confidnet);
  const Dataset data = load_data(d, model.class_count());
  if (!m.log.empty()) fs::remove(m.log);
  std::vector<tools::Curve> curves;
  print_header();
  for (const auto& name : c.strategies) {
    CampaignConfig cfg = base_config(app, c);
    if (app.count("--strategy") || c.config_path.empty()) cfg.strategy = parse_strategy(name);
    cfg.acquisition.confidnet = head ? &*head : nullptr;
    cfg.acquisition.check_confidnet_identity = cfg.mode == RefineMode::ac_only;
    std::vector<CampaignResult> runs;
    for (std::size_t i = 0; i < data.size(); ++i) {
      reseed(cfg, c.seed + i);
      runs.push_back(run_campaign_copy(model, data[i].first, data[i].second, cfg));
      if (!m.log.empty()) write_campaign_log(m.log, runs.back(), name);
    }
    print_row(name, runs);
    curves.push_back({name, mean_curve(runs)});
  }
  if (!m.plot.empty()) {
    tools::plot_curves(m.plot, curves);
    std::printf("plot %s (colors in order:", m.plot.c_str());
    for (const auto& cv : curves) std::printf(" %s", cv.label.c_str());
    std::printf(")\n");
  }
  return 0;
}

int run_ablate(const CLI::App& app, const ModelOptions& m, const DataOptions& d, const CampaignOptions& c,
               const std::string& strategy) {
  SegmentationModel model = SegmentationModel::load(m.checkpoint);
  const Dataset data = load_data(d, model.class_count());
  CampaignConfig cfg = base_config(app, c);
  if (app.count("--strategy") || c.config_path.empty()) cfg.strategy = parse_strategy(strategy);
  if (cfg.strategy.kind == StrategyKind::active && *cfg.strategy.acquisition == AcquisitionMethod::confidnet)
    throw Error(ErrorCode::invalid_argument, "ablate supports random, oracle and model-only acquisition methods");
  reseed(cfg, c.seed);
  if (!m.log.empty()) fs::remove(m.log);
  const auto rows = run_ablation(model, data, cfg, default_ablation_arms());
  std::vector<tools::Curve> curves;
  print_header();
  for (const auto& row : rows) {
    print_row(row.arm.name, row.runs);
    curves.push_back({row.arm.name, mean_curve(row.runs)});
    if (!m.log.empty())
      for (const auto& r : row.runs) write_campaign_log(m.log, r, row.arm.name);
  }
  if (!m.plot.empty()) tools::plot_curves(m.plot, curves);
  return 0;
}

int run_study(const ModelOptions& m, const DataOptions& d, const StudyConfig& sc, const std::string& out) {
  SegmentationModel model = SegmentationModel::load(m.checkpoint);
  const Dataset data = load_data(d, model.class_count());
  const auto records = size_vs_method_study(model, data, sc);
  std::ofstream f;
  if (!out.empty()) f.open(out);
  std::map<std::string, int> wins;
  double ac = 0, disca = 0;
  for (const auto& r : records) {
    ++wins[r.best];
    ac += r.ac_gain;
    disca += r.disca_gain;
    if (f)
      f << nlohmann::json{{"record", "crop"},
                          {"row", r.window.row},
                          {"col", r.window.col},
                          {"size", r.window.height},
                          {"component_size", r.component_size},
                          {"initial_accuracy", r.initial_accuracy},
                          {"ac_gain", r.ac_gain},
                          {"disca_gain", r.disca_gain},
                          {"best", r.best}}
               .dump()
        << '\n';
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, records.size()));
  std::printf("crops %zu  mean ac gain %.4f  mean disca gain %.4f  wins ac %d disca %d tie %d\n", records.size(),
              ac / n, disca / n, wins["ac"], wins["disca"], wins["tie"]);
  return 0;
}

httplib::Server* g_server = nullptr;

int run_serve(const std::string& host, int port, const std::string& store, const std::vector<std::string>& checkpoints,
              const std::vector<std::string>& images) {
  SessionManager manager(store);
  for (const auto& path : checkpoints) {
    const std::string id = manager.store().put_checkpoint_file(path);
    if (fs::exists(path + ".confidnet")) manager.store().put_confidnet(id, ConfidNetHead::load(path + ".confidnet"));
    std::printf("checkpoint %s -> %s\n", path.c_str(), id.c_str());
  }
  for (const auto& path : images) std::printf("image %s -> %s\n", path.c_str(), manager.store().put_image_file(path).c_str());
  httplib::Server server;
  install_routes(server, manager);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::printf("listening on %s:%d\n", host.c_str(), port);
  std::fflush(stdout);
  if (!server.listen(host, port)) {
    std::fprintf(stderr, "cannot listen on %s:%d\n", host.c_str(), port);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Click-based interactive segmentation with continual adaptation"};
  app.require_subcommand(1);

  PretrainOptions po;
  auto* pre = app.add_subcommand("pretrain", "Train a toy checkpoint (and its ConfidNet head)");
  pre->add_option("--out", po.out, "Checkpoint path");
  pre->add_option("--classes", po.classes, "2 or 6")->check(CLI::IsMember({2, 6}));
  pre->add_option("--epochs", po.epochs, "Override preset epochs");
  pre->add_option("--train-count", po.train_count, "Override number of training images");
  pre->add_option("--init-seed", po.seed, "Override initialization seed");
  pre->add_option("--encoding", po.encoding, "Click encoding kind");
  pre->add_option("--confidnet-epochs", po.confidnet_epochs, "Override ConfidNet epochs");
  pre->add_flag("!--no-confidnet", po.confidnet, "Skip the ConfidNet head");

  ModelOptions sm;
  DataOptions sd;
  CampaignOptions sc;
  auto* sim = app.add_subcommand("simulate", "Run simulated annotation campaigns");
  add_model_flags(*sim, sm);
  add_data_flags(*sim, sd);
  add_campaign_flags(*sim, sc);
  sim->add_option("--strategy", sc.strategies, "random, oracle, entropy, mc_dropout, odin, confidnet (repeatable)");
  sim->add_option("--plot", sm.plot, "Write mean IoU-vs-budget curves to this PNG");

  ModelOptions am;
  DataOptions ad;
  CampaignOptions ac;
  std::string ablate_strategy = "random";
  auto* abl = app.add_subcommand("ablate", "Compare AC, WTP, WTP+reg, AC+WTP and DISCA arms");
  add_model_flags(*abl, am);
  add_data_flags(*abl, ad);
  add_campaign_flags(*abl, ac);
  abl->add_option("--strategy", ablate_strategy, "Patch ordering shared by all arms");
  abl->add_option("--plot", am.plot, "Write mean curves to this PNG");

  ModelOptions tm;
  DataOptions td;
  StudyConfig study;
  std::string study_out;
  auto* stu = app.add_subcommand("study", "Error size vs AC/DISCA gain on random crops");
  stu->add_option("--checkpoint", tm.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  add_data_flags(*stu, td);
  stu->add_option("--crops", study.crops, "Number of crops");
  stu->add_option("--crop", study.crop_size, "Crop side length");
  stu->add_option("--seed", study.seed, "Crop sampling seed");
  stu->add_option("--lambda", study.disca.lambda, "Recall term weight");
  stu->add_option("--lr", study.disca.learning_rate, "Retraining learning rate");
  stu->add_option("--steps", study.disca.steps, "Retraining steps");
  stu->add_option("--out", study_out, "JSONL output");

  std::string host = "127.0.0.1", store = "clickseg-store";
  int port = 8080;
  std::vector<std::string> reg_ckpt, reg_img;
  auto* srv = app.add_subcommand("serve", "Start the HTTP session API");
  srv->add_option("--host", host);
  srv->add_option("--port", port);
  srv->add_option("--store", store, "Blob store directory");
  srv->add_option("--register-checkpoint", reg_ckpt, "Ingest a checkpoint at startup (repeatable)");
  srv->add_option("--register-image", reg_img, "Ingest an image at startup (repeatable)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return run_pretrain(po);
    if (*sim) return run_simulate(*sim, sm, sd, sc);
    if (*abl) return run_ablate(*abl, am, ad, ac, ablate_strategy);
    if (*stu) return run_study(tm, td, study, study_out);
    if (*srv) return run_serve(host, port, store, reg_ckpt, reg_img);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
