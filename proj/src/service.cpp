#include "clickseg/service.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <httplib.h>

#include "clickseg/error.hpp"
#include "clickseg/hash.hpp"

namespace fs = std::filesystem;

namespace clickseg {

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "cannot write " + p.string());
}

const char* image_extension(const std::string& bytes) {
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0) return ".png";
  if (bytes.size() >= 4 && (std::memcmp(bytes.data(), "II*\0", 4) == 0 || std::memcmp(bytes.data(), "MM\0*", 4) == 0))
    return ".tif";
  return nullptr;
}

bool valid_id(const std::string& id) {
  return id.size() == 64 && std::all_of(id.begin(), id.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

template <typename T>
std::string bytes_of(const std::vector<T>& v) {
  return std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

}  // namespace

// ---------------------------------------------------------------------------

std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::validation, "base64 length must be a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::validation, "invalid base64");
  std::size_t len = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() > 1 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

// ---------------------------------------------------------------------------

BlobStore::BlobStore(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "images");
  fs::create_directories(root_ / "checkpoints");
}

fs::path BlobStore::image_path(const std::string& id) const {
  if (!valid_id(id)) return {};
  for (const char* ext : {".png", ".tif"}) {
    fs::path p = root_ / "images" / (id + ext);
    if (fs::exists(p)) return p;
  }
  return {};
}

std::string BlobStore::put_image(const std::string& bytes) {
  const char* ext = image_extension(bytes);
  if (!ext) throw Error(ErrorCode::validation, "image must be PNG or TIFF");
  const std::string id = sha256_hex(bytes);
  const fs::path final_path = root_ / "images" / (id + ext);
  if (fs::exists(final_path)) return id;
  const fs::path tmp = root_ / "images" / (id + ".tmp" + ext);
  write_file(tmp, bytes);
  try {
    load_raster(tmp);
  } catch (...) {
    fs::remove(tmp);
    throw;
  }
  fs::rename(tmp, final_path);
  return id;
}

std::string BlobStore::put_checkpoint(const std::string& bytes) {
  const std::string id = sha256_hex(bytes);
  const fs::path final_path = root_ / "checkpoints" / (id + ".ckpt");
  if (fs::exists(final_path)) return id;
  const fs::path tmp = root_ / "checkpoints" / (id + ".tmp");
  write_file(tmp, bytes);
  try {
    SegmentationModel::load(tmp);
  } catch (...) {
    fs::remove(tmp);
    throw;
  }
  fs::rename(tmp, final_path);
  return id;
}

std::string BlobStore::put_image_file(const fs::path& path) { return put_image(read_file(path)); }
std::string BlobStore::put_checkpoint_file(const fs::path& path) { return put_checkpoint(read_file(path)); }

bool BlobStore::has_image(const std::string& id) const { return !image_path(id).empty(); }

bool BlobStore::has_checkpoint(const std::string& id) const {
  return valid_id(id) && fs::exists(root_ / "checkpoints" / (id + ".ckpt"));
}

RasterImage BlobStore::image(const std::string& id) const {
  const fs::path p = image_path(id);
  if (p.empty()) throw Error(ErrorCode::not_found, "unknown image '" + id + "'");
  return load_raster(p).image;
}

SegmentationModel BlobStore::checkpoint(const std::string& id) const {
  if (!has_checkpoint(id)) throw Error(ErrorCode::not_found, "unknown checkpoint '" + id + "'");
  return SegmentationModel::load(root_ / "checkpoints" / (id + ".ckpt"));
}

void BlobStore::put_confidnet(const std::string& checkpoint_id, const ConfidNetHead& head) {
  if (!has_checkpoint(checkpoint_id)) throw Error(ErrorCode::not_found, "unknown checkpoint '" + checkpoint_id + "'");
  head.save(root_ / "checkpoints" / (checkpoint_id + ".confidnet"));
}

std::optional<ConfidNetHead> BlobStore::confidnet(const std::string& checkpoint_id) const {
  const fs::path p = root_ / "checkpoints" / (checkpoint_id + ".confidnet");
  if (!valid_id(checkpoint_id) || !fs::exists(p)) return std::nullopt;
  return ConfidNetHead::load(p);
}

// ---------------------------------------------------------------------------

SessionOptions session_options_from_json(const nlohmann::json& j) {
  SessionOptions o;
  if (!j.is_object()) throw Error(ErrorCode::validation, "session request must be an object");
  if (!j.contains("checkpoint_id") || !j.contains("image_id"))
    throw Error(ErrorCode::validation, "session request needs checkpoint_id and image_id");
  o.checkpoint_id = j["checkpoint_id"].get<std::string>();
  o.image_id = j["image_id"].get<std::string>();
  if (j.contains("disca")) o.disca = j["disca"].get<DiscaConfig>();
  if (j.contains("weight_policy")) o.weight_policy = weight_policy_from_string(j["weight_policy"].get<std::string>());
  o.continue_from = j.value("continue_from", std::string());
  o.tile_size = j.value("tile_size", o.tile_size);
  o.overlap = j.value("overlap", o.overlap);
  o.seed = j.value("seed", o.seed);
  o.refresh_p0 = j.value("refresh_p0", o.refresh_p0);
  if (o.tile_size < 1 || o.overlap < 0 || o.overlap >= o.tile_size)
    throw Error(ErrorCode::validation, "tile_size must exceed overlap");
  if (!o.continue_from.empty() && o.weight_policy != WeightPolicy::sequential)
    throw Error(ErrorCode::validation, "continue_from requires the sequential weight policy");
  return o;
}

nlohmann::json to_json(const SessionOptions& o) {
  return {{"checkpoint_id", o.checkpoint_id}, {"image_id", o.image_id},
          {"disca", o.disca},                 {"weight_policy", to_string(o.weight_policy)},
          {"continue_from", o.continue_from}, {"tile_size", o.tile_size},
          {"overlap", o.overlap},             {"seed", o.seed},
          {"refresh_p0", o.refresh_p0}};
}

Session::Session(std::string id, SessionOptions options, SegmentationModel model, RasterImage image,
                 std::optional<ConfidNetHead> head)
    : id_(std::move(id)),
      options_(std::move(options)),
      image_(std::move(image)),
      head_(std::move(head)),
      model_(std::move(model)),
      rng_(options_.seed) {
  if (image_.channels() != model_.image_channels())
    throw Error(ErrorCode::mismatch, "image has " + std::to_string(image_.channels()) + " channels, checkpoint expects " +
                                         std::to_string(model_.image_channels()));
  grid_ = tile(image_, options_.tile_size, options_.overlap);
  initial_parameters_ = model_.parameters();
  config_hash_ = sha256_hex(to_json(options_).dump() + model_.hash());
  p0_ = predict_tiled(model_, image_, nullptr, grid_);
  p0_.frozen = true;
  initial_p0_ = p0_;
  current_ = p0_;
  current_.frozen = false;
}

std::unique_lock<std::mutex> Session::acquire_lane() {
  std::unique_lock<std::mutex> lock(lane_, std::try_to_lock);
  if (!lock.owns_lock()) throw Error(ErrorCode::busy, "session " + id_ + " is busy");
  return lock;
}

SegmentationModel Session::model_copy() const {
  std::lock_guard<std::mutex> g(state_);
  return model_;
}

nlohmann::json Session::summary() const {
  const UncertaintyMap h = entropy(initial_p0_);
  double mean = 0.0;
  for (float v : h.scores) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(1, h.scores.size()));
  std::lock_guard<std::mutex> g(state_);
  return {{"session_id", id_},
          {"config_hash", config_hash_},
          {"options", to_json(options_)},
          {"height", image_.height()},
          {"width", image_.width()},
          {"class_count", model_.class_count()},
          {"initial_mean_entropy", mean},
          {"click_count", clicks_.size()},
          {"snapshot_depth", snapshots_.size()}};
}

std::size_t Session::submit_clicks(const std::vector<ClickAnnotation>& clicks) {
  auto lane = acquire_lane();
  validate_clicks(clicks, image_.height(), image_.width(), model_.class_count());
  std::lock_guard<std::mutex> g(state_);
  clicks_.insert(clicks_.end(), clicks.begin(), clicks.end());
  return clicks_.size();
}

nlohmann::json Session::refine(RefineMode mode) {
  auto lane = acquire_lane();
  const auto start = std::chrono::steady_clock::now();
  SegmentationModel model;
  std::vector<ClickAnnotation> clicks;
  PredictionMap p0, before;
  {
    std::lock_guard<std::mutex> g(state_);
    model = model_;
    clicks = clicks_;
    p0 = p0_;
    before = current_;
  }
  std::optional<Snapshot> snapshot;
  if (mode == RefineMode::disca && !clicks.empty()) {
    snapshot = Snapshot{model.parameters(), clicks.size()};
    // Retrain on the tile centred closest to the latest click.
    const ClickAnnotation& last = clicks.back();
    std::size_t home = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < grid_.size(); ++t) {
      const Window& w = grid_.tiles[t].window;
      if (!w.contains(last.row, last.col)) continue;
      const double dr = last.row - (w.row + (w.height - 1) / 2.0), dc = last.col - (w.col + (w.width - 1) / 2.0);
      if (dr * dr + dc * dc < best) {
        best = dr * dr + dc * dc;
        home = t;
      }
    }
    const Window& w = grid_.tiles[home].window;
    const PredictionMap p0_tile{crop(p0.probabilities, w), true};
    std::mt19937_64 rng;
    {
      std::lock_guard<std::mutex> g(state_);
      rng = rng_;
    }
    clickseg::refine(model, crop(image_, w), clicks_in_window(clicks, w), p0_tile, options_.disca, rng);
    std::lock_guard<std::mutex> g(state_);
    rng_ = rng;
  }
  if (snapshot && options_.refresh_p0) {
    p0 = predict_tiled(model, image_, nullptr, grid_);
    p0.frozen = true;
  }
  PredictionMap after = predict_with_clicks(model, image_, clicks, grid_, &p0);
  const std::vector<int> a = before.argmax(), b = after.argmax();
  long long changed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != b[i];

  std::lock_guard<std::mutex> g(state_);
  if (snapshot) {
    snapshots_.push_back(std::move(*snapshot));
    if (snapshots_.size() > kMaxSnapshots) snapshots_.erase(snapshots_.begin());
    model_ = std::move(model);
    p0_ = std::move(p0);
  }
  current_ = std::move(after);
  return {{"mode", to_string(mode)},
          {"changed_pixels", changed},
          {"click_count", clicks_.size()},
          {"snapshot_depth", snapshots_.size()},
          {"wall_time", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
}

PredictionMap Session::prediction() const {
  std::lock_guard<std::mutex> g(state_);
  return current_;
}

PredictionMap Session::initial_prediction() const {
  std::lock_guard<std::mutex> g(state_);
  return p0_;
}

std::vector<ClickAnnotation> Session::clicks() const {
  std::lock_guard<std::mutex> g(state_);
  return clicks_;
}

std::size_t Session::snapshot_depth() const {
  std::lock_guard<std::mutex> g(state_);
  return snapshots_.size();
}

std::vector<float> Session::parameters() const {
  std::lock_guard<std::mutex> g(state_);
  return model_.parameters();
}

UncertaintyMap Session::uncertainty(AcquisitionMethod method) const {
  if (method == AcquisitionMethod::confidnet && !head_)
    throw Error(ErrorCode::not_found, "no confidence head registered for checkpoint " + options_.checkpoint_id);
  SegmentationModel model;
  std::vector<ClickAnnotation> clicks;
  PredictionMap current;
  {
    std::lock_guard<std::mutex> g(state_);
    model = model_;
    clicks = clicks_;
    current = current_;
  }
  AcquisitionSettings settings;
  settings.confidnet = head_ ? &*head_ : nullptr;
  settings.check_confidnet_identity = false;
  return tiled_uncertainty(method, model, image_, clicks, grid_, settings, &current);
}

std::vector<PatchQuery> Session::queries(StrategyKind kind, std::optional<AcquisitionMethod> method, int k) const {
  if (kind == StrategyKind::whole_image_oracle)
    throw Error(ErrorCode::invalid_argument, "the whole-image oracle needs ground truth and is not served");
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  StrategyConfig strategy{kind, kind == StrategyKind::active ? std::optional(method.value_or(AcquisitionMethod::entropy))
                                                             : std::nullopt,
                          options_.seed, false};
  QueryCampaign campaign(grid_, strategy);
  if (kind == StrategyKind::active) {
    campaign.set_scores(score_patches(uncertainty(*strategy.acquisition), grid_));
  } else {
    std::vector<int> order(grid_.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(options_.seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<PatchQuery> ranked;
    for (std::size_t r = 0; r < order.size(); ++r)
      ranked.push_back({order[r], grid_.tiles[order[r]].window, 0.0, static_cast<int>(r) + 1, PatchStatus::pending});
    campaign.set_scores(ranked);
  }
  for (const auto& click : clicks())
    for (const auto& p : campaign.patches())
      if (p.status == PatchStatus::pending && p.window.contains(click.row, click.col)) campaign.mark_annotated(p.index);
  return campaign.top_pending(k);
}

nlohmann::json Session::undo_last() {
  auto lane = acquire_lane();
  SegmentationModel model;
  std::vector<ClickAnnotation> clicks;
  PredictionMap p0;
  bool restored = false;
  {
    std::lock_guard<std::mutex> g(state_);
    if (clicks_.empty()) return {{"undone", false}, {"click_count", 0}, {"snapshot_depth", snapshots_.size()}};
    clicks_.pop_back();
    std::optional<std::vector<float>> params;
    while (!snapshots_.empty() && snapshots_.back().click_count > clicks_.size()) {
      params = std::move(snapshots_.back().parameters);
      snapshots_.pop_back();
    }
    if (params) {
      model_.parameters() = std::move(*params);
      restored = true;
    }
    model = model_;
    clicks = clicks_;
    p0 = p0_;
  }
  if (restored && options_.refresh_p0) {
    p0 = predict_tiled(model, image_, nullptr, grid_);
    p0.frozen = true;
  }
  PredictionMap after = predict_with_clicks(model, image_, clicks, grid_, &p0);
  std::lock_guard<std::mutex> g(state_);
  current_ = std::move(after);
  p0_ = std::move(p0);
  return {{"undone", true},
          {"parameters_restored", restored},
          {"click_count", clicks_.size()},
          {"snapshot_depth", snapshots_.size()}};
}

void Session::reset() {
  auto lane = acquire_lane();
  std::lock_guard<std::mutex> g(state_);
  model_.parameters() = initial_parameters_;
  clicks_.clear();
  snapshots_.clear();
  p0_ = initial_p0_;
  current_ = p0_;
  current_.frozen = false;
  rng_.seed(options_.seed);
}

std::string Session::state_hash() const {
  std::lock_guard<std::mutex> g(state_);
  std::string blob = bytes_of(model_.parameters());
  blob += nlohmann::json(clicks_).dump();
  for (const auto& s : snapshots_) blob += std::to_string(s.click_count) + sha256_of(std::span<const float>(s.parameters));
  blob += bytes_of(current_.probabilities.data);
  return sha256_hex(blob);
}

// ---------------------------------------------------------------------------

SessionManager::SessionManager(fs::path store_root) : store_(std::move(store_root)) {}

std::shared_ptr<Session> SessionManager::create(const SessionOptions& options) {
  SegmentationModel model = store_.checkpoint(options.checkpoint_id);
  RasterImage image = store_.image(options.image_id);
  if (!options.continue_from.empty()) {
    const auto previous = get(options.continue_from);
    if (previous->options().checkpoint_id != options.checkpoint_id)
      throw Error(ErrorCode::mismatch, "continue_from session uses a different checkpoint");
    model.parameters() = previous->parameters();
  }
  std::string id;
  {
    std::lock_guard<std::mutex> g(mutex_);
    id = "s" + std::to_string(next_id_++);
  }
  auto session = std::make_shared<Session>(id, options, std::move(model), std::move(image),
                                           store_.confidnet(options.checkpoint_id));
  std::lock_guard<std::mutex> g(mutex_);
  sessions_[id] = session;
  return session;
}

std::shared_ptr<Session> SessionManager::get(const std::string& id) const {
  std::lock_guard<std::mutex> g(mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw Error(ErrorCode::not_found, "unknown session '" + id + "'");
  return it->second;
}

bool SessionManager::erase(const std::string& id) {
  std::lock_guard<std::mutex> g(mutex_);
  return sessions_.erase(id) > 0;
}

std::size_t SessionManager::size() const {
  std::lock_guard<std::mutex> g(mutex_);
  return sessions_.size();
}

// ---------------------------------------------------------------------------

std::vector<std::array<int, 3>> class_palette(int class_count) {
  static const std::array<std::array<int, 3>, 8> base{{{255, 255, 255},
                                                       {0, 0, 255},
                                                       {0, 255, 255},
                                                       {0, 255, 0},
                                                       {255, 255, 0},
                                                       {255, 0, 0},
                                                       {255, 0, 255},
                                                       {128, 128, 128}}};
  std::vector<std::array<int, 3>> out;
  for (int k = 0; k < class_count; ++k) out.push_back(base[static_cast<std::size_t>(k) % base.size()]);
  return out;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::validation: return 400;
    case ErrorCode::not_found: return 404;
    case ErrorCode::busy:
    case ErrorCode::exhausted: return 409;
    case ErrorCode::mismatch: return 422;
    case ErrorCode::diverged:
    case ErrorCode::io: return 500;
  }
  return 500;
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, ErrorCode code, const std::string& message) {
  send_json(res, http_status(code), {{"error", {{"code", to_string(code)}, {"message", message}}}});
}

template <typename F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, ErrorCode::validation, std::string("bad request body: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, ErrorCode::io, e.what());
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

nlohmann::json with_hash(nlohmann::json body, const Session& s) {
  body["session_id"] = s.id();
  body["config_hash"] = s.config_hash();
  return body;
}

nlohmann::json query_json(const PatchQuery& q) {
  return {{"index", q.index},
          {"window", {{"row", q.window.row}, {"col", q.window.col}, {"height", q.window.height}, {"width", q.window.width}}},
          {"score", q.score},
          {"rank", q.rank},
          {"status", q.status == PatchStatus::pending ? "pending" : "annotated"}};
}

}  // namespace

void install_routes(httplib::Server& server, SessionManager& manager) {
  server.Post("/images", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const std::string id = manager.store().put_image(req.body);
                const RasterImage img = manager.store().image(id);
                send_json(res, 201,
                          {{"image_id", id}, {"height", img.height()}, {"width", img.width()}, {"channels", img.channels()}});
              }));
  server.Post("/checkpoints", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const std::string id = manager.store().put_checkpoint(req.body);
                const SegmentationModel m = manager.store().checkpoint(id);
                send_json(res, 201,
                          {{"checkpoint_id", id},
                           {"class_count", m.class_count()},
                           {"image_channels", m.image_channels()},
                           {"encoding", m.config().encoding}});
              }));
  server.Post("/sessions", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const auto session = manager.create(session_options_from_json(parse_body(req)));
                send_json(res, 201, session->summary());
              }));
  server.Get("/sessions/:id", guarded([&](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, manager.get(req.path_params.at("id"))->summary());
             }));
  server.Delete("/sessions/:id", guarded([&](const httplib::Request& req, httplib::Response& res) {
                  const std::string id = req.path_params.at("id");
                  if (!manager.erase(id)) throw Error(ErrorCode::not_found, "unknown session '" + id + "'");
                  send_json(res, 200, {{"session_id", id}, {"deleted", true}});
                }));
  server.Post("/sessions/:id/clicks", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const auto s = manager.get(req.path_params.at("id"));
                const auto body = parse_body(req);
                if (!body.contains("clicks") || !body["clicks"].is_array())
                  throw Error(ErrorCode::validation, "body needs a 'clicks' array");
                const auto clicks = body["clicks"].get<std::vector<ClickAnnotation>>();
                const std::size_t n = s->submit_clicks(clicks);
                send_json(res, 200, with_hash({{"click_count", n}}, *s));
              }));
  server.Post("/sessions/:id/refine", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const auto s = manager.get(req.path_params.at("id"));
                const auto body = parse_body(req);
                const RefineMode mode = refine_mode_from_string(body.value("mode", std::string("ac_only")));
                send_json(res, 200, with_hash(s->refine(mode), *s));
              }));
  server.Get("/sessions/:id/prediction", guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto s = manager.get(req.path_params.at("id"));
               const PredictionMap p = s->prediction();
               const std::vector<int> idx = p.argmax();
               std::string bytes(idx.size(), '\0');
               for (std::size_t i = 0; i < idx.size(); ++i) bytes[i] = static_cast<char>(idx[i]);
               send_json(res, 200,
                         with_hash({{"height", p.height()},
                                    {"width", p.width()},
                                    {"class_count", p.class_count()},
                                    {"palette", class_palette(p.class_count())},
                                    {"indices", base64_encode(bytes)}},
                                   *s));
             }));
  server.Get("/sessions/:id/uncertainty", guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto s = manager.get(req.path_params.at("id"));
               const std::string method = req.has_param("method") ? req.get_param_value("method") : "entropy";
               const UncertaintyMap u = s->uncertainty(acquisition_from_string(method));
               const auto [lo, hi] = std::minmax_element(u.scores.begin(), u.scores.end());
               send_json(res, 200,
                         with_hash({{"method", u.method},
                                    {"height", u.height},
                                    {"width", u.width},
                                    {"wall_time", u.wall_time},
                                    {"min", u.scores.empty() ? 0.0F : *lo},
                                    {"max", u.scores.empty() ? 0.0F : *hi},
                                    {"scores", base64_encode(bytes_of(u.scores))}},
                                   *s));
             }));
  server.Get("/sessions/:id/queries", guarded([&](const httplib::Request& req, httplib::Response& res) {
               const auto s = manager.get(req.path_params.at("id"));
               const std::string strategy = req.has_param("strategy") ? req.get_param_value("strategy") : "entropy";
               int k = 5;
               if (req.has_param("k")) {
                 try {
                   k = std::stoi(req.get_param_value("k"));
                 } catch (const std::exception&) {
                   throw Error(ErrorCode::validation, "k must be an integer");
                 }
               }
               // "random" orders patches randomly; any acquisition method name ranks by it.
               std::vector<PatchQuery> qs = strategy == "random"
                                                ? s->queries(StrategyKind::random, std::nullopt, k)
                                                : s->queries(StrategyKind::active, acquisition_from_string(strategy), k);
               nlohmann::json arr = nlohmann::json::array();
               for (const auto& q : qs) arr.push_back(query_json(q));
               send_json(res, 200, with_hash({{"strategy", strategy}, {"queries", arr}}, *s));
             }));
  server.Post("/sessions/:id/undo", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const auto s = manager.get(req.path_params.at("id"));
                send_json(res, 200, with_hash(s->undo_last(), *s));
              }));
  server.Post("/sessions/:id/reset", guarded([&](const httplib::Request& req, httplib::Response& res) {
                const auto s = manager.get(req.path_params.at("id"));
                s->reset();
                send_json(res, 200, with_hash({{"reset", true}, {"click_count", 0}, {"snapshot_depth", 0}}, *s));
              }));
}

}  // namespace clickseg
