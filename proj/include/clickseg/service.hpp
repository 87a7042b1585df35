#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clickseg/acquisition.hpp"
#include "clickseg/active_query.hpp"
#include "clickseg/error.hpp"
#include "clickseg/experiment.hpp"
#include "clickseg/model.hpp"
#include "clickseg/retrain.hpp"

namespace httplib {
class Server;
}

namespace clickseg {

/// Content-addressed files on local disk: `<root>/images/<sha256>.<ext>` and
/// `<root>/checkpoints/<sha256>.ckpt`.
class BlobStore {
 public:
  explicit BlobStore(std::filesystem::path root);

  /// Validates the bytes (decodable raster / loadable checkpoint) and returns the id.
  std::string put_image(const std::string& bytes);
  std::string put_checkpoint(const std::string& bytes);
  /// Registers files that already exist on disk (copied into the store).
  std::string put_image_file(const std::filesystem::path& path);
  std::string put_checkpoint_file(const std::filesystem::path& path);

  RasterImage image(const std::string& id) const;
  SegmentationModel checkpoint(const std::string& id) const;
  bool has_image(const std::string& id) const;
  bool has_checkpoint(const std::string& id) const;

  /// Optional confidence head registered for a checkpoint.
  void put_confidnet(const std::string& checkpoint_id, const ConfidNetHead& head);
  std::optional<ConfidNetHead> confidnet(const std::string& checkpoint_id) const;

 private:
  std::filesystem::path image_path(const std::string& id) const;
  std::filesystem::path root_;
};

struct SessionOptions {
  std::string checkpoint_id;
  std::string image_id;
  DiscaConfig disca;
  WeightPolicy weight_policy = WeightPolicy::reset_per_image;
  std::string continue_from;  ///< sequential policy: start from this session's parameters
  int tile_size = 64;
  int overlap = 16;
  std::uint64_t seed = 1;
  bool refresh_p0 = false;  ///< after each disca refine, re-anchor p0 on the refined model's image-only prediction
};

SessionOptions session_options_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SessionOptions& o);

inline constexpr std::size_t kMaxSnapshots = 10;

/// Live interactive state for one image. Public methods are thread-safe;
/// mutating calls fail with ErrorCode::busy while another one runs.
class Session {
 public:
  Session(std::string id, SessionOptions options, SegmentationModel model, RasterImage image,
          std::optional<ConfidNetHead> head);

  const std::string& id() const { return id_; }
  const std::string& config_hash() const { return config_hash_; }
  const SessionOptions& options() const { return options_; }

  nlohmann::json summary() const;
  std::size_t submit_clicks(const std::vector<ClickAnnotation>& clicks);
  nlohmann::json refine(RefineMode mode);
  PredictionMap prediction() const;
  PredictionMap initial_prediction() const;
  UncertaintyMap uncertainty(AcquisitionMethod method) const;
  std::vector<PatchQuery> queries(StrategyKind kind, std::optional<AcquisitionMethod> method, int k) const;
  nlohmann::json undo_last();
  void reset();

  std::vector<ClickAnnotation> clicks() const;
  std::size_t snapshot_depth() const;
  std::vector<float> parameters() const;
  /// Hash over parameters, clicks, snapshots and the current prediction.
  std::string state_hash() const;

 private:
  struct Snapshot {
    std::vector<float> parameters;
    std::size_t click_count = 0;  ///< clicks present when the refine ran
  };

  std::unique_lock<std::mutex> acquire_lane();
  SegmentationModel model_copy() const;

  std::string id_;
  SessionOptions options_;
  std::string config_hash_;
  RasterImage image_;
  TileGrid grid_;
  std::optional<ConfidNetHead> head_;
  std::vector<float> initial_parameters_;

  mutable std::mutex state_;  ///< guards everything below
  std::mutex lane_;           ///< one mutating call at a time
  SegmentationModel model_;
  PredictionMap p0_;
  PredictionMap initial_p0_;
  PredictionMap current_;
  std::vector<ClickAnnotation> clicks_;
  std::vector<Snapshot> snapshots_;
  std::mt19937_64 rng_;
};

class SessionManager {
 public:
  explicit SessionManager(std::filesystem::path store_root);

  BlobStore& store() { return store_; }
  std::shared_ptr<Session> create(const SessionOptions& options);
  std::shared_ptr<Session> get(const std::string& id) const;
  bool erase(const std::string& id);
  std::size_t size() const;

 private:
  BlobStore store_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 1;
};

/// Fixed class palette (RGB) used by the prediction endpoint.
std::vector<std::array<int, 3>> class_palette(int class_count);

/// Registers every route of the HTTP API on `server`.
void install_routes(httplib::Server& server, SessionManager& manager);

/// HTTP status used for an error code.
int http_status(ErrorCode code);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

}  // namespace clickseg
