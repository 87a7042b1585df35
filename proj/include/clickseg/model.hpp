#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/annotation.hpp"
#include "clickseg/nn.hpp"
#include "clickseg/prediction.hpp"
#include "clickseg/raster.hpp"

namespace clickseg {

struct ModelConfig {
  int image_channels = 3;
  int class_count = 2;
  std::array<int, 3> widths{16, 32, 64};
  double dropout_rate = 0.1;
  EncodingConfig encoding = EncodingConfig::distance_transform();  ///< the encoding the model is trained with
};

/// Dense classifier over an image concatenated with N annotation channels.
class SegmentationModel {
 public:
  SegmentationModel() = default;
  SegmentationModel(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  int class_count() const { return config_.class_count; }
  int image_channels() const { return config_.image_channels; }
  int input_channels() const { return config_.image_channels + config_.class_count; }

  nn::Network<float>& network() { return net_; }
  const nn::Network<float>& network() const { return net_; }
  std::vector<float>& parameters() { return net_.parameters(); }
  const std::vector<float>& parameters() const { return net_.parameters(); }

  /// Image channels followed by annotation channels (zeros when `annotations` is null).
  Tensor3<float> assemble_input(const RasterImage& image, const AnnotationTensor* annotations) const;

  /// SHA-256 over configuration and parameters.
  std::string hash() const;

  void save(const std::filesystem::path& path) const;
  static SegmentationModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  nn::Network<float> net_;
};

/// Softmax prediction. `stochastic` enables the model's dropout and needs an rng.
PredictionMap forward(const SegmentationModel& model, const RasterImage& image, const AnnotationTensor& annotations,
                      bool stochastic = false, std::mt19937_64* rng = nullptr);

/// Image-only prediction (all annotation channels zero).
PredictionMap forward(const SegmentationModel& model, const RasterImage& image);

/// Per-tile function producing a C x h x w map for one window.
using TileFunction = std::function<Tensor3<float>(const Window&)>;

/// Applies `fn` to every tile and averages overlaps.
Tensor3<float> apply_tiled(const TileGrid& grid, const TileFunction& fn);

/// Tiled prediction; overlapping tile probabilities are averaged.
PredictionMap predict_tiled(const SegmentationModel& model, const RasterImage& image,
                            const AnnotationTensor* annotations, const TileGrid& grid);

struct PretrainConfig {
  int max_clicks = 20;               ///< K: clicks per annotated sample drawn from U{1..K}
  double image_only_fraction = 0.5;  ///< probability of an all-zero annotation input
  int epochs = 20;
  int batch_size = 8;
  double learning_rate = 1e-3;  ///< Adam
  int crop_size = 64;           ///< random crops of larger images
  std::uint64_t seed = 7;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
};

/// Supervised training with ground-truth-sampled clicks as annotation input.
/// Throws ErrorCode::diverged on a non-finite loss.
SegmentationModel pretrain(SegmentationModel model, const std::vector<std::pair<RasterImage, LabelMask>>& dataset,
                           const PretrainConfig& config, PretrainReport* report = nullptr);

/// Clicks sampled like during pretraining: a uniformly chosen present class,
/// then a uniformly chosen pixel of that class.
std::vector<ClickAnnotation> sample_groundtruth_clicks(const LabelMask& labels, int count, std::mt19937_64& rng);

/// Mean pixel cross-entropy loss and its logit gradient (ignored pixels excluded).
double cross_entropy(const Tensor3<float>& logits, const LabelMask& labels, Tensor3<float>* dlogits);

}  // namespace clickseg
