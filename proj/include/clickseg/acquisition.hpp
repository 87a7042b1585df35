#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clickseg/annotation.hpp"
#include "clickseg/model.hpp"
#include "clickseg/prediction.hpp"

namespace clickseg {

/// -sum p ln p with 0 ln 0 = 0.
double entropy(std::span<const double> probabilities);

/// Per-pixel entropy of an existing prediction (no forward pass).
UncertaintyMap entropy(const PredictionMap& prediction);

struct McDropoutConfig {
  int passes = 5;
  double dropout_rate = 0.1;
  std::uint64_t seed = 11;
};

struct OdinConfig {
  double epsilon = 1.0 / 255.0;
  double temperature = 100.0;
  /// true: step against the loss gradient, raising the predicted class's
  /// probability; false: step along it.
  bool toward_prediction = true;
};

/// Variance across stochastic passes of each class probability, summed over classes.
UncertaintyMap mc_dropout(const SegmentationModel& model, const RasterImage& image,
                          const AnnotationTensor& annotations, const McDropoutConfig& config);

/// 1 - max tempered softmax on the perturbed image.
UncertaintyMap odin(const SegmentationModel& model, const RasterImage& image, const AnnotationTensor& annotations,
                    const OdinConfig& config);

/// Auxiliary confidence regressor on the network's decoder feature tap:
/// transposed conv, four 3x3 convs, sigmoid.
class ConfidNetHead {
 public:
  static constexpr std::array<int, 5> kDefaultWidths{32, 120, 64, 32, 1};

  ConfidNetHead() = default;
  /// Last width must be 1. The final layer starts at zero.
  ConfidNetHead(int input_channels, std::array<int, 5> widths, std::uint64_t seed);

  int input_channels() const { return up_.in; }
  const std::array<int, 5>& widths() const { return widths_; }
  std::vector<float>& parameters() { return params_; }
  const std::vector<float>& parameters() const { return params_; }

  /// Hash of the downstream model this head was trained for ("" if untrained).
  const std::string& model_hash() const { return model_hash_; }
  void set_model_hash(std::string h) { model_hash_ = std::move(h); }

  struct Cache {
    Tensor3<float> tap, u, a1, a2, a3, out;
  };
  /// Confidence in (0,1) at the tap's doubled resolution.
  Tensor3<float> forward(const Tensor3<float>& tap, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients given dLoss/dconfidence.
  void backward(const Cache& cache, const Tensor3<float>& dconfidence, std::span<float> grads) const;

  void save(const std::filesystem::path& path) const;
  static ConfidNetHead load(const std::filesystem::path& path);

 private:
  std::array<int, 5> widths_{};
  nn::UpConv up_;
  std::array<nn::Conv, 4> convs_;
  std::vector<float> params_;
  std::string model_hash_;
};

struct ConfidNetTrainConfig {
  int epochs = 10;
  double learning_rate = 1e-3;  ///< Adam
  double click_fraction = 0.5;  ///< samples fed with ground-truth clicks
  int max_clicks = 20;
  std::uint64_t seed = 5;
};

struct ConfidNetReport {
  std::vector<double> epoch_loss;
};

/// Fits the head to the model's true-class probability with squared error.
/// The model is never modified.
ConfidNetHead confidnet_train(const SegmentationModel& model, ConfidNetHead head,
                              const std::vector<std::pair<RasterImage, LabelMask>>& dataset,
                              const ConfidNetTrainConfig& config, ConfidNetReport* report = nullptr);

/// 1 - head confidence. Throws ErrorCode::mismatch if the head was trained for
/// another model, unless `check_identity` is false (models refined after the head was fit).
UncertaintyMap confidnet_score(const SegmentationModel& model, const RasterImage& image,
                               const AnnotationTensor& annotations, const ConfidNetHead& head,
                               bool check_identity = true);

enum class AcquisitionMethod { entropy, mc_dropout, odin, confidnet };

const char* to_string(AcquisitionMethod m);
AcquisitionMethod acquisition_from_string(const std::string& name);

struct AcquisitionSettings {
  McDropoutConfig mc;
  OdinConfig odin;
  const ConfidNetHead* confidnet = nullptr;
  bool check_confidnet_identity = true;
};

/// Runs `method` from scratch, including its forward passes; wall_time covers all of it.
UncertaintyMap estimate_uncertainty(AcquisitionMethod method, const SegmentationModel& model,
                                    const RasterImage& image, const AnnotationTensor& annotations,
                                    const AcquisitionSettings& settings);

/// Writes the scores as an 8-bit grey PNG scaled to the map's range plus a
/// `<path>.json` sidecar {method, wall_time, min, max, config}.
void save_uncertainty(const std::filesystem::path& path, const UncertaintyMap& map, const nlohmann::json& config);

}  // namespace clickseg
