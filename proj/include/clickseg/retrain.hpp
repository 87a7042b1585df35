#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "clickseg/annotation.hpp"
#include "clickseg/model.hpp"
#include "clickseg/prediction.hpp"

namespace clickseg {

/// Sparse click target: per pixel either all -1 (unannotated) or one-hot.
struct SparseTarget {
  Tensor3<signed char> values;

  int height() const { return values.height; }
  int width() const { return values.width; }
  int class_count() const { return values.channels; }
  /// Annotated class at flat pixel index `i`, or -1.
  int annotated_class(std::size_t i) const;
  std::size_t annotated_count() const;
};

/// Later clicks on the same pixel overwrite earlier ones.
SparseTarget build_sparse_target(const std::vector<ClickAnnotation>& clicks, int height, int width, int class_count);

/// Loss value with its two terms.
struct LossTerms {
  double total = 0.0;
  double cross_entropy = 0.0;  ///< mean over annotated pixels, 0 when none
  double recall = 0.0;         ///< mean |f - p0| over all pixel-class entries (unweighted)
};

inline constexpr double kLogFloor = 1e-7;

/// Sparse cross-entropy plus lambda * mean |f - p0|, evaluated on probabilities.
/// When `dprobs` is non-null it receives dLoss/df (zero where the floor clamps).
template <typename T>
LossTerms interactive_loss(const Tensor3<T>& probs, const SparseTarget& target, const Tensor3<T>& p0, double lambda,
                           Tensor3<T>* dprobs = nullptr);

/// Same loss as a function of logits (softmax applied first); `dlogits` gets dLoss/dlogits.
template <typename T>
LossTerms interactive_loss_logits(const Tensor3<T>& logits, const SparseTarget& target, const Tensor3<T>& p0,
                                  double lambda, Tensor3<T>* dlogits = nullptr);

LossTerms interactive_loss(const PredictionMap& prediction, const SparseTarget& target, const PredictionMap& p0,
                           double lambda);

struct DiscaConfig {
  double lambda = 1.0;
  int steps = 10;
  double learning_rate = 2e-6;
  double ac_dropout_probability = 0.5;  ///< chance per step of zeroing the annotation channels
  bool regularization_enabled = true;
  bool ac_enabled = true;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const DiscaConfig& c);
void from_json(const nlohmann::json& j, DiscaConfig& c);

struct RefineResult {
  PredictionMap prediction;  ///< fresh prediction after retraining
  std::vector<double> losses;  ///< one per step
  double wall_time = 0.0;
};

/// Retrains `model` in place on the clicks with plain SGD and returns its new
/// prediction. `p0` must be the frozen initial prediction for `image`.
/// A non-finite loss restores the original parameters and throws
/// ErrorCode::diverged. `force_nonfinite_at` injects a NaN loss at that step (tests).
RefineResult refine(SegmentationModel& model, const RasterImage& image, const std::vector<ClickAnnotation>& clicks,
                    const PredictionMap& p0, const DiscaConfig& config, std::mt19937_64& rng,
                    std::optional<int> force_nonfinite_at = std::nullopt);

enum class WeightPolicy { reset_per_image, sequential };

const char* to_string(WeightPolicy policy);
WeightPolicy weight_policy_from_string(const std::string& name);

/// Hands out the model to use for each image of a sequence.
class SessionWeights {
 public:
  SessionWeights(SegmentationModel checkpoint, WeightPolicy policy);

  /// Model for the next image: the checkpoint (reset_per_image) or the
  /// carried-forward parameters (sequential).
  SegmentationModel& begin_image();
  SegmentationModel& current() { return current_; }
  const SegmentationModel& checkpoint() const { return checkpoint_; }
  WeightPolicy policy() const { return policy_; }

 private:
  SegmentationModel checkpoint_;
  SegmentationModel current_;
  WeightPolicy policy_;
};

}  // namespace clickseg
