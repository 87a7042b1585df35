#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "clickseg/prediction.hpp"
#include "clickseg/raster.hpp"

namespace clickseg {

enum class ClickOrigin { human, simulated };

/// A labelled point; the atomic unit of interaction.
struct ClickAnnotation {
  int row = 0;
  int col = 0;
  int class_id = 0;
  ClickOrigin origin = ClickOrigin::human;

  friend bool operator==(const ClickAnnotation&, const ClickAnnotation&) = default;
};

/// Dense N-channel click encoding, values in [0,1].
struct AnnotationTensor {
  Tensor3<float> channels;
};

enum class EncodingKind { binary_disk, distance_transform, guided_filter, connected_prediction, connected_groundtruth };

struct EncodingConfig {
  EncodingKind kind = EncodingKind::distance_transform;
  double radius = 10.0;          ///< disk radius in pixels
  int filter_radius = 4;         ///< guided filter window radius
  double filter_epsilon = 1e-2;  ///< guided filter regularization

  static EncodingConfig binary_disk() { return {EncodingKind::binary_disk, 1.5, 4, 1e-2}; }
  static EncodingConfig distance_transform() { return {EncodingKind::distance_transform, 10.0, 4, 1e-2}; }
};

const char* to_string(EncodingKind kind);
EncodingKind encoding_kind_from_string(const std::string& name);

/// Context a context-aware encoding reads from.
using EncodingContext = std::variant<std::monostate, const RasterImage*, const PredictionMap*, const LabelMask*>;

/// Encodes clicks into an N x H x W tensor. Multiple clicks combine by
/// pointwise maximum within their class channel.
AnnotationTensor encode(const std::vector<ClickAnnotation>& clicks, int height, int width, int class_count,
                        const EncodingConfig& config, EncodingContext context = {});

/// Checks bounds and class range; throws a validation error otherwise.
void validate_clicks(const std::vector<ClickAnnotation>& clicks, int height, int width, int class_count);

/// Edge-preserving guided filter with a (possibly multi-channel) guide.
/// Each window fits input ~ a . guide + b by ridge regression; per-pixel
/// coefficients are box averages of the covering windows' coefficients.
std::vector<float> guided_filter(const std::vector<float>& input, const Tensor3<float>& guide, int window_radius,
                                 double epsilon);

/// Clicks whose position lies inside `window`, shifted to window coordinates.
std::vector<ClickAnnotation> clicks_in_window(const std::vector<ClickAnnotation>& clicks, const Window& window);

void to_json(nlohmann::json& j, const ClickAnnotation& click);
void from_json(const nlohmann::json& j, ClickAnnotation& click);
void to_json(nlohmann::json& j, const EncodingConfig& config);
void from_json(const nlohmann::json& j, EncodingConfig& config);

}  // namespace clickseg

namespace clickseg {

/// Encodes with whichever context `config.kind` needs, picked from the given
/// sources. Throws a validation error when the needed source is null.
AnnotationTensor encode_with_sources(const std::vector<ClickAnnotation>& clicks, int class_count,
                                     const EncodingConfig& config, const RasterImage& image,
                                     const PredictionMap* prediction = nullptr, const LabelMask* labels = nullptr);

}  // namespace clickseg
