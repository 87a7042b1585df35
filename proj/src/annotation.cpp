#include "clickseg/annotation.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "clickseg/error.hpp"
#include "clickseg/morphology.hpp"

namespace clickseg {

const char* to_string(EncodingKind kind) {
  switch (kind) {
    case EncodingKind::binary_disk: return "binary_disk";
    case EncodingKind::distance_transform: return "distance_transform";
    case EncodingKind::guided_filter: return "guided_filter";
    case EncodingKind::connected_prediction: return "connected_prediction";
    case EncodingKind::connected_groundtruth: return "connected_groundtruth";
  }
  return "unknown";
}

EncodingKind encoding_kind_from_string(const std::string& name) {
  for (auto k : {EncodingKind::binary_disk, EncodingKind::distance_transform, EncodingKind::guided_filter,
                 EncodingKind::connected_prediction, EncodingKind::connected_groundtruth})
    if (name == to_string(k)) return k;
  throw Error(ErrorCode::invalid_argument, "unknown encoding kind '" + name + "'");
}

void validate_clicks(const std::vector<ClickAnnotation>& clicks, int height, int width, int class_count) {
  for (const auto& c : clicks) {
    if (c.row < 0 || c.row >= height || c.col < 0 || c.col >= width)
      throw Error(ErrorCode::validation, "click (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                                             ") outside " + std::to_string(height) + "x" + std::to_string(width));
    if (c.class_id < 0 || c.class_id >= class_count)
      throw Error(ErrorCode::validation, "click class " + std::to_string(c.class_id) + " out of range for " +
                                             std::to_string(class_count) + " classes");
  }
}

std::vector<ClickAnnotation> clicks_in_window(const std::vector<ClickAnnotation>& clicks, const Window& window) {
  std::vector<ClickAnnotation> out;
  for (auto c : clicks)
    if (window.contains(c.row, c.col)) {
      c.row -= window.row;
      c.col -= window.col;
      out.push_back(c);
    }
  return out;
}

namespace {

// Max of (1 - d / radius) over the clicks, or a hard disk.
void splat_disks(Tensor3<float>& out, const std::vector<ClickAnnotation>& clicks, double radius, bool binary) {
  const int reach = static_cast<int>(std::ceil(radius));
  for (const auto& click : clicks) {
    auto plane = out.channel(click.class_id);
    for (int r = std::max(0, click.row - reach); r <= std::min(out.height - 1, click.row + reach); ++r)
      for (int c = std::max(0, click.col - reach); c <= std::min(out.width - 1, click.col + reach); ++c) {
        const double d = std::hypot(r - click.row, c - click.col);
        float v = 0.0F;
        if (binary)
          v = d <= radius ? 1.0F : 0.0F;
        else
          v = static_cast<float>(std::max(0.0, 1.0 - d / radius));
        float& cell = plane[static_cast<std::size_t>(r) * out.width + c];
        cell = std::max(cell, v);
      }
  }
}

void splat_components(Tensor3<float>& out, const std::vector<ClickAnnotation>& clicks, std::span<const int> values) {
  for (const auto& click : clicks) {
    const auto component = flood_fill_equal(values, out.height, out.width, {click.row, click.col});
    auto plane = out.channel(click.class_id);
    for (std::size_t i = 0; i < component.size(); ++i)
      if (component[i]) plane[i] = 1.0F;
  }
}

// Box mean with windows clipped at the border, via a summed-area table.
class BoxMean {
 public:
  BoxMean(int h, int w, int radius) : h_(h), w_(w), radius_(radius), sat_(static_cast<std::size_t>(h + 1) * (w + 1)) {}

  std::vector<double> operator()(const std::vector<double>& x) {
    std::fill(sat_.begin(), sat_.end(), 0.0);
    for (int r = 0; r < h_; ++r)
      for (int c = 0; c < w_; ++c)
        sat_[idx(r + 1, c + 1)] = x[static_cast<std::size_t>(r) * w_ + c] + sat_[idx(r, c + 1)] +
                                  sat_[idx(r + 1, c)] - sat_[idx(r, c)];
    std::vector<double> out(x.size());
    for (int r = 0; r < h_; ++r) {
      const int r0 = std::max(0, r - radius_), r1 = std::min(h_ - 1, r + radius_);
      for (int c = 0; c < w_; ++c) {
        const int c0 = std::max(0, c - radius_), c1 = std::min(w_ - 1, c + radius_);
        const double sum = sat_[idx(r1 + 1, c1 + 1)] - sat_[idx(r0, c1 + 1)] - sat_[idx(r1 + 1, c0)] + sat_[idx(r0, c0)];
        out[static_cast<std::size_t>(r) * w_ + c] = sum / ((r1 - r0 + 1) * (c1 - c0 + 1));
      }
    }
    return out;
  }

 private:
  std::size_t idx(int r, int c) const { return static_cast<std::size_t>(r) * (w_ + 1) + c; }
  int h_, w_, radius_;
  std::vector<double> sat_;
};

}  // namespace

std::vector<float> guided_filter(const std::vector<float>& input, const Tensor3<float>& guide, int window_radius,
                                 double epsilon) {
  if (window_radius < 1 || epsilon <= 0.0)
    throw Error(ErrorCode::invalid_argument, "guided_filter: need window_radius >= 1 and epsilon > 0");
  const int h = guide.height, w = guide.width, nc = guide.channels;
  const std::size_t n = guide.plane();
  if (input.size() != n) throw Error(ErrorCode::invalid_argument, "guided_filter: input/guide size mismatch");

  BoxMean box(h, w, window_radius);
  std::vector<double> p(input.begin(), input.end());
  const auto mean_p = box(p);
  std::vector<std::vector<double>> mean_i(nc), cov_ip(nc);
  for (int k = 0; k < nc; ++k) {
    std::vector<double> ik(guide.channel(k).begin(), guide.channel(k).end());
    std::vector<double> ip(n);
    for (std::size_t i = 0; i < n; ++i) ip[i] = ik[i] * p[i];
    mean_i[k] = box(ik);
    cov_ip[k] = box(ip);
    for (std::size_t i = 0; i < n; ++i) cov_ip[k][i] -= mean_i[k][i] * mean_p[i];
  }
  std::vector<std::vector<double>> var(static_cast<std::size_t>(nc) * nc);
  for (int a = 0; a < nc; ++a)
    for (int b = a; b < nc; ++b) {
      std::vector<double> prod(n);
      for (std::size_t i = 0; i < n; ++i) prod[i] = double(guide.channel(a)[i]) * guide.channel(b)[i];
      auto m = box(prod);
      for (std::size_t i = 0; i < n; ++i) m[i] -= mean_i[a][i] * mean_i[b][i];
      var[static_cast<std::size_t>(a) * nc + b] = m;
    }

  std::vector<std::vector<double>> coeff_a(nc, std::vector<double>(n));
  std::vector<double> coeff_b(n);
  Eigen::MatrixXd sigma(nc, nc);
  Eigen::VectorXd cov(nc);
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < nc; ++a) {
      cov(a) = cov_ip[a][i];
      for (int b = a; b < nc; ++b) sigma(a, b) = sigma(b, a) = var[static_cast<std::size_t>(a) * nc + b][i];
      sigma(a, a) += epsilon;
    }
    const Eigen::VectorXd sol = sigma.ldlt().solve(cov);
    double b = mean_p[i];
    for (int a = 0; a < nc; ++a) {
      coeff_a[a][i] = sol(a);
      b -= sol(a) * mean_i[a][i];
    }
    coeff_b[i] = b;
  }
  const auto mean_b = box(coeff_b);
  std::vector<double> q(mean_b);
  for (int a = 0; a < nc; ++a) {
    const auto mean_a = box(coeff_a[a]);
    const auto ch = guide.channel(a);
    for (std::size_t i = 0; i < n; ++i) q[i] += mean_a[i] * ch[i];
  }
  return {q.begin(), q.end()};
}

AnnotationTensor encode(const std::vector<ClickAnnotation>& clicks, int height, int width, int class_count,
                        const EncodingConfig& config, EncodingContext context) {
  if (config.radius <= 0.0) throw Error(ErrorCode::invalid_argument, "encoding radius must be positive");
  validate_clicks(clicks, height, width, class_count);

  const bool wants_image = config.kind == EncodingKind::guided_filter;
  const bool wants_prediction = config.kind == EncodingKind::connected_prediction;
  const bool wants_labels = config.kind == EncodingKind::connected_groundtruth;
  const bool has_image = std::holds_alternative<const RasterImage*>(context);
  const bool has_prediction = std::holds_alternative<const PredictionMap*>(context);
  const bool has_labels = std::holds_alternative<const LabelMask*>(context);
  if (wants_image != has_image || wants_prediction != has_prediction || wants_labels != has_labels)
    throw Error(ErrorCode::invalid_argument,
                std::string("encoding '") + to_string(config.kind) + "' got the wrong context");

  AnnotationTensor out{Tensor3<float>(class_count, height, width)};
  if (clicks.empty()) return out;

  switch (config.kind) {
    case EncodingKind::binary_disk:
      splat_disks(out.channels, clicks, config.radius, true);
      break;
    case EncodingKind::distance_transform:
      splat_disks(out.channels, clicks, config.radius, false);
      break;
    case EncodingKind::guided_filter: {
      const RasterImage& image = *std::get<const RasterImage*>(context);
      if (image.height() != height || image.width() != width)
        throw Error(ErrorCode::invalid_argument, "guided_filter encoding: image size mismatch");
      splat_disks(out.channels, clicks, config.radius, false);
      for (int k = 0; k < class_count; ++k) {
        auto plane = out.channels.channel(k);
        if (std::all_of(plane.begin(), plane.end(), [](float v) { return v == 0.0F; })) continue;
        const std::vector<float> base(plane.begin(), plane.end());
        const auto filtered = guided_filter(base, image.pixels, config.filter_radius, config.filter_epsilon);
        for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = std::clamp(filtered[i], 0.0F, 1.0F);
      }
      break;
    }
    case EncodingKind::connected_prediction: {
      const PredictionMap& pred = *std::get<const PredictionMap*>(context);
      if (pred.height() != height || pred.width() != width)
        throw Error(ErrorCode::invalid_argument, "connected_prediction encoding: prediction size mismatch");
      const auto labels = pred.argmax();
      splat_components(out.channels, clicks, labels);
      break;
    }
    case EncodingKind::connected_groundtruth: {
      const LabelMask& mask = *std::get<const LabelMask*>(context);
      if (mask.height != height || mask.width != width)
        throw Error(ErrorCode::invalid_argument, "connected_groundtruth encoding: label size mismatch");
      splat_components(out.channels, clicks, mask.labels);
      break;
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ClickAnnotation& click) {
  j = nlohmann::json{{"row", click.row},
                     {"col", click.col},
                     {"class_id", click.class_id},
                     {"origin", click.origin == ClickOrigin::human ? "human" : "simulated"}};
}

void from_json(const nlohmann::json& j, ClickAnnotation& click) {
  click.row = j.at("row").get<int>();
  click.col = j.at("col").get<int>();
  click.class_id = j.at("class_id").get<int>();
  const std::string origin = j.value("origin", std::string("human"));
  if (origin != "human" && origin != "simulated")
    throw Error(ErrorCode::validation, "click origin must be 'human' or 'simulated'");
  click.origin = origin == "human" ? ClickOrigin::human : ClickOrigin::simulated;
}

void to_json(nlohmann::json& j, const EncodingConfig& config) {
  j = nlohmann::json{{"kind", to_string(config.kind)},
                     {"radius", config.radius},
                     {"filter_radius", config.filter_radius},
                     {"filter_epsilon", config.filter_epsilon}};
}

void from_json(const nlohmann::json& j, EncodingConfig& config) {
  config.kind = encoding_kind_from_string(j.value("kind", std::string("distance_transform")));
  const double default_radius = config.kind == EncodingKind::binary_disk ? 1.5 : 10.0;
  config.radius = j.value("radius", default_radius);
  config.filter_radius = j.value("filter_radius", 4);
  config.filter_epsilon = j.value("filter_epsilon", 1e-2);
  if (config.radius <= 0.0) throw Error(ErrorCode::validation, "encoding radius must be positive");
}

}  // namespace clickseg

namespace clickseg {

AnnotationTensor encode_with_sources(const std::vector<ClickAnnotation>& clicks, int class_count,
                                     const EncodingConfig& config, const RasterImage& image,
                                     const PredictionMap* prediction, const LabelMask* labels) {
  const int h = image.height(), w = image.width();
  switch (config.kind) {
    case EncodingKind::guided_filter:
      return encode(clicks, h, w, class_count, config, &image);
    case EncodingKind::connected_prediction:
      if (!prediction) throw Error(ErrorCode::validation, "connected_prediction encoding needs a prediction");
      return encode(clicks, h, w, class_count, config, prediction);
    case EncodingKind::connected_groundtruth:
      if (!labels) throw Error(ErrorCode::validation, "connected_groundtruth encoding needs a label mask");
      return encode(clicks, h, w, class_count, config, labels);
    default:
      return encode(clicks, h, w, class_count, config);
  }
}

}  // namespace clickseg
