#include "clickseg/acquisition.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "clickseg/error.hpp"
#include "clickseg/optim.hpp"

namespace clickseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

UncertaintyMap make_map(int h, int w, const char* method) {
  UncertaintyMap m;
  m.height = h;
  m.width = w;
  m.scores.assign(static_cast<std::size_t>(h) * w, 0.0F);
  m.method = method;
  return m;
}

float sigmoid(float x) { return 1.0F / (1.0F + std::exp(-x)); }

}  // namespace

double entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

UncertaintyMap entropy(const PredictionMap& prediction) {
  const auto& probs = prediction.probabilities;
  UncertaintyMap out = make_map(probs.height, probs.width, "entropy");
  const std::size_t plane = probs.plane();
  std::vector<double> p(probs.channels);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int k = 0; k < probs.channels; ++k) p[k] = probs.data[k * plane + i];
    out.scores[i] = static_cast<float>(entropy(p));
  }
  return out;
}

UncertaintyMap mc_dropout(const SegmentationModel& model, const RasterImage& image,
                          const AnnotationTensor& annotations, const McDropoutConfig& config) {
  if (config.passes < 2) throw Error(ErrorCode::invalid_argument, "mc_dropout needs at least 2 passes");
  if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0)
    throw Error(ErrorCode::invalid_argument, "mc_dropout: dropout rate must lie in [0,1)");
  const auto start = Clock::now();
  const Tensor3<float> input = model.assemble_input(image, &annotations);
  std::mt19937_64 rng(config.seed);
  const nn::ForwardOptions options{true, config.dropout_rate, &rng};
  const int n = model.class_count();
  std::vector<double> sum, sum_sq;
  for (int pass = 0; pass < config.passes; ++pass) {
    const Tensor3<float> probs = nn::softmax(model.network().forward(input, options, nullptr));
    if (sum.empty()) {
      sum.assign(probs.size(), 0.0);
      sum_sq.assign(probs.size(), 0.0);
    }
    for (std::size_t j = 0; j < probs.size(); ++j) {
      sum[j] += probs.data[j];
      sum_sq[j] += static_cast<double>(probs.data[j]) * probs.data[j];
    }
  }
  UncertaintyMap out = make_map(image.height(), image.width(), "mc_dropout");
  const std::size_t plane = out.scores.size();
  const double inv = 1.0 / config.passes;
  for (std::size_t i = 0; i < plane; ++i) {
    double v = 0.0;
    for (int k = 0; k < n; ++k) {
      const double mean = sum[k * plane + i] * inv;
      v += std::max(0.0, sum_sq[k * plane + i] * inv - mean * mean);
    }
    out.scores[i] = static_cast<float>(v);
  }
  out.wall_time = seconds_since(start);
  return out;
}

UncertaintyMap odin(const SegmentationModel& model, const RasterImage& image, const AnnotationTensor& annotations,
                    const OdinConfig& config) {
  if (config.epsilon < 0.0) throw Error(ErrorCode::invalid_argument, "odin: epsilon must be >= 0");
  if (config.temperature < 1.0) throw Error(ErrorCode::invalid_argument, "odin: temperature must be >= 1");
  const auto start = Clock::now();
  Tensor3<float> input = model.assemble_input(image, &annotations);
  const int n = model.class_count();
  const std::size_t plane = input.plane();

  if (config.epsilon > 0.0) {
    nn::Trace<float> trace;
    const Tensor3<float> logits = model.network().forward(input, {}, &trace);
    const Tensor3<float> tempered = nn::softmax(logits, config.temperature);
    const std::vector<int> predicted = PredictionMap{nn::softmax(logits), false}.argmax();
    // Cross-entropy of the tempered softmax against the predicted class.
    Tensor3<float> dlogits(n, logits.height, logits.width);
    const float inv_t = static_cast<float>(1.0 / config.temperature);
    for (std::size_t i = 0; i < plane; ++i)
      for (int k = 0; k < n; ++k)
        dlogits.data[k * plane + i] = (tempered.data[k * plane + i] - (predicted[i] == k ? 1.0F : 0.0F)) * inv_t;
    Tensor3<float> dinput;
    model.network().backward(trace, dlogits, {}, &dinput);
    const float step = static_cast<float>(config.toward_prediction ? -config.epsilon : config.epsilon);
    const std::size_t image_values = static_cast<std::size_t>(model.image_channels()) * plane;
    for (std::size_t j = 0; j < image_values; ++j) {
      const float g = dinput.data[j];
      input.data[j] += g > 0 ? step : (g < 0 ? -step : 0.0F);
    }
  }
  const Tensor3<float> probs = nn::softmax(model.network().forward(input, {}, nullptr), config.temperature);
  UncertaintyMap out = make_map(image.height(), image.width(), "odin");
  for (std::size_t i = 0; i < plane; ++i) {
    float best = 0.0F;
    for (int k = 0; k < n; ++k) best = std::max(best, probs.data[k * plane + i]);
    out.scores[i] = 1.0F - best;
  }
  out.wall_time = seconds_since(start);
  return out;
}

// ---------------------------------------------------------------------------

ConfidNetHead::ConfidNetHead(int input_channels, std::array<int, 5> widths, std::uint64_t seed) : widths_(widths) {
  if (widths[4] != 1) throw Error(ErrorCode::invalid_argument, "confidnet: last width must be 1");
  for (int w : widths)
    if (w < 1) throw Error(ErrorCode::invalid_argument, "confidnet: widths must be positive");
  std::size_t offset = 0;
  up_ = {input_channels, widths[0], offset};
  offset += up_.parameter_count();
  for (int i = 0; i < 4; ++i) {
    convs_[i] = {widths[i], widths[i + 1], 3, 1, offset};
    offset += convs_[i].parameter_count();
  }
  params_.assign(offset, 0.0F);
  std::mt19937_64 rng(seed);
  nn::init_upconv<float>(params_, up_, rng);
  for (int i = 0; i < 3; ++i) nn::init_conv<float>(params_, convs_[i], rng);
}

Tensor3<float> ConfidNetHead::forward(const Tensor3<float>& tap, Cache* cache) const {
  if (tap.channels != up_.in) throw Error(ErrorCode::mismatch, "confidnet: feature tap width mismatch");
  Cache local;
  Cache& c = cache ? *cache : local;
  std::span<const float> p(params_);
  c.tap = tap;
  c.u = nn::upconv_forward(up_, p, tap);
  nn::relu_inplace(c.u);
  c.a1 = nn::conv_forward(convs_[0], p, c.u);
  nn::relu_inplace(c.a1);
  c.a2 = nn::conv_forward(convs_[1], p, c.a1);
  nn::relu_inplace(c.a2);
  c.a3 = nn::conv_forward(convs_[2], p, c.a2);
  nn::relu_inplace(c.a3);
  c.out = nn::conv_forward(convs_[3], p, c.a3);
  for (auto& v : c.out.data) v = sigmoid(v);
  return c.out;
}

void ConfidNetHead::backward(const Cache& c, const Tensor3<float>& dconfidence, std::span<float> grads) const {
  std::span<const float> p(params_);
  Tensor3<float> dz = dconfidence;
  for (std::size_t j = 0; j < dz.size(); ++j) dz.data[j] *= c.out.data[j] * (1.0F - c.out.data[j]);
  Tensor3<float> d3, d2, d1, du;
  nn::conv_backward(convs_[3], p, c.a3, dz, grads, &d3);
  nn::relu_backward_inplace(c.a3, d3);
  nn::conv_backward(convs_[2], p, c.a2, d3, grads, &d2);
  nn::relu_backward_inplace(c.a2, d2);
  nn::conv_backward(convs_[1], p, c.a1, d2, grads, &d1);
  nn::relu_backward_inplace(c.a1, d1);
  nn::conv_backward(convs_[0], p, c.u, d1, grads, &du);
  nn::relu_backward_inplace(c.u, du);
  nn::upconv_backward(up_, p, c.tap, du, grads, static_cast<Tensor3<float>*>(nullptr));
}

void ConfidNetHead::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  const nlohmann::json header = {{"input_channels", up_.in},
                                 {"widths", widths_},
                                 {"model_hash", model_hash_},
                                 {"parameter_count", params_.size()}};
  out << "CLICKSEG-CONFIDNET 1\n" << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(params_.data()), static_cast<std::streamsize>(params_.size() * sizeof(float)));
  if (!out) throw Error(ErrorCode::io, "failed writing " + path.string());
}

ConfidNetHead ConfidNetHead::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::string magic, line;
  std::getline(in, magic);
  if (magic != "CLICKSEG-CONFIDNET 1") throw Error(ErrorCode::validation, "not a confidnet head: " + path.string());
  std::getline(in, line);
  const auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded()) throw Error(ErrorCode::validation, "corrupt confidnet header");
  ConfidNetHead head(header.at("input_channels").get<int>(), header.at("widths").get<std::array<int, 5>>(), 0);
  if (header.at("parameter_count").get<std::size_t>() != head.params_.size())
    throw Error(ErrorCode::validation, "confidnet parameter count mismatch");
  in.read(reinterpret_cast<char*>(head.params_.data()), static_cast<std::streamsize>(head.params_.size() * sizeof(float)));
  if (!in) throw Error(ErrorCode::validation, "truncated confidnet head");
  head.model_hash_ = header.value("model_hash", "");
  return head;
}

ConfidNetHead confidnet_train(const SegmentationModel& model, ConfidNetHead head,
                              const std::vector<std::pair<RasterImage, LabelMask>>& dataset,
                              const ConfidNetTrainConfig& config, ConfidNetReport* report) {
  if (dataset.empty()) throw Error(ErrorCode::invalid_argument, "confidnet_train: empty dataset");
  if (head.input_channels() != model.network().feature_tap_channels())
    throw Error(ErrorCode::mismatch, "confidnet_train: head does not match the model's feature tap");
  std::mt19937_64 rng(config.seed);
  Adam adam(head.parameters().size(), config.learning_rate);
  std::vector<float> grads(head.parameters().size());
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  nn::Trace<float> trace;
  ConfidNetHead::Cache cache;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      const auto& [image, labels] = dataset[idx];
      AnnotationTensor annotations{Tensor3<float>(model.class_count(), image.height(), image.width())};
      if (std::bernoulli_distribution(config.click_fraction)(rng)) {
        const int k = std::uniform_int_distribution<int>(1, config.max_clicks)(rng);
        const auto clicks = sample_groundtruth_clicks(labels, k, rng);
        annotations = encode_with_sources(clicks, model.class_count(), model.config().encoding, image, nullptr, &labels);
      }
      const Tensor3<float> logits = model.network().forward(model.assemble_input(image, &annotations), {}, &trace);
      const Tensor3<float> probs = nn::softmax(logits);
      const Tensor3<float> conf = head.forward(nn::Network<float>::feature_tap(trace), &cache);

      Tensor3<float> dconf(1, conf.height, conf.width);
      const std::size_t plane = probs.plane();
      std::size_t counted = 0;
      for (std::size_t i = 0; i < plane; ++i) counted += !labels.ignored(i);
      if (counted == 0) continue;
      double loss = 0.0;
      const float inv = 1.0F / static_cast<float>(counted);
      for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * image.width() + c;
          if (labels.ignored(i)) continue;
          const float tcp = probs.data[labels.labels[i] * plane + i];
          const float diff = conf.at(0, r, c) - tcp;
          loss += static_cast<double>(diff) * diff * inv;
          dconf.at(0, r, c) = 2.0F * diff * inv;
        }
      if (!std::isfinite(loss)) throw Error(ErrorCode::diverged, "confidnet_train: non-finite loss");
      total += loss;
      std::fill(grads.begin(), grads.end(), 0.0F);
      head.backward(cache, dconf, grads);
      adam.step(head.parameters(), grads);
    }
    if (report) report->epoch_loss.push_back(total / static_cast<double>(dataset.size()));
  }
  head.set_model_hash(model.hash());
  return head;
}

UncertaintyMap confidnet_score(const SegmentationModel& model, const RasterImage& image,
                               const AnnotationTensor& annotations, const ConfidNetHead& head,
                               bool check_identity) {
  if (check_identity && !head.model_hash().empty() && head.model_hash() != model.hash())
    throw Error(ErrorCode::mismatch, "confidnet head was trained for model " + head.model_hash());
  const auto start = Clock::now();
  nn::Trace<float> trace;
  model.network().forward(model.assemble_input(image, &annotations), {}, &trace);
  const Tensor3<float> conf = head.forward(nn::Network<float>::feature_tap(trace));
  UncertaintyMap out = make_map(image.height(), image.width(), "confidnet");
  for (int r = 0; r < image.height(); ++r)
    for (int c = 0; c < image.width(); ++c)
      out.scores[static_cast<std::size_t>(r) * image.width() + c] = 1.0F - conf.at(0, r, c);
  out.wall_time = seconds_since(start);
  return out;
}

// ---------------------------------------------------------------------------

const char* to_string(AcquisitionMethod m) {
  switch (m) {
    case AcquisitionMethod::entropy: return "entropy";
    case AcquisitionMethod::mc_dropout: return "mc_dropout";
    case AcquisitionMethod::odin: return "odin";
    case AcquisitionMethod::confidnet: return "confidnet";
  }
  return "unknown";
}

AcquisitionMethod acquisition_from_string(const std::string& name) {
  for (auto m : {AcquisitionMethod::entropy, AcquisitionMethod::mc_dropout, AcquisitionMethod::odin,
                 AcquisitionMethod::confidnet})
    if (name == to_string(m)) return m;
  throw Error(ErrorCode::invalid_argument, "unknown acquisition method '" + name + "'");
}

UncertaintyMap estimate_uncertainty(AcquisitionMethod method, const SegmentationModel& model,
                                    const RasterImage& image, const AnnotationTensor& annotations,
                                    const AcquisitionSettings& settings) {
  switch (method) {
    case AcquisitionMethod::entropy: {
      const auto start = Clock::now();
      UncertaintyMap m = entropy(forward(model, image, annotations));
      m.wall_time = seconds_since(start);
      return m;
    }
    case AcquisitionMethod::mc_dropout:
      return mc_dropout(model, image, annotations, settings.mc);
    case AcquisitionMethod::odin:
      return odin(model, image, annotations, settings.odin);
    case AcquisitionMethod::confidnet:
      if (!settings.confidnet) throw Error(ErrorCode::invalid_argument, "confidnet scoring needs a trained head");
      return confidnet_score(model, image, annotations, *settings.confidnet, settings.check_confidnet_identity);
  }
  throw Error(ErrorCode::invalid_argument, "unknown acquisition method");
}

void save_uncertainty(const std::filesystem::path& path, const UncertaintyMap& map, const nlohmann::json& config) {
  const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
  const float min = map.scores.empty() ? 0.0F : *lo, max = map.scores.empty() ? 0.0F : *hi;
  RasterImage img{Tensor3<float>(1, map.height, map.width), "uncertainty"};
  const float span = max > min ? max - min : 1.0F;
  for (std::size_t i = 0; i < map.scores.size(); ++i) img.pixels.data[i] = (map.scores[i] - min) / span;
  save_raster(path, img);
  std::ofstream side(path.string() + ".json");
  if (!side) throw Error(ErrorCode::io, "cannot write uncertainty sidecar for " + path.string());
  side << nlohmann::json{{"method", map.method}, {"wall_time", map.wall_time}, {"min", min}, {"max", max},
                         {"config", config}}
              .dump(2)
       << '\n';
}

}  // namespace clickseg
