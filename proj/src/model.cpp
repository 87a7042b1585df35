#include "clickseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "clickseg/error.hpp"
#include "clickseg/hash.hpp"
#include "clickseg/optim.hpp"

namespace clickseg {

namespace {

constexpr char kCheckpointMagic[] = "CLICKSEG-CHECKPOINT 1";

nn::NetworkShape shape_of(const ModelConfig& c) {
  return {c.image_channels + c.class_count, c.class_count, c.widths};
}

nlohmann::json header_of(const ModelConfig& c) {
  nlohmann::json sites = nlohmann::json::array();
  for (const char* s : nn::kDropoutSiteNames) sites.push_back(s);
  return {{"image_channels", c.image_channels},
          {"class_count", c.class_count},
          {"widths", c.widths},
          {"dropout_rate", c.dropout_rate},
          {"dropout_sites", sites},
          {"encoding", c.encoding}};
}

}  // namespace

std::vector<int> PredictionMap::argmax() const {
  const std::size_t plane = probabilities.plane();
  std::vector<int> out(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    float best = probabilities.data[i];
    for (int k = 1; k < probabilities.channels; ++k) {
      const float v = probabilities.data[k * plane + i];
      if (v > best) {
        best = v;
        out[i] = k;
      }
    }
  }
  return out;
}

SegmentationModel::SegmentationModel(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config), net_(shape_of(config)) {
  if (config.class_count < 2) throw Error(ErrorCode::invalid_argument, "model needs at least 2 classes");
  if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0)
    throw Error(ErrorCode::invalid_argument, "dropout rate must lie in [0,1)");
  net_.initialize(init_seed);
}

Tensor3<float> SegmentationModel::assemble_input(const RasterImage& image, const AnnotationTensor* annotations) const {
  if (image.channels() != config_.image_channels)
    throw Error(ErrorCode::mismatch, "model expects " + std::to_string(config_.image_channels) +
                                         " image channels, got " + std::to_string(image.channels()));
  Tensor3<float> input(input_channels(), image.height(), image.width());
  std::copy(image.pixels.data.begin(), image.pixels.data.end(), input.data.begin());
  if (annotations) {
    const auto& a = annotations->channels;
    if (a.channels != config_.class_count || a.height != image.height() || a.width != image.width())
      throw Error(ErrorCode::mismatch, "annotation tensor shape does not match image and class count");
    std::copy(a.data.begin(), a.data.end(), input.data.begin() + static_cast<std::ptrdiff_t>(image.pixels.size()));
  }
  return input;
}

std::string SegmentationModel::hash() const {
  const std::string header = header_of(config_).dump();
  const std::string params = sha256_of(std::span<const float>(net_.parameters()));
  return sha256_hex(header + params);
}

void SegmentationModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write checkpoint " + path.string());
  nlohmann::json header = header_of(config_);
  header["parameter_count"] = net_.parameter_count();
  header["parameter_format"] = "float32-le";
  header["hash"] = hash();
  out << kCheckpointMagic << '\n' << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(net_.parameters().data()),
            static_cast<std::streamsize>(net_.parameters().size() * sizeof(float)));
  if (!out) throw Error(ErrorCode::io, "failed writing checkpoint " + path.string());
}

SegmentationModel SegmentationModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw Error(ErrorCode::validation, "not a checkpoint: " + path.string());
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::validation, "corrupt checkpoint header: " + std::string(e.what()));
  }
  ModelConfig cfg;
  cfg.image_channels = header.at("image_channels").get<int>();
  cfg.class_count = header.at("class_count").get<int>();
  cfg.widths = header.at("widths").get<std::array<int, 3>>();
  cfg.dropout_rate = header.at("dropout_rate").get<double>();
  cfg.encoding = header.at("encoding").get<EncodingConfig>();
  SegmentationModel model(cfg, 0);
  const std::size_t count = header.at("parameter_count").get<std::size_t>();
  if (count != model.parameters().size())
    throw Error(ErrorCode::validation, "checkpoint parameter count does not match its architecture");
  in.read(reinterpret_cast<char*>(model.parameters().data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw Error(ErrorCode::validation, "truncated checkpoint " + path.string());
  if (header.contains("hash") && header["hash"].get<std::string>() != model.hash())
    throw Error(ErrorCode::validation, "checkpoint hash mismatch in " + path.string());
  return model;
}

PredictionMap forward(const SegmentationModel& model, const RasterImage& image, const AnnotationTensor& annotations,
                      bool stochastic, std::mt19937_64* rng) {
  if (stochastic && model.config().dropout_rate <= 0.0)
    throw Error(ErrorCode::invalid_argument, "stochastic forward needs a positive dropout rate");
  if (stochastic && !rng) throw Error(ErrorCode::invalid_argument, "stochastic forward needs a random generator");
  const Tensor3<float> input = model.assemble_input(image, &annotations);
  nn::ForwardOptions options{stochastic, model.config().dropout_rate, rng};
  const Tensor3<float> logits = model.network().forward(input, options, nullptr);
  return {nn::softmax(logits), false};
}

PredictionMap forward(const SegmentationModel& model, const RasterImage& image) {
  const Tensor3<float> input = model.assemble_input(image, nullptr);
  return {nn::softmax(model.network().forward(input, {}, nullptr)), false};
}

Tensor3<float> apply_tiled(const TileGrid& grid, const TileFunction& fn) {
  std::vector<Tensor3<float>> tiles;
  tiles.reserve(grid.size());
  for (const auto& t : grid.tiles) tiles.push_back(fn(t.window));
  return stitch_average(grid, tiles);
}

PredictionMap predict_tiled(const SegmentationModel& model, const RasterImage& image,
                            const AnnotationTensor* annotations, const TileGrid& grid) {
  const Tensor3<float> input = model.assemble_input(image, annotations);
  auto probs = apply_tiled(grid, [&](const Window& w) {
    return nn::softmax(model.network().forward(crop(input, w), {}, nullptr));
  });
  return {std::move(probs), false};
}

// ---------------------------------------------------------------------------

std::vector<ClickAnnotation> sample_groundtruth_clicks(const LabelMask& labels, int count, std::mt19937_64& rng) {
  std::vector<std::vector<int>> by_class(labels.class_count);
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    if (!labels.ignored(i)) by_class[labels.labels[i]].push_back(static_cast<int>(i));
  std::vector<int> present;
  for (int k = 0; k < labels.class_count; ++k)
    if (!by_class[k].empty()) present.push_back(k);
  std::vector<ClickAnnotation> clicks;
  if (present.empty()) return clicks;
  for (int i = 0; i < count; ++i) {
    const int k = present[std::uniform_int_distribution<std::size_t>(0, present.size() - 1)(rng)];
    const int p = by_class[k][std::uniform_int_distribution<std::size_t>(0, by_class[k].size() - 1)(rng)];
    clicks.push_back({p / labels.width, p % labels.width, k, ClickOrigin::simulated});
  }
  return clicks;
}

double cross_entropy(const Tensor3<float>& logits, const LabelMask& labels, Tensor3<float>* dlogits) {
  const Tensor3<float> probs = nn::softmax(logits);
  const std::size_t plane = probs.plane();
  std::size_t counted = 0;
  for (std::size_t i = 0; i < plane; ++i) counted += !labels.ignored(i);
  if (dlogits) *dlogits = Tensor3<float>(logits.channels, logits.height, logits.width);
  if (counted == 0) return 0.0;
  double loss = 0.0;
  const float inv = 1.0F / static_cast<float>(counted);
  for (std::size_t i = 0; i < plane; ++i) {
    if (labels.ignored(i)) continue;
    const int y = labels.labels[i];
    loss -= std::log(std::max(static_cast<double>(probs.data[y * plane + i]), 1e-12));
    if (dlogits)
      for (int k = 0; k < probs.channels; ++k)
        dlogits->data[k * plane + i] = (probs.data[k * plane + i] - (k == y ? 1.0F : 0.0F)) * inv;
  }
  return loss / static_cast<double>(counted);
}

SegmentationModel pretrain(SegmentationModel model, const std::vector<std::pair<RasterImage, LabelMask>>& dataset,
                           const PretrainConfig& config, PretrainReport* report) {
  if (dataset.empty()) throw Error(ErrorCode::invalid_argument, "pretrain: empty dataset");
  if (config.max_clicks < 1) throw Error(ErrorCode::invalid_argument, "pretrain: max_clicks must be >= 1");
  // 1 is accepted as the degenerate "never see clicks" setting.
  if (!(config.image_only_fraction > 0.0 && config.image_only_fraction <= 1.0))
    throw Error(ErrorCode::invalid_argument, "pretrain: image_only_fraction must lie in (0,1]");
  for (const auto& [image, labels] : dataset) {
    validate(labels);
    if (labels.class_count != model.class_count() || labels.height != image.height() || labels.width != image.width())
      throw Error(ErrorCode::validation, "pretrain: label mask does not match image or model");
  }

  std::mt19937_64 rng(config.seed);
  Adam optimizer(model.parameters().size(), config.learning_rate);
  std::vector<float> grads(model.parameters().size());
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const nn::ForwardOptions options{true, model.config().dropout_rate, &rng};
  nn::Trace<float> trace;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int in_batch = 0;
    std::fill(grads.begin(), grads.end(), 0.0F);
    auto flush = [&] {
      if (in_batch == 0) return;
      const float scale = 1.0F / static_cast<float>(in_batch);
      for (auto& g : grads) g *= scale;
      optimizer.step(model.parameters(), grads);
      std::fill(grads.begin(), grads.end(), 0.0F);
      in_batch = 0;
    };
    for (std::size_t idx : order) {
      const auto& [full_image, full_labels] = dataset[idx];
      Window w{0, 0, full_image.height(), full_image.width()};
      if (full_image.height() > config.crop_size || full_image.width() > config.crop_size) {
        w.height = std::min(config.crop_size, full_image.height());
        w.width = std::min(config.crop_size, full_image.width());
        w.row = std::uniform_int_distribution<int>(0, full_image.height() - w.height)(rng);
        w.col = std::uniform_int_distribution<int>(0, full_image.width() - w.width)(rng);
      }
      const RasterImage image = crop(full_image, w);
      const LabelMask labels = crop(full_labels, w);

      AnnotationTensor annotations{Tensor3<float>(model.class_count(), image.height(), image.width())};
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= config.image_only_fraction) {
        const int k = std::uniform_int_distribution<int>(1, config.max_clicks)(rng);
        const auto clicks = sample_groundtruth_clicks(labels, k, rng);
        const auto& enc = model.config().encoding;
        if (enc.kind == EncodingKind::connected_prediction) {
          const PredictionMap plain = forward(model, image);
          annotations = encode_with_sources(clicks, model.class_count(), enc, image, &plain, &labels);
        } else {
          annotations = encode_with_sources(clicks, model.class_count(), enc, image, nullptr, &labels);
        }
      }
      const Tensor3<float> input = model.assemble_input(image, &annotations);
      const Tensor3<float> logits = model.network().forward(input, options, &trace);
      Tensor3<float> dlogits;
      const double loss = cross_entropy(logits, labels, &dlogits);
      if (!std::isfinite(loss))
        throw Error(ErrorCode::diverged, "pretrain diverged at epoch " + std::to_string(epoch));
      epoch_loss += loss;
      model.network().backward(trace, dlogits, grads, nullptr);
      if (++in_batch == config.batch_size) flush();
    }
    flush();
    if (report) report->epoch_loss.push_back(epoch_loss / static_cast<double>(dataset.size()));
  }
  return model;
}

}  // namespace clickseg
