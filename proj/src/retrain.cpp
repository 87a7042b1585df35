#include "clickseg/retrain.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "clickseg/error.hpp"
#include "clickseg/optim.hpp"

namespace clickseg {

int SparseTarget::annotated_class(std::size_t i) const {
  const std::size_t plane = values.plane();
  if (values.data[i] < 0) return -1;
  for (int k = 0; k < values.channels; ++k)
    if (values.data[k * plane + i] == 1) return k;
  return -1;
}

std::size_t SparseTarget::annotated_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < values.plane(); ++i) n += values.data[i] >= 0;
  return n;
}

SparseTarget build_sparse_target(const std::vector<ClickAnnotation>& clicks, int height, int width, int class_count) {
  validate_clicks(clicks, height, width, class_count);
  SparseTarget t{Tensor3<signed char>(class_count, height, width, -1)};
  for (const auto& c : clicks)
    for (int k = 0; k < class_count; ++k) t.values.at(k, c.row, c.col) = (k == c.class_id) ? 1 : 0;
  return t;
}

template <typename T>
LossTerms interactive_loss(const Tensor3<T>& probs, const SparseTarget& target, const Tensor3<T>& p0, double lambda,
                           Tensor3<T>* dprobs) {
  if (!probs.same_shape(p0) || probs.channels != target.class_count() || probs.height != target.height() ||
      probs.width != target.width())
    throw Error(ErrorCode::mismatch, "interactive_loss: shapes disagree");
  const std::size_t plane = probs.plane();
  const std::size_t annotated = target.annotated_count();
  if (dprobs) *dprobs = Tensor3<T>(probs.channels, probs.height, probs.width);

  LossTerms terms;
  if (annotated > 0) {
    const double inv = 1.0 / static_cast<double>(annotated);
    for (std::size_t i = 0; i < plane; ++i) {
      const int k = target.annotated_class(i);
      if (k < 0) continue;
      const double f = static_cast<double>(probs.data[k * plane + i]);
      if (f > kLogFloor) {
        terms.cross_entropy -= std::log(f) * inv;
        if (dprobs) dprobs->data[k * plane + i] += static_cast<T>(-inv / f);
      } else {
        terms.cross_entropy -= std::log(kLogFloor) * inv;
      }
    }
  }
  const double inv_entries = 1.0 / static_cast<double>(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double d = static_cast<double>(probs.data[j]) - static_cast<double>(p0.data[j]);
    terms.recall += std::abs(d) * inv_entries;
    if (dprobs && d != 0.0) dprobs->data[j] += static_cast<T>(lambda * inv_entries * (d > 0 ? 1.0 : -1.0));
  }
  terms.total = terms.cross_entropy + lambda * terms.recall;
  return terms;
}

template <typename T>
LossTerms interactive_loss_logits(const Tensor3<T>& logits, const SparseTarget& target, const Tensor3<T>& p0,
                                  double lambda, Tensor3<T>* dlogits) {
  const Tensor3<T> probs = nn::softmax(logits);
  if (!dlogits) return interactive_loss<T>(probs, target, p0, lambda, nullptr);
  Tensor3<T> dprobs;
  const LossTerms terms = interactive_loss(probs, target, p0, lambda, &dprobs);
  const std::size_t plane = probs.plane();
  *dlogits = Tensor3<T>(probs.channels, probs.height, probs.width);
  for (std::size_t i = 0; i < plane; ++i) {
    T dot = 0;
    for (int k = 0; k < probs.channels; ++k) dot += probs.data[k * plane + i] * dprobs.data[k * plane + i];
    for (int k = 0; k < probs.channels; ++k)
      dlogits->data[k * plane + i] = probs.data[k * plane + i] * (dprobs.data[k * plane + i] - dot);
  }
  return terms;
}

template LossTerms interactive_loss<float>(const Tensor3<float>&, const SparseTarget&, const Tensor3<float>&, double,
                                           Tensor3<float>*);
template LossTerms interactive_loss<double>(const Tensor3<double>&, const SparseTarget&, const Tensor3<double>&,
                                            double, Tensor3<double>*);
template LossTerms interactive_loss_logits<float>(const Tensor3<float>&, const SparseTarget&, const Tensor3<float>&,
                                                  double, Tensor3<float>*);
template LossTerms interactive_loss_logits<double>(const Tensor3<double>&, const SparseTarget&,
                                                   const Tensor3<double>&, double, Tensor3<double>*);

LossTerms interactive_loss(const PredictionMap& prediction, const SparseTarget& target, const PredictionMap& p0,
                           double lambda) {
  return interactive_loss<float>(prediction.probabilities, target, p0.probabilities, lambda, nullptr);
}

// ---------------------------------------------------------------------------

void DiscaConfig::validate() const {
  if (steps < 1) throw Error(ErrorCode::invalid_argument, "disca: steps must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::invalid_argument, "disca: learning_rate must be > 0");
  if (lambda < 0.0) throw Error(ErrorCode::invalid_argument, "disca: lambda must be >= 0");
  if (ac_dropout_probability < 0.0 || ac_dropout_probability > 1.0)
    throw Error(ErrorCode::invalid_argument, "disca: ac_dropout_probability must lie in [0,1]");
}

void to_json(nlohmann::json& j, const DiscaConfig& c) {
  j = {{"lambda", c.lambda},
       {"steps", c.steps},
       {"learning_rate", c.learning_rate},
       {"ac_dropout_probability", c.ac_dropout_probability},
       {"regularization_enabled", c.regularization_enabled},
       {"ac_enabled", c.ac_enabled},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DiscaConfig& c) {
  DiscaConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.steps = j.value("steps", d.steps);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.ac_dropout_probability = j.value("ac_dropout_probability", d.ac_dropout_probability);
  c.regularization_enabled = j.value("regularization_enabled", d.regularization_enabled);
  c.ac_enabled = j.value("ac_enabled", d.ac_enabled);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

RefineResult refine(SegmentationModel& model, const RasterImage& image, const std::vector<ClickAnnotation>& clicks,
                    const PredictionMap& p0, const DiscaConfig& config, std::mt19937_64& rng,
                    std::optional<int> force_nonfinite_at) {
  config.validate();
  if (p0.class_count() != model.class_count() || p0.height() != image.height() || p0.width() != image.width())
    throw Error(ErrorCode::mismatch, "refine: p0 does not match image and model");
  const auto start = std::chrono::steady_clock::now();

  const int h = image.height(), w = image.width(), n = model.class_count();
  const SparseTarget target = build_sparse_target(clicks, h, w, n);
  const AnnotationTensor encoded =
      encode_with_sources(clicks, n, model.config().encoding, image, &p0, nullptr);
  const Tensor3<float> with_clicks = model.assemble_input(image, &encoded);
  const Tensor3<float> without_clicks = model.assemble_input(image, nullptr);
  const double lambda = config.regularization_enabled ? config.lambda : 0.0;

  const std::vector<float> snapshot = model.parameters();
  std::vector<float> grads(snapshot.size());
  const Sgd sgd{config.learning_rate};
  std::bernoulli_distribution drop_ac(config.ac_dropout_probability);
  nn::Trace<float> trace;
  RefineResult result;

  for (int step = 0; step < config.steps; ++step) {
    const bool zero_ac = !config.ac_enabled || drop_ac(rng);
    const Tensor3<float> logits =
        model.network().forward(zero_ac ? without_clicks : with_clicks, {}, &trace);
    Tensor3<float> dlogits;
    double loss = interactive_loss_logits(logits, target, p0.probabilities, lambda, &dlogits).total;
    if (force_nonfinite_at && *force_nonfinite_at == step) loss = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(loss)) {
      model.parameters() = snapshot;
      throw Error(ErrorCode::diverged, "refine: non-finite loss at step " + std::to_string(step));
    }
    result.losses.push_back(loss);
    std::fill(grads.begin(), grads.end(), 0.0F);
    model.network().backward(trace, dlogits, grads, nullptr);
    sgd.step(model.parameters(), grads);
  }

  const Tensor3<float>& final_input = config.ac_enabled ? with_clicks : without_clicks;
  result.prediction = {nn::softmax(model.network().forward(final_input, {}, nullptr)), false};
  result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------

const char* to_string(WeightPolicy policy) {
  return policy == WeightPolicy::sequential ? "sequential" : "reset_per_image";
}

WeightPolicy weight_policy_from_string(const std::string& name) {
  if (name == "sequential") return WeightPolicy::sequential;
  if (name == "reset_per_image") return WeightPolicy::reset_per_image;
  throw Error(ErrorCode::invalid_argument, "unknown weight policy '" + name + "'");
}

SessionWeights::SessionWeights(SegmentationModel checkpoint, WeightPolicy policy)
    : checkpoint_(std::move(checkpoint)), current_(checkpoint_), policy_(policy) {}

SegmentationModel& SessionWeights::begin_image() {
  if (policy_ == WeightPolicy::reset_per_image) current_ = checkpoint_;
  return current_;
}

}  // namespace clickseg
