#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace clickseg {

/// Plain stochastic gradient descent, no momentum.
struct Sgd {
  double learning_rate = 1e-2;

  void step(std::span<float> params, std::span<const float> grads) const {
    const float lr = static_cast<float>(learning_rate);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
  }
};

class Adam {
 public:
  explicit Adam(std::size_t size, double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon), m_(size, 0.0), v_(size, 0.0) {}

  void step(std::span<float> params, std::span<const float> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      params[i] -= static_cast<float>(lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace clickseg
