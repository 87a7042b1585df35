#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "clickseg/tensor.hpp"

namespace clickseg::nn {

// Layer descriptors index into a flat parameter vector owned by the network.

/// k x k convolution, zero "same" padding of k/2. Weights are
/// out x (in * k * k) row-major, followed by `out` biases.
struct Conv {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  std::size_t offset = 0;

  std::size_t weight_count() const { return static_cast<std::size_t>(out) * in * kernel * kernel; }
  std::size_t parameter_count() const { return weight_count() + out; }
};

/// 2 x 2 transposed convolution with stride 2 (exact 2x upsampling).
/// Weights are (out * 4) x in row-major, followed by `out` biases.
struct UpConv {
  int in = 0;
  int out = 0;
  std::size_t offset = 0;

  std::size_t weight_count() const { return static_cast<std::size_t>(out) * 4 * in; }
  std::size_t parameter_count() const { return weight_count() + out; }
};

template <typename T>
Tensor3<T> conv_forward(const Conv& layer, std::span<const T> params, const Tensor3<T>& x);

/// Accumulates weight/bias gradients into `grads` (if non-empty) and writes
/// the input gradient into `dx` (if non-null).
template <typename T>
void conv_backward(const Conv& layer, std::span<const T> params, const Tensor3<T>& x, const Tensor3<T>& dy,
                   std::span<T> grads, Tensor3<T>* dx);

template <typename T>
Tensor3<T> upconv_forward(const UpConv& layer, std::span<const T> params, const Tensor3<T>& x);

template <typename T>
void upconv_backward(const UpConv& layer, std::span<const T> params, const Tensor3<T>& x, const Tensor3<T>& dy,
                     std::span<T> grads, Tensor3<T>* dx);

template <typename T>
void relu_inplace(Tensor3<T>& x);

/// dy *= (y > 0)
template <typename T>
void relu_backward_inplace(const Tensor3<T>& y, Tensor3<T>& dy);

/// He-normal weights, zero biases.
template <typename T>
void init_conv(std::span<T> params, const Conv& layer, std::mt19937_64& rng);
template <typename T>
void init_upconv(std::span<T> params, const UpConv& layer, std::mt19937_64& rng);

/// Softmax over channels per pixel with logits divided by `temperature`.
template <typename T>
Tensor3<T> softmax(const Tensor3<T>& logits, double temperature = 1.0);

// ---------------------------------------------------------------------------

/// Three-stage encoder-decoder with additive skip connections.
///
///   enc1  conv3x3                    @ H
///   enc2  conv3x3/2, conv3x3         @ H/2
///   enc3  conv3x3/2, conv3x3         @ H/4
///   dec2  upconv + skip(enc2), conv3x3   @ H/2   <- feature tap
///   dec1  upconv + skip(enc1), conv3x3   @ H
///   head  conv1x1 -> class logits
///
/// Dropout sits on the three encoder/decoder junctions (bottleneck and both
/// skips) and is only active on stochastic passes.
struct NetworkShape {
  int input_channels = 5;
  int class_count = 2;
  std::array<int, 3> widths{16, 32, 64};

  friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

inline constexpr int kDropoutSites = 3;
inline constexpr std::array<const char*, kDropoutSites> kDropoutSiteNames{"enc3-dec2", "enc2-dec2", "enc1-dec1"};

/// Spatial dimensions are padded to this multiple internally.
inline constexpr int kSpatialMultiple = 4;

struct ForwardOptions {
  bool stochastic = false;
  double dropout_rate = 0.0;
  std::mt19937_64* rng = nullptr;  ///< required when stochastic and dropout_rate > 0
};

/// Activations kept for backpropagation.
template <typename T>
struct Trace {
  int height = 0;  ///< unpadded input size
  int width = 0;
  Tensor3<T> input;  ///< padded
  Tensor3<T> e1, e2a, e2, e3a, e3;
  Tensor3<T> e3_drop, e2_drop, e1_drop;
  std::array<std::vector<T>, kDropoutSites> masks;  ///< empty when no dropout applied
  Tensor3<T> u2, s2, d2, u1, s1, d1;
};

template <typename T>
class Network {
 public:
  Network() = default;
  explicit Network(const NetworkShape& shape);

  const NetworkShape& shape() const { return shape_; }
  std::vector<T>& parameters() { return params_; }
  const std::vector<T>& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  void initialize(std::uint64_t seed);

  /// Returns class logits (unpadded). `trace` may be null for inference.
  Tensor3<T> forward(const Tensor3<T>& input, const ForwardOptions& options, Trace<T>* trace) const;

  /// Backpropagates `dlogits`; accumulates into `grads` (sized like the
  /// parameters, may be empty) and optionally returns the input gradient.
  void backward(const Trace<T>& trace, const Tensor3<T>& dlogits, std::span<T> grads, Tensor3<T>* dinput) const;

  /// Decoder feature map at half resolution used by auxiliary heads.
  static const Tensor3<T>& feature_tap(const Trace<T>& trace) { return trace.d2; }
  int feature_tap_channels() const { return shape_.widths[1]; }

  /// Radius (pixels) of the region of the input that can influence one output pixel.
  int receptive_radius() const;

  template <typename U>
  Network<U> cast() const {
    Network<U> out(shape_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i] = static_cast<U>(params_[i]);
    return out;
  }

 private:
  NetworkShape shape_;
  std::vector<T> params_;
  Conv enc1_, enc2a_, enc2b_, enc3a_, enc3b_, dec2_, dec1_, classifier_;
  UpConv up2_, up1_;
};

}  // namespace clickseg::nn
