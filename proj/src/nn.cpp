#include "clickseg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

// Every product goes through the packed GEMM kernels so results do not depend
// on buffer alignment.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 1
#include <Eigen/Dense>

namespace clickseg::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
T ordered_sum(const T* p, Eigen::Index n) {
  T s = 0;
  for (Eigen::Index i = 0; i < n; ++i) s += p[i];
  return s;
}

int out_extent(int extent, int kernel, int stride) { return (extent + 2 * (kernel / 2) - kernel) / stride + 1; }

template <typename T>
void im2col(const Tensor3<T>& x, int kernel, int stride, int oh, int ow, std::vector<T>& col) {
  const int pad = kernel / 2;
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  col.assign(static_cast<std::size_t>(x.channels) * kernel * kernel * cols, T{});
  for (int c = 0; c < x.channels; ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        T* dst = col.data() + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * cols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= x.height) continue;
          const T* src = x.data.data() + c * x.plane() + static_cast<std::size_t>(iy) * x.width;
          T* row = dst + static_cast<std::size_t>(oy) * ow;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx), hi = std::min(ow, x.width + pad - kx);
            for (int ox = lo; ox < hi; ++ox) row[ox] = src[ox + kx - pad];
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < x.width) row[ox] = src[ix];
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const std::vector<T>& col, int kernel, int stride, int oh, int ow, Tensor3<T>& dx) {
  const int pad = kernel / 2;
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < dx.channels; ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const T* src = col.data() + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * cols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= dx.height) continue;
          T* dst = dx.data.data() + c * dx.plane() + static_cast<std::size_t>(iy) * dx.width;
          const T* row = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < dx.width) dst[ix] += row[ox];
          }
        }
      }
}

template <typename T>
Tensor3<T> pad_to_multiple(const Tensor3<T>& x, int multiple) {
  const int h = (x.height + multiple - 1) / multiple * multiple;
  const int w = (x.width + multiple - 1) / multiple * multiple;
  if (h == x.height && w == x.width) return x;
  Tensor3<T> out(x.channels, h, w);
  for (int c = 0; c < x.channels; ++c)
    for (int r = 0; r < x.height; ++r)
      std::copy_n(&x.at(c, r, 0), x.width, &out.at(c, r, 0));
  return out;
}

template <typename T>
void dropout(Tensor3<T>& x, const ForwardOptions& options, std::vector<T>& mask) {
  mask.clear();
  if (!options.stochastic || options.dropout_rate <= 0.0) return;
  if (!options.rng) throw std::invalid_argument("stochastic forward needs a random generator");
  std::bernoulli_distribution keep(1.0 - options.dropout_rate);
  const T scale = static_cast<T>(1.0 / (1.0 - options.dropout_rate));
  mask.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = keep(*options.rng) ? scale : T{};
    x.data[i] *= mask[i];
  }
}

template <typename T>
void dropout_backward(const std::vector<T>& mask, Tensor3<T>& dy) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < dy.size(); ++i) dy.data[i] *= mask[i];
}

template <typename T>
void add_inplace(Tensor3<T>& a, const Tensor3<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace

template <typename T>
Tensor3<T> conv_forward(const Conv& layer, std::span<const T> params, const Tensor3<T>& x) {
  if (x.channels != layer.in) throw std::invalid_argument("conv: channel mismatch");
  const int oh = out_extent(x.height, layer.kernel, layer.stride);
  const int ow = out_extent(x.width, layer.kernel, layer.stride);
  const int k2 = layer.in * layer.kernel * layer.kernel;
  Tensor3<T> y(layer.out, oh, ow);
  ConstMapMat<T> weights(params.data() + layer.offset, layer.out, k2);
  MapMat<T> out(y.data.data(), layer.out, static_cast<Eigen::Index>(oh) * ow);
  if (layer.kernel == 1 && layer.stride == 1) {
    ConstMapMat<T> in(x.data.data(), layer.in, static_cast<Eigen::Index>(oh) * ow);
    out.noalias() = weights * in;
  } else {
    std::vector<T> col;
    im2col(x, layer.kernel, layer.stride, oh, ow, col);
    ConstMapMat<T> in(col.data(), k2, static_cast<Eigen::Index>(oh) * ow);
    out.noalias() = weights * in;
  }
  const T* bias = params.data() + layer.offset + layer.weight_count();
  for (int o = 0; o < layer.out; ++o) out.row(o).array() += bias[o];
  return y;
}

template <typename T>
void conv_backward(const Conv& layer, std::span<const T> params, const Tensor3<T>& x, const Tensor3<T>& dy,
                   std::span<T> grads, Tensor3<T>* dx) {
  const int oh = dy.height, ow = dy.width;
  const Eigen::Index cols = static_cast<Eigen::Index>(oh) * ow;
  const int k2 = layer.in * layer.kernel * layer.kernel;
  ConstMapMat<T> weights(params.data() + layer.offset, layer.out, k2);
  ConstMapMat<T> g(dy.data.data(), layer.out, cols);
  const bool pointwise = layer.kernel == 1 && layer.stride == 1;
  std::vector<T> col;
  if (!pointwise) im2col(x, layer.kernel, layer.stride, oh, ow, col);
  const T* col_data = pointwise ? x.data.data() : col.data();
  ConstMapMat<T> in(col_data, k2, cols);

  if (!grads.empty()) {
    MapMat<T> dw(grads.data() + layer.offset, layer.out, k2);
    dw.noalias() += g * in.transpose();
    T* db = grads.data() + layer.offset + layer.weight_count();
    for (int o = 0; o < layer.out; ++o) db[o] += ordered_sum(g.data() + static_cast<Eigen::Index>(o) * cols, cols);
  }
  if (dx) {
    *dx = Tensor3<T>(x.channels, x.height, x.width);
    if (pointwise) {
      MapMat<T> out(dx->data.data(), k2, cols);
      out.noalias() = weights.transpose() * g;
    } else {
      std::vector<T> dcol(static_cast<std::size_t>(k2) * cols);
      MapMat<T> out(dcol.data(), k2, cols);
      out.noalias() = weights.transpose() * g;
      col2im_add(dcol, layer.kernel, layer.stride, oh, ow, *dx);
    }
  }
}

template <typename T>
Tensor3<T> upconv_forward(const UpConv& layer, std::span<const T> params, const Tensor3<T>& x) {
  if (x.channels != layer.in) throw std::invalid_argument("upconv: channel mismatch");
  const Eigen::Index hw = static_cast<Eigen::Index>(x.plane());
  ConstMapMat<T> weights(params.data() + layer.offset, layer.out * 4, layer.in);
  ConstMapMat<T> in(x.data.data(), layer.in, hw);
  RowMat<T> blocks = weights * in;
  const T* bias = params.data() + layer.offset + layer.weight_count();
  Tensor3<T> y(layer.out, x.height * 2, x.width * 2);
  for (int o = 0; o < layer.out; ++o)
    for (int q = 0; q < 4; ++q) {
      const int dy = q / 2, dx = q % 2;
      const T* src = blocks.data() + (static_cast<Eigen::Index>(o) * 4 + q) * hw;
      for (int r = 0; r < x.height; ++r)
        for (int c = 0; c < x.width; ++c) y.at(o, 2 * r + dy, 2 * c + dx) = src[r * x.width + c] + bias[o];
    }
  return y;
}

template <typename T>
void upconv_backward(const UpConv& layer, std::span<const T> params, const Tensor3<T>& x, const Tensor3<T>& dy,
                     std::span<T> grads, Tensor3<T>* dx) {
  const Eigen::Index hw = static_cast<Eigen::Index>(x.plane());
  RowMat<T> g(layer.out * 4, hw);
  for (int o = 0; o < layer.out; ++o)
    for (int q = 0; q < 4; ++q) {
      const int oy = q / 2, ox = q % 2;
      T* dst = g.data() + (static_cast<Eigen::Index>(o) * 4 + q) * hw;
      for (int r = 0; r < x.height; ++r)
        for (int c = 0; c < x.width; ++c) dst[r * x.width + c] = dy.at(o, 2 * r + oy, 2 * c + ox);
    }
  ConstMapMat<T> weights(params.data() + layer.offset, layer.out * 4, layer.in);
  ConstMapMat<T> in(x.data.data(), layer.in, hw);
  if (!grads.empty()) {
    MapMat<T> dw(grads.data() + layer.offset, layer.out * 4, layer.in);
    dw.noalias() += g * in.transpose();
    T* db = grads.data() + layer.offset + layer.weight_count();
    for (int o = 0; o < layer.out; ++o) db[o] += ordered_sum(g.data() + static_cast<Eigen::Index>(o) * 4 * hw, 4 * hw);
  }
  if (dx) {
    *dx = Tensor3<T>(x.channels, x.height, x.width);
    MapMat<T> out(dx->data.data(), layer.in, hw);
    out.noalias() = weights.transpose() * g;
  }
}

template <typename T>
void relu_inplace(Tensor3<T>& x) {
  for (auto& v : x.data) v = v > T{} ? v : T{};
}

template <typename T>
void relu_backward_inplace(const Tensor3<T>& y, Tensor3<T>& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(y.data[i] > T{})) dy.data[i] = T{};
}

template <typename T>
void init_conv(std::span<T> params, const Conv& layer, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (layer.in * layer.kernel * layer.kernel)));
  for (std::size_t i = 0; i < layer.weight_count(); ++i) params[layer.offset + i] = static_cast<T>(dist(rng));
  for (int o = 0; o < layer.out; ++o) params[layer.offset + layer.weight_count() + o] = T{};
}

template <typename T>
void init_upconv(std::span<T> params, const UpConv& layer, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / layer.in));
  for (std::size_t i = 0; i < layer.weight_count(); ++i) params[layer.offset + i] = static_cast<T>(dist(rng));
  for (int o = 0; o < layer.out; ++o) params[layer.offset + layer.weight_count() + o] = T{};
}

template <typename T>
Tensor3<T> softmax(const Tensor3<T>& logits, double temperature) {
  Tensor3<T> out(logits.channels, logits.height, logits.width);
  const std::size_t plane = logits.plane();
  const int n = logits.channels;
  std::vector<double> z(n);
  for (std::size_t i = 0; i < plane; ++i) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k) {
      z[k] = static_cast<double>(logits.data[k * plane + i]) / temperature;
      zmax = std::max(zmax, z[k]);
    }
    double sum = 0.0;
    for (int k = 0; k < n; ++k) {
      z[k] = std::exp(z[k] - zmax);
      sum += z[k];
    }
    for (int k = 0; k < n; ++k) out.data[k * plane + i] = static_cast<T>(z[k] / sum);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Network<T>::Network(const NetworkShape& shape) : shape_(shape) {
  const auto [w1, w2, w3] = shape.widths;
  std::size_t offset = 0;
  auto conv = [&](int in, int out, int kernel, int stride) {
    Conv c{in, out, kernel, stride, offset};
    offset += c.parameter_count();
    return c;
  };
  auto up = [&](int in, int out) {
    UpConv u{in, out, offset};
    offset += u.parameter_count();
    return u;
  };
  enc1_ = conv(shape.input_channels, w1, 3, 1);
  enc2a_ = conv(w1, w2, 3, 2);
  enc2b_ = conv(w2, w2, 3, 1);
  enc3a_ = conv(w2, w3, 3, 2);
  enc3b_ = conv(w3, w3, 3, 1);
  up2_ = up(w3, w2);
  dec2_ = conv(w2, w2, 3, 1);
  up1_ = up(w2, w1);
  dec1_ = conv(w1, w1, 3, 1);
  classifier_ = conv(w1, shape.class_count, 1, 1);
  params_.assign(offset, T{});
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::span<T> p(params_);
  for (const Conv* c : {&enc1_, &enc2a_, &enc2b_, &enc3a_, &enc3b_}) init_conv(p, *c, rng);
  init_upconv(p, up2_, rng);
  init_conv(p, dec2_, rng);
  init_upconv(p, up1_, rng);
  init_conv(p, dec1_, rng);
  init_conv(p, classifier_, rng);
}

template <typename T>
Tensor3<T> Network<T>::forward(const Tensor3<T>& input, const ForwardOptions& options, Trace<T>* trace) const {
  if (input.channels != shape_.input_channels)
    throw std::invalid_argument("network: expected " + std::to_string(shape_.input_channels) + " input channels, got " +
                                std::to_string(input.channels));
  Trace<T> local;
  Trace<T>& t = trace ? *trace : local;
  std::span<const T> p(params_);
  t.height = input.height;
  t.width = input.width;
  t.input = pad_to_multiple(input, kSpatialMultiple);

  t.e1 = conv_forward(enc1_, p, t.input);
  relu_inplace(t.e1);
  t.e2a = conv_forward(enc2a_, p, t.e1);
  relu_inplace(t.e2a);
  t.e2 = conv_forward(enc2b_, p, t.e2a);
  relu_inplace(t.e2);
  t.e3a = conv_forward(enc3a_, p, t.e2);
  relu_inplace(t.e3a);
  t.e3 = conv_forward(enc3b_, p, t.e3a);
  relu_inplace(t.e3);

  t.e3_drop = t.e3;
  dropout(t.e3_drop, options, t.masks[0]);
  t.e2_drop = t.e2;
  dropout(t.e2_drop, options, t.masks[1]);
  t.e1_drop = t.e1;
  dropout(t.e1_drop, options, t.masks[2]);

  t.u2 = upconv_forward(up2_, p, t.e3_drop);
  relu_inplace(t.u2);
  t.s2 = t.u2;
  add_inplace(t.s2, t.e2_drop);
  t.d2 = conv_forward(dec2_, p, t.s2);
  relu_inplace(t.d2);
  t.u1 = upconv_forward(up1_, p, t.d2);
  relu_inplace(t.u1);
  t.s1 = t.u1;
  add_inplace(t.s1, t.e1_drop);
  t.d1 = conv_forward(dec1_, p, t.s1);
  relu_inplace(t.d1);
  Tensor3<T> logits = conv_forward(classifier_, p, t.d1);
  if (logits.height == input.height && logits.width == input.width) return logits;
  return crop(logits, Window{0, 0, input.height, input.width});
}

template <typename T>
void Network<T>::backward(const Trace<T>& t, const Tensor3<T>& dlogits, std::span<T> grads, Tensor3<T>* dinput) const {
  if (!grads.empty() && grads.size() != params_.size()) throw std::invalid_argument("gradient buffer size mismatch");
  std::span<const T> p(params_);
  Tensor3<T> g(dlogits.channels, t.input.height, t.input.width);
  if (dlogits.height == g.height && dlogits.width == g.width)
    g = dlogits;
  else
    paste(g, dlogits, Window{0, 0, dlogits.height, dlogits.width});

  Tensor3<T> d_d1, d_s1, d_d2, d_s2, d_e3, d_e3a, d_e2, d_e2a, d_e1, scratch;
  conv_backward(classifier_, p, t.d1, g, grads, &d_d1);
  relu_backward_inplace(t.d1, d_d1);
  conv_backward(dec1_, p, t.s1, d_d1, grads, &d_s1);
  // s1 = u1 + drop(e1)
  Tensor3<T> d_u1 = d_s1;
  relu_backward_inplace(t.u1, d_u1);
  d_e1 = d_s1;
  dropout_backward(t.masks[2], d_e1);
  upconv_backward(up1_, p, t.d2, d_u1, grads, &d_d2);
  relu_backward_inplace(t.d2, d_d2);
  conv_backward(dec2_, p, t.s2, d_d2, grads, &d_s2);
  // s2 = u2 + drop(e2)
  Tensor3<T> d_u2 = d_s2;
  relu_backward_inplace(t.u2, d_u2);
  d_e2 = d_s2;
  dropout_backward(t.masks[1], d_e2);
  upconv_backward(up2_, p, t.e3_drop, d_u2, grads, &d_e3);
  dropout_backward(t.masks[0], d_e3);

  relu_backward_inplace(t.e3, d_e3);
  conv_backward(enc3b_, p, t.e3a, d_e3, grads, &d_e3a);
  relu_backward_inplace(t.e3a, d_e3a);
  conv_backward(enc3a_, p, t.e2, d_e3a, grads, &scratch);
  add_inplace(d_e2, scratch);
  relu_backward_inplace(t.e2, d_e2);
  conv_backward(enc2b_, p, t.e2a, d_e2, grads, &d_e2a);
  relu_backward_inplace(t.e2a, d_e2a);
  conv_backward(enc2a_, p, t.e1, d_e2a, grads, &scratch);
  add_inplace(d_e1, scratch);
  relu_backward_inplace(t.e1, d_e1);
  if (dinput) {
    Tensor3<T> full;
    conv_backward(enc1_, p, t.input, d_e1, grads, &full);
    *dinput = (full.height == t.height && full.width == t.width) ? std::move(full)
                                                                  : crop(full, Window{0, 0, t.height, t.width});
  } else {
    conv_backward(enc1_, p, t.input, d_e1, grads, static_cast<Tensor3<T>*>(nullptr));
  }
}

template <typename T>
int Network<T>::receptive_radius() const {
  // Interval propagation along the deepest path; skip paths see strict subsets.
  int radius = 0;
  for (int y = 0; y < 4 * kSpatialMultiple; ++y) {
    int lo = y - 1, hi = y + 1;                               // dec1
    lo = (lo >= 0 ? lo / 2 : -((-lo + 1) / 2));               // up1 (floor division)
    hi = (hi >= 0 ? hi / 2 : -((-hi + 1) / 2));
    lo -= 1, hi += 1;                                         // dec2
    lo = (lo >= 0 ? lo / 2 : -((-lo + 1) / 2));               // up2
    hi = (hi >= 0 ? hi / 2 : -((-hi + 1) / 2));
    lo -= 1, hi += 1;                                         // enc3b
    lo = 2 * lo - 1, hi = 2 * hi + 1;                         // enc3a
    lo -= 1, hi += 1;                                         // enc2b
    lo = 2 * lo - 1, hi = 2 * hi + 1;                         // enc2a
    lo -= 1, hi += 1;                                         // enc1
    radius = std::max({radius, y - lo, hi - y});
  }
  return radius;
}

#define CLICKSEG_INSTANTIATE(T)                                                                              \
  template Tensor3<T> conv_forward<T>(const Conv&, std::span<const T>, const Tensor3<T>&);                   \
  template void conv_backward<T>(const Conv&, std::span<const T>, const Tensor3<T>&, const Tensor3<T>&,      \
                                 std::span<T>, Tensor3<T>*);                                                 \
  template Tensor3<T> upconv_forward<T>(const UpConv&, std::span<const T>, const Tensor3<T>&);               \
  template void upconv_backward<T>(const UpConv&, std::span<const T>, const Tensor3<T>&, const Tensor3<T>&,  \
                                   std::span<T>, Tensor3<T>*);                                               \
  template void relu_inplace<T>(Tensor3<T>&);                                                                \
  template void relu_backward_inplace<T>(const Tensor3<T>&, Tensor3<T>&);                                    \
  template void init_conv<T>(std::span<T>, const Conv&, std::mt19937_64&);                                   \
  template void init_upconv<T>(std::span<T>, const UpConv&, std::mt19937_64&);                               \
  template Tensor3<T> softmax<T>(const Tensor3<T>&, double);                                                 \
  template class Network<T>;

CLICKSEG_INSTANTIATE(float)
CLICKSEG_INSTANTIATE(double)

#undef CLICKSEG_INSTANTIATE

}  // namespace clickseg::nn
