#pragma once

// Layers with hand-written backward passes. Each layer offers
//   infer(x)      pure forward, safe for concurrent readers
//   forward(x)    training forward, caches what backward needs
//   backward(dy)  accumulates parameter gradients and returns dx
// Gradients are accumulated (+=); callers zero them between steps.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "nutripred/rng.hpp"
#include "nutripred/tensor.hpp"

namespace nutripred::nn {

template <std::floating_point T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first backward

  Parameter() = default;
  explicit Parameter(Shape shape) : value(std::move(shape)) {}

  Tensor<T>& gradient() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void zero_grad() {
    if (!grad.empty()) grad.zero();
  }
};

/// A named view on a parameter (trainable) or a buffer (param == nullptr).
template <std::floating_point T>
struct StateRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Parameter<T>* param = nullptr;

  bool trainable() const { return param != nullptr; }
};

template <std::floating_point T>
using StateList = std::vector<StateRef<T>>;

inline std::string join_name(const std::string& prefix, std::string_view name) {
  return prefix.empty() ? std::string(name) : prefix + "." + std::string(name);
}

template <std::floating_point T>
void add_param(StateList<T>& out, const std::string& prefix, std::string_view name, Parameter<T>& p) {
  out.push_back({join_name(prefix, name), &p.value, &p});
}

template <std::floating_point T>
void add_buffer(StateList<T>& out, const std::string& prefix, std::string_view name, Tensor<T>& t) {
  out.push_back({join_name(prefix, name), &t, nullptr});
}

template <std::floating_point T>
void fill_uniform(Tensor<T>& t, Rng& rng, double bound) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------

/// Fully connected layer over the last dimension. Weight is (out, in).
template <std::floating_point T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out) : in_(in), out_(out), weight_({out, in}), bias_({out}) {}

  /// Weights uniform in +-1/sqrt(fan_in), biases zero.
  void init(Rng& rng) {
    fill_uniform(weight_.value, rng, 1.0 / std::sqrt(static_cast<double>(in_)));
    bias_.value.zero();
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

  Tensor<T> infer(const Tensor<T>& x) const {
    if (x.rank() == 0 || x.shape().back() != in_) {
      throw ShapeError("linear: expected last dimension " + std::to_string(in_) + ", got " + shape_string(x.shape()));
    }
    const std::size_t rows = x.size() / in_;
    Shape shape = x.shape();
    shape.back() = out_;
    Tensor<T> y(shape);
    gemm(false, true, rows, out_, in_, T(1), x.data(), weight_.value.data(), T(0), y.data());
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = y.data() + r * out_;
      for (std::size_t j = 0; j < out_; ++j) row[j] += bias_.value[j];
    }
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return infer(x);
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    const std::size_t rows = input_.size() / in_;
    gemm(true, false, out_, in_, rows, T(1), dy.data(), input_.data(), T(1), weight_.gradient().data());
    Tensor<T>& db = bias_.gradient();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = dy.data() + r * out_;
      for (std::size_t j = 0; j < out_; ++j) db[j] += row[j];
    }
    if (!need_input_grad) return {};
    Tensor<T> dx(input_.shape());
    gemm(false, false, rows, in_, out_, T(1), dy.data(), weight_.value.data(), T(0), dx.data());
    return dx;
  }

  void collect(const std::string& prefix, StateList<T>& out) {
    add_param(out, prefix, "weight", weight_);
    add_param(out, prefix, "bias", bias_);
  }

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------

template <std::floating_point T>
class ReLU {
 public:
  static Tensor<T> infer(Tensor<T> x) {
    for (auto& v : x.values()) v = v < T(0) ? T(0) : v;  // NaN passes through
    return x;
  }
  Tensor<T> forward(const Tensor<T>& x) {
    output_ = infer(x);
    return output_;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (!(output_[i] > T(0))) dy[i] = T(0);
    }
    return dy;
  }

 private:
  Tensor<T> output_;
};

/// Exact (erf) GELU.
template <std::floating_point T>
class GELU {
 public:
  static Tensor<T> infer(Tensor<T> x) {
    for (auto& v : x.values()) v = static_cast<T>(value(v));
    return x;
  }
  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return infer(x);
  }
  Tensor<T> backward(Tensor<T> dy) const {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const double x = input_[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      dy[i] = static_cast<T>(dy[i] * (cdf + x * pdf));
    }
    return dy;
  }

 private:
  static double value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5)); }
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------

/// Layer normalization over the last dimension.
template <std::floating_point T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, double eps = 1e-6) : dim_(dim), eps_(eps), weight_({dim}), bias_({dim}) {
    weight_.value.fill(T(1));
  }

  Tensor<T> infer(const Tensor<T>& x) const { return run(x, nullptr, nullptr); }

  Tensor<T> forward(const Tensor<T>& x) {
    normalized_ = Tensor<T>(x.shape());
    inv_std_.assign(x.size() / dim_, 0.0);
    return run(x, &normalized_, &inv_std_);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t rows = dy.size() / dim_;
    Tensor<T>& dw = weight_.gradient();
    Tensor<T>& db = bias_.gradient();
    Tensor<T> dx(dy.shape());
    std::vector<double> dxhat(dim_);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = dy.data() + r * dim_;
      const T* xh = normalized_.data() + r * dim_;
      double mean_d = 0.0;
      double mean_dx = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) {
        dw[j] += g[j] * xh[j];
        db[j] += g[j];
        dxhat[j] = static_cast<double>(g[j]) * weight_.value[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xh[j];
      }
      mean_d /= static_cast<double>(dim_);
      mean_dx /= static_cast<double>(dim_);
      T* out = dx.data() + r * dim_;
      for (std::size_t j = 0; j < dim_; ++j) {
        out[j] = static_cast<T>(inv_std_[r] * (dxhat[j] - mean_d - xh[j] * mean_dx));
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, StateList<T>& out) {
    add_param(out, prefix, "weight", weight_);
    add_param(out, prefix, "bias", bias_);
  }

 private:
  Tensor<T> run(const Tensor<T>& x, Tensor<T>* normalized, std::vector<double>* inv_std) const {
    if (x.rank() == 0 || x.shape().back() != dim_) {
      throw ShapeError("layer norm: expected last dimension " + std::to_string(dim_) + ", got " +
                       shape_string(x.shape()));
    }
    const std::size_t rows = x.size() / dim_;
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = x.data() + r * dim_;
      double mean = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) mean += in[j];
      mean /= static_cast<double>(dim_);
      double var = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) var += (in[j] - mean) * (in[j] - mean);
      var /= static_cast<double>(dim_);
      const double is = 1.0 / std::sqrt(var + eps_);
      if (inv_std) (*inv_std)[r] = is;
      T* out = y.data() + r * dim_;
      for (std::size_t j = 0; j < dim_; ++j) {
        const double xh = (in[j] - mean) * is;
        if (normalized) (*normalized)[r * dim_ + j] = static_cast<T>(xh);
        out[j] = static_cast<T>(xh * weight_.value[j] + bias_.value[j]);
      }
    }
    return y;
  }

  std::size_t dim_ = 0;
  double eps_ = 1e-6;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> normalized_;
  std::vector<double> inv_std_;
};

// ---------------------------------------------------------------------------

struct Conv2dSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

/// 2-D convolution on (B, C, H, W) via im2col. Weight is (out, in, k, k).
template <std::floating_point T>
class Conv2d {
 public:
  Conv2d() = default;
  explicit Conv2d(const Conv2dSpec& spec)
      : spec_(spec), weight_({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}) {
    if (spec.bias) bias_ = Parameter<T>({spec.out_channels});
  }

  void init(Rng& rng) {
    const double fan_in = static_cast<double>(spec_.in_channels * spec_.kernel * spec_.kernel);
    fill_uniform(weight_.value, rng, 1.0 / std::sqrt(fan_in));
    if (spec_.bias) bias_.value.zero();
  }

  const Conv2dSpec& spec() const { return spec_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

  std::size_t out_size(std::size_t in) const {
    if (in + 2 * spec_.padding < spec_.kernel) {
      throw ShapeError("conv: input extent " + std::to_string(in) + " smaller than kernel " +
                       std::to_string(spec_.kernel));
    }
    return (in + 2 * spec_.padding - spec_.kernel) / spec_.stride + 1;
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = out_size(h), wo = out_size(w);
    const std::size_t patch = spec_.in_channels * spec_.kernel * spec_.kernel;
    Tensor<T> y({batch, spec_.out_channels, ho, wo});
    std::vector<T> cols(patch * ho * wo);
    for (std::size_t b = 0; b < batch; ++b) {
      im2col(x.data() + b * spec_.in_channels * h * w, h, w, ho, wo, cols.data());
      T* out = y.data() + b * spec_.out_channels * ho * wo;
      gemm(false, false, spec_.out_channels, ho * wo, patch, T(1), weight_.value.data(), cols.data(), T(0), out);
      if (spec_.bias) {
        for (std::size_t c = 0; c < spec_.out_channels; ++c) {
          for (std::size_t i = 0; i < ho * wo; ++i) out[c * ho * wo + i] += bias_.value[c];
        }
      }
    }
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return infer(x);
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    const std::size_t batch = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
    const std::size_t ho = dy.dim(2), wo = dy.dim(3);
    const std::size_t patch = spec_.in_channels * spec_.kernel * spec_.kernel;
    std::vector<T> cols(patch * ho * wo);
    std::vector<T> dcols(need_input_grad ? patch * ho * wo : 0);
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(input_.shape());
    Tensor<T>& dw = weight_.gradient();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* g = dy.data() + b * spec_.out_channels * ho * wo;
      im2col(input_.data() + b * spec_.in_channels * h * w, h, w, ho, wo, cols.data());
      gemm(false, true, spec_.out_channels, patch, ho * wo, T(1), g, cols.data(), T(1), dw.data());
      if (spec_.bias) {
        Tensor<T>& db = bias_.gradient();
        for (std::size_t c = 0; c < spec_.out_channels; ++c) {
          T acc = T(0);
          for (std::size_t i = 0; i < ho * wo; ++i) acc += g[c * ho * wo + i];
          db[c] += acc;
        }
      }
      if (need_input_grad) {
        gemm(true, false, patch, ho * wo, spec_.out_channels, T(1), weight_.value.data(), g, T(0), dcols.data());
        col2im(dcols.data(), h, w, ho, wo, dx.data() + b * spec_.in_channels * h * w);
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, StateList<T>& out) {
    add_param(out, prefix, "weight", weight_);
    if (spec_.bias) add_param(out, prefix, "bias", bias_);
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
      throw ShapeError("conv: expected (B," + std::to_string(spec_.in_channels) + ",H,W), got " +
                       shape_string(x.shape()));
    }
  }

  void im2col(const T* img, std::size_t h, std::size_t w, std::size_t ho, std::size_t wo, T* cols) const {
    const std::size_t k = spec_.kernel;
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec_.stride + ky) -
                                      static_cast<std::ptrdiff_t>(spec_.padding);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec_.stride + kx) -
                                        static_cast<std::ptrdiff_t>(spec_.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                  ix < static_cast<std::ptrdiff_t>(w);
              row[oy * wo + ox] = inside ? img[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)]
                                         : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* cols, std::size_t h, std::size_t w, std::size_t ho, std::size_t wo, T* img) const {
    const std::size_t k = spec_.kernel;
    for (std::size_t c = 0; c < spec_.in_channels; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec_.stride + ky) -
                                      static_cast<std::ptrdiff_t>(spec_.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec_.stride + kx) -
                                        static_cast<std::ptrdiff_t>(spec_.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              img[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
            }
          }
        }
      }
    }
  }

  Conv2dSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------

/// Batch normalization with frozen statistics: a per-channel affine map using the running
/// mean/variance buffers in both training and inference. No cross-sample interaction.
template <std::floating_point T>
class FrozenBatchNorm2d {
 public:
  FrozenBatchNorm2d() = default;
  explicit FrozenBatchNorm2d(std::size_t channels, double eps = 1e-5)
      : channels_(channels), eps_(eps), weight_({channels}), bias_({channels}), mean_({channels}), var_({channels}) {
    weight_.value.fill(T(1));
    var_.fill(T(1));
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != channels_) {
      throw ShapeError("batch norm: expected " + std::to_string(channels_) + " channels, got " +
                       shape_string(x.shape()));
    }
    Tensor<T> y(x.shape());
    const std::size_t plane = x.dim(2) * x.dim(3);
    for (std::size_t b = 0; b < x.dim(0); ++b) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const double scale = weight_.value[c] / std::sqrt(static_cast<double>(var_[c]) + eps_);
        const double shift = bias_.value[c] - mean_[c] * scale;
        const std::size_t off = (b * channels_ + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) y[off + i] = static_cast<T>(x[off + i] * scale + shift);
      }
    }
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return infer(x);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.shape());
    Tensor<T>& dw = weight_.gradient();
    Tensor<T>& db = bias_.gradient();
    const std::size_t plane = dy.dim(2) * dy.dim(3);
    for (std::size_t c = 0; c < channels_; ++c) {
      const double inv_std = 1.0 / std::sqrt(static_cast<double>(var_[c]) + eps_);
      const double scale = weight_.value[c] * inv_std;
      double gw = 0.0, gb = 0.0;
      for (std::size_t b = 0; b < dy.dim(0); ++b) {
        const std::size_t off = (b * channels_ + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          gw += dy[off + i] * (input_[off + i] - mean_[c]) * inv_std;
          gb += dy[off + i];
          dx[off + i] = static_cast<T>(dy[off + i] * scale);
        }
      }
      dw[c] += static_cast<T>(gw);
      db[c] += static_cast<T>(gb);
    }
    return dx;
  }

  Tensor<T>& running_mean() { return mean_; }
  Tensor<T>& running_var() { return var_; }

  void collect(const std::string& prefix, StateList<T>& out) {
    add_param(out, prefix, "weight", weight_);
    add_param(out, prefix, "bias", bias_);
    add_buffer(out, prefix, "running_mean", mean_);
    add_buffer(out, prefix, "running_var", var_);
  }

 private:
  std::size_t channels_ = 0;
  double eps_ = 1e-5;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> mean_;
  Tensor<T> var_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------

/// Max pooling on (B, C, H, W); padded cells never win.
template <std::floating_point T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t padding)
      : kernel_(kernel), stride_(stride), padding_(padding) {}

  Tensor<T> infer(const Tensor<T>& x) const { return run(x, nullptr); }
  Tensor<T> forward(const Tensor<T>& x) {
    in_shape_ = x.shape();
    return run(x, &argmax_);
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_shape_);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
    return dx;
  }

 private:
  Tensor<T> run(const Tensor<T>& x, std::vector<std::size_t>* argmax) const {
    if (x.rank() != 4) throw ShapeError("max pool: expected rank-4 input, got " + shape_string(x.shape()));
    const std::size_t h = x.dim(2), w = x.dim(3);
    if (h + 2 * padding_ < kernel_ || w + 2 * padding_ < kernel_) {
      throw ShapeError("max pool: input " + shape_string(x.shape()) + " smaller than kernel");
    }
    const std::size_t ho = (h + 2 * padding_ - kernel_) / stride_ + 1;
    const std::size_t wo = (w + 2 * padding_ - kernel_) / stride_ + 1;
    Tensor<T> y({x.dim(0), x.dim(1), ho, wo});
    if (argmax) argmax->assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < x.dim(0) * x.dim(1); ++plane) {
      const std::size_t base = plane * h * w;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = base;
          for (std::size_t ky = 0; ky < kernel_; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(padding_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kernel_; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(padding_);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          y[o] = best;
          if (argmax) (*argmax)[o] = best_idx;
        }
      }
    }
    return y;
  }

  std::size_t kernel_ = 3;
  std::size_t stride_ = 2;
  std::size_t padding_ = 1;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

/// (B, C, H, W) -> (B, C) spatial mean.
template <std::floating_point T>
class GlobalAvgPool {
 public:
  static Tensor<T> infer(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global pool: expected rank-4 input, got " + shape_string(x.shape()));
    const std::size_t plane = x.dim(2) * x.dim(3);
    Tensor<T> y({x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < y.size(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < plane; ++j) acc += x[i * plane + j];
      y[i] = static_cast<T>(acc / static_cast<double>(plane));
    }
    return y;
  }
  Tensor<T> forward(const Tensor<T>& x) {
    in_shape_ = x.shape();
    return infer(x);
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_shape_);
    const std::size_t plane = in_shape_[2] * in_shape_[3];
    const T scale = T(1) / static_cast<T>(plane);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] = dy[i] * scale;
    }
    return dx;
  }

 private:
  Shape in_shape_;
};

// ---------------------------------------------------------------------------

/// Multi-head self-attention on (B, T, D) with a fused qkv projection laid out as
/// [q(heads x head_dim), k(...), v(...)] along the output dimension.
template <std::floating_point T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(std::size_t dim, std::size_t heads) : dim_(dim), heads_(heads), qkv_(dim, 3 * dim), proj_(dim, dim) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("attention: dimension " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
  }

  void init(Rng& rng) {
    qkv_.init(rng);
    proj_.init(rng);
  }

  std::size_t heads() const { return heads_; }

  Tensor<T> infer(const Tensor<T>& x) const {
    Tensor<T> mixed = attend(qkv_.infer(x), nullptr);
    return proj_.infer(mixed);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    qkv_out_ = qkv_.forward(x);
    Tensor<T> mixed = attend(qkv_out_, &probs_);
    return proj_.forward(mixed);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T> dmixed = proj_.backward(dy);
    const std::size_t batch = qkv_out_.dim(0), tokens = qkv_out_.dim(1), hd = dim_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor<T> dqkv(qkv_out_.shape());
    std::vector<double> dp(tokens);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads_; ++h) {
        const T* p = probs_.data() + ((b * heads_ + h) * tokens) * tokens;
        for (std::size_t i = 0; i < tokens; ++i) {
          const T* g = dmixed.data() + (b * tokens + i) * dim_ + h * hd;
          // dP[i, j] = dO[i] . V[j]; dV[j] += P[i, j] dO[i]
          double dot = 0.0;
          for (std::size_t j = 0; j < tokens; ++j) {
            const T* v = qkv_out_.data() + (b * tokens + j) * 3 * dim_ + 2 * dim_ + h * hd;
            T* dv = dqkv.data() + (b * tokens + j) * 3 * dim_ + 2 * dim_ + h * hd;
            double acc = 0.0;
            const double pij = p[i * tokens + j];
            for (std::size_t d = 0; d < hd; ++d) {
              acc += static_cast<double>(g[d]) * v[d];
              dv[d] += static_cast<T>(pij * g[d]);
            }
            dp[j] = acc;
            dot += acc * pij;
          }
          // dS = P * (dP - sum_j P dP); dQ[i] += dS[i,j] K[j] * scale; dK[j] += dS[i,j] Q[i] * scale
          const T* q = qkv_out_.data() + (b * tokens + i) * 3 * dim_ + h * hd;
          T* dq = dqkv.data() + (b * tokens + i) * 3 * dim_ + h * hd;
          for (std::size_t j = 0; j < tokens; ++j) {
            const double ds = p[i * tokens + j] * (dp[j] - dot) * scale;
            const T* k = qkv_out_.data() + (b * tokens + j) * 3 * dim_ + dim_ + h * hd;
            T* dk = dqkv.data() + (b * tokens + j) * 3 * dim_ + dim_ + h * hd;
            for (std::size_t d = 0; d < hd; ++d) {
              dq[d] += static_cast<T>(ds * k[d]);
              dk[d] += static_cast<T>(ds * q[d]);
            }
          }
        }
      }
    }
    return qkv_.backward(dqkv);
  }

  void collect(const std::string& prefix, StateList<T>& out) {
    qkv_.collect(join_name(prefix, "qkv"), out);
    proj_.collect(join_name(prefix, "proj"), out);
  }

 private:
  Tensor<T> attend(const Tensor<T>& qkv, Tensor<T>* probs) const {
    if (qkv.rank() != 3) throw ShapeError("attention: expected (B,T,D) input, got rank " + std::to_string(qkv.rank()));
    const std::size_t batch = qkv.dim(0), tokens = qkv.dim(1), hd = dim_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor<T> out({batch, tokens, dim_});
    if (probs) *probs = Tensor<T>({batch, heads_, tokens, tokens});
    std::vector<double> row(tokens);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t i = 0; i < tokens; ++i) {
          const T* q = qkv.data() + (b * tokens + i) * 3 * dim_ + h * hd;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < tokens; ++j) {
            const T* k = qkv.data() + (b * tokens + j) * 3 * dim_ + dim_ + h * hd;
            double s = 0.0;
            for (std::size_t d = 0; d < hd; ++d) s += static_cast<double>(q[d]) * k[d];
            row[j] = s * scale;
            mx = std::max(mx, row[j]);
          }
          double total = 0.0;
          for (auto& v : row) {
            v = std::exp(v - mx);
            total += v;
          }
          T* o = out.data() + (b * tokens + i) * dim_ + h * hd;
          std::vector<double> acc(hd, 0.0);
          for (std::size_t j = 0; j < tokens; ++j) {
            const double pij = row[j] / total;
            if (probs) (*probs)[((b * heads_ + h) * tokens + i) * tokens + j] = static_cast<T>(pij);
            const T* v = qkv.data() + (b * tokens + j) * 3 * dim_ + 2 * dim_ + h * hd;
            for (std::size_t d = 0; d < hd; ++d) acc[d] += pij * v[d];
          }
          for (std::size_t d = 0; d < hd; ++d) o[d] = static_cast<T>(acc[d]);
        }
      }
    }
    return out;
  }

  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
  Linear<T> qkv_;
  Linear<T> proj_;
  Tensor<T> qkv_out_;
  Tensor<T> probs_;
};

/// Two-layer GELU MLP.
template <std::floating_point T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t dim, std::size_t hidden) : fc1_(dim, hidden), fc2_(hidden, dim) {}

  void init(Rng& rng) {
    fc1_.init(rng);
    fc2_.init(rng);
  }
  Tensor<T> infer(const Tensor<T>& x) const { return fc2_.infer(GELU<T>::infer(fc1_.infer(x))); }
  Tensor<T> forward(const Tensor<T>& x) { return fc2_.forward(act_.forward(fc1_.forward(x))); }
  Tensor<T> backward(const Tensor<T>& dy) { return fc1_.backward(act_.backward(fc2_.backward(dy))); }

  void collect(const std::string& prefix, StateList<T>& out) {
    fc1_.collect(join_name(prefix, "fc1"), out);
    fc2_.collect(join_name(prefix, "fc2"), out);
  }

 private:
  Linear<T> fc1_;
  GELU<T> act_;
  Linear<T> fc2_;
};

/// Pre-norm transformer encoder block: x + attn(norm1(x)), then + mlp(norm2(x)).
template <std::floating_point T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, std::size_t mlp_hidden)
      : norm1_(dim), attn_(dim, heads), norm2_(dim), mlp_(dim, mlp_hidden) {}

  void init(Rng& rng) {
    attn_.init(rng);
    mlp_.init(rng);
  }

  const SelfAttention<T>& attention() const { return attn_; }

  Tensor<T> infer(const Tensor<T>& x) const {
    Tensor<T> h = x;
    h += attn_.infer(norm1_.infer(x));
    Tensor<T> out = h;
    out += mlp_.infer(norm2_.infer(h));
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = x;
    h += attn_.forward(norm1_.forward(x));
    Tensor<T> out = h;
    out += mlp_.forward(norm2_.forward(h));
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dh = dy;
    dh += norm2_.backward(mlp_.backward(dy));
    Tensor<T> dx = dh;
    dx += norm1_.backward(attn_.backward(dh));
    return dx;
  }

  void collect(const std::string& prefix, StateList<T>& out) {
    norm1_.collect(join_name(prefix, "norm1"), out);
    attn_.collect(join_name(prefix, "attn"), out);
    norm2_.collect(join_name(prefix, "norm2"), out);
    mlp_.collect(join_name(prefix, "mlp"), out);
  }

 private:
  LayerNorm<T> norm1_;
  SelfAttention<T> attn_;
  LayerNorm<T> norm2_;
  Mlp<T> mlp_;
};

}  // namespace nutripred::nn
