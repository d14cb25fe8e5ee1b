#pragma once

// Hand-written forward/backward layers for desk-scale classifiers:
// convolution, rectifier, 2x2 max downsampling, dense, softmax
// cross-entropy, and momentum SGD.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparsepool/error.hpp"
#include "sparsepool/tensor.hpp"

namespace sparsepool {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// He-style fan-in scaled Gaussian initialization.
template <typename T>
void he_init(std::span<T> weights, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& w : weights) w = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  std::size_t patch() const { return in_channels * kernel * kernel; }

  std::size_t out_extent(std::size_t in) const {
    if (in + 2 * padding < kernel) {
      throw ShapeError("convolution: input extent " + std::to_string(in) +
                       " too small for kernel " + std::to_string(kernel));
    }
    return (in + 2 * padding - kernel) / stride + 1;
  }

  bool operator==(const ConvGeometry&) const = default;
};

// weight is (out_channels, in_channels, kernel, kernel), row-major.
template <typename T>
struct ConvLayer {
  ConvGeometry geom;
  std::vector<T> weight;
  std::vector<T> bias;

  ConvLayer() = default;
  explicit ConvLayer(ConvGeometry g)
      : geom(g), weight(g.out_channels * g.patch(), T(0)), bias(g.out_channels, T(0)) {
    if (g.in_channels == 0 || g.out_channels == 0 || g.kernel == 0 || g.stride == 0) {
      throw ConfigError("convolution geometry must have nonzero sizes");
    }
  }

  void init(std::mt19937_64& rng) {
    he_init<T>(weight, geom.patch(), rng);
    std::fill(bias.begin(), bias.end(), T(0));
  }
};

template <typename T>
struct ConvCache {
  Shape4 in_shape;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  // im2col matrix, patch() rows by (N * out_h * out_w) columns.
  std::vector<T> cols;
};

template <typename T>
struct ConvGrads {
  Tensor4<T> grad_x;
  std::vector<T> grad_w;
  std::vector<T> grad_b;
};

namespace detail {

// Valid output columns [lo, hi) for kernel offset k along an axis of the
// given extent, i.e. those with 0 <= o * stride + k - pad < extent.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t extent,
                                                       std::size_t out,
                                                       const ConvGeometry& g) {
  std::size_t lo = 0;
  while (lo < out && lo * g.stride + k < g.padding) ++lo;
  std::size_t hi = out;
  while (hi > lo && (hi - 1) * g.stride + k >= extent + g.padding) --hi;
  return {lo, hi};
}

template <typename T>
void im2col(const Tensor4<T>& x, const ConvGeometry& g, std::size_t out_h,
            std::size_t out_w, std::vector<T>& cols) {
  const auto& s = x.shape();
  const std::size_t pixels = out_h * out_w;
  const std::size_t width = s.n * pixels;
  cols.resize(g.patch() * width);
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, s.h, out_h, g);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, s.w, out_w, g);
        const std::size_t row = (c * g.kernel + ky) * g.kernel + kx;
        T* dst = cols.data() + row * width;
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* ch = x.channel(n, c).data();
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            T* out = dst + n * pixels + oy * out_w;
            if (oy < ylo || oy >= yhi) {
              std::fill(out, out + out_w, T(0));
              continue;
            }
            const T* src = ch + (oy * g.stride + ky - g.padding) * s.w;
            std::fill(out, out + xlo, T(0));
            if (g.stride == 1) {
              std::copy(src + xlo + kx - g.padding, src + xhi + kx - g.padding, out + xlo);
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) {
                out[ox] = src[ox * g.stride + kx - g.padding];
              }
            }
            std::fill(out + xhi, out + out_w, T(0));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(std::span<const T> cols, const ConvGeometry& g, std::size_t out_h,
            std::size_t out_w, Tensor4<T>& grad_x) {
  const auto& s = grad_x.shape();
  const std::size_t pixels = out_h * out_w;
  const std::size_t width = s.n * pixels;
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, s.h, out_h, g);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, s.w, out_w, g);
        const std::size_t row = (c * g.kernel + ky) * g.kernel + kx;
        const T* src_row = cols.data() + row * width;
        for (std::size_t n = 0; n < s.n; ++n) {
          T* ch = grad_x.channel(n, c).data();
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const T* src = src_row + n * pixels + oy * out_w;
            T* dst = ch + (oy * g.stride + ky - g.padding) * s.w;
            for (std::size_t ox = xlo; ox < xhi; ++ox) {
              dst[ox * g.stride + kx - g.padding] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor4<T> conv_forward(const Tensor4<T>& x, const ConvLayer<T>& layer,
                        ConvCache<T>& cache) {
  const auto& g = layer.geom;
  const auto& s = x.shape();
  if (x.empty() || s.c != g.in_channels) {
    throw ShapeError("conv_forward: input " + s.str() + " has " +
                     std::to_string(s.c) + " channels, layer expects " +
                     std::to_string(g.in_channels));
  }
  const std::size_t out_h = g.out_extent(s.h);
  const std::size_t out_w = g.out_extent(s.w);
  const std::size_t pixels = out_h * out_w;
  const std::size_t width = s.n * pixels;
  cache.in_shape = s;
  cache.out_h = out_h;
  cache.out_w = out_w;
  detail::im2col(x, g, out_h, out_w, cache.cols);

  RowMatrix<T> y(g.out_channels, width);
  y.noalias() = ConstMatrixMap<T>(layer.weight.data(), g.out_channels, g.patch()) *
                ConstMatrixMap<T>(cache.cols.data(), g.patch(), width);

  Tensor4<T> out(Shape4{s.n, g.out_channels, out_h, out_w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      auto dst = out.channel(n, o);
      const T* src = y.data() + o * width + n * pixels;
      const T b = layer.bias[o];
      for (std::size_t i = 0; i < pixels; ++i) dst[i] = src[i] + b;
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv_backward(const Tensor4<T>& grad_y, const ConvLayer<T>& layer,
                           const ConvCache<T>& cache, bool input_grad = true) {
  const auto& g = layer.geom;
  const Shape4 expect{cache.in_shape.n, g.out_channels, cache.out_h, cache.out_w};
  if (grad_y.shape() != expect) {
    throw ShapeError("conv_backward: grad " + grad_y.shape().str() +
                     " does not match forward output " + expect.str());
  }
  const std::size_t pixels = cache.out_h * cache.out_w;
  const std::size_t width = expect.n * pixels;

  // Gather grad_y into (out_channels, N * pixels) to mirror the forward GEMM.
  RowMatrix<T> gy(g.out_channels, width);
  ConvGrads<T> grads;
  grads.grad_b.assign(g.out_channels, T(0));
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    double bsum = 0.0;
    for (std::size_t n = 0; n < expect.n; ++n) {
      const auto src = grad_y.channel(n, o);
      std::copy(src.begin(), src.end(), gy.data() + o * width + n * pixels);
      for (T v : src) bsum += static_cast<double>(v);
    }
    grads.grad_b[o] = static_cast<T>(bsum);
  }

  const ConstMatrixMap<T> cols(cache.cols.data(), g.patch(), width);
  grads.grad_w.assign(g.out_channels * g.patch(), T(0));
  MatrixMap<T>(grads.grad_w.data(), g.out_channels, g.patch()).noalias() =
      gy * cols.transpose();
  if (!input_grad) return grads;

  RowMatrix<T> grad_cols(g.patch(), width);
  grad_cols.noalias() =
      ConstMatrixMap<T>(layer.weight.data(), g.out_channels, g.patch()).transpose() * gy;
  grads.grad_x = Tensor4<T>(cache.in_shape, T(0));
  detail::col2im<T>(std::span<const T>(grad_cols.data(), grad_cols.size()), g,
                    cache.out_h, cache.out_w, grads.grad_x);
  return grads;
}

// ---------------------------------------------------------------------------
// Rectifier. The gate is x > 0, so the gradient at exactly 0 is 0.

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x, std::vector<std::uint8_t>& gate) {
  Tensor4<T> y(x.shape());
  gate.resize(x.size());
  const auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    gate[i] = in[i] > T(0) ? 1 : 0;
    out[i] = gate[i] ? in[i] : T(0);
  }
  return y;
}

// Applies a previously recorded gate; used to hold the kink fixed.
template <typename T>
Tensor4<T> relu_apply(const Tensor4<T>& x, const std::vector<std::uint8_t>& gate) {
  if (gate.size() != x.size()) throw ShapeError("relu_apply: gate size mismatch");
  Tensor4<T> y(x.shape());
  for (std::size_t i = 0; i < gate.size(); ++i) {
    y.data()[i] = gate[i] ? x.data()[i] : T(0);
  }
  return y;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_y,
                         const std::vector<std::uint8_t>& gate) {
  if (gate.size() != grad_y.size()) {
    throw ShapeError("relu_backward: gradient size mismatch");
  }
  Tensor4<T> gx(grad_y.shape());
  for (std::size_t i = 0; i < gate.size(); ++i) {
    gx.data()[i] = gate[i] ? grad_y.data()[i] : T(0);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 max downsampling. Odd trailing rows/columns are dropped.
// argmax holds, per output element, the flat spatial index in the input
// channel; ties resolve to the first element in row-major window order.

using DownsampleIndex = std::vector<std::uint32_t>;

template <typename T>
Tensor4<T> downsample_apply(const Tensor4<T>& x, const DownsampleIndex& argmax) {
  const auto& s = x.shape();
  const Shape4 o{s.n, s.c, s.h / 2, s.w / 2};
  if (argmax.size() != o.size()) throw ShapeError("downsample: argmax size mismatch");
  Tensor4<T> y(o);
  const std::size_t ohw = o.spatial();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = x.data().data() + p * s.spatial();
    T* dst = y.data().data() + p * ohw;
    const std::uint32_t* idx = argmax.data() + p * ohw;
    for (std::size_t i = 0; i < ohw; ++i) dst[i] = src[idx[i]];
  }
  return y;
}

template <typename T>
Tensor4<T> downsample_forward(const Tensor4<T>& x, DownsampleIndex& argmax) {
  const auto& s = x.shape();
  if (s.h < 2 || s.w < 2) {
    throw ShapeError("downsample: input " + s.str() + " smaller than 2x2");
  }
  const std::size_t oh = s.h / 2;
  const std::size_t ow = s.w / 2;
  Tensor4<T> y(Shape4{s.n, s.c, oh, ow});
  argmax.resize(y.size());
  std::uint32_t* idx = argmax.data();
  T* out = y.data().data();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = x.data().data() + p * s.spatial();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const T* r0 = src + 2 * oy * s.w;
      const T* r1 = r0 + s.w;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto top = static_cast<std::uint32_t>(2 * oy * s.w + 2 * ox);
        const auto bottom = static_cast<std::uint32_t>(top + s.w);
        std::uint32_t best = top;
        T v = r0[2 * ox];
        if (r0[2 * ox + 1] > v) {
          v = r0[2 * ox + 1];
          best = top + 1;
        }
        if (r1[2 * ox] > v) {
          v = r1[2 * ox];
          best = bottom;
        }
        if (r1[2 * ox + 1] > v) {
          v = r1[2 * ox + 1];
          best = bottom + 1;
        }
        *idx++ = best;
        *out++ = v;
      }
    }
  }
  return y;
}

template <typename T>
Tensor4<T> downsample_backward(const Tensor4<T>& grad_y, Shape4 in_shape,
                               const DownsampleIndex& argmax) {
  Tensor4<T> gx(in_shape, T(0));
  const std::size_t ohw = grad_y.shape().spatial();
  for (std::size_t p = 0; p < in_shape.n * in_shape.c; ++p) {
    const T* src = grad_y.data().data() + p * ohw;
    T* dst = gx.data().data() + p * in_shape.spatial();
    const std::uint32_t* idx = argmax.data() + p * ohw;
    for (std::size_t i = 0; i < ohw; ++i) dst[idx[i]] += src[i];
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Dense layer, y = x W^T + b with W stored (out_dim, in_dim).

template <typename T>
struct DenseLayer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out)
      : in_dim(in), out_dim(out), weight(in * out, T(0)), bias(out, T(0)) {
    if (in == 0 || out == 0) throw ConfigError("dense layer dims must be >= 1");
  }

  void init(std::mt19937_64& rng) {
    he_init<T>(weight, in_dim, rng);
    std::fill(bias.begin(), bias.end(), T(0));
  }
};

template <typename T>
struct DenseGrads {
  Matrix<T> grad_x;
  std::vector<T> grad_w;
  std::vector<T> grad_b;
};

template <typename T>
Matrix<T> dense_forward(const Matrix<T>& x, const DenseLayer<T>& layer) {
  if (x.cols() != layer.in_dim) {
    throw ShapeError("dense_forward: input has " + std::to_string(x.cols()) +
                     " features, layer expects " + std::to_string(layer.in_dim));
  }
  Matrix<T> y(x.rows(), layer.out_dim);
  MatrixMap<T> ym(y.data().data(), x.rows(), layer.out_dim);
  ym.noalias() =
      ConstMatrixMap<T>(x.data().data(), x.rows(), layer.in_dim) *
      ConstMatrixMap<T>(layer.weight.data(), layer.out_dim, layer.in_dim).transpose();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t o = 0; o < layer.out_dim; ++o) y(r, o) += layer.bias[o];
  }
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const Matrix<T>& grad_y, const Matrix<T>& x,
                             const DenseLayer<T>& layer) {
  if (grad_y.cols() != layer.out_dim || grad_y.rows() != x.rows() ||
      x.cols() != layer.in_dim) {
    throw ShapeError("dense_backward: shape mismatch");
  }
  const std::size_t rows = x.rows();
  const ConstMatrixMap<T> gy(grad_y.data().data(), rows, layer.out_dim);
  DenseGrads<T> g;
  g.grad_x = Matrix<T>(rows, layer.in_dim);
  MatrixMap<T>(g.grad_x.data().data(), rows, layer.in_dim).noalias() =
      gy * ConstMatrixMap<T>(layer.weight.data(), layer.out_dim, layer.in_dim);
  g.grad_w.assign(layer.out_dim * layer.in_dim, T(0));
  MatrixMap<T>(g.grad_w.data(), layer.out_dim, layer.in_dim).noalias() =
      gy.transpose() * ConstMatrixMap<T>(x.data().data(), rows, layer.in_dim);
  g.grad_b.assign(layer.out_dim, T(0));
  for (std::size_t o = 0; o < layer.out_dim; ++o) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += static_cast<double>(grad_y(r, o));
    g.grad_b[o] = static_cast<T>(s);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Mean softmax cross-entropy with log-sum-exp stabilization.

template <typename T>
struct XentResult {
  double loss = 0.0;
  Matrix<T> grad_logits;  // (softmax - onehot) / N
  std::size_t correct = 0;
};

template <typename T>
XentResult<T> softmax_xent(const Matrix<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  const std::size_t k = logits.cols();
  if (labels.size() != n) throw ShapeError("softmax_xent: label count mismatch");
  if (n == 0 || k == 0) throw ShapeError("softmax_xent: empty logits");
  XentResult<T> r;
  r.grad_logits = Matrix<T>(n, k);
  std::vector<double> p(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ConfigError("softmax_xent: label " + std::to_string(label) +
                        " outside [0, " + std::to_string(k) + ")");
    }
    const auto row = logits.row(i);
    double top = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<double>(row[j]) > top) {
        top = static_cast<double>(row[j]);
        arg = j;
      }
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(static_cast<double>(row[j]) - top);
      z += p[j];
    }
    const double lse = top + std::log(z);
    r.loss += lse - static_cast<double>(row[static_cast<std::size_t>(label)]);
    r.correct += (arg == static_cast<std::size_t>(label));
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = j == static_cast<std::size_t>(label) ? 1.0 : 0.0;
      r.grad_logits(i, j) = static_cast<T>((p[j] / z - onehot) / static_cast<double>(n));
    }
  }
  r.loss /= static_cast<double>(n);
  if (!std::isfinite(r.loss)) throw NumericError("softmax_xent: non-finite loss");
  return r;
}

// ---------------------------------------------------------------------------
// SGD with heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning_rate must be > 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("momentum must lie in [0, 1)");
    }
  }

  bool operator==(const SgdConfig&) const = default;
};

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity,
              const SgdConfig& config) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter, gradient, and state sizes differ");
  }
  if (!all_finite(grads)) throw NumericError("sgd_step: non-finite gradient");
  const T lr = static_cast<T>(config.learning_rate);
  const T mu = static_cast<T>(config.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = mu * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

}  // namespace sparsepool
