#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sparsepool/error.hpp"

namespace sparsepool {

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return n * c * h * w; }
  std::size_t spatial() const { return h * w; }
  bool empty() const { return size() == 0; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(),
                     [](T v) { return std::isfinite(v); });
}

// Dense (batch, channel, height, width) array stored row-major.
//
// A default-constructed tensor is empty and only serves as a placeholder;
// every operation requires a tensor with all four dimensions >= 1.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
    if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0) {
      throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
    }
    data_.assign(shape.size(), fill);
  }

  // Validating constructor for externally supplied values.
  static Tensor4 from_values(Shape4 shape, std::vector<T> values) {
    Tensor4 t(shape);
    if (values.size() != shape.size()) {
      throw ShapeError("tensor payload has " + std::to_string(values.size()) +
                       " values, shape " + shape.str() + " needs " +
                       std::to_string(shape.size()));
    }
    if (!all_finite<T>(values)) {
      throw NumericError("tensor payload contains non-finite values");
    }
    t.data_ = std::move(values);
    return t;
  }

  const Shape4& shape() const { return shape_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y,
                    std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  T operator()(std::size_t n, std::size_t c, std::size_t y,
               std::size_t x) const {
    return data_[index(n, c, y, x)];
  }

  // The H*W values of one (image, channel) pair; contiguous in memory.
  std::span<T> channel(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan((n * shape_.c + c) * shape_.spatial(),
                                       shape_.spatial());
  }
  std::span<const T> channel(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(
        (n * shape_.c + c) * shape_.spatial(), shape_.spatial());
  }

  bool finite() const { return all_finite<T>(data_); }

  void require_finite(const char* what) const {
    if (!finite()) {
      throw NumericError(std::string(what) + ": non-finite value in tensor " +
                         shape_.str());
    }
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

// Row-major rows x cols matrix. Used for pooled features (N x C), logits
// (N x K) and their gradients.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_values(std::size_t rows, std::size_t cols,
                            std::vector<T> values) {
    if (values.size() != rows * cols) {
      throw ShapeError("matrix payload size mismatch");
    }
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(values);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<T> row(std::size_t r) {
    return std::span<T>(data_).subspan(r * cols_, cols_);
  }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols_, cols_);
  }

  bool finite() const { return all_finite<T>(data_); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Per (image, channel) spatial statistics, stored row-major as N x C.
// Statistics are always accumulated and stored in double precision.
struct ChannelStats {
  std::size_t images = 0;
  std::size_t channels = 0;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<double> threshold;

  std::size_t at(std::size_t n, std::size_t c) const {
    return n * channels + c;
  }
};

struct SpatialMoments {
  double mean = 0.0;
  double stddev = 0.0;
};

// Two-pass population moments over one channel, summed sequentially in
// row-major order. Constant channels yield exactly (value, 0).
template <typename T>
SpatialMoments spatial_moments(std::span<const T> values) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) {
    return {static_cast<double>(*lo), 0.0};
  }
  const double count = static_cast<double>(values.size());
  double sum = 0.0;
  for (T v : values) sum += static_cast<double>(v);
  double mean = sum / count;
  mean = std::clamp(mean, static_cast<double>(*lo), static_cast<double>(*hi));
  double sq = 0.0;
  for (T v : values) {
    const double d = static_cast<double>(v) - mean;
    sq += d * d;
  }
  return {mean, std::sqrt(sq / count)};
}

// Per-image, per-channel mean, population standard deviation (divisor H*W)
// and threshold mean + lambda * stddev.
template <typename T>
ChannelStats channel_stats(const Tensor4<T>& x, double lambda) {
  if (x.empty()) throw ShapeError("channel_stats: empty tensor");
  if (!std::isfinite(lambda)) throw ConfigError("lambda must be finite");
  x.require_finite("channel_stats");
  const auto& s = x.shape();
  ChannelStats stats;
  stats.images = s.n;
  stats.channels = s.c;
  stats.mean.resize(s.n * s.c);
  stats.stddev.resize(s.n * s.c);
  stats.threshold.resize(s.n * s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto m = spatial_moments<T>(x.channel(n, c));
      const std::size_t i = stats.at(n, c);
      stats.mean[i] = m.mean;
      stats.stddev[i] = m.stddev;
      stats.threshold[i] = m.mean + lambda * m.stddev;
    }
  }
  return stats;
}

template <typename T>
Matrix<T> reduce_spatial_mean(const Tensor4<T>& x) {
  if (x.empty()) throw ShapeError("reduce_spatial_mean: empty tensor");
  const auto& s = x.shape();
  Matrix<T> out(s.n, s.c);
  const double count = static_cast<double>(s.spatial());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      double sum = 0.0;
      for (T v : x.channel(n, c)) sum += static_cast<double>(v);
      out(n, c) = static_cast<T>(sum / count);
    }
  }
  return out;
}

template <typename T>
struct SpatialMax {
  Matrix<T> values;
  // Flat spatial index (y * W + x) of the first maximum in row-major order.
  std::vector<std::size_t> argmax;
};

template <typename T>
SpatialMax<T> reduce_spatial_max(const Tensor4<T>& x) {
  if (x.empty()) throw ShapeError("reduce_spatial_max: empty tensor");
  const auto& s = x.shape();
  SpatialMax<T> out{Matrix<T>(s.n, s.c), std::vector<std::size_t>(s.n * s.c)};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto ch = x.channel(n, c);
      // max_element returns the first of equal maxima.
      const auto it = std::max_element(ch.begin(), ch.end());
      out.values(n, c) = *it;
      out.argmax[n * s.c + c] =
          static_cast<std::size_t>(std::distance(ch.begin(), it));
    }
  }
  return out;
}

template <typename To, typename From>
Tensor4<To> tensor_cast(const Tensor4<From>& x) {
  Tensor4<To> out(x.shape());
  std::transform(x.data().begin(), x.data().end(), out.data().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

}  // namespace sparsepool
