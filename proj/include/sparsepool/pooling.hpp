#pragma once

// Global pooling operators mapping an N x C x H x W activation volume to an
// N x C feature matrix: average, max, outlier, and dynamic outlier pooling.
//
// Every operator is split into a decision step (which locations contribute,
// with what weight) recorded in a PoolContext, and an application step that
// is linear in the input given those decisions. pool_forward runs both;
// pool_apply re-runs only the second step, which is what finite-difference
// checks use to hold masks fixed.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparsepool/error.hpp"
#include "sparsepool/tensor.hpp"

namespace sparsepool {

enum class PoolKind { Average, Max, Outlier, DynamicOutlier };

inline constexpr double kDefaultLambda = 2.0;

struct PoolMode {
  PoolKind kind = PoolKind::Average;
  double lambda = kDefaultLambda;  // only used by the outlier variants

  static PoolMode average() { return {PoolKind::Average, kDefaultLambda}; }
  static PoolMode max() { return {PoolKind::Max, kDefaultLambda}; }
  static PoolMode outlier(double lambda = kDefaultLambda) {
    return {PoolKind::Outlier, lambda};
  }
  static PoolMode dynamic(double lambda = kDefaultLambda) {
    return {PoolKind::DynamicOutlier, lambda};
  }

  bool uses_threshold() const {
    return kind == PoolKind::Outlier || kind == PoolKind::DynamicOutlier;
  }

  void validate() const {
    if (!std::isfinite(lambda) || lambda < 0.0) {
      throw ConfigError("pool lambda must be finite and >= 0, got " +
                        std::to_string(lambda));
    }
  }

  bool operator==(const PoolMode&) const = default;
};

inline std::string to_string(PoolKind kind) {
  switch (kind) {
    case PoolKind::Average: return "avg";
    case PoolKind::Max: return "max";
    case PoolKind::Outlier: return "outlier";
    case PoolKind::DynamicOutlier: return "dynamic";
  }
  return "?";
}

inline PoolKind parse_pool_kind(const std::string& name) {
  if (name == "avg" || name == "average") return PoolKind::Average;
  if (name == "max") return PoolKind::Max;
  if (name == "outlier") return PoolKind::Outlier;
  if (name == "dynamic" || name == "dynamic-outlier") {
    return PoolKind::DynamicOutlier;
  }
  throw ConfigError("unknown pool mode '" + name +
                    "' (expected avg, max, outlier or dynamic)");
}

// Table-style display name.
inline std::string display_name(PoolKind kind) {
  switch (kind) {
    case PoolKind::Average: return "Average";
    case PoolKind::Max: return "Max";
    case PoolKind::Outlier: return "Outlier";
    case PoolKind::DynamicOutlier: return "Dynamic Outlier";
  }
  return "?";
}

struct ScheduleWeights {
  double w1 = 1.0;  // weight of locations at or above the threshold
  double w2 = 1.0;  // weight of locations below it
};

// w1 = 1 + e/E, w2 = 1 - e/E with a 0-indexed epoch counter, so epoch 0 is
// plain average pooling and e == E (training finished) gives (2, 0).
inline ScheduleWeights schedule_weights(int current_epoch, int total_epochs) {
  if (total_epochs < 1) {
    throw ConfigError("total_epochs must be >= 1, got " +
                      std::to_string(total_epochs));
  }
  if (current_epoch < 0) {
    throw ConfigError("current_epoch must be >= 0, got " +
                      std::to_string(current_epoch));
  }
  if (current_epoch > total_epochs) {
    throw ConfigError("schedule exhausted: epoch " +
                      std::to_string(current_epoch) + " > total " +
                      std::to_string(total_epochs));
  }
  const double progress =
      static_cast<double>(current_epoch) / static_cast<double>(total_epochs);
  return {1.0 + progress, 1.0 - progress};
}

struct Schedule {
  int current_epoch = 0;
  int total_epochs = 1;

  ScheduleWeights weights() const {
    return schedule_weights(current_epoch, total_epochs);
  }
};

// Saved forward decisions. Per (image, channel) arrays are indexed n * C + c;
// the mask is laid out exactly like the input tensor.
struct PoolContext {
  PoolMode mode;
  Shape4 input_shape;
  ScheduleWeights weights;
  std::vector<std::uint8_t> mask;       // Outlier, DynamicOutlier
  std::vector<std::size_t> mask_count;  // Outlier, DynamicOutlier
  std::vector<std::size_t> argmax;      // Max, and Outlier fallback channels
  std::vector<std::uint8_t> fallback;   // Outlier only

  std::size_t pairs() const { return input_shape.n * input_shape.c; }

  std::size_t fallback_count() const {
    std::size_t k = 0;
    for (auto f : fallback) k += f;
    return k;
  }

  // Number of (image, channel) pairs whose outlier set came out empty before
  // any fallback was applied.
  std::size_t empty_outlier_sets() const {
    if (mode.kind == PoolKind::Outlier) return fallback_count();
    std::size_t k = 0;
    for (auto m : mask_count) k += (m == 0);
    return k;
  }

  // Which input locations contribute to the output, as a 0/1 tensor.
  template <typename T>
  Tensor4<T> mask_tensor() const {
    const std::size_t hw = input_shape.spatial();
    Tensor4<T> out(input_shape, T(0));
    switch (mode.kind) {
      case PoolKind::Average:
        std::fill(out.data().begin(), out.data().end(), T(1));
        break;
      case PoolKind::Max:
        for (std::size_t p = 0; p < pairs(); ++p) {
          out.data()[p * hw + argmax[p]] = T(1);
        }
        break;
      case PoolKind::Outlier:
      case PoolKind::DynamicOutlier:
        for (std::size_t i = 0; i < mask.size(); ++i) out.data()[i] = T(mask[i]);
        break;
    }
    return out;
  }
};

template <typename T>
struct PoolResult {
  Matrix<T> features;
  PoolContext ctx;
};

// Decision step: builds the context for x under the given mode.
template <typename T>
PoolContext pool_decide(const Tensor4<T>& x, const PoolMode& mode,
                        std::optional<Schedule> schedule) {
  mode.validate();
  if (x.empty()) throw ShapeError("pool_forward: empty input");
  if (mode.kind == PoolKind::DynamicOutlier && !schedule) {
    throw ConfigError("dynamic outlier pooling requires a schedule");
  }
  x.require_finite("pool_forward");

  const auto& s = x.shape();
  const std::size_t hw = s.spatial();
  PoolContext ctx;
  ctx.mode = mode;
  ctx.input_shape = s;
  if (mode.kind == PoolKind::DynamicOutlier) ctx.weights = schedule->weights();

  if (mode.kind == PoolKind::Max) {
    ctx.argmax = reduce_spatial_max(x).argmax;
    return ctx;
  }
  if (!mode.uses_threshold()) return ctx;

  const ChannelStats stats = channel_stats(x, mode.lambda);
  ctx.mask.assign(s.size(), 0);
  ctx.mask_count.assign(ctx.pairs(), 0);
  if (mode.kind == PoolKind::Outlier) {
    ctx.argmax.assign(ctx.pairs(), 0);
    ctx.fallback.assign(ctx.pairs(), 0);
  }
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t p = n * s.c + c;
      const double t = stats.threshold[p];
      const auto ch = x.channel(n, c);
      std::uint8_t* m = ctx.mask.data() + p * hw;
      std::size_t count = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        m[i] = static_cast<double>(ch[i]) >= t ? 1 : 0;
        count += m[i];
      }
      ctx.mask_count[p] = count;
      if (count == 0 && mode.kind == PoolKind::Outlier) {
        // No location reaches the threshold: fall back to the channel max.
        const auto it = std::max_element(ch.begin(), ch.end());
        const auto idx = static_cast<std::size_t>(std::distance(ch.begin(), it));
        ctx.argmax[p] = idx;
        ctx.fallback[p] = 1;
        m[idx] = 1;
        ctx.mask_count[p] = 1;
      }
    }
  }
  return ctx;
}

// Application step: the pooled features of x given fixed decisions.
template <typename T>
Matrix<T> pool_apply(const Tensor4<T>& x, const PoolContext& ctx) {
  if (x.shape() != ctx.input_shape) {
    throw ShapeError("pool_apply: input " + x.shape().str() +
                     " does not match context " + ctx.input_shape.str());
  }
  const auto& s = x.shape();
  const std::size_t hw = s.spatial();
  Matrix<T> out(s.n, s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t p = n * s.c + c;
      const auto ch = x.channel(n, c);
      double acc = 0.0;
      switch (ctx.mode.kind) {
        case PoolKind::Average:
          for (T v : ch) acc += static_cast<double>(v);
          acc /= static_cast<double>(hw);
          break;
        case PoolKind::Max:
          acc = static_cast<double>(ch[ctx.argmax[p]]);
          break;
        case PoolKind::Outlier: {
          const std::uint8_t* m = ctx.mask.data() + p * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            if (m[i]) acc += static_cast<double>(ch[i]);
          }
          acc /= static_cast<double>(ctx.mask_count[p]);
          break;
        }
        case PoolKind::DynamicOutlier: {
          // Single row-major pass so that w1 == w2 == 1 reproduces the
          // average-pooling sum bit for bit.
          const std::uint8_t* m = ctx.mask.data() + p * hw;
          const double w1 = ctx.weights.w1;
          const double w2 = ctx.weights.w2;
          for (std::size_t i = 0; i < hw; ++i) {
            acc += (m[i] ? w1 : w2) * static_cast<double>(ch[i]);
          }
          acc /= static_cast<double>(hw);
          break;
        }
      }
      out(n, c) = static_cast<T>(acc);
    }
  }
  return out;
}

template <typename T>
PoolResult<T> pool_forward(const Tensor4<T>& x, const PoolMode& mode,
                           std::optional<Schedule> schedule = std::nullopt) {
  PoolContext ctx = pool_decide(x, mode, schedule);
  Matrix<T> features = pool_apply(x, ctx);
  return {std::move(features), std::move(ctx)};
}

// Gradient of pool_apply with respect to its input. Masks, argmax, and the
// statistics behind the threshold are treated as constants.
template <typename T>
Tensor4<T> pool_backward(const Matrix<T>& grad_out, const PoolContext& ctx) {
  const auto& s = ctx.input_shape;
  if (grad_out.rows() != s.n || grad_out.cols() != s.c) {
    throw ShapeError("pool_backward: grad_out is " +
                     std::to_string(grad_out.rows()) + "x" +
                     std::to_string(grad_out.cols()) + ", context expects " +
                     std::to_string(s.n) + "x" + std::to_string(s.c));
  }
  if (!grad_out.finite()) throw NumericError("pool_backward: non-finite grad");
  const std::size_t hw = s.spatial();
  Tensor4<T> grad_in(s, T(0));
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t p = n * s.c + c;
      const double g = static_cast<double>(grad_out(n, c));
      auto gi = grad_in.channel(n, c);
      switch (ctx.mode.kind) {
        case PoolKind::Average: {
          const T v = static_cast<T>(g / static_cast<double>(hw));
          std::fill(gi.begin(), gi.end(), v);
          break;
        }
        case PoolKind::Max:
          gi[ctx.argmax[p]] = static_cast<T>(g);
          break;
        case PoolKind::Outlier: {
          const std::uint8_t* m = ctx.mask.data() + p * hw;
          const T v = static_cast<T>(g / static_cast<double>(ctx.mask_count[p]));
          for (std::size_t i = 0; i < hw; ++i) {
            if (m[i]) gi[i] = v;
          }
          break;
        }
        case PoolKind::DynamicOutlier: {
          const std::uint8_t* m = ctx.mask.data() + p * hw;
          const T hi = static_cast<T>(ctx.weights.w1 * g / static_cast<double>(hw));
          const T lo = static_cast<T>(ctx.weights.w2 * g / static_cast<double>(hw));
          for (std::size_t i = 0; i < hw; ++i) gi[i] = m[i] ? hi : lo;
          break;
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Cross-crop pooling: several equally shaped crop maps pooled as one spatial
// domain. Channel (n, c) of the union is crop 0's map followed by crop 1's,
// and so on, i.e. the crops stacked along the height axis.

template <typename T>
Tensor4<T> stack_crops(std::span<const Tensor4<T>> crops) {
  if (crops.empty()) throw ShapeError("cross_crop_pool: no crops");
  const Shape4 s = crops.front().shape();
  for (const auto& crop : crops) {
    if (crop.shape() != s) {
      throw ShapeError("cross_crop_pool: crop shapes differ (" + s.str() +
                       " vs " + crop.shape().str() + ")");
    }
  }
  const std::size_t hw = s.spatial();
  Tensor4<T> out(Shape4{s.n, s.c, s.h * crops.size(), s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto dst = out.channel(n, c);
      for (std::size_t k = 0; k < crops.size(); ++k) {
        const auto src = crops[k].channel(n, c);
        std::copy(src.begin(), src.end(), dst.begin() + k * hw);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor4<T>> unstack_crops(const Tensor4<T>& stacked,
                                      std::size_t crop_count) {
  const Shape4 s = stacked.shape();
  if (crop_count == 0 || s.h % crop_count != 0) {
    throw ShapeError("unstack_crops: height not divisible by crop count");
  }
  const Shape4 part{s.n, s.c, s.h / crop_count, s.w};
  const std::size_t hw = part.spatial();
  std::vector<Tensor4<T>> out(crop_count, Tensor4<T>(part));
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = stacked.channel(n, c);
      for (std::size_t k = 0; k < crop_count; ++k) {
        auto dst = out[k].channel(n, c);
        std::copy(src.begin() + k * hw, src.begin() + (k + 1) * hw, dst.begin());
      }
    }
  }
  return out;
}

struct CrossCropContext {
  std::size_t crop_count = 0;
  PoolContext pool;
};

template <typename T>
struct CrossCropResult {
  Matrix<T> features;
  CrossCropContext ctx;
};

template <typename T>
CrossCropResult<T> cross_crop_pool(std::span<const Tensor4<T>> crops,
                                   const PoolMode& mode,
                                   std::optional<Schedule> schedule) {
  auto pooled = pool_forward(stack_crops(crops), mode, schedule);
  return {std::move(pooled.features),
          CrossCropContext{crops.size(), std::move(pooled.ctx)}};
}

// Routes the pooled gradient back to each originating crop map.
template <typename T>
std::vector<Tensor4<T>> cross_crop_backward(const Matrix<T>& grad_out,
                                            const CrossCropContext& ctx) {
  return unstack_crops(pool_backward(grad_out, ctx.pool), ctx.crop_count);
}

}  // namespace sparsepool
