#pragma once

// Two-branch multi-resolution classifier: a low-resolution whole-image
// branch and a high-resolution branch whose four crops run through one
// shared trunk and are pooled jointly, followed by a single dense head.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sparsepool/error.hpp"
#include "sparsepool/layers.hpp"
#include "sparsepool/pooling.hpp"
#include "sparsepool/tensor.hpp"

namespace sparsepool {

enum class BranchKind { GlobalOnly, LocalOnly, MultiRes };

inline std::string to_string(BranchKind kind) {
  switch (kind) {
    case BranchKind::GlobalOnly: return "global";
    case BranchKind::LocalOnly: return "local";
    case BranchKind::MultiRes: return "multires";
  }
  return "?";
}

inline BranchKind parse_branch_kind(const std::string& name) {
  if (name == "global") return BranchKind::GlobalOnly;
  if (name == "local") return BranchKind::LocalOnly;
  if (name == "multires") return BranchKind::MultiRes;
  throw ConfigError("unknown branch kind '" + name +
                    "' (expected global, local or multires)");
}

inline std::string display_name(BranchKind kind) {
  switch (kind) {
    case BranchKind::GlobalOnly: return "Whole Image (low res)";
    case BranchKind::LocalOnly: return "Multi-crop (just high res)";
    case BranchKind::MultiRes: return "Multi-crop (high and low res)";
  }
  return "?";
}

inline bool uses_global(BranchKind k) { return k != BranchKind::LocalOnly; }
inline bool uses_local(BranchKind k) { return k != BranchKind::GlobalOnly; }

inline constexpr std::size_t kCropsPerImage = 4;

struct BranchSpec {
  BranchKind kind = BranchKind::MultiRes;
  std::size_t global_input_size = 64;
  std::size_t local_crop_size = 64;
  std::size_t crops_per_image = kCropsPerImage;
  PoolMode pool_mode = PoolMode::dynamic();

  void validate() const {
    pool_mode.validate();
    if (global_input_size == 0 || local_crop_size == 0) {
      throw ConfigError("branch input sizes must be >= 1");
    }
    if (uses_local(kind) && crops_per_image != kCropsPerImage) {
      throw ConfigError("the local branch takes exactly 4 crops per image");
    }
  }

  bool operator==(const BranchSpec&) const = default;
};

struct ModelSpec {
  BranchSpec branch;
  std::size_t in_channels = 3;
  std::vector<std::size_t> trunk_widths{16, 32, 64};
  std::size_t num_classes = 10;

  void validate() const {
    branch.validate();
    if (in_channels == 0) throw ConfigError("in_channels must be >= 1");
    if (trunk_widths.empty()) throw ConfigError("trunk needs at least one block");
    for (auto w : trunk_widths) {
      if (w == 0) throw ConfigError("trunk widths must be >= 1");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  }

  std::size_t trunk_channels() const { return trunk_widths.back(); }

  std::size_t feature_dim() const {
    return (uses_global(branch.kind) ? trunk_channels() : 0) +
           (uses_local(branch.kind) ? trunk_channels() : 0);
  }

  bool operator==(const ModelSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Crop planning

struct CropRect {
  std::size_t x = 0;  // column of the top-left corner
  std::size_t y = 0;  // row of the top-left corner
  std::size_t size = 0;
  bool operator==(const CropRect&) const = default;
};

struct ImageSize {
  std::size_t width = 0;
  std::size_t height = 0;
  bool operator==(const ImageSize&) const = default;
};

// Size after resizing so that the shortest side equals target.
inline ImageSize resized_shortest_side(ImageSize in, std::size_t target) {
  const std::size_t shortest = std::min(in.width, in.height);
  auto scale = [&](std::size_t v) {
    if (v == shortest) return target;
    return static_cast<std::size_t>(
        std::lround(static_cast<double>(v) * static_cast<double>(target) /
                    static_cast<double>(shortest)));
  };
  return {scale(in.width), scale(in.height)};
}

enum class CropMode { Train, Test };

struct CropPlan {
  ImageSize source;
  // Global branch: resize, square crop, optional flips.
  bool has_global = false;
  ImageSize global_resized;
  CropRect global_crop;
  bool flip_horizontal = false;
  bool flip_vertical = false;
  // Local branch: resize, four crops at that resolution.
  bool has_local = false;
  ImageSize local_resized;
  std::vector<CropRect> local_crops;

  bool operator==(const CropPlan&) const = default;
};

inline CropPlan make_crop_plan(ImageSize image, const BranchSpec& spec, CropMode mode,
                               std::uint64_t rng_seed) {
  spec.validate();
  std::mt19937_64 rng(rng_seed);
  CropPlan plan;
  plan.source = image;

  const std::size_t global_target = spec.global_input_size;
  const std::size_t local_target = 2 * spec.local_crop_size;
  std::size_t smallest = std::numeric_limits<std::size_t>::max();
  if (uses_global(spec.kind)) smallest = std::min(smallest, global_target);
  if (uses_local(spec.kind)) smallest = std::min(smallest, local_target);
  if (image.width < smallest) {
    throw ShapeError("image width " + std::to_string(image.width) +
                     " is below the smallest resize target " + std::to_string(smallest));
  }
  if (image.height < smallest) {
    throw ShapeError("image height " + std::to_string(image.height) +
                     " is below the smallest resize target " + std::to_string(smallest));
  }

  auto uniform = [&](std::size_t hi) {  // inclusive [0, hi]
    return std::uniform_int_distribution<std::size_t>(0, hi)(rng);
  };

  if (uses_global(spec.kind)) {
    plan.has_global = true;
    plan.global_resized = resized_shortest_side(image, global_target);
    const std::size_t s = global_target;
    const std::size_t max_x = plan.global_resized.width - s;
    const std::size_t max_y = plan.global_resized.height - s;
    if (mode == CropMode::Train) {
      plan.global_crop = {uniform(max_x), uniform(max_y), s};
      plan.flip_horizontal = uniform(1) == 1;
      plan.flip_vertical = uniform(1) == 1;
    } else {
      plan.global_crop = {max_x / 2, max_y / 2, s};
    }
  }

  if (uses_local(spec.kind)) {
    plan.has_local = true;
    plan.local_resized = resized_shortest_side(image, local_target);
    const std::size_t s = spec.local_crop_size;
    const std::size_t max_x = plan.local_resized.width - s;
    const std::size_t max_y = plan.local_resized.height - s;
    if (mode == CropMode::Train) {
      for (std::size_t k = 0; k < spec.crops_per_image; ++k) {
        const std::size_t x = uniform(max_x);
        plan.local_crops.push_back({x, uniform(max_y), s});
      }
    } else {
      // Quadrants of the centered 2s x 2s region.
      const std::size_t ox = (plan.local_resized.width - 2 * s) / 2;
      const std::size_t oy = (plan.local_resized.height - 2 * s) / 2;
      plan.local_crops = {{ox, oy, s}, {ox + s, oy, s}, {ox, oy + s, s}, {ox + s, oy + s, s}};
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Trunk: blocks of conv3x3 -> rectifier -> 2x2 max downsample.

template <typename T>
struct Trunk {
  std::vector<ConvLayer<T>> convs;

  static Trunk make(std::size_t in_channels, std::span<const std::size_t> widths) {
    Trunk t;
    std::size_t in = in_channels;
    for (std::size_t w : widths) {
      t.convs.emplace_back(ConvGeometry{in, w, 3, 1, 1});
      in = w;
    }
    return t;
  }

  void init(std::mt19937_64& rng) {
    for (auto& c : convs) c.init(rng);
  }
};

template <typename T>
struct TrunkCache {
  struct Block {
    ConvCache<T> conv;
    std::vector<std::uint8_t> gate;
    Shape4 pre_downsample;
    DownsampleIndex argmax;
  };
  std::vector<Block> blocks;
};

// When frozen is set, rectifier gates and downsample argmax are taken from
// the cache instead of being recomputed.
template <typename T>
Tensor4<T> trunk_forward(const Tensor4<T>& x, const Trunk<T>& trunk,
                         TrunkCache<T>& cache, bool frozen = false) {
  if (!frozen) cache.blocks.assign(trunk.convs.size(), {});
  if (cache.blocks.size() != trunk.convs.size()) {
    throw ShapeError("trunk_forward: frozen cache does not match trunk");
  }
  Tensor4<T> h;
  for (std::size_t i = 0; i < trunk.convs.size(); ++i) {
    auto& b = cache.blocks[i];
    Tensor4<T> y = conv_forward(i == 0 ? x : h, trunk.convs[i], b.conv);
    y = frozen ? relu_apply(y, b.gate) : relu_forward(y, b.gate);
    b.pre_downsample = y.shape();
    h = frozen ? downsample_apply(y, b.argmax) : downsample_forward(y, b.argmax);
  }
  return h;
}

// Parameter gradients are written into grads, which must share the trunk's
// layout. Returns the gradient with respect to the trunk input, or an empty
// tensor when input_grad is false.
template <typename T>
Tensor4<T> trunk_backward(const Tensor4<T>& grad_out, const Trunk<T>& trunk,
                          const TrunkCache<T>& cache, Trunk<T>& grads, bool input_grad = true) {
  Tensor4<T> g = grad_out;
  for (std::size_t i = trunk.convs.size(); i-- > 0;) {
    const auto& b = cache.blocks[i];
    g = downsample_backward(g, b.pre_downsample, b.argmax);
    g = relu_backward(g, b.gate);
    auto cg = conv_backward(g, trunk.convs[i], b.conv, input_grad || i > 0);
    grads.convs[i].weight = std::move(cg.grad_w);
    grads.convs[i].bias = std::move(cg.grad_b);
    g = std::move(cg.grad_x);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct ModelParams {
  std::optional<Trunk<T>> global;
  std::optional<Trunk<T>> local;
  DenseLayer<T> head;
};

enum class BranchTag : std::uint8_t { Global = 0, Local = 1, Head = 2 };
enum class LayerTag : std::uint8_t { Conv = 1, Dense = 2 };

// One parameter tensor in manifest order: global trunk, local trunk, head;
// within a layer, weight then bias.
template <typename T>
struct ParamView {
  BranchTag branch;
  LayerTag layer;
  bool is_bias;
  std::vector<std::uint32_t> dims;
  std::span<T> values;
};

template <typename T, typename Params, typename Fn>
void for_each_param(Params& params, Fn&& fn) {
  auto trunk = [&](auto& t, BranchTag tag) {
    for (auto& c : t.convs) {
      const auto& g = c.geom;
      fn(ParamView<T>{tag, LayerTag::Conv, false,
                      {static_cast<std::uint32_t>(g.out_channels),
                       static_cast<std::uint32_t>(g.in_channels),
                       static_cast<std::uint32_t>(g.kernel),
                       static_cast<std::uint32_t>(g.kernel)},
                      std::span<T>(c.weight)});
      fn(ParamView<T>{tag, LayerTag::Conv, true,
                      {static_cast<std::uint32_t>(g.out_channels)},
                      std::span<T>(c.bias)});
    }
  };
  if (params.global) trunk(*params.global, BranchTag::Global);
  if (params.local) trunk(*params.local, BranchTag::Local);
  auto& h = params.head;
  fn(ParamView<T>{BranchTag::Head, LayerTag::Dense, false,
                  {static_cast<std::uint32_t>(h.out_dim),
                   static_cast<std::uint32_t>(h.in_dim)},
                  std::span<T>(h.weight)});
  fn(ParamView<T>{BranchTag::Head, LayerTag::Dense, true,
                  {static_cast<std::uint32_t>(h.out_dim)}, std::span<T>(h.bias)});
}

template <typename T>
ModelParams<T> make_params(const ModelSpec& spec) {
  spec.validate();
  ModelParams<T> p;
  if (uses_global(spec.branch.kind)) {
    p.global = Trunk<T>::make(spec.in_channels, spec.trunk_widths);
  }
  if (uses_local(spec.branch.kind)) {
    p.local = Trunk<T>::make(spec.in_channels, spec.trunk_widths);
  }
  p.head = DenseLayer<T>(spec.feature_dim(), spec.num_classes);
  return p;
}

template <typename T>
struct Model {
  ModelSpec spec;
  ModelParams<T> params;
  // Bumped on every parameter update so stale forward caches are detected.
  std::uint64_t version = 0;

  static Model create(const ModelSpec& spec, std::uint64_t seed) {
    Model m{spec, make_params<T>(spec), 0};
    std::mt19937_64 rng(seed);
    if (m.params.global) m.params.global->init(rng);
    if (m.params.local) m.params.local->init(rng);
    m.params.head.init(rng);
    return m;
  }

  // Zero-valued parameter set with this model's layout.
  ModelParams<T> zero_grads() const { return make_params<T>(spec); }

  std::size_t parameter_count() {
    std::size_t k = 0;
    for_each_param<T>(params, [&](const ParamView<T>& v) { k += v.values.size(); });
    return k;
  }
};

template <typename T>
struct ModelInput {
  Tensor4<T> global;               // N x C x g x g, empty for LocalOnly
  std::vector<Tensor4<T>> crops;   // 4 tensors N x C x s x s, empty for GlobalOnly

  std::size_t batch() const {
    if (!global.empty()) return global.shape().n;
    return crops.empty() ? 0 : crops.front().shape().n;
  }
};

template <typename T>
struct ModelCache {
  bool valid = false;
  std::uint64_t version = 0;
  std::size_t batch = 0;
  TrunkCache<T> global_trunk;
  TrunkCache<T> local_trunk;
  PoolContext global_pool;
  CrossCropContext local_pool;
  Matrix<T> features;
  std::size_t global_dim = 0;
  std::size_t local_dim = 0;
};

// Crops stacked crop-major along the batch axis: crop k of image n lands at
// batch index k * N + n.
template <typename T>
Tensor4<T> stack_batch(std::span<const Tensor4<T>> parts) {
  const Shape4 s = parts.front().shape();
  Tensor4<T> out(Shape4{s.n * parts.size(), s.c, s.h, s.w});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].shape() != s) throw ShapeError("crop tensors differ in shape");
    std::copy(parts[k].data().begin(), parts[k].data().end(),
              out.data().begin() + k * s.size());
  }
  return out;
}

template <typename T>
std::vector<Tensor4<T>> split_batch(const Tensor4<T>& x, std::size_t parts) {
  const Shape4 s = x.shape();
  const Shape4 part{s.n / parts, s.c, s.h, s.w};
  std::vector<Tensor4<T>> out;
  for (std::size_t k = 0; k < parts; ++k) {
    Tensor4<T> t(part);
    std::copy(x.data().begin() + k * part.size(),
              x.data().begin() + (k + 1) * part.size(), t.data().begin());
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Matrix<T> model_forward(const Model<T>& model, const ModelInput<T>& input,
                        std::optional<Schedule> schedule, ModelCache<T>& cache,
                        bool frozen = false) {
  const auto& spec = model.spec;
  const PoolMode& pool = spec.branch.pool_mode;
  if (pool.kind == PoolKind::DynamicOutlier && !schedule) {
    throw ConfigError("model_forward: dynamic outlier pooling requires a schedule");
  }
  if (frozen && (!cache.valid || cache.version != model.version)) {
    throw Error("model_forward: frozen pass needs a current cache");
  }
  const std::size_t n = input.batch();
  if (n == 0) throw ShapeError("model_forward: empty batch");

  Matrix<T> global_feats;
  Matrix<T> local_feats;
  if (uses_global(spec.branch.kind)) {
    if (input.global.empty()) throw ShapeError("model_forward: missing global input");
    const auto map = trunk_forward(input.global, *model.params.global,
                                   cache.global_trunk, frozen);
    if (!frozen) cache.global_pool = pool_decide(map, pool, schedule);
    global_feats = pool_apply(map, cache.global_pool);
  }
  if (uses_local(spec.branch.kind)) {
    if (input.crops.size() != spec.branch.crops_per_image) {
      throw ShapeError("model_forward: expected 4 crops");
    }
    const auto stacked = stack_batch<T>(input.crops);
    const auto maps = split_batch(
        trunk_forward(stacked, *model.params.local, cache.local_trunk, frozen),
        input.crops.size());
    const auto unioned = stack_crops<T>(maps);
    if (!frozen) {
      cache.local_pool = {maps.size(), pool_decide(unioned, pool, schedule)};
    }
    local_feats = pool_apply(unioned, cache.local_pool.pool);
  }

  // Concatenate, global features first.
  const std::size_t gd = global_feats.cols();
  const std::size_t ld = local_feats.cols();
  Matrix<T> feats(n, gd + ld);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < gd; ++j) feats(r, j) = global_feats(r, j);
    for (std::size_t j = 0; j < ld; ++j) feats(r, gd + j) = local_feats(r, j);
  }
  cache.features = feats;
  cache.global_dim = gd;
  cache.local_dim = ld;
  cache.batch = n;
  cache.version = model.version;
  cache.valid = true;
  return dense_forward(feats, model.params.head);
}

// Gradients of all parameters given dL/dlogits. The shared local trunk runs
// all four crops as one batch, so its gradient is the sum over crops.
template <typename T>
ModelParams<T> model_backward(const Model<T>& model, const Matrix<T>& grad_logits,
                              const ModelCache<T>& cache) {
  if (!cache.valid || cache.version != model.version) {
    throw Error("model_backward: stale or missing forward cache");
  }
  if (grad_logits.rows() != cache.batch ||
      grad_logits.cols() != model.spec.num_classes) {
    throw ShapeError("model_backward: grad_logits shape mismatch");
  }
  ModelParams<T> grads = model.zero_grads();
  auto head = dense_backward(grad_logits, cache.features, model.params.head);
  grads.head.weight = std::move(head.grad_w);
  grads.head.bias = std::move(head.grad_b);

  const std::size_t n = cache.batch;
  if (cache.global_dim > 0) {
    Matrix<T> g(n, cache.global_dim);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < cache.global_dim; ++j) g(r, j) = head.grad_x(r, j);
    }
    trunk_backward(pool_backward(g, cache.global_pool), *model.params.global,
                   cache.global_trunk, *grads.global, false);
  }
  if (cache.local_dim > 0) {
    Matrix<T> g(n, cache.local_dim);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < cache.local_dim; ++j) {
        g(r, j) = head.grad_x(r, cache.global_dim + j);
      }
    }
    const auto per_crop = cross_crop_backward(g, cache.local_pool);
    trunk_backward(stack_batch<T>(per_crop), *model.params.local, cache.local_trunk,
                   *grads.local, false);
  }
  return grads;
}

}  // namespace sparsepool
