#pragma once

// Central finite-difference checks of every backward pass in double
// precision. Each check contracts the operator output with a fixed random
// tensor R, so the scalar probe is L(x) = sum(R * f(x)) and its analytic
// gradient is backward(R). Data-dependent decisions (pooling masks, rectifier
// gates, downsample argmax) are taken once and held fixed while perturbing.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sparsepool/layers.hpp"
#include "sparsepool/model.hpp"
#include "sparsepool/pooling.hpp"
#include "sparsepool/tensor.hpp"

namespace sparsepool {

struct GradcheckCase {
  std::string op;
  std::size_t trial = 0;
  std::string detail;
  double rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 0.0;
  double seconds = 0.0;
  std::vector<GradcheckCase> cases;

  bool passed() const {
    return !cases.empty() &&
           std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
  }

  std::vector<std::string> ops() const {
    std::vector<std::string> out;
    for (const auto& c : cases) {
      if (std::find(out.begin(), out.end(), c.op) == out.end()) out.push_back(c.op);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tolerance"] = tolerance;
    j["seconds"] = seconds;
    j["passed"] = passed();
    nlohmann::json summary = nlohmann::json::object();
    for (const auto& op : ops()) {
      std::size_t n = 0, ok = 0;
      double worst = 0.0;
      for (const auto& c : cases) {
        if (c.op != op) continue;
        ++n;
        ok += c.passed;
        worst = std::max(worst, c.rel_error);
      }
      summary[op] = {{"trials", n}, {"passed", ok}, {"max_rel_error", worst}};
    }
    j["operators"] = summary;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases) {
      j["cases"].push_back({{"op", c.op},
                            {"trial", c.trial},
                            {"detail", c.detail},
                            {"rel_error", c.rel_error},
                            {"passed", c.passed}});
    }
    return j;
  }
};

struct GradcheckOptions {
  std::size_t trials = 20;
  double tolerance = 1e-6;
  double pool_step = 1e-6;   // perturbation for piecewise-linear operators
  double smooth_step = 1e-5; // perturbation where softmax is involved
  std::uint64_t seed = 1;
  // Restricts the run to one scope (pooling, layers, model) or one operator
  // name when non-empty.
  std::string only;
  // Negative control: may alter the analytic gradient of the named operator
  // before it is compared.
  std::function<void(const std::string& op, std::span<double> grad)> corrupt;
};

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> scopes{"pooling", "layers", "model"};
  return scopes;
}

inline std::string gradcheck_scope_of(const std::string& op) {
  if (op.rfind("pool_", 0) == 0 || op == "cross_crop_pool") return "pooling";
  if (op == "multires_model") return "model";
  return "layers";
}

inline const std::vector<std::string>& gradcheck_operators() {
  static const std::vector<std::string> ops{
      "pool_avg", "pool_max",   "pool_outlier", "pool_dynamic",    "conv",
      "relu",     "downsample", "dense",        "softmax_xent",    "cross_crop_pool",
      "multires_model"};
  return ops;
}

// Norm-wise relative error ||a - b|| / max(||a|| + ||b||, tiny).
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(na) + std::sqrt(nb), 1e-300);
  return std::sqrt(diff) / denom;
}

// Central differences of a scalar function over the values in x.
inline std::vector<double> numeric_gradient(std::span<double> x,
                                            const std::function<double()>& loss,
                                            double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = loss();
    x[i] = keep - h;
    const double down = loss();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

class GradcheckRunner {
 public:
  explicit GradcheckRunner(const GradcheckOptions& o) : opt_(o), rng_(o.seed) {}

  GradcheckReport run() {
    const auto start = std::chrono::steady_clock::now();
    report_.tolerance = opt_.tolerance;
    for (const auto& op : gradcheck_operators()) {
      if (!opt_.only.empty() && op != opt_.only && gradcheck_scope_of(op) != opt_.only) {
        continue;
      }
      for (std::size_t t = 0; t < opt_.trials; ++t) run_one(op, t);
    }
    report_.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report_;
  }

 private:
  std::size_t pick(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  void fill(std::span<double> v) {
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& x : v) x = d(rng_);
  }

  // Gaussian values with occasional large spikes, so threshold masks are
  // neither empty nor full in most channels.
  Tensor4<double> spiky(Shape4 s) {
    Tensor4<double> t(s);
    fill(t.data());
    std::bernoulli_distribution spike(0.15);
    for (auto& v : t.data()) {
      if (spike(rng_)) v += 4.0;
    }
    return t;
  }

  Tensor4<double> random(Shape4 s) {
    Tensor4<double> t(s);
    fill(t.data());
    return t;
  }

  Matrix<double> random(std::size_t r, std::size_t c) {
    Matrix<double> m(r, c);
    fill(m.data());
    return m;
  }

  // Compares one analytic gradient block against central differences.
  double compare(const std::string& op, std::span<double> wrt, std::vector<double> analytic,
                 const std::function<double()>& loss, double h) {
    if (opt_.corrupt) opt_.corrupt(op, analytic);
    const auto numeric = numeric_gradient(wrt, loss, h);
    return relative_error(analytic, numeric);
  }

  void record(const std::string& op, std::size_t trial, std::string detail, double err) {
    report_.cases.push_back({op, trial, std::move(detail), err,
                             std::isfinite(err) && err < opt_.tolerance});
  }

  static std::vector<double> vec(std::span<const double> s) {
    return {s.begin(), s.end()};
  }

  void run_one(const std::string& op, std::size_t trial) {
    if (op.rfind("pool_", 0) == 0) return check_pool(op, trial);
    if (op == "conv") return check_conv(trial);
    if (op == "relu") return check_relu(trial);
    if (op == "downsample") return check_downsample(trial);
    if (op == "dense") return check_dense(trial);
    if (op == "softmax_xent") return check_xent(trial);
    if (op == "cross_crop_pool") return check_cross_crop(trial);
    if (op == "multires_model") return check_model(trial);
    throw ConfigError("gradcheck: unknown operator " + op);
  }

  PoolMode mode_for(const std::string& op) {
    const double lambda = std::uniform_real_distribution<double>(0.0, 2.5)(rng_);
    if (op == "pool_avg") return PoolMode::average();
    if (op == "pool_max") return PoolMode::max();
    if (op == "pool_outlier") return PoolMode::outlier(lambda);
    return PoolMode::dynamic(lambda);
  }

  Schedule random_schedule() {
    const int total = static_cast<int>(pick(1, 20));
    return {static_cast<int>(pick(0, static_cast<std::size_t>(total))), total};
  }

  void check_pool(const std::string& op, std::size_t trial) {
    const Shape4 s{pick(1, 3), pick(1, 4), pick(1, 6), pick(2, 6)};
    const PoolMode mode = mode_for(op);
    const Schedule sched = random_schedule();
    auto x = spiky(s);
    const PoolContext ctx = pool_decide(x, mode, sched);
    const auto r = random(s.n, s.c);
    auto loss = [&] { return dot(pool_apply(x, ctx).data(), r.data()); };
    const double err = compare(op, x.data(), vec(pool_backward(r, ctx).data()), loss,
                               opt_.pool_step);
    record(op, trial,
           s.str() + " lambda=" + std::to_string(mode.lambda) +
               " epoch=" + std::to_string(sched.current_epoch) + "/" +
               std::to_string(sched.total_epochs),
           err);
  }

  void check_conv(std::size_t trial) {
    ConvGeometry g{pick(1, 3), pick(1, 4), pick(1, 3), pick(1, 2), pick(0, 1)};
    const std::size_t min_extent = g.kernel > 2 * g.padding ? g.kernel - 2 * g.padding : 1;
    const Shape4 s{pick(1, 3), g.in_channels, pick(std::max<std::size_t>(min_extent, 2), 7),
                   pick(std::max<std::size_t>(min_extent, 2), 7)};
    ConvLayer<double> layer(g);
    fill(layer.weight);
    fill(layer.bias);
    auto x = random(s);
    ConvCache<double> cache;
    const auto y0 = conv_forward(x, layer, cache);
    const auto r = random(y0.shape());
    auto loss = [&] {
      ConvCache<double> c;
      return dot(conv_forward(x, layer, c).data(), r.data());
    };
    const auto grads = conv_backward(r, layer, cache);
    const double ex = compare("conv", x.data(), vec(grads.grad_x.data()), loss, opt_.pool_step);
    const double ew = compare("conv", layer.weight, grads.grad_w, loss, opt_.pool_step);
    const double eb = compare("conv", layer.bias, grads.grad_b, loss, opt_.pool_step);
    record("conv", trial,
           s.str() + " k=" + std::to_string(g.kernel) + " stride=" + std::to_string(g.stride) +
               " pad=" + std::to_string(g.padding) + " out=" + std::to_string(g.out_channels),
           std::max({ex, ew, eb}));
  }

  void check_relu(std::size_t trial) {
    const Shape4 s{pick(1, 3), pick(1, 4), pick(1, 6), pick(1, 6)};
    auto x = random(s);
    std::vector<std::uint8_t> gate;
    relu_forward(x, gate);
    const auto r = random(s);
    auto loss = [&] { return dot(relu_apply(x, gate).data(), r.data()); };
    record("relu", trial, s.str(),
           compare("relu", x.data(), vec(relu_backward(r, gate).data()), loss, opt_.pool_step));
  }

  void check_downsample(std::size_t trial) {
    const Shape4 s{pick(1, 3), pick(1, 4), pick(2, 7), pick(2, 7)};
    auto x = random(s);
    DownsampleIndex argmax;
    const auto y0 = downsample_forward(x, argmax);
    const auto r = random(y0.shape());
    auto loss = [&] { return dot(downsample_apply(x, argmax).data(), r.data()); };
    record("downsample", trial, s.str(),
           compare("downsample", x.data(), vec(downsample_backward(r, s, argmax).data()),
                   loss, opt_.pool_step));
  }

  void check_dense(std::size_t trial) {
    const std::size_t n = pick(1, 5), in = pick(1, 8), out = pick(1, 6);
    DenseLayer<double> layer(in, out);
    fill(layer.weight);
    fill(layer.bias);
    auto x = random(n, in);
    const auto r = random(n, out);
    auto loss = [&] { return dot(dense_forward(x, layer).data(), r.data()); };
    const auto g = dense_backward(r, x, layer);
    const double ex = compare("dense", x.data(), vec(g.grad_x.data()), loss, opt_.pool_step);
    const double ew = compare("dense", layer.weight, g.grad_w, loss, opt_.pool_step);
    const double eb = compare("dense", layer.bias, g.grad_b, loss, opt_.pool_step);
    record("dense", trial,
           std::to_string(n) + "x" + std::to_string(in) + "->" + std::to_string(out),
           std::max({ex, ew, eb}));
  }

  void check_xent(std::size_t trial) {
    const std::size_t n = pick(1, 6), k = pick(2, 10);
    auto logits = random(n, k);
    for (auto& v : logits.data()) v *= 3.0;
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(pick(0, k - 1));
    auto loss = [&] { return softmax_xent(logits, std::span<const int>(labels)).loss; };
    const auto res = softmax_xent(logits, std::span<const int>(labels));
    record("softmax_xent", trial, std::to_string(n) + "x" + std::to_string(k),
           compare("softmax_xent", logits.data(), vec(res.grad_logits.data()), loss,
                   opt_.smooth_step));
  }

  void check_cross_crop(std::size_t trial) {
    static const char* kModes[] = {"pool_avg", "pool_max", "pool_outlier", "pool_dynamic"};
    const PoolMode mode = mode_for(kModes[trial % 4]);
    const Schedule sched = random_schedule();
    const Shape4 s{pick(1, 3), pick(1, 3), pick(1, 4), pick(1, 4)};
    std::vector<Tensor4<double>> crops;
    for (std::size_t k = 0; k < kCropsPerImage; ++k) crops.push_back(spiky(s));
    const auto res = cross_crop_pool<double>(crops, mode, sched);
    const auto r = random(s.n, s.c);
    auto loss = [&] {
      return dot(pool_apply(stack_crops<double>(crops), res.ctx.pool).data(), r.data());
    };
    const auto grads = cross_crop_backward(r, res.ctx);
    double err = 0.0;
    for (std::size_t k = 0; k < crops.size(); ++k) {
      err = std::max(err, compare("cross_crop_pool", crops[k].data(),
                                  vec(grads[k].data()), loss, opt_.pool_step));
    }
    record("cross_crop_pool", trial, s.str() + " mode=" + to_string(mode.kind), err);
  }

  void check_model(std::size_t trial) {
    static const PoolKind kKinds[] = {PoolKind::Average, PoolKind::Max, PoolKind::Outlier,
                                      PoolKind::DynamicOutlier};
    ModelSpec spec;
    spec.branch.kind = BranchKind::MultiRes;
    spec.branch.global_input_size = 8;
    spec.branch.local_crop_size = 8;
    spec.branch.pool_mode = {kKinds[trial % 4], 1.0};
    spec.trunk_widths = {2, 2};
    spec.num_classes = 3;
    auto model = Model<double>::create(spec, rng_());
    ModelInput<double> input;
    const std::size_t n = pick(1, 3);
    input.global = random(Shape4{n, 3, 8, 8});
    for (std::size_t k = 0; k < kCropsPerImage; ++k) {
      input.crops.push_back(random(Shape4{n, 3, 8, 8}));
    }
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(pick(0, 2));
    const Schedule sched = random_schedule();

    ModelCache<double> cache;
    const auto logits = model_forward(model, input, sched, cache);
    const auto xent = softmax_xent(logits, std::span<const int>(labels));
    auto grads = model_backward(model, xent.grad_logits, cache);
    auto loss = [&] {
      ModelCache<double> c = cache;
      return softmax_xent(model_forward(model, input, sched, c, true),
                          std::span<const int>(labels))
          .loss;
    };
    std::vector<ParamView<double>> p, g;
    for_each_param<double>(model.params, [&](const ParamView<double>& v) { p.push_back(v); });
    for_each_param<double>(grads, [&](const ParamView<double>& v) { g.push_back(v); });
    double err = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      err = std::max(err, compare("multires_model", p[i].values, vec(g[i].values), loss,
                                  opt_.smooth_step));
    }
    record("multires_model", trial,
           "batch=" + std::to_string(n) + " pool=" + to_string(spec.branch.pool_mode.kind), err);
  }

  GradcheckOptions opt_;
  std::mt19937_64 rng_;
  GradcheckReport report_;
};

}  // namespace detail

inline GradcheckReport run_gradcheck(const GradcheckOptions& options = {}) {
  if (options.trials == 0) throw ConfigError("gradcheck: trials must be >= 1");
  if (!options.only.empty()) {
    const auto& ops = gradcheck_operators();
    const auto& scopes = gradcheck_scopes();
    if (std::find(ops.begin(), ops.end(), options.only) == ops.end() &&
        std::find(scopes.begin(), scopes.end(), options.only) == scopes.end()) {
      throw ConfigError("gradcheck: unknown scope or operator '" + options.only + "'");
    }
  }
  return detail::GradcheckRunner(options).run();
}

}  // namespace sparsepool
