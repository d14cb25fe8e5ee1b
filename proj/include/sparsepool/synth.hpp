#pragma once

// Seeded synthetic sparse-feature classification data: cluttered procedural
// backgrounds carrying a variable number of small class-signature blobs.
// A class is identified by the blob's color together with the orientation of
// a fine stripe pattern; the stripes are only resolvable near the native
// resolution, so downscaled views lose part of the class evidence.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sparsepool/error.hpp"
#include "sparsepool/image.hpp"
#include "sparsepool/model.hpp"

namespace sparsepool {

struct SynthSpec {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t image_size = 64;
  std::size_t blob_min = 1;
  std::size_t blob_max = 2;
  std::size_t blob_size = 8;
  double visibility = 0.8;           // chance that any given blob is drawn
  double texture_scale = 8.0;        // background noise cell size, pixels
  double texture_contrast = 0.25;    // background noise amplitude
  double pixel_noise = 0.05;         // per-pixel Gaussian noise sigma
  double blob_alpha = 0.85;          // blob opacity over the background
  std::size_t stripe_period = 4;     // pixels per stripe cycle
  std::size_t clutter_patches = 0;   // signature-free colored distractors
  std::size_t decoy_blobs = 0;       // blobs carrying another class's signature
  double background_tint = 0.0;      // max per-image pull of the background toward a class color
  std::uint64_t seed = 7;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
    if (train_per_class == 0 || test_per_class == 0) {
      throw ConfigError("synth: images per class must be >= 1");
    }
    if (blob_min > blob_max) throw ConfigError("synth: blob_min > blob_max");
    if (blob_size == 0 || blob_size > image_size) {
      throw ConfigError("synth: blob_size must lie in [1, image_size]");
    }
    if (!(visibility >= 0.0 && visibility <= 1.0)) {
      throw ConfigError("synth: visibility must lie in [0, 1]");
    }
    if (!(texture_scale >= 1.0)) throw ConfigError("synth: texture_scale must be >= 1");
    if (!(blob_alpha > 0.0 && blob_alpha <= 1.0)) {
      throw ConfigError("synth: blob_alpha must lie in (0, 1]");
    }
    if (!(background_tint >= 0.0 && background_tint <= 1.0)) {
      throw ConfigError("synth: background_tint must lie in [0, 1]");
    }
    if (stripe_period < 2) throw ConfigError("synth: stripe_period must be >= 2");
    // Area bound; the placement loop reports the remaining infeasible cases.
    if ((blob_max + decoy_blobs + clutter_patches) * blob_size * blob_size >
        image_size * image_size) {
      throw ConfigError("synth: blobs cannot fit inside the image");
    }
  }

  bool operator==(const SynthSpec&) const = default;
};

enum class Stripes { Horizontal, Vertical };

struct ClassSignature {
  std::array<float, 3> color{};
  Stripes stripes = Stripes::Horizontal;
};

// Pairs of classes share a hue and differ in stripe orientation.
inline std::vector<ClassSignature> class_signatures(std::size_t num_classes) {
  const std::size_t hues = (num_classes + 1) / 2;
  std::vector<ClassSignature> out;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double h = 6.0 * static_cast<double>(k / 2) / static_cast<double>(hues);
    const double f = h - std::floor(h);
    const double v = 0.95, s = 0.85;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    std::array<double, 3> rgb{};
    switch (static_cast<int>(std::floor(h)) % 6) {
      case 0: rgb = {v, t, p}; break;
      case 1: rgb = {q, v, p}; break;
      case 2: rgb = {p, v, t}; break;
      case 3: rgb = {p, q, v}; break;
      case 4: rgb = {t, p, v}; break;
      default: rgb = {v, p, q}; break;
    }
    out.push_back({{static_cast<float>(rgb[0]), static_cast<float>(rgb[1]),
                    static_cast<float>(rgb[2])},
                   k % 2 == 0 ? Stripes::Horizontal : Stripes::Vertical});
  }
  return out;
}

// Blob appearance before blending: the class color modulated by stripes whose
// phase is anchored at the blob's top-left corner.
inline Image render_signature(const ClassSignature& sig, std::size_t size,
                              std::size_t period) {
  Image img(3, size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t u = sig.stripes == Stripes::Horizontal ? y : x;
      const float gain = (u % period) < period / 2 ? 1.0f : 0.25f;
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = sig.color[c] * gain;
    }
  }
  return img;
}

struct SynthSample {
  Image image;
  int label = 0;
  std::vector<CropRect> blobs;  // visible blobs only
};

struct SynthDataset {
  SynthSpec spec;
  std::vector<ClassSignature> signatures;
  std::vector<SynthSample> train;
  std::vector<SynthSample> test;
};

inline constexpr float kBackgroundMean[3] = {0.40f, 0.45f, 0.30f};

namespace detail {

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Smooth value noise: a random lattice with the given cell size, bilinearly
// interpolated over the image.
inline void add_value_noise(Image& img, double cell, double amplitude,
                            std::mt19937_64& rng) {
  const std::size_t gw = static_cast<std::size_t>(std::ceil(img.width / cell)) + 2;
  const std::size_t gh = static_cast<std::size_t>(std::ceil(img.height / cell)) + 2;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t c = 0; c < img.channels; ++c) {
    std::vector<double> lattice(gw * gh);
    for (auto& v : lattice) v = u(rng);
    for (std::size_t y = 0; y < img.height; ++y) {
      const double fy = static_cast<double>(y) / cell;
      const auto y0 = static_cast<std::size_t>(fy);
      const double ty = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < img.width; ++x) {
        const double fx = static_cast<double>(x) / cell;
        const auto x0 = static_cast<std::size_t>(fx);
        const double tx = fx - static_cast<double>(x0);
        const double a = lattice[y0 * gw + x0], b = lattice[y0 * gw + x0 + 1];
        const double d = lattice[(y0 + 1) * gw + x0], e = lattice[(y0 + 1) * gw + x0 + 1];
        const double v = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * d + tx * e);
        img.at(c, y, x) += static_cast<float>(amplitude * v);
      }
    }
  }
}

inline bool overlaps(const CropRect& a, const CropRect& b) {
  return a.x < b.x + b.size && b.x < a.x + a.size && a.y < b.y + b.size &&
         b.y < a.y + a.size;
}

inline std::vector<CropRect> place_blobs(std::size_t count, std::size_t size,
                                         std::size_t extent, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pos(0, extent - size);
  std::vector<CropRect> placed;
  for (std::size_t k = 0; k < count; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      const CropRect r{pos(rng), pos(rng), size};
      ok = std::none_of(placed.begin(), placed.end(),
                        [&](const CropRect& p) { return overlaps(p, r); });
      if (ok) placed.push_back(r);
    }
    if (!ok) {
      throw ConfigError("synth: could not place " + std::to_string(count) +
                        " non-overlapping blobs of size " + std::to_string(size));
    }
  }
  return placed;
}

}  // namespace detail

inline SynthSample generate_sample(const SynthSpec& spec,
                                   const std::vector<ClassSignature>& sigs, int label,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = spec.image_size;
  SynthSample s;
  s.label = label;
  s.image = Image(3, n, n);
  std::uniform_int_distribution<std::size_t> other(0, sigs.size() - 1);
  const auto& tint_color = sigs[other(rng)].color;
  const double tint = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * spec.background_tint;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto bg = static_cast<float>((1.0 - tint) * kBackgroundMean[c] + tint * tint_color[c]);
    std::fill(s.image.data.begin() + c * n * n, s.image.data.begin() + (c + 1) * n * n, bg);
  }
  detail::add_value_noise(s.image, spec.texture_scale, spec.texture_contrast, rng);

  std::uniform_int_distribution<std::size_t> count_dist(spec.blob_min, spec.blob_max);
  const std::size_t count = count_dist(rng);
  const auto rects = detail::place_blobs(count + spec.decoy_blobs + spec.clutter_patches,
                                         spec.blob_size, n, rng);
  std::bernoulli_distribution visible(spec.visibility);
  const float a = static_cast<float>(spec.blob_alpha);
  for (std::size_t k = 0; k < rects.size(); ++k) {
    const CropRect& r = rects[k];
    Image tpl;
    if (k < count) {
      if (!visible(rng)) continue;
      tpl = render_signature(sigs[static_cast<std::size_t>(label)], r.size,
                             spec.stripe_period);
      s.blobs.push_back(r);
    } else if (k < count + spec.decoy_blobs) {
      auto decoy = static_cast<std::size_t>(label);
      while (decoy == static_cast<std::size_t>(label)) decoy = other(rng);
      tpl = render_signature(sigs[decoy], r.size, spec.stripe_period);
    } else {
      // Flat patch in a random class color: color evidence without stripes.
      const auto& col = sigs[other(rng)].color;
      tpl = Image(3, r.size, r.size);
      for (std::size_t c = 0; c < 3; ++c) {
        std::fill(tpl.data.begin() + c * r.size * r.size,
                  tpl.data.begin() + (c + 1) * r.size * r.size, col[c] * 0.625f);
      }
    }
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < r.size; ++y) {
        for (std::size_t x = 0; x < r.size; ++x) {
          float& px = s.image.at(c, r.y + y, r.x + x);
          px = (1.0f - a) * px + a * tpl.at(c, y, x);
        }
      }
    }
  }

  std::normal_distribution<double> noise(0.0, spec.pixel_noise);
  for (auto& v : s.image.data) {
    v = std::clamp(v + static_cast<float>(noise(rng)), 0.0f, 1.0f);
  }
  return s;
}

enum class Split { Train = 0, Test = 1 };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

inline SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset ds;
  ds.spec = spec;
  ds.signatures = class_signatures(spec.num_classes);
  for (Split split : {Split::Train, Split::Test}) {
    const std::size_t per_class =
        split == Split::Train ? spec.train_per_class : spec.test_per_class;
    auto& out = split == Split::Train ? ds.train : ds.test;
    out.reserve(per_class * spec.num_classes);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < spec.num_classes; ++k) {
        const auto seed = detail::derive_seed(
            {spec.seed, static_cast<std::uint64_t>(split), k, i});
        out.push_back(generate_sample(spec, ds.signatures, static_cast<int>(k), seed));
      }
    }
  }
  return ds;
}

// Nearest-signature classification given the true blob locations: each class
// is scored by the squared distance between the observed blob pixels and
// that class's expected appearance, summed over the visible blobs.
inline int nearest_signature(const SynthSample& sample, const SynthSpec& spec,
                             const std::vector<ClassSignature>& sigs) {
  if (sample.blobs.empty()) return -1;
  const float a = static_cast<float>(spec.blob_alpha);
  double best = std::numeric_limits<double>::infinity();
  int best_k = -1;
  for (std::size_t k = 0; k < sigs.size(); ++k) {
    double d = 0.0;
    for (const auto& r : sample.blobs) {
      const Image tpl = render_signature(sigs[k], r.size, spec.stripe_period);
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < r.size; ++y) {
          for (std::size_t x = 0; x < r.size; ++x) {
            const double expect = (1.0f - a) * kBackgroundMean[c] + a * tpl.at(c, y, x);
            const double diff = sample.image.at(c, r.y + y, r.x + x) - expect;
            d += diff * diff;
          }
        }
      }
    }
    if (d < best) {
      best = d;
      best_k = static_cast<int>(k);
    }
  }
  return best_k;
}

}  // namespace sparsepool
