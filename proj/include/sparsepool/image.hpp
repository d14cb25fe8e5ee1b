#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include "sparsepool/error.hpp"
#include "sparsepool/model.hpp"
#include "sparsepool/spt4.hpp"
#include "sparsepool/tensor.hpp"

namespace sparsepool {

// Planar channel-major float image (C x H x W).
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  ImageSize size() const { return {width, height}; }
  bool operator==(const Image&) const = default;
};

// Bilinear resampling with half-pixel centers; a 2x downscale averages each
// 2x2 block and a constant image stays constant.
inline Image resize_bilinear(const Image& src, std::size_t out_w, std::size_t out_h) {
  if (out_w == src.width && out_h == src.height) return src;
  Image dst(src.channels, out_h, out_w);
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_h);
  auto coord = [](double pos, std::size_t extent, std::size_t& lo, std::size_t& hi,
                  double& frac) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    lo = static_cast<std::size_t>(std::floor(pos));
    hi = std::min(lo + 1, extent - 1);
    frac = pos - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord((static_cast<double>(y) + 0.5) * sy - 0.5, src.height, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord((static_cast<double>(x) + 0.5) * sx - 0.5, src.width, x0, x1, fx);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = (1.0 - fx) * src.at(c, y0, x0) + fx * src.at(c, y0, x1);
        const double bot = (1.0 - fx) * src.at(c, y1, x0) + fx * src.at(c, y1, x1);
        dst.at(c, y, x) = static_cast<float>((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return dst;
}

inline Image resize_shortest_side(const Image& src, std::size_t target) {
  const auto s = resized_shortest_side(src.size(), target);
  return resize_bilinear(src, s.width, s.height);
}

inline Image crop(const Image& src, const CropRect& r) {
  if (r.x + r.size > src.width || r.y + r.size > src.height) {
    throw ShapeError("crop rectangle exceeds image bounds");
  }
  Image dst(src.channels, r.size, r.size);
  for (std::size_t c = 0; c < src.channels; ++c) {
    for (std::size_t y = 0; y < r.size; ++y) {
      const float* row = &src.data[(c * src.height + r.y + y) * src.width + r.x];
      std::copy(row, row + r.size, &dst.data[(c * r.size + y) * r.size]);
    }
  }
  return dst;
}

inline Image flip_horizontal(const Image& src) {
  Image dst = src;
  for (std::size_t c = 0; c < src.channels; ++c) {
    for (std::size_t y = 0; y < src.height; ++y) {
      for (std::size_t x = 0; x < src.width; ++x) {
        dst.at(c, y, x) = src.at(c, y, src.width - 1 - x);
      }
    }
  }
  return dst;
}

inline Image flip_vertical(const Image& src) {
  Image dst = src;
  for (std::size_t c = 0; c < src.channels; ++c) {
    for (std::size_t y = 0; y < src.height; ++y) {
      for (std::size_t x = 0; x < src.width; ++x) {
        dst.at(c, y, x) = src.at(c, src.height - 1 - y, x);
      }
    }
  }
  return dst;
}

// Copies an image into batch slot n of a tensor with matching C, H, W.
template <typename T>
void write_into(Tensor4<T>& batch, std::size_t n, const Image& img) {
  const auto& s = batch.shape();
  if (s.c != img.channels || s.h != img.height || s.w != img.width) {
    throw ShapeError("image does not match batch slot shape");
  }
  std::transform(img.data.begin(), img.data.end(),
                 batch.data().begin() + n * s.c * s.h * s.w,
                 [](float v) { return static_cast<T>(v); });
}

// ---------------------------------------------------------------------------
// File I/O. PNG images are 8-bit gray/RGB(A) mapped to [0, 1]; SPT4 images
// are single-batch tensors (1 x C x H x W).

inline Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(3, img.height, img.width);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(c, y, x) = static_cast<float>(buf[(y * out.width + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image& src) {
  if (src.channels != 3 && src.channels != 1) {
    throw IoError("PNG output supports 1 or 3 channels");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(src.width);
  img.height = static_cast<png_uint_32>(src.height);
  img.format = src.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(src.width * src.height * src.channels);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < src.width; ++x) {
      for (std::size_t c = 0; c < src.channels; ++c) {
        const float v = std::clamp(src.at(c, y, x), 0.0f, 1.0f);
        buf[(y * src.width + x) * src.channels + c] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
    }
  }
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

inline Image image_from_tensor(const Tensor4<double>& t) {
  const auto& s = t.shape();
  if (s.n != 1) throw IoError("image tensors must have batch size 1");
  Image out(s.c, s.h, s.w);
  std::transform(t.data().begin(), t.data().end(), out.data.begin(),
                 [](double v) { return static_cast<float>(v); });
  return out;
}

inline Tensor4<float> tensor_from_image(const Image& img) {
  Tensor4<float> t(Shape4{1, img.channels, img.height, img.width});
  write_into(t, 0, img);
  return t;
}

inline Image read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") return read_png(path);
  if (ext == ".spt4") return image_from_tensor(load_spt4(path).tensor);
  throw IoError("unsupported image format: " + path.string());
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
  const auto ext = path.extension().string();
  if (ext == ".png") {
    write_png(path, img);
  } else if (ext == ".spt4") {
    save_spt4(path, tensor_from_image(img));
  } else {
    throw IoError("unsupported image format: " + path.string());
  }
}

}  // namespace sparsepool
