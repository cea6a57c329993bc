#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpoxvlm/common.hpp"

namespace mpoxvlm {

// Interleaved RGB image with values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size = height * width * 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }

  void clamp01() {
    for (double& v : data) v = std::min(1.0, std::max(0.0, v));
  }

  double mean_luminance() const {
    double s = 0.0;
    for (size_t i = 0; i + 2 < data.size(); i += 3) {
      s += 0.2126 * data[i] + 0.7152 * data[i + 1] + 0.0722 * data[i + 2];
    }
    return s / (static_cast<double>(height) * width);
  }
};

inline Image center_crop_square(const Image& img) {
  int side = std::min(img.height, img.width);
  int y0 = (img.height - side) / 2;
  int x0 = (img.width - side) / 2;
  Image out(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

// Bilinear resize. Exact copy when source and target sizes match.
inline Image resize_bilinear(const Image& img, int target_h, int target_w) {
  require(target_h > 0 && target_w > 0, "resize target must be positive");
  if (img.height == target_h && img.width == target_w) return img;
  Image out(target_h, target_w);
  double sy = static_cast<double>(img.height) / target_h;
  double sx = static_cast<double>(img.width) / target_w;
  for (int y = 0; y < target_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int ya = std::min(std::max(y0, 0), img.height - 1);
    int yb = std::min(std::max(y0 + 1, 0), img.height - 1);
    for (int x = 0; x < target_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int xa = std::min(std::max(x0, 0), img.width - 1);
      int xb = std::min(std::max(x0 + 1, 0), img.width - 1);
      for (int c = 0; c < 3; ++c) {
        double top = (1.0 - wx) * img.at(ya, xa, c) + wx * img.at(ya, xb, c);
        double bot = (1.0 - wx) * img.at(yb, xa, c) + wx * img.at(yb, xb, c);
        out.at(y, x, c) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

// §-style preprocessing used by both encoders: square center-crop, then
// resize to target_size. Values stay in [0,1].
inline Image preprocess(const Image& img, int target_size) {
  require(img.height > 0 && img.width > 0, "empty image");
  require(target_size > 0, "target size must be positive");
  Image cropped = center_crop_square(img);
  Image out = resize_bilinear(cropped, target_size, target_size);
  out.clamp01();
  return out;
}

inline std::vector<std::uint8_t> quantize_u8(const Image& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) {
    double v = std::min(1.0, std::max(0.0, img.data[i]));
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline Image dequantize_u8(const std::vector<std::uint8_t>& bytes, int h, int w) {
  Image img(h, w);
  require(bytes.size() == img.data.size(), "pixel buffer size mismatch");
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace mpoxvlm
