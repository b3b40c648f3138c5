#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace textif {

enum class ColorSpace { Gray, Rgb, YCbCr };

const char* to_string(ColorSpace cs);

/// Planar image with values in [0,1]. Storage is channel-major
/// (c * H * W + y * W + x); channel count follows the color space.
class Image {
 public:
  Image() = default;
  Image(int height, int width, ColorSpace cs, double fill = 0.0);
  Image(int height, int width, ColorSpace cs, std::vector<double> planar);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return cs_ == ColorSpace::Gray ? 1 : 3; }
  ColorSpace colorspace() const { return cs_; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height_) * width_;
  }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  std::span<double> channel(int c);
  std::span<const double> channel(int c) const;
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  /// Clamps every value into [0,1]; NaN becomes 0.
  Image& clamp();

  /// Reinterprets the channel data under another color space with the same
  /// channel count, without converting values.
  Image relabeled(ColorSpace cs) const;

  bool operator==(const Image& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  ColorSpace cs_ = ColorSpace::Gray;
  std::vector<double> data_;
};

/// Row-major scalar field the size of an image, used for gradients.
struct Field {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int y, int x) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

struct SobelResult {
  Field gx;
  Field gy;
  Field magnitude;
};

/// Reflect-101 index mapping (… 2 1 | 0 1 2 … n-1 | n-2 …); requires n >= 2
/// unless i is already inside the range.
inline int reflect_index(int i, int n) {
  if (i >= 0 && i < n) return i;
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// BT.601 full-range. Chroma is stored with a +0.5 offset.
inline constexpr std::array<double, 3> kLumaWeights = {0.299, 0.587, 0.114};
inline constexpr std::array<double, 3> kCbWeights = {-0.5 * 0.299 / 0.886,
                                                     -0.5 * 0.587 / 0.886, 0.5};
inline constexpr std::array<double, 3> kCrWeights = {0.5, -0.5 * 0.587 / 0.701,
                                                     -0.5 * 0.114 / 0.701};

Image rgb_to_ycbcr(const Image& img);
Image ycbcr_to_rgb(const Image& img);

/// Y channel of an RGB image (or the image itself when already gray).
Image luminance(const Image& img);

/// Repeats a gray image into three identical RGB channels.
Image gray_to_rgb(const Image& img);

/// Sobel pair normalized by 1/8 with reflect padding. Needs H, W >= 3.
SobelResult sobel_gradient(const Image& gray);

std::array<std::size_t, 256> histogram256(const Image& gray);

/// Quantization used by the histogram: floor(v * 255 + 0.5), clamped to 0..255.
int quantize8(double v);

Image crop(const Image& img, int x, int y, int w, int h);

/// Bilinear resampling with half-pixel centers and edge clamping.
Image resize_bilinear(const Image& img, int new_height, int new_width);

Image flip_horizontal(const Image& img);

/// Pads right/bottom with reflect-101 so dimensions become multiples of
/// `multiple`.
Image pad_reflect_to_multiple(const Image& img, int multiple);

}  // namespace textif
