#include "textif/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "textif/error.hpp"

namespace textif {

const char* to_string(ColorSpace cs) {
  switch (cs) {
    case ColorSpace::Gray: return "gray";
    case ColorSpace::Rgb: return "rgb";
    case ColorSpace::YCbCr: return "ycbcr";
  }
  return "?";
}

Image::Image(int height, int width, ColorSpace cs, double fill)
    : height_(height), width_(width), cs_(cs) {
  if (height < 1 || width < 1) {
    throw InvalidInput("image dimensions must be positive");
  }
  data_.assign(static_cast<std::size_t>(channels()) * height * width, fill);
}

Image::Image(int height, int width, ColorSpace cs, std::vector<double> planar)
    : height_(height), width_(width), cs_(cs), data_(std::move(planar)) {
  if (height < 1 || width < 1) {
    throw InvalidInput("image dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(channels()) * height * width) {
    throw InvalidInput("image buffer size does not match dimensions");
  }
}

std::span<double> Image::channel(int c) {
  return std::span<double>(data_).subspan(c * pixel_count(), pixel_count());
}

std::span<const double> Image::channel(int c) const {
  return std::span<const double>(data_).subspan(c * pixel_count(),
                                                pixel_count());
}

Image& Image::clamp() {
  for (double& v : data_) {
    v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
  }
  return *this;
}

Image Image::relabeled(ColorSpace cs) const {
  Image out = *this;
  if ((cs == ColorSpace::Gray) != (cs_ == ColorSpace::Gray)) {
    throw InvalidInput("relabel cannot change the channel count");
  }
  out.cs_ = cs;
  return out;
}

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw InvalidInput(what);
}

double dot3(const std::array<double, 3>& w, double a, double b, double c) {
  return w[0] * a + w[1] * b + w[2] * c;
}

}  // namespace

Image rgb_to_ycbcr(const Image& img) {
  require(img.colorspace() == ColorSpace::Rgb, "rgb_to_ycbcr expects an RGB image");
  Image out(img.height(), img.width(), ColorSpace::YCbCr);
  auto r = img.channel(0), g = img.channel(1), b = img.channel(2);
  auto y = out.channel(0), cb = out.channel(1), cr = out.channel(2);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    y[i] = dot3(kLumaWeights, r[i], g[i], b[i]);
    cb[i] = dot3(kCbWeights, r[i], g[i], b[i]) + 0.5;
    cr[i] = dot3(kCrWeights, r[i], g[i], b[i]) + 0.5;
  }
  return out;
}

Image ycbcr_to_rgb(const Image& img) {
  require(img.colorspace() == ColorSpace::YCbCr,
          "ycbcr_to_rgb expects a YCbCr image");
  Image out(img.height(), img.width(), ColorSpace::Rgb);
  auto y = img.channel(0), cb = img.channel(1), cr = img.channel(2);
  auto r = out.channel(0), g = out.channel(1), b = out.channel(2);
  constexpr double kr = kLumaWeights[0], kg = kLumaWeights[1],
                   kb = kLumaWeights[2];
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double cbv = cb[i] - 0.5;
    const double crv = cr[i] - 0.5;
    const double rv = y[i] + 2.0 * (1.0 - kr) * crv;
    const double bv = y[i] + 2.0 * (1.0 - kb) * cbv;
    r[i] = rv;
    b[i] = bv;
    g[i] = (y[i] - kr * rv - kb * bv) / kg;
  }
  out.clamp();
  return out;
}

Image luminance(const Image& img) {
  switch (img.colorspace()) {
    case ColorSpace::Gray: return img;
    case ColorSpace::YCbCr: {
      Image out(img.height(), img.width(), ColorSpace::Gray);
      std::ranges::copy(img.channel(0), out.channel(0).begin());
      return out;
    }
    case ColorSpace::Rgb: break;
  }
  Image out(img.height(), img.width(), ColorSpace::Gray);
  auto r = img.channel(0), g = img.channel(1), b = img.channel(2);
  auto y = out.channel(0);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    y[i] = dot3(kLumaWeights, r[i], g[i], b[i]);
  }
  return out;
}

Image gray_to_rgb(const Image& img) {
  require(img.colorspace() == ColorSpace::Gray, "gray_to_rgb expects a gray image");
  Image out(img.height(), img.width(), ColorSpace::Rgb);
  for (int c = 0; c < 3; ++c) {
    std::ranges::copy(img.channel(0), out.channel(c).begin());
  }
  return out;
}

SobelResult sobel_gradient(const Image& gray) {
  require(gray.colorspace() == ColorSpace::Gray, "sobel_gradient expects a gray image");
  const int h = gray.height(), w = gray.width();
  require(h >= 3 && w >= 3, "sobel_gradient needs an image of at least 3x3");
  SobelResult res;
  for (Field* f : {&res.gx, &res.gy, &res.magnitude}) {
    f->height = h;
    f->width = w;
    f->values.assign(gray.pixel_count(), 0.0);
  }
  for (int y = 0; y < h; ++y) {
    const int ym = reflect_index(y - 1, h), yp = reflect_index(y + 1, h);
    for (int x = 0; x < w; ++x) {
      const int xm = reflect_index(x - 1, w), xp = reflect_index(x + 1, w);
      auto p = [&](int yy, int xx) { return gray.at(0, yy, xx); };
      const double gx = ((p(ym, xp) + 2.0 * p(y, xp) + p(yp, xp)) -
                         (p(ym, xm) + 2.0 * p(y, xm) + p(yp, xm))) / 8.0;
      const double gy = ((p(yp, xm) + 2.0 * p(yp, x) + p(yp, xp)) -
                         (p(ym, xm) + 2.0 * p(ym, x) + p(ym, xp))) / 8.0;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      res.gx.values[i] = gx;
      res.gy.values[i] = gy;
      res.magnitude.values[i] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return res;
}

int quantize8(double v) {
  return std::clamp(static_cast<int>(std::floor(v * 255.0 + 0.5)), 0, 255);
}

std::array<std::size_t, 256> histogram256(const Image& gray) {
  require(gray.colorspace() == ColorSpace::Gray, "histogram256 expects a gray image");
  std::array<std::size_t, 256> counts{};
  for (double v : gray.channel(0)) ++counts[quantize8(v)];
  return counts;
}

Image crop(const Image& img, int x, int y, int w, int h) {
  require(x >= 0 && y >= 0 && w >= 1 && h >= 1 && x + w <= img.width() &&
              y + h <= img.height(),
          "crop window outside image bounds");
  Image out(h, w, img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int yy = 0; yy < h; ++yy) {
      for (int xx = 0; xx < w; ++xx) out.at(c, yy, xx) = img.at(c, y + yy, x + xx);
    }
  }
  return out;
}

Image resize_bilinear(const Image& img, int new_height, int new_width) {
  require(new_height >= 1 && new_width >= 1, "resize target must be at least 1x1");
  if (new_height == img.height() && new_width == img.width()) return img;
  Image out(new_height, new_width, img.colorspace());
  const double sy = static_cast<double>(img.height()) / new_height;
  const double sx = static_cast<double>(img.width()) / new_width;
  for (int y = 0; y < new_height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < new_width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels(); ++c) {
        const double top = (1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
        const double bot = (1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
        out.at(c, y, x) = (1 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.height(), img.width(), img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        out.at(c, y, x) = img.at(c, y, img.width() - 1 - x);
      }
    }
  }
  return out;
}

Image pad_reflect_to_multiple(const Image& img, int multiple) {
  require(multiple >= 1, "pad multiple must be positive");
  const int h = (img.height() + multiple - 1) / multiple * multiple;
  const int w = (img.width() + multiple - 1) / multiple * multiple;
  if (h == img.height() && w == img.width()) return img;
  Image out(h, w, img.colorspace());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      const int sy = reflect_index(y, img.height());
      for (int x = 0; x < w; ++x) {
        out.at(c, y, x) = img.at(c, sy, reflect_index(x, img.width()));
      }
    }
  }
  return out;
}

}  // namespace textif
