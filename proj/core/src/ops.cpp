#include "textif/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "textif/error.hpp"
#include "textif/image.hpp"

namespace textif::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;
using Eigen::ArrayXd;
using MapA = Eigen::Map<Eigen::ArrayXd>;
using CMapA = Eigen::Map<const Eigen::ArrayXd>;

void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidInput(what);
}

/// Gradient buffer of input i, or nullptr when it takes no gradient.
Tensor* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

const Tensor& value_of(Node& self, std::size_t i) { return self.inputs[i]->value; }

CMapA arr(const Tensor& t) { return CMapA(t.data(), static_cast<Eigen::Index>(t.size())); }
MapA arr(Tensor& t) { return MapA(t.data(), static_cast<Eigen::Index>(t.size())); }

CMapR mat(const Tensor& t, int rows, int cols) { return CMapR(t.data(), rows, cols); }
MapR mat(Tensor& t, int rows, int cols) { return MapR(t.data(), rows, cols); }

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
}

void require_map(const Var& x, const char* op) {
  require(x.value().rank() == 3, std::string(op) + " expects a [C, H, W] map");
}

int spatial(const Var& x) { return x.dim(1) * x.dim(2); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out(a.shape());
  arr(out) = arr(a.value()) + arr(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (Tensor* g = grad_of(self, i)) arr(*g) += arr(self.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out(a.shape());
  arr(out) = arr(a.value()) - arr(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) arr(*g) += arr(self.grad);
    if (Tensor* g = grad_of(self, 1)) arr(*g) -= arr(self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out(a.shape());
  arr(out) = arr(a.value()) * arr(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) arr(*g) += arr(self.grad) * arr(value_of(self, 1));
    if (Tensor* g = grad_of(self, 1)) arr(*g) += arr(self.grad) * arr(value_of(self, 0));
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  Tensor out(a.shape());
  arr(out) = arr(a.value()) / arr(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto bv = arr(value_of(self, 1));
    if (Tensor* g = grad_of(self, 0)) arr(*g) += arr(self.grad) / bv;
    if (Tensor* g = grad_of(self, 1)) {
      arr(*g) -= arr(self.grad) * arr(self.value) / bv;
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  arr(out) = arr(a.value()) * s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = grad_of(self, 0)) arr(*g) += arr(self.grad) * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out(a.shape());
  arr(out) = arr(a.value()) + s;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) arr(*g) += arr(self.grad);
  });
}

Var sum(const Var& a) {
  Tensor out({1}, arr(a.value()).sum());
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) arr(*g) += self.grad[0];
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  Tensor out({1}, arr(a.value()).sum() / n);
  return make_result(std::move(out), {a}, [n](Node& self) {
    if (Tensor* g = grad_of(self, 0)) arr(*g) += self.grad[0] / n;
  });
}

Var mean_abs_diff(const Var& a, const Tensor& target) {
  require(a.shape() == target.shape(), "mean_abs_diff: shape mismatch " +
                                           shape_to_string(a.shape()) + " vs " +
                                           target.shape_string());
  const double n = static_cast<double>(a.size());
  Tensor out({1}, (arr(a.value()) - arr(target)).abs().sum() / n);
  return make_result(std::move(out), {a}, [target, n](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      const double s = self.grad[0] / n;
      arr(*g) += (arr(value_of(self, 0)) - arr(target)).sign() * s;
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out(a.shape());
  arr(out) = 1.0 / (1.0 + (-arr(a.value())).exp());
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      const auto y = arr(self.value);
      arr(*g) += arr(self.grad) * y * (1.0 - y);
    }
  });
}

Var gelu(const Var& a) {
  Tensor out(a.shape());
  const double* x = a.value().data();
  double* y = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  }
  return make_result(std::move(out), {a}, [](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const double* x = value_of(self, 0).data();
    const double* gy = self.grad.data();
    double* gx = g->data();
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      gx[i] += gy[i] * (cdf + x[i] * pdf);
    }
  });
}

Var concat0(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat0 of nothing");
  std::vector<int> shape = parts.front().shape();
  int lead = 0;
  for (const Var& p : parts) {
    require(p.value().rank() == shape.size() &&
                std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1),
            "concat0: trailing dimensions differ");
    lead += p.dim(0);
  }
  shape[0] = lead;
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + off);
    off += p.size();
  }
  return make_result(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (Tensor* g = grad_of(self, i)) {
        arr(*g) += CMapA(self.grad.data() + offsets[i], static_cast<Eigen::Index>(g->size()));
      }
    }
  });
}

Var slice0(const Var& a, int start, int count) {
  require(start >= 0 && count >= 1 && start + count <= a.dim(0),
          "slice0: range out of bounds");
  std::vector<int> shape = a.shape();
  const std::size_t inner = a.size() / shape[0];
  shape[0] = count;
  Tensor out(shape);
  const std::size_t off = inner * start;
  std::copy(a.value().data() + off, a.value().data() + off + out.size(), out.data());
  return make_result(std::move(out), {a}, [off](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      MapA(g->data() + off, static_cast<Eigen::Index>(self.grad.size())) += arr(self.grad);
    }
  });
}

Var conv1x1(const Var& x, const Var& w, const Var& b) {
  require_map(x, "conv1x1");
  const int ci = x.dim(0), co = w.dim(0), n = spatial(x);
  require(w.value().rank() == 2 && w.dim(1) == ci,
          "conv1x1: weight " + shape_to_string(w.shape()) + " does not fit input " +
              shape_to_string(x.shape()));
  const bool has_bias = b.defined();
  if (has_bias) require(b.size() == static_cast<std::size_t>(co), "conv1x1: bias size");
  Tensor out({co, x.dim(1), x.dim(2)});
  auto y = mat(out, co, n);
  y.noalias() = mat(w.value(), co, ci) * mat(x.value(), ci, n);
  if (has_bias) y.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), co);
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [ci, co, n](Node& self) {
    const auto gy = mat(self.grad, co, n);
    if (Tensor* g = grad_of(self, 0)) {
      mat(*g, ci, n).noalias() += mat(value_of(self, 1), co, ci).transpose() * gy;
    }
    if (Tensor* g = grad_of(self, 1)) {
      mat(*g, co, ci).noalias() += gy * mat(value_of(self, 0), ci, n).transpose();
    }
    if (self.inputs.size() > 2) {
      if (Tensor* g = grad_of(self, 2)) {
        Eigen::Map<Eigen::VectorXd>(g->data(), co) += gy.rowwise().sum();
      }
    }
  });
}

namespace {

/// Column matrix [Ci * 9, H * W] of reflect-padded 3x3 neighborhoods.
RowMat im2col3x3(const Tensor& x) {
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  RowMat col(ci * 9, h * w);
  for (int c = 0; c < ci; ++c) {
    const double* src = x.data() + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = col.data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = reflect_index(y + ky - 1, h);
          for (int xx = 0; xx < w; ++xx) {
            dst[y * w + xx] = src[sy * w + reflect_index(xx + kx - 1, w)];
          }
        }
      }
    }
  }
  return col;
}

void col2im3x3_add(const RowMat& col, Tensor& gx) {
  const int ci = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  for (int c = 0; c < ci; ++c) {
    double* dst = gx.data() + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = col.data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = reflect_index(y + ky - 1, h);
          for (int xx = 0; xx < w; ++xx) {
            dst[sy * w + reflect_index(xx + kx - 1, w)] += src[y * w + xx];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv3x3(const Var& x, const Var& w, const Var& b) {
  require_map(x, "conv3x3");
  const int ci = x.dim(0), co = w.dim(0), n = spatial(x);
  require(x.dim(1) >= 2 && x.dim(2) >= 2, "conv3x3 needs at least 2x2 input");
  require(w.value().rank() == 2 && w.dim(1) == ci * 9,
          "conv3x3: weight " + shape_to_string(w.shape()) + " does not fit input " +
              shape_to_string(x.shape()));
  const bool has_bias = b.defined();
  auto col = std::make_shared<RowMat>(im2col3x3(x.value()));
  Tensor out({co, x.dim(1), x.dim(2)});
  auto y = mat(out, co, n);
  y.noalias() = mat(w.value(), co, ci * 9) * (*col);
  if (has_bias) y.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), co);
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [col, ci, co, n](Node& self) {
    const auto gy = mat(self.grad, co, n);
    if (Tensor* g = grad_of(self, 0)) {
      RowMat gcol = mat(value_of(self, 1), co, ci * 9).transpose() * gy;
      col2im3x3_add(gcol, *g);
    }
    if (Tensor* g = grad_of(self, 1)) {
      mat(*g, co, ci * 9).noalias() += gy * col->transpose();
    }
    if (self.inputs.size() > 2) {
      if (Tensor* g = grad_of(self, 2)) {
        Eigen::Map<Eigen::VectorXd>(g->data(), co) += gy.rowwise().sum();
      }
    }
  });
}

namespace {

/// Plane with a one-pixel reflect border, row stride w + 2.
void pad_reflect1(const double* src, int h, int w, std::vector<double>& dst) {
  const int pw = w + 2;
  dst.resize(static_cast<std::size_t>(h + 2) * pw);
  for (int y = -1; y <= h; ++y) {
    const double* row = src + static_cast<std::size_t>(reflect_index(y, h)) * w;
    double* out = dst.data() + static_cast<std::size_t>(y + 1) * pw;
    out[0] = row[1];
    std::copy(row, row + w, out + 1);
    out[w + 1] = row[w - 2];
  }
}

/// Adds the border of a padded gradient plane back onto the pixels it mirrors.
void fold_reflect1(const std::vector<double>& padded, int h, int w, double* dst) {
  const int pw = w + 2;
  for (int y = -1; y <= h; ++y) {
    const double* row = padded.data() + static_cast<std::size_t>(y + 1) * pw;
    double* out = dst + static_cast<std::size_t>(reflect_index(y, h)) * w;
    for (int x = 0; x < w; ++x) out[x] += row[x + 1];
    out[1] += row[0];
    out[w - 2] += row[w + 1];
  }
}

}  // namespace

Var dwconv3x3(const Var& x, const Var& w, const Var& b) {
  require_map(x, "dwconv3x3");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  require(h >= 2 && wd >= 2, "dwconv3x3 needs at least 2x2 input");
  require(w.shape() == std::vector<int>{c, 9}, "dwconv3x3: weight must be [C, 9]");
  const bool has_bias = b.defined();
  const int pw = wd + 2;
  Tensor out(x.shape());
  std::vector<double> pad;
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t base = static_cast<std::size_t>(ch) * h * wd;
    pad_reflect1(x.value().data() + base, h, wd, pad);
    const double* k = w.value().data() + ch * 9;
    const double bias = has_bias ? b.value()[ch] : 0.0;
    for (int y = 0; y < h; ++y) {
      double* dst = out.data() + base + static_cast<std::size_t>(y) * wd;
      std::fill(dst, dst + wd, bias);
      for (int ky = 0; ky < 3; ++ky) {
        const double* row = pad.data() + static_cast<std::size_t>(y + ky) * pw;
        for (int kx = 0; kx < 3; ++kx) {
          const double kv = k[ky * 3 + kx];
          const double* src = row + kx;
          for (int xx = 0; xx < wd; ++xx) dst[xx] += kv * src[xx];
        }
      }
    }
  }
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result(std::move(out), std::move(inputs), [c, h, wd, pw](Node& self) {
    Tensor* gx = grad_of(self, 0);
    Tensor* gw = grad_of(self, 1);
    Tensor* gb = self.inputs.size() > 2 ? grad_of(self, 2) : nullptr;
    std::vector<double> pad, gpad;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = static_cast<std::size_t>(ch) * h * wd;
      const double* gy = self.grad.data() + base;
      const double* k = value_of(self, 1).data() + ch * 9;
      if (gb) {
        double acc = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(h) * wd; ++i) acc += gy[i];
        gb->data()[ch] += acc;
      }
      if (gw) {
        pad_reflect1(value_of(self, 0).data() + base, h, wd, pad);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            double acc = 0.0;
            for (int y = 0; y < h; ++y) {
              const double* src = pad.data() + static_cast<std::size_t>(y + ky) * pw + kx;
              const double* g = gy + static_cast<std::size_t>(y) * wd;
              for (int xx = 0; xx < wd; ++xx) acc += g[xx] * src[xx];
            }
            gw->data()[ch * 9 + ky * 3 + kx] += acc;
          }
      }
      if (gx) {
        gpad.assign(static_cast<std::size_t>(h + 2) * pw, 0.0);
        for (int y = 0; y < h; ++y) {
          const double* g = gy + static_cast<std::size_t>(y) * wd;
          for (int ky = 0; ky < 3; ++ky) {
            double* row = gpad.data() + static_cast<std::size_t>(y + ky) * pw;
            for (int kx = 0; kx < 3; ++kx) {
              const double kv = k[ky * 3 + kx];
              double* dst = row + kx;
              for (int xx = 0; xx < wd; ++xx) dst[xx] += kv * g[xx];
            }
          }
        }
        fold_reflect1(gpad, h, wd, gx->data() + base);
      }
    }
  });
}

Var pixel_unshuffle2(const Var& x) {
  require_map(x, "pixel_unshuffle2");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle2 needs even dimensions");
  const int h2 = h / 2, w2 = w / 2;
  Tensor out({4 * c, h2, w2});
  auto src_index = [=](int oc, int y, int xx) {
    const int ch = oc / 4, dy = (oc % 4) / 2, dx = oc % 2;
    return (static_cast<std::size_t>(ch) * h + 2 * y + dy) * w + 2 * xx + dx;
  };
  std::size_t o = 0;
  for (int oc = 0; oc < 4 * c; ++oc)
    for (int y = 0; y < h2; ++y)
      for (int xx = 0; xx < w2; ++xx) out.data()[o++] = x.value()[src_index(oc, y, xx)];
  return make_result(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    std::size_t o = 0;
    for (int oc = 0; oc < 4 * c; ++oc)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) g->data()[src_index(oc, y, xx)] += self.grad[o++];
  });
}

Var pixel_shuffle2(const Var& x) {
  require_map(x, "pixel_shuffle2");
  const int c4 = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(c4 % 4 == 0, "pixel_shuffle2 needs a channel count divisible by 4");
  const int c = c4 / 4;
  Tensor out({c, 2 * h, 2 * w});
  // Output pixel (ch, Y, X) reads input channel ch*4 + (Y%2)*2 + X%2 at (Y/2, X/2).
  auto src_index = [=](int ch, int y, int xx) {
    const int ic = ch * 4 + (y % 2) * 2 + (xx % 2);
    return (static_cast<std::size_t>(ic) * h + y / 2) * w + xx / 2;
  };
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) out.data()[o++] = x.value()[src_index(ch, y, xx)];
  return make_result(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) g->data()[src_index(ch, y, xx)] += self.grad[o++];
  });
}

Var layer_norm_channels(const Var& x, const Var& w, const Var& b, double eps) {
  require_map(x, "layer_norm_channels");
  const int c = x.dim(0), n = spatial(x);
  require(w.size() == static_cast<std::size_t>(c) && b.size() == static_cast<std::size_t>(c),
          "layer_norm_channels: affine size mismatch");
  const auto xs = mat(x.value(), c, n);
  auto stats = std::make_shared<std::pair<Eigen::RowVectorXd, RowMat>>();
  auto& [inv_std, xhat] = *stats;
  const Eigen::RowVectorXd mu = xs.colwise().mean();
  xhat = xs.rowwise() - mu;
  inv_std = ((xhat.array().square().colwise().sum() / c) + eps).rsqrt().matrix();
  xhat.array().rowwise() *= inv_std.array();
  Tensor out(x.shape());
  auto y = mat(out, c, n);
  const Eigen::Map<const Eigen::VectorXd> wv(w.value().data(), c);
  const Eigen::Map<const Eigen::VectorXd> bv(b.value().data(), c);
  y = (xhat.array().colwise() * wv.array()).matrix();
  y.colwise() += bv;
  return make_result(std::move(out), {x, w, b}, [stats, c, n](Node& self) {
    const auto& [inv_std, xhat] = *stats;
    const auto gy = mat(self.grad, c, n);
    if (Tensor* g = grad_of(self, 1)) {
      Eigen::Map<Eigen::VectorXd>(g->data(), c) += (gy.array() * xhat.array()).rowwise().sum().matrix();
    }
    if (Tensor* g = grad_of(self, 2)) {
      Eigen::Map<Eigen::VectorXd>(g->data(), c) += gy.rowwise().sum();
    }
    if (Tensor* g = grad_of(self, 0)) {
      const Eigen::Map<const Eigen::VectorXd> wv(value_of(self, 1).data(), c);
      const RowMat gxhat = (gy.array().colwise() * wv.array()).matrix();
      const Eigen::RowVectorXd m1 = gxhat.colwise().mean();
      const Eigen::RowVectorXd m2 = (gxhat.array() * xhat.array()).colwise().mean().matrix();
      RowMat gx = gxhat.rowwise() - m1;
      gx -= (xhat.array().rowwise() * m2.array()).matrix();
      gx.array().rowwise() *= inv_std.array();
      mat(*g, c, n) += gx;
    }
  });
}

namespace {

void softmax_rows(Eigen::Ref<RowMat> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

/// dS = P o (dP - rowsum(dP o P)), in place on dP.
void softmax_rows_backward(const RowMat& p, RowMat& dp) {
  const Eigen::VectorXd dot = (dp.array() * p.array()).rowwise().sum().matrix();
  dp = (p.array() * (dp.colwise() - dot).array()).matrix();
}

}  // namespace

Var channel_attention(const Var& qkv, const Var& temperature, int heads) {
  require_map(qkv, "channel_attention");
  require(qkv.dim(0) % 3 == 0, "channel_attention expects stacked q/k/v channels");
  const int c = qkv.dim(0) / 3, n = spatial(qkv);
  require(heads >= 1 && c % heads == 0, "channel_attention: channels not divisible by heads");
  require(temperature.size() == static_cast<std::size_t>(heads),
          "channel_attention: temperature must have one entry per head");
  const int dh = c / heads;
  constexpr double kNormEps = 1e-12;
  struct Saved {
    std::vector<RowMat> qhat, khat, prob;
    std::vector<Eigen::VectorXd> qnorm, knorm;
  };
  auto saved = std::make_shared<Saved>();
  Tensor out({c, qkv.dim(1), qkv.dim(2)});
  const double* base = qkv.value().data();
  for (int h = 0; h < heads; ++h) {
    const CMapR q(base + static_cast<std::size_t>(h * dh) * n, dh, n);
    const CMapR k(base + static_cast<std::size_t>(c + h * dh) * n, dh, n);
    const CMapR v(base + static_cast<std::size_t>(2 * c + h * dh) * n, dh, n);
    Eigen::VectorXd qn = q.rowwise().norm().cwiseMax(kNormEps);
    Eigen::VectorXd kn = k.rowwise().norm().cwiseMax(kNormEps);
    RowMat qh = q.array().colwise() / qn.array();
    RowMat kh = k.array().colwise() / kn.array();
    RowMat p = (qh * kh.transpose()) * temperature.value()[h];
    softmax_rows(p);
    MapR(out.data() + static_cast<std::size_t>(h * dh) * n, dh, n).noalias() = p * v;
    saved->qhat.push_back(std::move(qh));
    saved->khat.push_back(std::move(kh));
    saved->prob.push_back(std::move(p));
    saved->qnorm.push_back(std::move(qn));
    saved->knorm.push_back(std::move(kn));
  }
  return make_result(std::move(out), {qkv, temperature}, [saved, c, n, dh, heads](Node& self) {
    Tensor* gqkv = grad_of(self, 0);
    Tensor* gt = grad_of(self, 1);
    const double* base = value_of(self, 0).data();
    for (int h = 0; h < heads; ++h) {
      const CMapR v(base + static_cast<std::size_t>(2 * c + h * dh) * n, dh, n);
      const CMapR go(self.grad.data() + static_cast<std::size_t>(h * dh) * n, dh, n);
      const RowMat& p = saved->prob[h];
      const RowMat& qh = saved->qhat[h];
      const RowMat& kh = saved->khat[h];
      const double t = value_of(self, 1)[h];
      RowMat dp = go * v.transpose();
      softmax_rows_backward(p, dp);  // dp now holds dLogits
      if (gt) {
        const RowMat s = qh * kh.transpose();
        gt->data()[h] += (dp.array() * s.array()).sum();
      }
      if (!gqkv) continue;
      MapR gv(gqkv->data() + static_cast<std::size_t>(2 * c + h * dh) * n, dh, n);
      gv.noalias() += p.transpose() * go;
      const RowMat ds = dp * t;
      RowMat dqh = ds * kh;
      RowMat dkh = ds.transpose() * qh;
      // Backward of row-wise L2 normalization.
      const Eigen::VectorXd qdot = (dqh.array() * qh.array()).rowwise().sum().matrix();
      const Eigen::VectorXd kdot = (dkh.array() * kh.array()).rowwise().sum().matrix();
      MapR gq(gqkv->data() + static_cast<std::size_t>(h * dh) * n, dh, n);
      MapR gk(gqkv->data() + static_cast<std::size_t>(c + h * dh) * n, dh, n);
      gq += ((dqh - (qh.array().colwise() * qdot.array()).matrix()).array().colwise() /
             saved->qnorm[h].array()).matrix();
      gk += ((dkh - (kh.array().colwise() * kdot.array()).matrix()).array().colwise() /
             saved->knorm[h].array()).matrix();
    }
  });
}

std::vector<Tensor> spatial_attention_weights(const Tensor& q, const Tensor& k, int heads) {
  require(q.rank() == 3 && q.shape() == k.shape(), "spatial_attention_weights: shape mismatch");
  const int c = q.dim(0), n = q.dim(1) * q.dim(2);
  require(heads >= 1 && c % heads == 0, "spatial_attention: channels not divisible by heads");
  const int dh = c / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> out;
  for (int h = 0; h < heads; ++h) {
    const CMapR qh(q.data() + static_cast<std::size_t>(h * dh) * n, dh, n);
    const CMapR kh(k.data() + static_cast<std::size_t>(h * dh) * n, dh, n);
    Tensor p({n, n});
    auto pm = mat(p, n, n);
    pm.noalias() = (qh.transpose() * kh) * inv_scale;
    RowMat tmp = pm;
    softmax_rows(tmp);
    pm = tmp;
    out.push_back(std::move(p));
  }
  return out;
}

Var spatial_attention(const Var& q, const Var& k, const Var& v, int heads) {
  require_map(q, "spatial_attention");
  require(q.shape() == k.shape() && q.shape() == v.shape(),
          "spatial_attention: q/k/v dimension mismatch");
  const int c = q.dim(0), n = spatial(q);
  require(heads >= 1 && c % heads == 0, "spatial_attention: channels not divisible by heads");
  const int dh = c / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool record = grad_enabled() &&
                      (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<std::vector<RowMat>>();
  Tensor out(q.shape());
  // Without recording, process query blocks so the N x N matrix is never
  // materialized in full.
  const int block = record ? n : std::min(n, 512);
  for (int h = 0; h < heads; ++h) {
    const CMapR qh(q.value().data() + static_cast<std::size_t>(h * dh) * n, dh, n);
    const CMapR kh(k.value().data() + static_cast<std::size_t>(h * dh) * n, dh, n);
    const CMapR vh(v.value().data() + static_cast<std::size_t>(h * dh) * n, dh, n);
    MapR oh(out.data() + static_cast<std::size_t>(h * dh) * n, dh, n);
    for (int start = 0; start < n; start += block) {
      const int rows = std::min(block, n - start);
      const RowMat qs = qh.middleCols(start, rows) * inv_scale;
      RowMat p(rows, n);
      p.noalias() = qs.transpose() * kh;
      softmax_rows(p);
      oh.middleCols(start, rows).noalias() = vh * p.transpose();
      if (record) probs->push_back(std::move(p));
    }
  }
  return make_result(std::move(out), {q, k, v}, [probs, c, n, dh, heads, inv_scale](Node& self) {
    Tensor* gq = grad_of(self, 0);
    Tensor* gk = grad_of(self, 1);
    Tensor* gv = grad_of(self, 2);
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h * dh) * n;
      const CMapR qh(value_of(self, 0).data() + off, dh, n);
      const CMapR kh(value_of(self, 1).data() + off, dh, n);
      const CMapR vh(value_of(self, 2).data() + off, dh, n);
      const CMapR go(self.grad.data() + off, dh, n);
      const RowMat& p = (*probs)[h];
      if (gv) MapR(gv->data() + off, dh, n).noalias() += go * p;
      if (!gq && !gk) continue;
      RowMat dp(n, n);
      dp.noalias() = go.transpose() * vh;
      for (Eigen::Index r = 0; r < n; ++r) {
        auto row = dp.row(r);
        const auto prow = p.row(r);
        const double dot = prow.dot(row);
        row = (prow.array() * (row.array() - dot) * inv_scale).matrix();
      }
      if (gq) MapR(gq->data() + off, dh, n).noalias() += kh * dp.transpose();
      if (gk) MapR(gk->data() + off, dh, n).noalias() += qh * dp;
    }
    (void)c;
  });
}

Var modulate(const Var& x, const Var& gamma, const Var& beta) {
  require_map(x, "modulate");
  const int c = x.dim(0), n = spatial(x);
  require(gamma.size() == static_cast<std::size_t>(c) && beta.size() == static_cast<std::size_t>(c),
          "modulate: gamma/beta length " + std::to_string(gamma.size()) + "/" +
              std::to_string(beta.size()) + " does not match channel count " +
              std::to_string(c));
  Tensor out(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double s = 1.0 + gamma.value()[ch];
    const double sh = beta.value()[ch];
    const double* src = x.value().data() + static_cast<std::size_t>(ch) * n;
    double* dst = out.data() + static_cast<std::size_t>(ch) * n;
    for (int i = 0; i < n; ++i) dst[i] = s * src[i] + sh;
  }
  return make_result(std::move(out), {x, gamma, beta}, [c, n](Node& self) {
    Tensor* gx = grad_of(self, 0);
    Tensor* gg = grad_of(self, 1);
    Tensor* gb = grad_of(self, 2);
    const auto gy = mat(self.grad, c, n);
    if (gx) {
      for (int ch = 0; ch < c; ++ch) {
        const double s = 1.0 + value_of(self, 1)[ch];
        mat(*gx, c, n).row(ch) += gy.row(ch) * s;
      }
    }
    if (gg) {
      const auto xs = mat(value_of(self, 0), c, n);
      Eigen::Map<Eigen::VectorXd>(gg->data(), c) += (gy.array() * xs.array()).rowwise().sum().matrix();
    }
    if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), c) += gy.rowwise().sum();
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(x.value().rank() == 1, "linear expects a vector input");
  const int d = x.dim(0), o = w.dim(0);
  require(w.value().rank() == 2 && w.dim(1) == d,
          "linear: weight " + shape_to_string(w.shape()) + " does not fit input of length " +
              std::to_string(d));
  require(b.size() == static_cast<std::size_t>(o), "linear: bias size mismatch");
  Tensor out({o});
  Eigen::Map<Eigen::VectorXd>(out.data(), o).noalias() =
      mat(w.value(), o, d) * Eigen::Map<const Eigen::VectorXd>(x.value().data(), d) +
      Eigen::Map<const Eigen::VectorXd>(b.value().data(), o);
  return make_result(std::move(out), {x, w, b}, [d, o](Node& self) {
    const Eigen::Map<const Eigen::VectorXd> gy(self.grad.data(), o);
    if (Tensor* g = grad_of(self, 0)) {
      Eigen::Map<Eigen::VectorXd>(g->data(), d) += mat(value_of(self, 1), o, d).transpose() * gy;
    }
    if (Tensor* g = grad_of(self, 1)) {
      mat(*g, o, d) += gy * Eigen::Map<const Eigen::RowVectorXd>(value_of(self, 0).data(), d);
    }
    if (Tensor* g = grad_of(self, 2)) Eigen::Map<Eigen::VectorXd>(g->data(), o) += gy;
  });
}

namespace {

Var color_transform(const Var& rgb, std::vector<std::array<double, 3>> rows,
                    std::vector<double> offsets) {
  require_map(rgb, "color transform");
  require(rgb.dim(0) == 3, "color transform expects 3 channels");
  const int n = spatial(rgb);
  const int m = static_cast<int>(rows.size());
  Tensor out({m, rgb.dim(1), rgb.dim(2)});
  const double* r = rgb.value().data();
  const double* g = r + n;
  const double* b = g + n;
  for (int k = 0; k < m; ++k) {
    double* dst = out.data() + static_cast<std::size_t>(k) * n;
    for (int i = 0; i < n; ++i) {
      dst[i] = rows[k][0] * r[i] + rows[k][1] * g[i] + rows[k][2] * b[i] + offsets[k];
    }
  }
  return make_result(std::move(out), {rgb}, [rows, m, n](Node& self) {
    Tensor* gx = grad_of(self, 0);
    if (!gx) return;
    for (int k = 0; k < m; ++k) {
      const double* gy = self.grad.data() + static_cast<std::size_t>(k) * n;
      for (int ch = 0; ch < 3; ++ch) {
        double* dst = gx->data() + static_cast<std::size_t>(ch) * n;
        const double wgt = rows[k][ch];
        for (int i = 0; i < n; ++i) dst[i] += wgt * gy[i];
      }
    }
  });
}

}  // namespace

Var rgb_to_luma(const Var& rgb) {
  return color_transform(rgb, {kLumaWeights}, {0.0});
}

Var rgb_to_cbcr(const Var& rgb) {
  return color_transform(rgb, {kCbWeights, kCrWeights}, {0.5, 0.5});
}

namespace {

/// Source index of every tap: table[i * taps + k] for output position i.
std::vector<int> tap_table(int n, int r) {
  std::vector<int> t;
  t.reserve(static_cast<std::size_t>(n) * (2 * r + 1));
  for (int i = 0; i < n; ++i)
    for (int k = -r; k <= r; ++k) t.push_back(reflect_index(i + k, n));
  return t;
}

/// One separable pass along rows (horizontal=true) or columns.
void filter_pass(const double* src, double* dst, int h, int w,
                 std::span<const double> kernel, bool horizontal) {
  const int taps = static_cast<int>(kernel.size()), r = taps / 2;
  if (horizontal) {
    const auto idx = tap_table(w, r);
    for (int y = 0; y < h; ++y) {
      const double* row = src + static_cast<std::size_t>(y) * w;
      double* out = dst + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        const int* ix = idx.data() + static_cast<std::size_t>(x) * taps;
        double acc = 0.0;
        for (int k = 0; k < taps; ++k) acc += kernel[k] * row[ix[k]];
        out[x] = acc;
      }
    }
  } else {
    const auto idx = tap_table(h, r);
    std::fill(dst, dst + static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y) {
      double* out = dst + static_cast<std::size_t>(y) * w;
      const int* iy = idx.data() + static_cast<std::size_t>(y) * taps;
      for (int k = 0; k < taps; ++k) {
        const double* row = src + static_cast<std::size_t>(iy[k]) * w;
        const double kv = kernel[k];
        for (int x = 0; x < w; ++x) out[x] += kv * row[x];
      }
    }
  }
}

/// Adjoint of filter_pass: scatters dst-gradients back to src.
void filter_pass_adjoint(const double* gdst, double* gsrc, int h, int w,
                         std::span<const double> kernel, bool horizontal) {
  const int taps = static_cast<int>(kernel.size()), r = taps / 2;
  if (horizontal) {
    const auto idx = tap_table(w, r);
    for (int y = 0; y < h; ++y) {
      const double* g = gdst + static_cast<std::size_t>(y) * w;
      double* out = gsrc + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        const int* ix = idx.data() + static_cast<std::size_t>(x) * taps;
        for (int k = 0; k < taps; ++k) out[ix[k]] += kernel[k] * g[x];
      }
    }
  } else {
    const auto idx = tap_table(h, r);
    for (int y = 0; y < h; ++y) {
      const double* g = gdst + static_cast<std::size_t>(y) * w;
      const int* iy = idx.data() + static_cast<std::size_t>(y) * taps;
      for (int k = 0; k < taps; ++k) {
        double* out = gsrc + static_cast<std::size_t>(iy[k]) * w;
        const double kv = kernel[k];
        for (int x = 0; x < w; ++x) out[x] += kv * g[x];
      }
    }
  }
}

}  // namespace

Var separable_filter(const Var& x, std::span<const double> kernel) {
  require_map(x, "separable_filter");
  require(kernel.size() % 2 == 1, "separable_filter needs an odd kernel");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), n = h * w;
  const int r = static_cast<int>(kernel.size()) / 2;
  require(r < h && r < w, "separable_filter: kernel radius exceeds image size");
  std::vector<double> k(kernel.begin(), kernel.end());
  Tensor out(x.shape());
  std::vector<double> tmp(n);
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t off = static_cast<std::size_t>(ch) * n;
    filter_pass(x.value().data() + off, tmp.data(), h, w, k, true);
    filter_pass(tmp.data(), out.data() + off, h, w, k, false);
  }
  return make_result(std::move(out), {x}, [k, c, h, w, n](Node& self) {
    Tensor* gx = grad_of(self, 0);
    if (!gx) return;
    std::vector<double> tmp(n);
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = static_cast<std::size_t>(ch) * n;
      std::fill(tmp.begin(), tmp.end(), 0.0);
      filter_pass_adjoint(self.grad.data() + off, tmp.data(), h, w, k, false);
      filter_pass_adjoint(tmp.data(), gx->data() + off, h, w, k, true);
    }
  });
}

Var sobel_magnitude(const Var& x) {
  require_map(x, "sobel_magnitude");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), n = h * w;
  require(h >= 3 && w >= 3, "sobel_magnitude needs an image of at least 3x3");
  // Per-pixel 3x3 weights of gx and gy, indexed [ky][kx].
  static constexpr double kx_w[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr double ky_w[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  auto gxs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c) * n);
  auto gys = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c) * n);
  Tensor out(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.value().data() + static_cast<std::size_t>(ch) * n;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const int ym = reflect_index(y - 1, h), yp = reflect_index(y + 1, h);
        const int xm = reflect_index(xx - 1, w), xp = reflect_index(xx + 1, w);
        auto p = [&](int yy, int xc) { return src[yy * w + xc]; };
        const double gx = ((p(ym, xp) + 2.0 * p(y, xp) + p(yp, xp)) -
                           (p(ym, xm) + 2.0 * p(y, xm) + p(yp, xm))) / 8.0;
        const double gy = ((p(yp, xm) + 2.0 * p(yp, xx) + p(yp, xp)) -
                           (p(ym, xm) + 2.0 * p(ym, xx) + p(ym, xp))) / 8.0;
        const std::size_t i = static_cast<std::size_t>(ch) * n + y * w + xx;
        (*gxs)[i] = gx;
        (*gys)[i] = gy;
        out.data()[i] = std::sqrt(gx * gx + gy * gy);
      }
    }
  }
  return make_result(std::move(out), {x}, [gxs, gys, c, h, w, n](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int ch = 0; ch < c; ++ch) {
      double* dst = g->data() + static_cast<std::size_t>(ch) * n;
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          const std::size_t i = static_cast<std::size_t>(ch) * n + y * w + xx;
          const double mag = self.value[i];
          if (mag == 0.0) continue;
          const double dgx = self.grad[i] * (*gxs)[i] / mag / 8.0;
          const double dgy = self.grad[i] * (*gys)[i] / mag / 8.0;
          for (int dy = 0; dy < 3; ++dy) {
            const int sy = reflect_index(y + dy - 1, h);
            for (int dx = 0; dx < 3; ++dx) {
              dst[sy * w + reflect_index(xx + dx - 1, w)] +=
                  kx_w[dy][dx] * dgx + ky_w[dy][dx] * dgy;
            }
          }
        }
      }
    }
  });
}

}  // namespace textif::ag
