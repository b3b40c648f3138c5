#include "textif/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"
#include "textif/losses.hpp"

namespace textif {

namespace {

constexpr double kZeroVariance = 1e-14;

struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane plane255(const Image& img) {
  const Image y = luminance(img);
  Plane p{y.height(), y.width(), {}};
  p.v.reserve(y.pixel_count());
  for (double x : y.channel(0)) p.v.push_back(x * 255.0);
  return p;
}

void require_aligned(const Image& a, const Image& b, const Image& c) {
  if (a.height() != b.height() || a.width() != b.width() || a.height() != c.height() ||
      a.width() != c.width()) {
    throw InvalidInput("metric inputs must have equal dimensions");
  }
}

double variance(std::span<const double> a) {
  if (a.empty()) return 0.0;
  const double shift = a.front();
  double m = 0.0;
  for (double x : a) m += x - shift;
  m /= static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a) s += (x - shift - m) * (x - shift - m);
  return s / static_cast<double>(a.size());
}

/// 'valid' correlation with a separable kernel.
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  Plane tmp{in.h, in.w - n + 1, {}};
  tmp.v.assign(static_cast<std::size_t>(tmp.h) * tmp.w, 0.0);
  for (int y = 0; y < tmp.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * in.at(y, x + i);
      tmp.v[static_cast<std::size_t>(y) * tmp.w + x] = acc;
    }
  Plane out{in.h - n + 1, tmp.w, {}};
  out.v.assign(static_cast<std::size_t>(out.h) * out.w, 0.0);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * tmp.at(y + i, x);
      out.v[static_cast<std::size_t>(y) * out.w + x] = acc;
    }
  return out;
}

Plane downsample2(const Plane& in) {
  Plane out{(in.h + 1) / 2, (in.w + 1) / 2, {}};
  for (int y = 0; y < in.h; y += 2)
    for (int x = 0; x < in.w; x += 2) out.v.push_back(in.at(y, x));
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

constexpr int kVifScales = 4;

int vif_window(int scale) { return (1 << (kVifScales - scale + 1)) + 1; }

}  // namespace

nlohmann::json MetricReport::to_json() const {
  return {{"scd", scd}, {"sd", sd}, {"en", en}, {"vif", vif}, {"qabf", qabf}, {"sf", sf}};
}

double metric_sd(const Image& img) {
  const Plane p = plane255(img);
  return std::sqrt(variance(p.v));
}

double metric_en(const Image& img) {
  const auto counts = histogram256(luminance(img));
  const double n = static_cast<double>(img.pixel_count());
  double en = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    en -= p * std::log2(p);
  }
  return std::max(en, 0.0);
}

double metric_sf(const Image& img) {
  const Plane p = plane255(img);
  double rf = 0.0, cf = 0.0;
  if (p.w > 1) {
    for (int y = 0; y < p.h; ++y)
      for (int x = 1; x < p.w; ++x) {
        const double d = p.at(y, x) - p.at(y, x - 1);
        rf += d * d;
      }
    rf /= static_cast<double>(p.h) * (p.w - 1);
  }
  if (p.h > 1) {
    for (int y = 1; y < p.h; ++y)
      for (int x = 0; x < p.w; ++x) {
        const double d = p.at(y, x) - p.at(y - 1, x);
        cf += d * d;
      }
    cf /= static_cast<double>(p.h - 1) * p.w;
  }
  return std::sqrt(rf + cf);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw InvalidInput("pearson: size mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa / n <= kZeroVariance || sbb / n <= kZeroVariance) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double metric_scd(const Image& fused, const Image& vis, const Image& ir) {
  require_aligned(fused, vis, ir);
  const Image f = luminance(fused), a = luminance(vis), b = luminance(ir);
  const auto fv = f.channel(0), av = a.channel(0), bv = b.channel(0);
  const bool a_flat = variance(av) <= kZeroVariance;
  const bool b_flat = variance(bv) <= kZeroVariance;
  std::vector<double> diff(fv.size());
  auto term = [&](std::span<const double> removed, bool removed_flat,
                  std::span<const double> other, bool other_flat) {
    if (removed_flat || other_flat) return 0.0;
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = fv[i] - removed[i];
    return pearson(diff, other);
  };
  return term(av, a_flat, bv, b_flat) + term(bv, b_flat, av, a_flat);
}

int vif_min_size() {
  // Smallest n for which every scale leaves at least one valid window.
  for (int n = 1;; ++n) {
    int s = n;
    bool ok = true;
    for (int scale = 1; scale <= kVifScales && ok; ++scale) {
      const int win = vif_window(scale);
      if (scale > 1) {
        if (s < win) { ok = false; break; }
        s = (s - win + 1 + 1) / 2;
      }
      ok = s >= win;
    }
    if (ok) return n;
  }
}

double vif_single(const Image& ref_img, const Image& dist_img) {
  if (ref_img.height() != dist_img.height() || ref_img.width() != dist_img.width()) {
    throw InvalidInput("vif inputs must have equal dimensions");
  }
  const int min_side = vif_min_size();
  if (ref_img.height() < min_side || ref_img.width() < min_side) {
    throw InvalidInput("image too small for VIF (need at least " + std::to_string(min_side) +
                       " pixels per side)");
  }
  constexpr double kSigmaNsq = 2.0;
  constexpr double kEps = 1e-10;
  Plane ref = plane255(ref_img), dist = plane255(dist_img);
  double num = 0.0, den = 0.0;
  for (int scale = 1; scale <= kVifScales; ++scale) {
    const int n = vif_window(scale);
    const auto k = gaussian_kernel(n, n / 5.0);
    if (scale > 1) {
      ref = downsample2(filter_valid(ref, k));
      dist = downsample2(filter_valid(dist, k));
    }
    const Plane mu1 = filter_valid(ref, k), mu2 = filter_valid(dist, k);
    const Plane e11 = filter_valid(product(ref, ref), k);
    const Plane e22 = filter_valid(product(dist, dist), k);
    const Plane e12 = filter_valid(product(ref, dist), k);
    for (std::size_t i = 0; i < mu1.v.size(); ++i) {
      double s1 = std::max(e11.v[i] - mu1.v[i] * mu1.v[i], 0.0);
      const double s2 = std::max(e22.v[i] - mu2.v[i] * mu2.v[i], 0.0);
      const double s12 = e12.v[i] - mu1.v[i] * mu2.v[i];
      double g = s12 / (s1 + kEps);
      double sv = s2 - g * s12;
      if (s1 < kEps) {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
      }
      if (s2 < kEps) {
        g = 0.0;
        sv = 0.0;
      }
      if (g < 0.0) {
        sv = s2;
        g = 0.0;
      }
      sv = std::max(sv, kEps);
      num += std::log10(1.0 + g * g * s1 / (sv + kSigmaNsq));
      den += std::log10(1.0 + s1 / kSigmaNsq);
    }
  }
  return (num + kEps) / (den + kEps);
}

double metric_vif(const Image& fused, const Image& vis, const Image& ir) {
  require_aligned(fused, vis, ir);
  return 0.5 * (vif_single(vis, fused) + vif_single(ir, fused));
}

namespace {

double edge_orientation(double gx, double gy) {
  return gx == 0.0 ? std::numbers::pi / 2.0 : std::atan(gy / gx);
}

}  // namespace

double metric_qabf(const Image& fused, const Image& vis, const Image& ir) {
  require_aligned(fused, vis, ir);
  const auto sf = sobel_gradient(luminance(fused));
  const auto sa = sobel_gradient(luminance(vis));
  const auto sb = sobel_gradient(luminance(ir));
  const std::size_t n = sf.magnitude.values.size();
  auto preservation = [&](const SobelResult& src, std::size_t i) {
    const double gs = src.magnitude.values[i], gf = sf.magnitude.values[i];
    double g_ratio;
    if (gs > gf) g_ratio = gf / gs;
    else if (gs < gf) g_ratio = gs / gf;
    else g_ratio = 1.0;
    const double as = edge_orientation(src.gx.values[i], src.gy.values[i]);
    const double af = edge_orientation(sf.gx.values[i], sf.gy.values[i]);
    const double turn = std::abs(as - af);
    const double a_ratio = 1.0 - std::min(turn, std::numbers::pi - turn) / (std::numbers::pi / 2.0);
    const double qg = kQabfGammaG / (1.0 + std::exp(kQabfKappaG * (g_ratio - kQabfSigmaG)));
    const double qa = kQabfGammaA / (1.0 + std::exp(kQabfKappaA * (a_ratio - kQabfSigmaA)));
    return qg * qa;
  };
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double wa = sa.magnitude.values[i], wb = sb.magnitude.values[i];
    num += preservation(sa, i) * wa + preservation(sb, i) * wb;
    den += wa + wb;
  }
  if (den <= 0.0) return 0.0;
  return std::clamp(num / den, 0.0, 1.0);
}

MetricReport evaluate_metrics(const Image& fused, const Image& vis, const Image& ir,
                              bool fast) {
  require_aligned(fused, vis, ir);
  MetricReport r;
  r.scd = metric_scd(fused, vis, ir);
  r.sd = metric_sd(fused);
  r.en = metric_en(fused);
  r.sf = metric_sf(fused);
  if (!fast) {
    r.vif = metric_vif(fused, vis, ir);
    r.qabf = metric_qabf(fused, vis, ir);
  }
  return r;
}

MetricReport mean_report(std::span<const MetricReport> reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const MetricReport& r : reports) {
    m.scd += r.scd;
    m.sd += r.sd;
    m.en += r.en;
    m.vif += r.vif;
    m.qabf += r.qabf;
    m.sf += r.sf;
  }
  const double n = static_cast<double>(reports.size());
  m.scd /= n;
  m.sd /= n;
  m.en /= n;
  m.vif /= n;
  m.qabf /= n;
  m.sf /= n;
  return m;
}

}  // namespace textif
