#pragma once

#include <span>

#include <nlohmann/json_fwd.hpp>

#include "textif/image.hpp"

namespace textif {

// Reference-free and reference-based fusion metrics. Inputs may be RGB or
// gray; RGB is reduced to BT.601 luminance first. SD, SF and VIF work on the
// 0..255 scale.

struct MetricReport {
  double scd = 0.0;
  double sd = 0.0;
  double en = 0.0;
  double vif = 0.0;
  double qabf = 0.0;
  double sf = 0.0;

  nlohmann::json to_json() const;
};

/// Population standard deviation.
double metric_sd(const Image& img);
/// Shannon entropy (bits) of the 256-bin histogram, in [0, 8].
double metric_en(const Image& img);
/// sqrt(RF^2 + CF^2), RF/CF the RMS of horizontal/vertical first differences.
double metric_sf(const Image& img);

/// Pearson correlation; 0 when either operand has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

/// r(F - A, B) + r(F - B, A). A term is 0 when its difference image or
/// either source it involves has zero variance.
double metric_scd(const Image& fused, const Image& vis, const Image& ir);

/// Pixel-domain VIF of `dist` against `ref` over four dyadic scales.
double vif_single(const Image& ref, const Image& dist);
/// Mean of the per-source VIF values.
double metric_vif(const Image& fused, const Image& vis, const Image& ir);
/// Smallest side length vif_single accepts.
int vif_min_size();

inline constexpr double kQabfGammaG = 0.9994;
inline constexpr double kQabfKappaG = -15.0;
inline constexpr double kQabfSigmaG = 0.5;
inline constexpr double kQabfGammaA = 0.9879;
inline constexpr double kQabfKappaA = -22.0;
inline constexpr double kQabfSigmaA = 0.8;

/// Xydeas-Petrovic gradient preservation, in [0, 1]; 0 when neither source
/// has any edge. Orientations are compared as undirected lines, so the
/// angle between them is at most pi/2.
double metric_qabf(const Image& fused, const Image& vis, const Image& ir);

/// All six metrics. Set `fast` to skip VIF and Q^AB/F (left at 0).
MetricReport evaluate_metrics(const Image& fused, const Image& vis, const Image& ir,
                              bool fast = false);

MetricReport mean_report(std::span<const MetricReport> reports);

}  // namespace textif
