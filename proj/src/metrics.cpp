#include "hsifuse/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace hsifuse {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> ssim_taps() {
  std::vector<double> g(kSsimWindow);
  const int r = kSsimWindow / 2;
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    g[i] = std::exp(-((i - r) * (i - r)) / (2.0 * kSsimSigma * kSsimSigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  return g;
}

// Separable 'valid' filtering of an h x w plane by the SSIM window.
std::vector<double> filter_valid(const std::vector<double>& in, int h, int w,
                                 const std::vector<double>& g) {
  const int oh = h - kSsimWindow + 1;
  const int ow = w - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double v = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) v += g[k] * in[y * w + x + k];
      tmp[y * ow + x] = v;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double v = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) v += g[k] * tmp[(y + k) * ow + x];
      out[y * ow + x] = v;
    }
  }
  return out;
}

}  // namespace

std::string MetricReport::csv_row() const {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f", rmse, psnr, sam,
                ssim);
  return buf;
}

double rmse(const HsiCube& ref, const HsiCube& est) {
  require_same_shape(ref, est, "rmse");
  double acc = 0.0;
  auto r = ref.data();
  auto e = est.data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = 255.0 * r[i] - 255.0 * e[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(r.size()));
}

double psnr(const HsiCube& ref, const HsiCube& est) {
  require_same_shape(ref, est, "psnr");
  double total = 0.0;
  for (int b = 0; b < ref.bands(); ++b) {
    auto r = ref.band(b);
    auto e = est.band(b);
    double mse = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double d = r[i] - e[i];
      mse += d * d;
    }
    mse /= static_cast<double>(r.size());
    total += mse > 0.0 ? std::min(kPsnrCap, -10.0 * std::log10(mse)) : kPsnrCap;
  }
  return total / ref.bands();
}

double sam(const HsiCube& ref, const HsiCube& est) {
  require_same_shape(ref, est, "sam");
  const std::size_t plane = ref.shape().plane();
  const int bands = ref.bands();
  auto r = ref.data();
  auto e = est.data();
  double total = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    double rr = 0.0, ee = 0.0;
    for (int b = 0; b < bands; ++b) {
      const double rv = r[b * plane + p];
      const double ev = e[b * plane + p];
      rr += rv * rv;
      ee += ev * ev;
    }
    const double nr = std::sqrt(rr);
    const double ne = std::sqrt(ee);
    if (nr < 1e-12 || ne < 1e-12) continue;
    // 2 atan2(|u - v|, |u + v|) for unit u, v: exact 0 for parallel spectra,
    // no loss of precision near 0 or 180 degrees.
    double dm = 0.0, dp = 0.0;
    for (int b = 0; b < bands; ++b) {
      const double u = r[b * plane + p] / nr;
      const double v = e[b * plane + p] / ne;
      dm += (u - v) * (u - v);
      dp += (u + v) * (u + v);
    }
    total += 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp));
  }
  return total / static_cast<double>(plane) * 180.0 / std::numbers::pi;
}

double ssim(const HsiCube& ref, const HsiCube& est) {
  require_same_shape(ref, est, "ssim");
  const int h = ref.height();
  const int w = ref.width();
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ShapeError("ssim: image smaller than the 11x11 window");
  }
  const auto g = ssim_taps();
  const std::size_t plane = ref.shape().plane();
  double total = 0.0;
  std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
  for (int band = 0; band < ref.bands(); ++band) {
    auto r = ref.band(band);
    auto e = est.band(band);
    for (std::size_t i = 0; i < plane; ++i) {
      a[i] = r[i];
      b[i] = e[i];
      aa[i] = r[i] * r[i];
      bb[i] = e[i] * e[i];
      ab[i] = r[i] * e[i];
    }
    const auto mu_a = filter_valid(a, h, w, g);
    const auto mu_b = filter_valid(b, h, w, g);
    const auto s_aa = filter_valid(aa, h, w, g);
    const auto s_bb = filter_valid(bb, h, w, g);
    const auto s_ab = filter_valid(ab, h, w, g);
    double band_sum = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i];
      const double mb = mu_b[i];
      const double va = s_aa[i] - ma * ma;
      const double vb = s_bb[i] - mb * mb;
      const double cov = s_ab[i] - ma * mb;
      band_sum += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                  ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
    }
    total += band_sum / static_cast<double>(mu_a.size());
  }
  return total / ref.bands();
}

MetricReport evaluate(const HsiCube& ref, const HsiCube& est) {
  return {rmse(ref, est), psnr(ref, est), sam(ref, est), ssim(ref, est)};
}

}  // namespace hsifuse
