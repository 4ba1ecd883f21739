// Full-reference quality metrics between a reference and an estimated cube.

#ifndef HSIFUSE_METRICS_H_
#define HSIFUSE_METRICS_H_

#include <string>

#include "hsifuse/core.h"

namespace hsifuse {

inline constexpr double kPsnrCap = 100.0;

struct MetricReport {
  double rmse = 0.0;  // 0-255 scale
  double psnr = 0.0;  // dB, per-band average on [0, 1]
  double sam = 0.0;   // degrees
  double ssim = 0.0;

  // "rmse,psnr,sam,ssim" with four decimals.
  std::string csv_row() const;
  static std::string csv_header() { return "rmse,psnr,sam,ssim"; }
};

double rmse(const HsiCube& ref, const HsiCube& est);
// Mean over bands of 10 log10(1 / MSE_band), each band capped at kPsnrCap.
double psnr(const HsiCube& ref, const HsiCube& est);
// Mean per-pixel spectral angle in degrees; near-zero spectra count as 0.
double sam(const HsiCube& ref, const HsiCube& est);
// Gaussian-window (11x11, sigma 1.5) SSIM over the valid region of each band,
// averaged over bands.
double ssim(const HsiCube& ref, const HsiCube& est);

MetricReport evaluate(const HsiCube& ref, const HsiCube& est);

}  // namespace hsifuse

#endif  // HSIFUSE_METRICS_H_
