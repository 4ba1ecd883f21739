// Observation model: spatial degradation (blur then decimate) and spectral
// degradation (band mixing through the SRF), their adjoints, kernel and SRF
// generators, and SNR-calibrated white Gaussian noise.
//
// Conventions:
//   * Blur is a correlation (the kernel is not flipped) with mirror padding
//     that does not repeat the edge sample (x[-1] = x[1]).
//   * Decimation by s keeps rows/cols floor(s/2) + i*s.
//   * SNR is referenced to the mean signal power mean(x^2).

#ifndef HSIFUSE_DEGENERATION_H_
#define HSIFUSE_DEGENERATION_H_

#include <limits>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "hsifuse/core.h"

namespace hsifuse {

struct GaussianSpec {
  int size = 7;
  double sigma = 1.0;
};

// Line segment of `length` pixels at `angle` radians from the +col axis
// (positive angles turn towards +row), `thickness` pixels wide.
struct MotionSpec {
  int length = 7;
  double angle = 0.0;
  double thickness = 1.0;
};

using KernelSpec = std::variant<GaussianSpec, MotionSpec, BlurKernel>;

struct DegenerationConfig {
  int scale = 1;
  KernelSpec kernel = BlurKernel();
  SrfMatrix srf_base;
  // Unset: srf_base is used as given. Set (including 0): perturb_srf applied.
  std::optional<double> srf_perturb_c;
  double snr_hsi_db = std::numeric_limits<double>::infinity();
  double snr_msi_db = std::numeric_limits<double>::infinity();
};

BlurKernel gaussian_kernel(const GaussianSpec& spec);
BlurKernel motion_kernel(const MotionSpec& spec);
BlurKernel make_kernel(const KernelSpec& spec);

// Broad Gaussian band responses with centres spread evenly over the B input
// bands, rows normalized to one. Stands in for a camera SRF.
SrfMatrix default_srf(int out_bands, int in_bands);

// Row-wise softmax(kappa * base + c * E) with E a standard-normal matrix drawn
// from `rng`. kappa defaults to the number of input bands.
SrfMatrix perturb_srf(const SrfMatrix& base, double c, Rng& rng,
                      std::optional<double> kappa = std::nullopt);

// Phi: per-band blur and decimation. `weights` may be any K x K array (used
// by the solvers on unprojected iterates).
HsiCube spatial_degrade(const HsiCube& z, const BlurKernel& k, int s);
HsiCube spatial_degrade(const HsiCube& z, int ksize,
                        std::span<const double> weights, int s);
// Phi^T for a high-resolution target shape.
HsiCube spatial_degrade_adjoint(const HsiCube& x, const BlurKernel& k, int s,
                                const CubeShape& out_shape);
HsiCube spatial_degrade_adjoint(const HsiCube& x, int ksize,
                                std::span<const double> weights, int s,
                                const CubeShape& out_shape);
// Gradient of <r, Phi_k(z)> with respect to the K x K kernel weights.
std::vector<double> spatial_kernel_adjoint(const HsiCube& z, const HsiCube& r,
                                           int ksize, int s);

// Psi: out[j] = sum_i p[j, i] z[i]. `weights` is b x B row-major.
HsiCube spectral_degrade(const HsiCube& z, const SrfMatrix& p);
HsiCube spectral_degrade(const HsiCube& z, int out_bands,
                         std::span<const double> weights);
HsiCube spectral_degrade_adjoint(const HsiCube& y, const SrfMatrix& p);
HsiCube spectral_degrade_adjoint(const HsiCube& y, int in_bands,
                                 std::span<const double> weights);

HsiCube add_awgn(const HsiCube& x, double snr_db, Rng& rng);

struct SimulatedPair {
  HsiCube lr_hsi;  // X
  HsiCube hr_msi;  // Y
  BlurKernel kernel;
  SrfMatrix srf;
};

// Draw order from `rng`: SRF perturbation, then X noise, then Y noise.
SimulatedPair simulate_pair(const HsiCube& z, const DegenerationConfig& cfg,
                            Rng& rng);

}  // namespace hsifuse

#endif  // HSIFUSE_DEGENERATION_H_
