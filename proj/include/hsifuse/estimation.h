// Degeneration-operator updates: ridge-regularized least squares for the blur
// kernel given (X, Z) and for the SRF given (Y, Z), followed by projection
// onto the feasible sets (nonnegative, unit sum).

#ifndef HSIFUSE_ESTIMATION_H_
#define HSIFUSE_ESTIMATION_H_

#include <span>
#include <vector>

#include "hsifuse/core.h"

namespace hsifuse {

enum class EstimationSolver { kConjugateGradient, kGradientDescent };

struct EstimationConfig {
  double eta = 1e-6;  // kernel ridge weight
  double xi = 1e-6;   // SRF ridge weight
  int inner_iters = 10;
  EstimationSolver solver = EstimationSolver::kConjugateGradient;
  double lr = 1e-4;  // gradient-descent step
  // Interpret lr in units of 1/L, L the Lipschitz constant of the gradient.
  bool lr_relative = false;
  // With CG and B <= 64 the SRF is solved in closed form; set false to run
  // inner_iters warm-started CG iterations instead.
  bool srf_closed_form = true;
};

void validate(const EstimationConfig& cfg);

// Raised when the objective increases five iterations in a row.
class DivergenceError : public SolverError {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : SolverError(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

struct KernelEstimate {
  BlurKernel kernel;
  std::vector<double> raw;          // solver iterate before projection
  std::vector<double> loss_trace;   // objective at the start and after each iteration
};

struct SrfEstimate {
  SrfMatrix srf;
  std::vector<double> raw;
  std::vector<double> loss_trace;
};

// min_k ||X - (k * Z) decimated by s||^2 + eta ||k||^2, started at k_init.
KernelEstimate estimate_kernel_step(const HsiCube& x, const HsiCube& z, int s,
                                    const BlurKernel& k_init,
                                    const EstimationConfig& cfg);

// min_P ||Y - P Z||^2 + xi ||P||^2, started at p_init when iterative.
SrfEstimate estimate_srf_step(const HsiCube& y, const HsiCube& z,
                              const SrfMatrix& p_init,
                              const EstimationConfig& cfg);

// Clamp negatives to zero and rescale to unit sum; all-zero maps to uniform.
std::vector<double> clamp_normalize(std::span<const double> raw);
BlurKernel project_kernel(int size, std::span<const double> raw);
SrfMatrix project_srf(int out_bands, int in_bands, std::span<const double> raw);

double kernel_objective(const HsiCube& x, const HsiCube& z, int s, int ksize,
                        std::span<const double> weights, double eta);
double srf_objective(const HsiCube& y, const HsiCube& z, int out_bands,
                     std::span<const double> weights, double xi);

// ||est - truth|| / ||truth||; the smaller kernel is zero-padded to the
// larger canvas around the centre.
double kernel_relative_error(const BlurKernel& est, const BlurKernel& truth);
double srf_relative_error(const SrfMatrix& est, const SrfMatrix& truth);
// Embed a kernel into a larger odd canvas (or crop and renormalize).
BlurKernel resize_kernel(const BlurKernel& k, int size);

}  // namespace hsifuse

#endif  // HSIFUSE_ESTIMATION_H_
