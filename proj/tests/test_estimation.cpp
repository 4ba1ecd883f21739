#include <doctest.h>

#include <cmath>

#include "helpers.h"
#include "hsifuse/degeneration.h"
#include "hsifuse/estimation.h"
#include "hsifuse/scene.h"

using namespace hsifuse;
using hsifuse::test::random_cube;
using hsifuse::test::random_srf;

namespace {

double vec_norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void check_nonincreasing(const std::vector<double>& trace) {
  for (std::size_t i = 1; i < trace.size(); ++i) {
    CHECK(trace[i] <= trace[i - 1] + 1e-12 * std::abs(trace[i - 1]));
  }
}

}  // namespace

TEST_CASE("projection") {
  std::vector<double> f = {0.2, 0.3, 0.5};
  CHECK(clamp_normalize(f) == f);
  auto p = clamp_normalize(std::vector<double>{-1, 1, 1});
  CHECK(p[0] == 0.0);
  CHECK(p[1] == 0.5);
  CHECK(p[2] == 0.5);
  CHECK(clamp_normalize(std::vector<double>(4, 0.0)) == std::vector<double>(4, 0.25));
  SrfMatrix s = project_srf(2, 2, std::vector<double>{-3, 1, 0, 0});
  CHECK(s.at(0, 0) == 0.0);
  CHECK(s.at(0, 1) == 1.0);
  CHECK(s.at(1, 0) == 0.5);
  BlurKernel k = project_kernel(3, std::vector<double>(9, -1.0));
  CHECK(k.at(1, 1) == doctest::Approx(1.0 / 9));
}

TEST_CASE("kernel recovery from noiseless data") {
  Rng rng(1);
  HsiCube z = random_cube(8, 32, 32, rng);
  BlurKernel truth = gaussian_kernel({7, 1.3});
  HsiCube x = spatial_degrade(z, truth, 2);
  EstimationConfig cfg;
  cfg.eta = 0.0;
  double prev = 1e9;
  for (int budget : {50, 200, 500}) {
    cfg.inner_iters = budget;
    KernelEstimate e = estimate_kernel_step(x, z, 2, BlurKernel::delta(7), cfg);
    const double err = kernel_relative_error(e.kernel, truth);
    CHECK(err <= prev);
    prev = err;
    check_nonincreasing(e.loss_trace);
    CHECK(e.loss_trace.size() == static_cast<std::size_t>(budget) + 1);
  }
  CHECK(prev < 1e-2);
}

TEST_CASE("kernel step fixed point and ridge limit") {
  Rng rng(2);
  HsiCube z = random_cube(3, 12, 12, rng);
  EstimationConfig cfg;
  cfg.eta = 0.0;
  cfg.inner_iters = 20;
  KernelEstimate e = estimate_kernel_step(z, z, 1, BlurKernel::delta(5), cfg);
  for (int i = 0; i < 25; ++i) CHECK(e.kernel.weights()[i] == doctest::Approx(i == 12 ? 1.0 : 0.0));

  cfg.eta = 1e6;
  cfg.inner_iters = 50;
  KernelEstimate big = estimate_kernel_step(z, z, 1, BlurKernel::delta(5), cfg);
  CHECK(vec_norm(big.raw) < 1e-3);
  for (double w : big.kernel.weights()) CHECK(w == doctest::Approx(1.0 / 25).epsilon(5e-2));
}

TEST_CASE("kernel gradient descent") {
  Rng rng(3);
  HsiCube z = random_cube(4, 16, 16, rng);
  BlurKernel truth = gaussian_kernel({5, 1.0});
  HsiCube x = spatial_degrade(z, truth, 2);
  EstimationConfig cfg;
  cfg.solver = EstimationSolver::kGradientDescent;
  cfg.lr_relative = true;
  cfg.lr = 0.5;
  cfg.inner_iters = 200;
  KernelEstimate e = estimate_kernel_step(x, z, 2, BlurKernel::uniform(5), cfg);
  check_nonincreasing(e.loss_trace);
  CHECK(kernel_relative_error(e.kernel, truth) < kernel_relative_error(BlurKernel::uniform(5), truth));

  cfg.lr_relative = false;
  cfg.lr = 10.0;
  CHECK_THROWS_AS(estimate_kernel_step(x, z, 2, BlurKernel::uniform(5), cfg), DivergenceError);
  try {
    estimate_kernel_step(x, z, 2, BlurKernel::uniform(5), cfg);
  } catch (const DivergenceError& err) {
    CHECK(err.trace().size() >= 6);
  }
}

TEST_CASE("srf closed form") {
  Rng rng(4);
  HsiCube z = random_cube(6, 10, 10, rng);
  EstimationConfig cfg;
  cfg.xi = 0.0;
  SrfEstimate id = estimate_srf_step(z, z, default_srf(6, 6), cfg);
  for (int j = 0; j < 6; ++j)
    for (int i = 0; i < 6; ++i) CHECK(std::abs(id.srf.at(j, i) - (i == j ? 1.0 : 0.0)) < 1e-8);

  HsiCube z16 = random_cube(16, 12, 12, rng);
  SrfMatrix truth = random_srf(4, 16, rng);
  HsiCube y = spectral_degrade(z16, truth);
  cfg.xi = 1e-8;
  SrfEstimate e = estimate_srf_step(y, z16, default_srf(4, 16), cfg);
  CHECK(srf_relative_error(e.srf, truth) < 1e-6);

  cfg.xi = 1e9;
  SrfEstimate r = estimate_srf_step(y, z16, default_srf(4, 16), cfg);
  CHECK(vec_norm(r.raw) < 1e-5);

  // Rank-deficient Z: every band equal.
  HsiCube flat(3, 6, 6);
  for (int b = 0; b < 3; ++b)
    for (int p = 0; p < 36; ++p) flat.data()[b * 36 + p] = 0.1 * (p % 7);
  cfg.xi = 0.0;
  try {
    estimate_srf_step(spectral_degrade(flat, default_srf(2, 3)), flat, default_srf(2, 3), cfg);
    FAIL("expected a solver error");
  } catch (const SolverError& err) {
    CHECK(std::string(err.what()).find("xi > 0") != std::string::npos);
  }
}

TEST_CASE("srf iterative solvers") {
  Rng rng(5);
  HsiCube z = random_cube(8, 12, 12, rng);
  SrfMatrix truth = random_srf(3, 8, rng);
  HsiCube y = spectral_degrade(z, truth);
  EstimationConfig cfg;
  cfg.srf_closed_form = false;
  double prev = 1e9;
  for (int budget : {5, 20, 50}) {
    cfg.inner_iters = budget;
    SrfEstimate e = estimate_srf_step(y, z, default_srf(3, 8), cfg);
    const double err = srf_relative_error(e.srf, truth);
    CHECK(err <= prev);
    prev = err;
    check_nonincreasing(e.loss_trace);
  }
  CHECK(prev < 1e-6);

  cfg.solver = EstimationSolver::kGradientDescent;
  cfg.lr_relative = true;
  cfg.lr = 0.5;
  cfg.inner_iters = 100;
  SrfEstimate g = estimate_srf_step(y, z, default_srf(3, 8), cfg);
  check_nonincreasing(g.loss_trace);
  CHECK(srf_relative_error(g.srf, truth) < srf_relative_error(default_srf(3, 8), truth));
}

TEST_CASE("objectives and determinism") {
  Rng rng(6);
  HsiCube z = random_cube(4, 8, 8, rng);
  BlurKernel k = gaussian_kernel({3, 0.8});
  HsiCube x = spatial_degrade(z, k, 2);
  CHECK(kernel_objective(x, z, 2, 3, k.weights(), 0.0) == doctest::Approx(0.0));
  CHECK(kernel_objective(x, z, 2, 3, k.weights(), 2.0) ==
        doctest::Approx(2.0 * vec_norm(k.weights()) * vec_norm(k.weights())));
  SrfMatrix p = default_srf(2, 4);
  HsiCube y = spectral_degrade(z, p);
  CHECK(srf_objective(y, z, 2, p.weights(), 0.0) == doctest::Approx(0.0).epsilon(1e-12));

  EstimationConfig cfg;
  auto a = estimate_kernel_step(x, z, 2, BlurKernel::uniform(3), cfg);
  auto b = estimate_kernel_step(x, z, 2, BlurKernel::uniform(3), cfg);
  CHECK(a.raw == b.raw);
  CHECK_THROWS_AS(estimate_kernel_step(x, z, 4, BlurKernel::uniform(3), cfg), ShapeError);
  EstimationConfig bad;
  bad.eta = -1;
  CHECK_THROWS_AS(validate(bad), ParameterError);
  bad = {};
  bad.inner_iters = 0;
  CHECK_THROWS_AS(validate(bad), ParameterError);
}

TEST_CASE("error measures and resizing") {
  BlurKernel k = gaussian_kernel({5, 1.0});
  CHECK(kernel_relative_error(k, k) == 0.0);
  BlurKernel big = resize_kernel(k, 9);
  CHECK(big.size() == 9);
  CHECK(kernel_relative_error(big, k) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(big.at(4, 4) == doctest::Approx(k.at(2, 2)).epsilon(1e-15));
  BlurKernel small = resize_kernel(gaussian_kernel({9, 1.0}), 3);
  double s = 0;
  for (double w : small.weights()) s += w;
  CHECK(s == doctest::Approx(1.0));
  SrfMatrix p = default_srf(2, 5);
  CHECK(srf_relative_error(p, p) == 0.0);
}
