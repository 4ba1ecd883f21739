#include <doctest.h>

#include <cmath>

#include "helpers.h"
#include "hsifuse/metrics.h"

using namespace hsifuse;
using hsifuse::test::random_cube;

namespace {

// Direct windowed SSIM: every valid 11x11 window evaluated from scratch.
double ssim_reference(const HsiCube& a, const HsiCube& b) {
  double g[11][11], gs = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j)
      gs += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (int band = 0; band < a.bands(); ++band) {
    double acc = 0;
    int n = 0;
    for (int r = 0; r + 11 <= a.height(); ++r)
      for (int c = 0; c + 11 <= a.width(); ++c) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double w = g[i][j] / gs, x = a.at(band, r + i, c + j), y = b.at(band, r + i, c + j);
            mx += w * x;
            my += w * y;
            xx += w * x * x;
            yy += w * y * y;
            xy += w * x * y;
          }
        const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
        acc += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++n;
      }
    total += acc / n;
  }
  return total / a.bands();
}

}  // namespace

TEST_CASE("rmse") {
  Rng rng(1);
  HsiCube a = random_cube(3, 12, 12, rng);
  CHECK(rmse(a, a) == 0.0);
  CHECK(rmse(cube_new(2, 3, 3, 0.0), cube_new(2, 3, 3, 1.0)) == doctest::Approx(255.0));
  CHECK(rmse(cube_new(2, 3, 3, 0.0), cube_new(2, 3, 3, 0.01)) == doctest::Approx(2.55).epsilon(1e-12));
  CHECK_THROWS_AS(rmse(a, HsiCube(3, 12, 11)), ShapeError);
}

TEST_CASE("psnr") {
  Rng rng(2);
  HsiCube a = random_cube(4, 12, 12, rng);
  CHECK(psnr(a, a) == kPsnrCap);
  HsiCube e1 = a, e2 = a;
  for (double& v : e1.data()) v += 0.01;
  for (double& v : e2.data()) v -= 0.1;
  CHECK(std::abs(psnr(a, e1) - 40.0) < 1e-6);
  CHECK(std::abs(psnr(a, e2) - 20.0) < 1e-6);
  double prev = 1e9;
  for (double d : {0.001, 0.003, 0.01, 0.03, 0.1}) {
    HsiCube e = a;
    for (double& v : e.data()) v += d;
    const double p = psnr(a, e);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("sam") {
  Rng rng(3);
  HsiCube a = random_cube(5, 6, 6, rng, 0.1, 1.0);
  CHECK(sam(a, a) == 0.0);
  CHECK(sam(a, scale(a, 2.0)) == doctest::Approx(0.0).epsilon(1e-6));
  HsiCube x(2, 3, 3), y(2, 3, 3), u(2, 3, 3);
  for (int p = 0; p < 9; ++p) {
    x.data()[p] = 1.0;
    y.data()[9 + p] = 1.0;
    u.data()[p] = 1.0;
    u.data()[9 + p] = 1.0;
  }
  CHECK(std::abs(sam(x, y) - 90.0) < 1e-9);
  CHECK(std::abs(sam(u, x) - 45.0) < 1e-9);
  // Per-pixel positive scaling of either argument.
  HsiCube b = random_cube(5, 6, 6, rng, 0.1, 1.0), bs = b;
  for (int p = 0; p < 36; ++p) {
    const double f = rng.uniform(0.2, 5.0);
    for (int k = 0; k < 5; ++k) bs.data()[k * 36 + p] *= f;
  }
  CHECK(sam(a, b) == doctest::Approx(sam(a, bs)).epsilon(1e-10));
  CHECK(sam(HsiCube(5, 6, 6), a) == 0.0);
}

TEST_CASE("ssim") {
  Rng rng(4);
  HsiCube a = random_cube(2, 16, 14, rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  HsiCube inv = a;
  for (double& v : inv.data()) v = 1.0 - v;
  const double s = ssim(a, inv);
  CHECK(s < 0.0);
  CHECK(s == doctest::Approx(ssim_reference(a, inv)).epsilon(1e-9));
  HsiCube b = random_cube(2, 16, 14, rng);
  CHECK(ssim(a, b) == doctest::Approx(ssim_reference(a, b)).epsilon(1e-9));

  HsiCube c1 = cube_new(1, 12, 12, 0.2), c2 = cube_new(1, 12, 12, 0.7);
  const double lum = (2 * 0.2 * 0.7 + 1e-4) / (0.04 + 0.49 + 1e-4);
  CHECK(ssim(c1, c2) == doctest::Approx(lum).epsilon(1e-12));
  CHECK_THROWS(ssim(HsiCube(1, 10, 12), HsiCube(1, 10, 12)));
}

TEST_CASE("report") {
  Rng rng(5);
  HsiCube a = random_cube(3, 12, 12, rng);
  MetricReport m = evaluate(a, a);
  CHECK(m.rmse == 0.0);
  CHECK(m.psnr == kPsnrCap);
  CHECK(m.sam == 0.0);
  CHECK(m.ssim == doctest::Approx(1.0));
  MetricReport r{2.5, 38.123456, 3.0, 0.91};
  CHECK(r.csv_row() == "2.5000,38.1235,3.0000,0.9100");
  CHECK(MetricReport::csv_header() == "rmse,psnr,sam,ssim");
}
