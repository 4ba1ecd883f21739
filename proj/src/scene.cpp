#include "hsifuse/scene.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hsifuse {

namespace {

std::vector<double> endmember_spectrum(int bands, Rng& rng) {
  std::vector<double> s(bands, rng.uniform(0.1, 0.4));
  const int bumps = rng.uniform_int(1, 3);
  for (int m = 0; m < bumps; ++m) {
    const double centre = rng.uniform(-0.1, 1.1);
    const double width = rng.uniform(0.08, 0.35);
    const double amp = rng.uniform(-0.3, 0.6);
    for (int b = 0; b < bands; ++b) {
      const double t = bands > 1 ? static_cast<double>(b) / (bands - 1) : 0.5;
      const double d = (t - centre) / width;
      s[b] += amp * std::exp(-0.5 * d * d);
    }
  }
  for (double& v : s) v = std::clamp(v, 0.02, 0.98);
  return s;
}

std::vector<double> abundance_field(int height, int width, Rng& rng,
                                    const SceneOptions& opt) {
  std::vector<double> f(static_cast<std::size_t>(height) * width, 0.1);
  for (int k = 0; k < opt.blobs; ++k) {
    const double cy = rng.uniform(0, height);
    const double cx = rng.uniform(0, width);
    const double r = rng.uniform(0.08, 0.3) * std::min(height, width);
    const double amp = rng.uniform(0.2, 1.0);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double d2 = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (r * r);
        f[y * width + x] += amp * std::exp(-0.5 * d2);
      }
    }
  }
  for (int k = 0; k < opt.shapes; ++k) {
    const bool disk = rng.uniform() < 0.5;
    const double cy = rng.uniform(0, height);
    const double cx = rng.uniform(0, width);
    const double ry = rng.uniform(0.05, 0.25) * height;
    const double rx = rng.uniform(0.05, 0.25) * width;
    const double amp = rng.uniform(0.3, 1.2);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double dy = (y + 0.5 - cy) / ry;
        const double dx = (x + 0.5 - cx) / rx;
        const bool inside = disk ? dy * dy + dx * dx <= 1.0
                                 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (inside) f[y * width + x] += amp;
      }
    }
  }
  const double angle = rng.uniform(0, std::numbers::pi);
  const double period = rng.uniform(2.5, 6.0);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (x * ca + y * sa) * 2 * std::numbers::pi / period;
      f[y * width + x] *= 1.0 + opt.texture_amplitude * std::sin(u + phase);
    }
  }
  return f;
}

// Smooth zero-mean field in roughly [-1, 1].
std::vector<double> variation_field(int height, int width, Rng& rng) {
  std::vector<double> f(static_cast<std::size_t>(height) * width, 0.0);
  for (int k = 0; k < 4; ++k) {
    const double cy = rng.uniform(0, height);
    const double cx = rng.uniform(0, width);
    const double r = rng.uniform(0.1, 0.4) * std::min(height, width);
    const double amp = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double d2 = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (r * r);
        f[y * width + x] += amp * std::exp(-0.5 * d2);
      }
    }
  }
  return f;
}

}  // namespace

HsiCube synthetic_scene(int bands, int height, int width, Rng& rng,
                        const SceneOptions& options) {
  if (options.endmembers < 1) {
    throw ParameterError("synthetic_scene: endmembers must be >= 1");
  }
  HsiCube z(bands, height, width);
  const std::size_t plane = z.shape().plane();
  std::vector<std::vector<double>> spectra;
  std::vector<std::vector<double>> fields;
  for (int r = 0; r < options.endmembers; ++r) {
    spectra.push_back(endmember_spectrum(bands, rng));
    fields.push_back(abundance_field(height, width, rng, options));
  }
  for (std::size_t p = 0; p < plane; ++p) {
    double total = 0.0;
    for (const auto& f : fields) total += f[p] * f[p];
    for (int r = 0; r < options.endmembers; ++r) {
      const double a = fields[r][p] * fields[r][p] / total;
      for (int b = 0; b < bands; ++b) z.data()[b * plane + p] += a * spectra[r][b];
    }
  }
  // Spatially varying spectral distortion keeps Z Z^T full rank.
  for (int m = 0; m < options.variability_modes; ++m) {
    const double freq = (m + 1) * std::numbers::pi;
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    const std::vector<double> g = variation_field(height, width, rng);
    for (int b = 0; b < bands; ++b) {
      const double t = bands > 1 ? static_cast<double>(b) / (bands - 1) : 0.5;
      const double h = options.variability * std::cos(freq * t + phase);
      auto band = z.band(b);
      for (std::size_t p = 0; p < plane; ++p) band[p] *= 1.0 + h * g[p];
    }
  }
  for (double& v : z.data()) v = std::clamp(v, 0.02, 0.98);
  return z;
}

}  // namespace hsifuse
