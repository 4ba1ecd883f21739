#include "hsifuse/degeneration.h"

#include <algorithm>
#include <cmath>

namespace hsifuse {

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

// Source indices for every (decimated output position, kernel tap) pair.
struct SampleTable {
  int out_h = 0;
  int out_w = 0;
  int ksize = 0;
  std::vector<int> rows;  // out_h x ksize, already multiplied by width
  std::vector<int> cols;  // out_w x ksize
};

SampleTable sample_table(const CubeShape& hr, int ksize, int s,
                         const char* where) {
  if (s < 1) {
    throw ParameterError(std::string(where) + ": scale must be >= 1");
  }
  if (ksize < 1 || ksize % 2 == 0) {
    throw ParameterError(std::string(where) + ": kernel size must be odd");
  }
  if (hr.height % s != 0 || hr.width % s != 0) {
    throw ShapeError(std::string(where) + ": scale " + std::to_string(s) +
                     " does not divide " + to_string(hr));
  }
  if (ksize > std::min(hr.height, hr.width)) {
    throw ShapeError(std::string(where) + ": kernel larger than image");
  }
  SampleTable t;
  t.out_h = hr.height / s;
  t.out_w = hr.width / s;
  t.ksize = ksize;
  const int r = ksize / 2;
  const int off = s / 2;
  t.rows.resize(static_cast<std::size_t>(t.out_h) * ksize);
  t.cols.resize(static_cast<std::size_t>(t.out_w) * ksize);
  for (int i = 0; i < t.out_h; ++i) {
    for (int u = 0; u < ksize; ++u) {
      t.rows[i * ksize + u] = reflect(off + i * s + u - r, hr.height) * hr.width;
    }
  }
  for (int j = 0; j < t.out_w; ++j) {
    for (int v = 0; v < ksize; ++v) {
      t.cols[j * ksize + v] = reflect(off + j * s + v - r, hr.width);
    }
  }
  return t;
}

void check_kernel_weights(int ksize, std::span<const double> w) {
  if (w.size() != static_cast<std::size_t>(ksize) * ksize) {
    throw ShapeError("kernel weights length does not match kernel size");
  }
}

}  // namespace

BlurKernel gaussian_kernel(const GaussianSpec& spec) {
  if (spec.size < 1 || spec.size % 2 == 0) {
    throw ParameterError("gaussian_kernel: size must be odd, got " +
                         std::to_string(spec.size));
  }
  if (!(spec.sigma > 0.0)) {
    throw ParameterError("gaussian_kernel: sigma must be positive");
  }
  const int r = spec.size / 2;
  std::vector<double> w(static_cast<std::size_t>(spec.size) * spec.size);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    for (int j = -r; j <= r; ++j) {
      const double v = std::exp(-(i * i + j * j) / (2.0 * spec.sigma * spec.sigma));
      w[(i + r) * spec.size + (j + r)] = v;
      total += v;
    }
  }
  for (double& v : w) v /= total;
  return BlurKernel(spec.size, std::move(w));
}

BlurKernel motion_kernel(const MotionSpec& spec) {
  if (spec.length < 3) {
    throw ParameterError("motion_kernel: length must be >= 3, got " +
                         std::to_string(spec.length));
  }
  if (!(spec.thickness >= 1.0)) {
    throw ParameterError("motion_kernel: thickness must be >= 1");
  }
  const double half_len = 0.5 * spec.length;
  const double half_thick = 0.5 * spec.thickness;
  const double ca = std::cos(spec.angle);
  const double sa = std::sin(spec.angle);
  const double extent_col = half_len * std::abs(ca) + half_thick * std::abs(sa);
  const double extent_row = half_len * std::abs(sa) + half_thick * std::abs(ca);
  // Smallest odd canvas whose pixel squares cover the rectangle.
  const int radius = std::max(
      {0, static_cast<int>(std::ceil(extent_col - 0.5 - 1e-9)),
       static_cast<int>(std::ceil(extent_row - 0.5 - 1e-9))});
  const int size = 2 * radius + 1;
  constexpr int kSuper = 16;
  std::vector<double> w(static_cast<std::size_t>(size) * size, 0.0);
  double total = 0.0;
  for (int row = 0; row < size; ++row) {
    for (int col = 0; col < size; ++col) {
      int hits = 0;
      for (int a = 0; a < kSuper; ++a) {
        const double y = row - radius - 0.5 + (a + 0.5) / kSuper;
        for (int b = 0; b < kSuper; ++b) {
          const double x = col - radius - 0.5 + (b + 0.5) / kSuper;
          const double along = x * ca + y * sa;
          const double across = -x * sa + y * ca;
          if (std::abs(along) <= half_len && std::abs(across) <= half_thick) {
            ++hits;
          }
        }
      }
      w[row * size + col] = hits;
      total += hits;
    }
  }
  for (double& v : w) v /= total;
  return BlurKernel(size, std::move(w));
}

BlurKernel make_kernel(const KernelSpec& spec) {
  return std::visit(
      [](const auto& s) -> BlurKernel {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, GaussianSpec>) {
          return gaussian_kernel(s);
        } else if constexpr (std::is_same_v<T, MotionSpec>) {
          return motion_kernel(s);
        } else {
          return s;
        }
      },
      spec);
}

SrfMatrix default_srf(int out_bands, int in_bands) {
  if (out_bands < 1 || in_bands < out_bands) {
    throw ShapeError("default_srf: need 1 <= b <= B");
  }
  std::vector<double> w(static_cast<std::size_t>(out_bands) * in_bands);
  const double width = std::max(1.0, 0.6 * in_bands / out_bands);
  for (int j = 0; j < out_bands; ++j) {
    const double centre = (j + 0.5) * in_bands / out_bands - 0.5;
    double total = 0.0;
    for (int i = 0; i < in_bands; ++i) {
      const double d = (i - centre) / width;
      const double v = std::exp(-0.5 * d * d);
      w[j * in_bands + i] = v;
      total += v;
    }
    for (int i = 0; i < in_bands; ++i) w[j * in_bands + i] /= total;
  }
  return SrfMatrix(out_bands, in_bands, std::move(w));
}

SrfMatrix perturb_srf(const SrfMatrix& base, double c, Rng& rng,
                      std::optional<double> kappa) {
  if (!(c >= 0.0)) {
    throw ParameterError("perturb_srf: c must be >= 0");
  }
  const int b = base.out_bands();
  const int nb = base.in_bands();
  const double sharp = kappa.value_or(static_cast<double>(nb));
  std::vector<double> w(static_cast<std::size_t>(b) * nb);
  if (c > 0.0) {
    for (double& e : w) e = c * rng.normal();
  }
  for (int j = 0; j < b; ++j) {
    double* row = w.data() + static_cast<std::size_t>(j) * nb;
    double peak = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < nb; ++i) {
      row[i] += sharp * base.at(j, i);
      peak = std::max(peak, row[i]);
    }
    double total = 0.0;
    for (int i = 0; i < nb; ++i) {
      row[i] = std::exp(row[i] - peak);
      total += row[i];
    }
    for (int i = 0; i < nb; ++i) row[i] /= total;
  }
  return SrfMatrix(b, nb, std::move(w));
}

HsiCube spatial_degrade(const HsiCube& z, int ksize,
                        std::span<const double> weights, int s) {
  check_kernel_weights(ksize, weights);
  const SampleTable t = sample_table(z.shape(), ksize, s, "spatial_degrade");
  HsiCube out(z.bands(), t.out_h, t.out_w);
  for (int b = 0; b < z.bands(); ++b) {
    const double* src = z.band(b).data();
    double* dst = out.band(b).data();
    for (int i = 0; i < t.out_h; ++i) {
      for (int j = 0; j < t.out_w; ++j) {
        const int* cols = &t.cols[j * ksize];
        double acc = 0.0;
        for (int u = 0; u < ksize; ++u) {
          const double* row = src + t.rows[i * ksize + u];
          const double* k = weights.data() + u * ksize;
          for (int v = 0; v < ksize; ++v) acc += k[v] * row[cols[v]];
        }
        dst[i * t.out_w + j] = acc;
      }
    }
  }
  return out;
}

HsiCube spatial_degrade(const HsiCube& z, const BlurKernel& k, int s) {
  return spatial_degrade(z, k.size(), k.weights(), s);
}

HsiCube spatial_degrade_adjoint(const HsiCube& x, int ksize,
                                std::span<const double> weights, int s,
                                const CubeShape& out_shape) {
  check_kernel_weights(ksize, weights);
  const SampleTable t =
      sample_table(out_shape, ksize, s, "spatial_degrade_adjoint");
  if (x.bands() != out_shape.bands || x.height() != t.out_h ||
      x.width() != t.out_w) {
    throw ShapeError("spatial_degrade_adjoint: input " + to_string(x.shape()) +
                     " inconsistent with target " + to_string(out_shape));
  }
  HsiCube out(out_shape.bands, out_shape.height, out_shape.width);
  for (int b = 0; b < x.bands(); ++b) {
    const double* src = x.band(b).data();
    double* dst = out.band(b).data();
    for (int i = 0; i < t.out_h; ++i) {
      for (int j = 0; j < t.out_w; ++j) {
        const int* cols = &t.cols[j * ksize];
        const double g = src[i * t.out_w + j];
        for (int u = 0; u < ksize; ++u) {
          double* row = dst + t.rows[i * ksize + u];
          const double* k = weights.data() + u * ksize;
          for (int v = 0; v < ksize; ++v) row[cols[v]] += k[v] * g;
        }
      }
    }
  }
  return out;
}

HsiCube spatial_degrade_adjoint(const HsiCube& x, const BlurKernel& k, int s,
                                const CubeShape& out_shape) {
  return spatial_degrade_adjoint(x, k.size(), k.weights(), s, out_shape);
}

std::vector<double> spatial_kernel_adjoint(const HsiCube& z, const HsiCube& r,
                                           int ksize, int s) {
  const SampleTable t =
      sample_table(z.shape(), ksize, s, "spatial_kernel_adjoint");
  if (r.bands() != z.bands() || r.height() != t.out_h ||
      r.width() != t.out_w) {
    throw ShapeError("spatial_kernel_adjoint: residual shape mismatch");
  }
  std::vector<double> g(static_cast<std::size_t>(ksize) * ksize, 0.0);
  for (int b = 0; b < z.bands(); ++b) {
    const double* src = z.band(b).data();
    const double* res = r.band(b).data();
    for (int i = 0; i < t.out_h; ++i) {
      for (int j = 0; j < t.out_w; ++j) {
        const double rv = res[i * t.out_w + j];
        if (rv == 0.0) continue;
        const int* cols = &t.cols[j * ksize];
        for (int u = 0; u < ksize; ++u) {
          const double* row = src + t.rows[i * ksize + u];
          double* gk = g.data() + u * ksize;
          for (int v = 0; v < ksize; ++v) gk[v] += rv * row[cols[v]];
        }
      }
    }
  }
  return g;
}

HsiCube spectral_degrade(const HsiCube& z, int out_bands,
                         std::span<const double> weights) {
  const int nb = z.bands();
  if (out_bands < 1 ||
      weights.size() != static_cast<std::size_t>(out_bands) * nb) {
    throw ShapeError("spectral_degrade: SRF is not " +
                     std::to_string(out_bands) + " x " + std::to_string(nb));
  }
  HsiCube out(out_bands, z.height(), z.width());
  const std::size_t plane = z.shape().plane();
  for (int j = 0; j < out_bands; ++j) {
    double* dst = out.band(j).data();
    for (int i = 0; i < nb; ++i) {
      const double p = weights[j * nb + i];
      if (p == 0.0) continue;
      const double* src = z.band(i).data();
      for (std::size_t q = 0; q < plane; ++q) dst[q] += p * src[q];
    }
  }
  return out;
}

HsiCube spectral_degrade(const HsiCube& z, const SrfMatrix& p) {
  if (p.in_bands() != z.bands()) {
    throw ShapeError("spectral_degrade: SRF expects " +
                     std::to_string(p.in_bands()) + " bands, cube has " +
                     std::to_string(z.bands()));
  }
  return spectral_degrade(z, p.out_bands(), p.weights());
}

HsiCube spectral_degrade_adjoint(const HsiCube& y, int in_bands,
                                 std::span<const double> weights) {
  const int b = y.bands();
  if (in_bands < 1 ||
      weights.size() != static_cast<std::size_t>(b) * in_bands) {
    throw ShapeError("spectral_degrade_adjoint: SRF shape mismatch");
  }
  HsiCube out(in_bands, y.height(), y.width());
  const std::size_t plane = y.shape().plane();
  for (int i = 0; i < in_bands; ++i) {
    double* dst = out.band(i).data();
    for (int j = 0; j < b; ++j) {
      const double p = weights[j * in_bands + i];
      if (p == 0.0) continue;
      const double* src = y.band(j).data();
      for (std::size_t q = 0; q < plane; ++q) dst[q] += p * src[q];
    }
  }
  return out;
}

HsiCube spectral_degrade_adjoint(const HsiCube& y, const SrfMatrix& p) {
  if (p.out_bands() != y.bands()) {
    throw ShapeError("spectral_degrade_adjoint: band mismatch");
  }
  return spectral_degrade_adjoint(y, p.in_bands(), p.weights());
}

HsiCube add_awgn(const HsiCube& x, double snr_db, Rng& rng) {
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity()) {
    throw ParameterError("add_awgn: SNR must be finite or +infinity");
  }
  if (std::isinf(snr_db)) return x;
  double power = 0.0;
  for (double v : x.data()) power += v * v;
  power /= static_cast<double>(x.size());
  const double sigma = std::sqrt(power * std::pow(10.0, -snr_db / 10.0));
  HsiCube out = x;
  for (double& v : out.data()) v += sigma * rng.normal();
  return out;
}

SimulatedPair simulate_pair(const HsiCube& z, const DegenerationConfig& cfg,
                            Rng& rng) {
  BlurKernel k = make_kernel(cfg.kernel);
  SrfMatrix p = cfg.srf_perturb_c ? perturb_srf(cfg.srf_base, *cfg.srf_perturb_c, rng)
                                  : cfg.srf_base;
  HsiCube x = add_awgn(spatial_degrade(z, k, cfg.scale), cfg.snr_hsi_db, rng);
  HsiCube y = add_awgn(spectral_degrade(z, p), cfg.snr_msi_db, rng);
  return {std::move(x), std::move(y), std::move(k), std::move(p)};
}

}  // namespace hsifuse
