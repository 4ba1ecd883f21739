#include "hsifuse/core.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace hsifuse {

std::string to_string(const CubeShape& shape) {
  return "(" + std::to_string(shape.bands) + "," +
         std::to_string(shape.height) + "," + std::to_string(shape.width) +
         ")";
}

HsiCube::HsiCube(int bands, int height, int width, double fill) {
  if (bands < 1 || height < 1 || width < 1) {
    throw ShapeError("cube dimensions must be >= 1, got " +
                     to_string({bands, height, width}));
  }
  shape_ = {bands, height, width};
  data_.assign(shape_.size(), fill);
}

HsiCube::HsiCube(CubeShape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (shape.bands < 1 || shape.height < 1 || shape.width < 1) {
    throw ShapeError("cube dimensions must be >= 1, got " + to_string(shape));
  }
  if (data_.size() != shape.size()) {
    throw ShapeError("cube data length " + std::to_string(data_.size()) +
                     " does not match shape " + to_string(shape));
  }
  if (!all_finite()) throw ParameterError("cube data contains NaN or Inf");
}

std::span<double> HsiCube::band(int b) {
  return std::span<double>(data_).subspan(b * shape_.plane(), shape_.plane());
}

std::span<const double> HsiCube::band(int b) const {
  return std::span<const double>(data_).subspan(b * shape_.plane(),
                                                shape_.plane());
}

double HsiCube::sum() const {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

bool HsiCube::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

HsiCube cube_new(int bands, int height, int width, double fill) {
  return HsiCube(bands, height, width, fill);
}

void require_same_shape(const HsiCube& a, const HsiCube& b,
                        const char* where) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(where) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

HsiCube combine(double alpha, const HsiCube& a, double beta,
                const HsiCube& b) {
  require_same_shape(a, b, "combine");
  HsiCube out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * o[i] + beta * bd[i];
  return out;
}

HsiCube add(const HsiCube& a, const HsiCube& b) { return combine(1, a, 1, b); }

HsiCube subtract(const HsiCube& a, const HsiCube& b) {
  return combine(1, a, -1, b);
}

HsiCube scale(const HsiCube& a, double alpha) {
  HsiCube out = a;
  for (double& v : out.data()) v *= alpha;
  return out;
}

double dot(const HsiCube& a, const HsiCube& b) {
  require_same_shape(a, b, "dot");
  auto ad = a.data();
  auto bd = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return s;
}

double norm(const HsiCube& a) { return std::sqrt(dot(a, a)); }

double max_abs_diff(const HsiCube& a, const HsiCube& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    m = std::max(m, std::abs(ad[i] - bd[i]));
  }
  return m;
}

double cubic_weight(double t, double a) {
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace {

struct Taps {
  int index[4];
  double weight[4];
};

// Four-tap resampling table for one axis of length n upsampled by s.
std::vector<Taps> cubic_taps(int n, int s) {
  std::vector<Taps> taps(static_cast<std::size_t>(n) * s);
  for (int d = 0; d < n * s; ++d) {
    const double src = (d + 0.5) / s - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double frac = src - base;
    Taps& t = taps[d];
    for (int k = 0; k < 4; ++k) {
      t.index[k] = std::clamp(base - 1 + k, 0, n - 1);
      t.weight[k] = cubic_weight(frac - (k - 1));
    }
  }
  return taps;
}

}  // namespace

HsiCube bicubic_upsample(const HsiCube& x, int s) {
  if (s <= 0) {
    throw ParameterError("bicubic_upsample: scale must be >= 1, got " +
                         std::to_string(s));
  }
  if (s == 1) return x;
  const int h = x.height();
  const int w = x.width();
  const int oh = h * s;
  const int ow = w * s;
  const auto row_taps = cubic_taps(h, s);
  const auto col_taps = cubic_taps(w, s);
  HsiCube out(x.bands(), oh, ow);
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int b = 0; b < x.bands(); ++b) {
    auto in = x.band(b);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < ow; ++c) {
        const Taps& t = col_taps[c];
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += t.weight[k] * in[r * w + t.index[k]];
        tmp[r * ow + c] = v;
      }
    }
    auto o = out.band(b);
    for (int r = 0; r < oh; ++r) {
      const Taps& t = row_taps[r];
      for (int c = 0; c < ow; ++c) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += t.weight[k] * tmp[t.index[k] * ow + c];
        o[r * ow + c] = v;
      }
    }
  }
  out.set_value_range(x.value_range().first, x.value_range().second);
  return out;
}

BlurKernel::BlurKernel(int size, std::vector<double> weights)
    : size_(size), weights_(std::move(weights)) {
  if (size < 1 || size % 2 == 0) {
    throw ParameterError("kernel size must be odd and >= 1, got " +
                         std::to_string(size));
  }
  if (weights_.size() != static_cast<std::size_t>(size) * size) {
    throw ShapeError("kernel weights length does not match size");
  }
  double total = 0.0;
  for (double v : weights_) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ParameterError("kernel weights must be finite and nonnegative");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ParameterError("kernel weights must sum to 1, got " +
                         std::to_string(total));
  }
}

BlurKernel BlurKernel::delta(int size) {
  std::vector<double> w(static_cast<std::size_t>(size) * size, 0.0);
  w[w.size() / 2] = 1.0;
  return BlurKernel(size, std::move(w));
}

BlurKernel BlurKernel::uniform(int size) {
  const double v = 1.0 / (static_cast<double>(size) * size);
  return BlurKernel(size,
                    std::vector<double>(static_cast<std::size_t>(size) * size, v));
}

SrfMatrix::SrfMatrix(int out_bands, int in_bands, std::vector<double> weights)
    : out_bands_(out_bands), in_bands_(in_bands), weights_(std::move(weights)) {
  if (out_bands < 1 || in_bands < 1 || out_bands > in_bands) {
    throw ShapeError("SRF must satisfy 1 <= b <= B, got b=" +
                     std::to_string(out_bands) +
                     " B=" + std::to_string(in_bands));
  }
  if (weights_.size() != static_cast<std::size_t>(out_bands) * in_bands) {
    throw ShapeError("SRF weights length does not match b x B");
  }
  for (int j = 0; j < out_bands; ++j) {
    double total = 0.0;
    for (int i = 0; i < in_bands; ++i) {
      const double v = weights_[j * in_bands + i];
      if (!std::isfinite(v) || v < 0.0) {
        throw ParameterError("SRF entries must be finite and nonnegative");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ParameterError("SRF row " + std::to_string(j) +
                           " must sum to 1, got " + std::to_string(total));
    }
  }
}

SrfMatrix SrfMatrix::identity(int bands) {
  std::vector<double> w(static_cast<std::size_t>(bands) * bands, 0.0);
  for (int i = 0; i < bands; ++i) w[i * bands + i] = 1.0;
  return SrfMatrix(bands, bands, std::move(w));
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw ParameterError("uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return lo + static_cast<int>(v % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Rng Rng::fork(std::uint64_t stream) const {
  // splitmix64 finalizer over (seed, stream).
  std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return Rng(z);
}

}  // namespace hsifuse
