// Dense cube, kernel and spectral-response types shared by every module,
// plus elementwise arithmetic, bicubic resampling and the deterministic RNG.
//
// Memory layout is band-major: element (band, row, col) lives at
// band * height * width + row * width + col.

#ifndef HSIFUSE_CORE_H_
#define HSIFUSE_CORE_H_

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hsifuse {

// Error hierarchy. Every failure raised by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class ParameterError : public Error {
 public:
  using Error::Error;
};
class SolverError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};

struct CubeShape {
  int bands = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(bands) * height * width;
  }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const CubeShape&) const = default;
};

std::string to_string(const CubeShape& shape);

class HsiCube {
 public:
  HsiCube() = default;
  HsiCube(int bands, int height, int width, double fill = 0.0);
  // Takes ownership of `data`; rejects wrong length and non-finite values.
  HsiCube(CubeShape shape, std::vector<double> data);

  const CubeShape& shape() const { return shape_; }
  int bands() const { return shape_.bands; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int band, int row, int col) {
    return data_[index(band, row, col)];
  }
  double at(int band, int row, int col) const {
    return data_[index(band, row, col)];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> band(int b);
  std::span<const double> band(int b) const;

  // Nominal range the values are expected to occupy; metadata only.
  std::pair<double, double> value_range() const { return value_range_; }
  void set_value_range(double lo, double hi) { value_range_ = {lo, hi}; }

  double sum() const;
  bool all_finite() const;

 private:
  std::size_t index(int band, int row, int col) const {
    return (static_cast<std::size_t>(band) * shape_.height + row) *
               shape_.width +
           col;
  }

  CubeShape shape_;
  std::vector<double> data_;
  std::pair<double, double> value_range_{0.0, 1.0};
};

HsiCube cube_new(int bands, int height, int width, double fill);

HsiCube add(const HsiCube& a, const HsiCube& b);
HsiCube subtract(const HsiCube& a, const HsiCube& b);
HsiCube scale(const HsiCube& a, double alpha);
// alpha * a + beta * b
HsiCube combine(double alpha, const HsiCube& a, double beta, const HsiCube& b);
double dot(const HsiCube& a, const HsiCube& b);
double norm(const HsiCube& a);
double max_abs_diff(const HsiCube& a, const HsiCube& b);
void require_same_shape(const HsiCube& a, const HsiCube& b,
                        const char* where);

// Per-band bicubic interpolation (Catmull-Rom, a = -0.5) with half-pixel
// centres and clamped borders. Requires s >= 1.
HsiCube bicubic_upsample(const HsiCube& x, int s);
// Weight of the cubic convolution kernel at distance t.
double cubic_weight(double t, double a = -0.5);

// Square, odd-sized, nonnegative kernel whose weights sum to one.
// Weights are row-major; row index runs along image rows.
class BlurKernel {
 public:
  BlurKernel() : size_(1), weights_{1.0} {}
  BlurKernel(int size, std::vector<double> weights);

  static BlurKernel delta(int size);
  static BlurKernel uniform(int size);

  int size() const { return size_; }
  int radius() const { return size_ / 2; }
  double at(int row, int col) const { return weights_[row * size_ + col]; }
  std::span<const double> weights() const { return weights_; }

 private:
  int size_;
  std::vector<double> weights_;
};

// Row-stochastic b x B matrix mapping hyperspectral bands to multispectral
// bands (b <= B).
class SrfMatrix {
 public:
  SrfMatrix() = default;
  SrfMatrix(int out_bands, int in_bands, std::vector<double> weights);

  static SrfMatrix identity(int bands);

  int out_bands() const { return out_bands_; }
  int in_bands() const { return in_bands_; }
  double at(int row, int col) const { return weights_[row * in_bands_ + col]; }
  std::span<const double> weights() const { return weights_; }

 private:
  int out_bands_ = 0;
  int in_bands_ = 0;
  std::vector<double> weights_;
};

// Deterministic random source: std::mt19937_64 (bit stream fixed by the C++
// standard) with library-owned uniform and Box-Muller normal transforms, so a
// seed yields the same draws with every compiler and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  // Independent generator derived from this generator's seed and a stream id.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hsifuse

#endif  // HSIFUSE_CORE_H_
