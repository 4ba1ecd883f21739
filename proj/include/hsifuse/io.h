// File formats and exports.
//
// Cube file (little-endian throughout):
//   offset 0   4 bytes  magic "HSIC"
//   offset 4   u32      version (1)
//   offset 8   u32      bands
//   offset 12  u32      height
//   offset 16  u32      width
//   offset 20  f32[]    bands*height*width values, band-major
//
// Parameter checkpoint:
//   "HSPW", u32 version (1), u32 entry count, then per entry
//   u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values.
//
// Images are binary PPM (P6, maxval 255).

#ifndef HSIFUSE_IO_H_
#define HSIFUSE_IO_H_

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hsifuse/autodiff.h"
#include "hsifuse/core.h"

namespace hsifuse {

std::string encode_cube(const HsiCube& cube);
HsiCube decode_cube(const std::string& bytes);
void save_cube(const HsiCube& cube, const std::string& path);
HsiCube load_cube(const std::string& path);

std::string encode_checkpoint(const ad::NetworkParams& params);
ad::NetworkParams decode_checkpoint(const std::string& bytes);
void save_checkpoint(const ad::NetworkParams& params, const std::string& path);
ad::NetworkParams load_checkpoint(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

// Whitespace-separated text matrices, one row per line, %.17g.
std::string matrix_text(std::span<const double> values, int rows, int cols);
std::vector<double> parse_matrix_text(const std::string& text, int& rows,
                                      int& cols);
void save_kernel(const BlurKernel& k, const std::string& path);
BlurKernel load_kernel(const std::string& path);
void save_srf(const SrfMatrix& p, const std::string& path);
SrfMatrix load_srf(const std::string& path);

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triplets
};

std::string encode_ppm(const RgbImage& img);
void save_ppm(const RgbImage& img, const std::string& path);

// Per band v -> round(255 (v - min) / (max - min)); a constant band maps to
// 128.
RgbImage pseudocolor(const HsiCube& z, std::array<int, 3> bands);
void export_pseudocolor(const HsiCube& z, std::array<int, 3> bands,
                        const std::string& path);

// Error-map colour scale: mean absolute spectral error e per pixel is mapped
// to index i = round(255 min(e, max_error) / max_error) of a 256-entry table
// interpolated linearly between the stops
//   0: (0,0,0)  0.25: (0,0,255)  0.5: (0,255,0)  0.75: (255,255,0)  1: (255,0,0)
// and rounded to the nearest integer.
inline constexpr double kErrorMapMax = 0.1;
std::array<std::uint8_t, 3> error_color(int index);
RgbImage error_map(const HsiCube& ref, const HsiCube& est,
                   double max_error = kErrorMapMax);
void export_error_map(const HsiCube& ref, const HsiCube& est,
                      const std::string& path, double max_error = kErrorMapMax);

// Grayscale min-max rendering of a matrix, each entry drawn as a
// cell x cell block.
RgbImage matrix_image(std::span<const double> values, int rows, int cols,
                      int cell);

// key=value configuration. Blank lines and lines starting with '#' are
// ignored; unknown keys and duplicates are rejected.
class ExperimentConfig {
 public:
  static const std::vector<std::string>& known_keys();
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace hsifuse

#endif  // HSIFUSE_IO_H_
