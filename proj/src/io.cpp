#include "hsifuse/io.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace hsifuse {

namespace {

constexpr char kCubeMagic[4] = {'H', 'S', 'I', 'C'};
constexpr char kCheckpointMagic[4] = {'H', 'S', 'P', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, const char* what) : b_(bytes), what_(what) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(std::string(what_) + ": truncated " + field +
                        " at offset " + std::to_string(pos_) + " (need " +
                        std::to_string(n) + " bytes, have " +
                        std::to_string(remaining()) + ")");
    }
  }
  void magic(const char (&expected)[4]) {
    need(4, "header");
    if (std::memcmp(b_.data() + pos_, expected, 4) != 0) {
      throw FormatError(std::string(what_) + ": bad magic at offset " +
                        std::to_string(pos_) + ", expected \"" +
                        std::string(expected, 4) + "\"");
    }
    pos_ += 4;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i]))
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  double f32() {
    const std::uint32_t bits = u32("payload");
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string text(std::size_t n, const char* field) {
    need(n, field);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void version() {
    const std::size_t at = pos_;
    const std::uint32_t v = u32("header");
    if (v != kVersion) {
      throw FormatError(std::string(what_) + ": unsupported version " +
                        std::to_string(v) + " at offset " + std::to_string(at));
    }
  }

 private:
  const std::string& b_;
  const char* what_;
  std::size_t pos_ = 0;
};

// Product of dims, rejecting zero and anything that does not fit an int
// index or the remaining payload.
std::size_t checked_count(const std::vector<std::uint32_t>& dims,
                          const char* what) {
  std::uint64_t n = 1;
  for (std::uint32_t d : dims) {
    if (d == 0) throw FormatError(std::string(what) + ": zero dimension");
    if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      throw FormatError(std::string(what) + ": dimension overflow");
    }
    n *= d;
    if (n > (std::uint64_t{1} << 40)) {
      throw FormatError(std::string(what) + ": dimension overflow");
    }
  }
  return static_cast<std::size_t>(n);
}

double stretch_byte(double v, double lo, double hi) {
  if (!(hi > lo)) return 128.0;
  return std::floor(255.0 * (v - lo) / (hi - lo) + 0.5);
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// -------------------------------------------------------------- files

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path);
}

// -------------------------------------------------------------- cubes

std::string encode_cube(const HsiCube& cube) {
  std::string out(kCubeMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(cube.bands()));
  put_u32(out, static_cast<std::uint32_t>(cube.height()));
  put_u32(out, static_cast<std::uint32_t>(cube.width()));
  out.reserve(out.size() + 4 * cube.size());
  for (double v : cube.data()) put_f32(out, v);
  return out;
}

HsiCube decode_cube(const std::string& bytes) {
  Reader r(bytes, "cube file");
  r.magic(kCubeMagic);
  r.version();
  std::vector<std::uint32_t> dims{r.u32("header"), r.u32("header"),
                                  r.u32("header")};
  const std::size_t n = checked_count(dims, "cube file");
  if (r.remaining() < 4 * n) {
    throw FormatError("cube file: truncated payload at offset " +
                      std::to_string(r.offset()) + ": expected " +
                      std::to_string(4 * n) + " bytes, have " +
                      std::to_string(r.remaining()));
  }
  if (r.remaining() != 4 * n) {
    throw FormatError("cube file: " + std::to_string(r.remaining() - 4 * n) +
                      " trailing bytes after payload");
  }
  std::vector<double> data(n);
  for (double& v : data) {
    v = r.f32();
    if (!std::isfinite(v)) throw FormatError("cube file: non-finite value");
  }
  return HsiCube({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                  static_cast<int>(dims[2])},
                 std::move(data));
}

void save_cube(const HsiCube& cube, const std::string& path) {
  write_file(path, encode_cube(cube));
}

HsiCube load_cube(const std::string& path) {
  try {
    return decode_cube(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// --------------------------------------------------------- checkpoints

std::string encode_checkpoint(const ad::NetworkParams& params) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& [name, t] : params.tensors()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) put_f32(out, v);
  }
  return out;
}

ad::NetworkParams decode_checkpoint(const std::string& bytes) {
  Reader r(bytes, "checkpoint");
  r.magic(kCheckpointMagic);
  r.version();
  const std::uint32_t count = r.u32("entry count");
  ad::NetworkParams params;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t len = r.u32("name length");
    std::string name = r.text(len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for " + name);
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) d = r.u32("dims");
    const std::size_t n = checked_count(dims, "checkpoint");
    r.need(4 * n, "payload");
    std::vector<double> values(n);
    for (double& v : values) v = r.f32();
    std::vector<int> shape(dims.begin(), dims.end());
    if (params.contains(name)) throw FormatError("checkpoint: duplicate " + name);
    params.set(name, ad::Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return params;
}

void save_checkpoint(const ad::NetworkParams& params, const std::string& path) {
  write_file(path, encode_checkpoint(params));
}

ad::NetworkParams load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ------------------------------------------------------------ matrices

std::string matrix_text(std::span<const double> values, int rows, int cols) {
  if (values.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("matrix_text: size mismatch");
  }
  std::string out;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (c) out += ' ';
      out += fmt17(values[r * cols + c]);
    }
    out += '\n';
  }
  return out;
}

std::vector<double> parse_matrix_text(const std::string& text, int& rows,
                                      int& cols) {
  std::vector<double> values;
  std::istringstream lines(text);
  std::string line;
  rows = 0;
  cols = -1;
  while (std::getline(lines, line)) {
    std::istringstream ls(line);
    std::string tok;
    int n = 0;
    while (ls >> tok) {
      std::size_t used = 0;
      double v;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw FormatError("matrix: bad number '" + tok + "'");
      values.push_back(v);
      ++n;
    }
    if (n == 0) continue;
    if (cols >= 0 && n != cols) {
      throw FormatError("matrix: row " + std::to_string(rows + 1) + " has " +
                        std::to_string(n) + " entries, expected " +
                        std::to_string(cols));
    }
    cols = n;
    ++rows;
  }
  if (rows == 0) throw FormatError("matrix: empty");
  return values;
}

void save_kernel(const BlurKernel& k, const std::string& path) {
  write_file(path, matrix_text(k.weights(), k.size(), k.size()));
}

BlurKernel load_kernel(const std::string& path) {
  int rows, cols;
  auto v = parse_matrix_text(read_file(path), rows, cols);
  if (rows != cols) throw FormatError(path + ": kernel must be square");
  return BlurKernel(rows, std::move(v));
}

void save_srf(const SrfMatrix& p, const std::string& path) {
  write_file(path, matrix_text(p.weights(), p.out_bands(), p.in_bands()));
}

SrfMatrix load_srf(const std::string& path) {
  int rows, cols;
  auto v = parse_matrix_text(read_file(path), rows, cols);
  return SrfMatrix(rows, cols, std::move(v));
}

// -------------------------------------------------------------- images

std::string encode_ppm(const RgbImage& img) {
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw ShapeError("encode_ppm: pixel buffer size mismatch");
  }
  std::string out = "P6\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

void save_ppm(const RgbImage& img, const std::string& path) {
  write_file(path, encode_ppm(img));
}

RgbImage pseudocolor(const HsiCube& z, std::array<int, 3> bands) {
  for (int b : bands) {
    if (b < 0 || b >= z.bands()) {
      throw ParameterError("pseudocolor: band " + std::to_string(b) +
                           " outside [0, " + std::to_string(z.bands()) + ")");
    }
  }
  RgbImage img{z.width(), z.height(), {}};
  img.pixels.resize(z.shape().plane() * 3);
  for (int ch = 0; ch < 3; ++ch) {
    auto band = z.band(bands[ch]);
    const auto [lo, hi] = std::minmax_element(band.begin(), band.end());
    for (std::size_t i = 0; i < band.size(); ++i) {
      img.pixels[3 * i + ch] =
          static_cast<std::uint8_t>(stretch_byte(band[i], *lo, *hi));
    }
  }
  return img;
}

void export_pseudocolor(const HsiCube& z, std::array<int, 3> bands,
                        const std::string& path) {
  save_ppm(pseudocolor(z, bands), path);
}

std::array<std::uint8_t, 3> error_color(int index) {
  static constexpr double kStops[5][4] = {{0.0, 0, 0, 0},
                                          {0.25, 0, 0, 255},
                                          {0.5, 0, 255, 0},
                                          {0.75, 255, 255, 0},
                                          {1.0, 255, 0, 0}};
  const double t = std::clamp(index, 0, 255) / 255.0;
  int seg = 0;
  while (seg < 3 && t > kStops[seg + 1][0]) ++seg;
  const double u = (t - kStops[seg][0]) / (kStops[seg + 1][0] - kStops[seg][0]);
  std::array<std::uint8_t, 3> rgb{};
  for (int c = 0; c < 3; ++c) {
    const double v = kStops[seg][c + 1] + u * (kStops[seg + 1][c + 1] - kStops[seg][c + 1]);
    rgb[c] = static_cast<std::uint8_t>(std::floor(v + 0.5));
  }
  return rgb;
}

RgbImage error_map(const HsiCube& ref, const HsiCube& est, double max_error) {
  require_same_shape(ref, est, "error_map");
  if (!(max_error > 0.0)) throw ParameterError("error_map: max_error must be > 0");
  const std::size_t plane = ref.shape().plane();
  RgbImage img{ref.width(), ref.height(), {}};
  img.pixels.resize(plane * 3);
  auto r = ref.data();
  auto e = est.data();
  for (std::size_t p = 0; p < plane; ++p) {
    double err = 0.0;
    for (int b = 0; b < ref.bands(); ++b) err += std::abs(r[b * plane + p] - e[b * plane + p]);
    err /= ref.bands();
    const int idx = static_cast<int>(
        std::floor(255.0 * std::min(err, max_error) / max_error + 0.5));
    const auto rgb = error_color(idx);
    for (int c = 0; c < 3; ++c) img.pixels[3 * p + c] = rgb[c];
  }
  return img;
}

void export_error_map(const HsiCube& ref, const HsiCube& est,
                      const std::string& path, double max_error) {
  save_ppm(error_map(ref, est, max_error), path);
}

RgbImage matrix_image(std::span<const double> values, int rows, int cols,
                      int cell) {
  if (values.size() != static_cast<std::size_t>(rows) * cols || cell < 1) {
    throw ShapeError("matrix_image: size mismatch");
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  RgbImage img{cols * cell, rows * cell, {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto v = static_cast<std::uint8_t>(
          stretch_byte(values[(y / cell) * cols + x / cell], *lo, *hi));
      const std::size_t i = (static_cast<std::size_t>(y) * img.width + x) * 3;
      img.pixels[i] = img.pixels[i + 1] = img.pixels[i + 2] = v;
    }
  }
  return img;
}

// -------------------------------------------------------------- config

const std::vector<std::string>& ExperimentConfig::known_keys() {
  static const std::vector<std::string> keys = {
      "seed",          "scale",          "bands",          "height",
      "width",         "msi_bands",      "kernel",         "est_kernel_size",
      "srf_path",      "srf_c",          "snr_hsi",        "snr_msi",
      "outer_iters",   "inner_iters",    "lr_degeneration", "lr_reconstruction",
      "mode",          "regularizer",    "eta",            "xi",
      "backbone_width", "backbone_depth", "recon_width",   "fusion_depth",
      "embed",         "epochs",         "batch_size",     "train_lr",
      "train_scenes",  "meta_epochs",    "meta_tasks",     "alpha",
      "meta_lr",       "tasks_per_batch", "input",         "output",
      "backbone",      "recon_init",     "lr_hsi",         "hr_msi",
      "truth",         "kernel_truth",   "srf_truth",      "rgb",
      "recon_zero_init", "kernel_file",   "srf_file"};
  return keys;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const auto& keys = known_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
    throw ParameterError("config: unknown key '" + key + "'");
  }
  values_[key] = value;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(lineno) +
                           ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (cfg.has(key)) {
      throw ParameterError("config line " + std::to_string(lineno) +
                           ": duplicate key '" + key + "'");
    }
    cfg.set(key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return parse(read_file(path));
}

std::string ExperimentConfig::get(const std::string& key,
                                  const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double ExperimentConfig::get_double(const std::string& key,
                                    double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& s = it->second;
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw ParameterError("config: " + key + "='" + s + "' is not a number");
  }
  return v;
}

long ExperimentConfig::get_int(const std::string& key, long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& s = it->second;
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw ParameterError("config: " + key + "='" + s + "' is not an integer");
  }
  return v;
}

}  // namespace hsifuse
