#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "helpers.h"
#include "hsifuse/io.h"

using namespace hsifuse;
using hsifuse::test::random_cube;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hsifuse_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& s, float f) { put_u32(s, std::bit_cast<std::uint32_t>(f)); }

}  // namespace

TEST_CASE("cube encoding matches the documented byte layout") {
  HsiCube z(2, 1, 2);
  z.at(0, 0, 0) = 0.5;
  z.at(0, 0, 1) = -1.25;
  z.at(1, 0, 0) = 3.0;
  z.at(1, 0, 1) = 0.1;
  std::string expect = "HSIC";
  put_u32(expect, 1);
  put_u32(expect, 2);
  put_u32(expect, 1);
  put_u32(expect, 2);
  for (float f : {0.5f, -1.25f, 3.0f, 0.1f}) put_f32(expect, f);
  CHECK(encode_cube(z) == expect);
}

TEST_CASE("cube round trip") {
  Rng rng(1);
  const HsiCube z = random_cube(4, 8, 8, rng, -2.0, 2.0);
  const fs::path dir = scratch_dir("cube");
  save_cube(z, (dir / "z.hsic").string());
  const HsiCube back = load_cube((dir / "z.hsic").string());
  REQUIRE(back.shape() == z.shape());
  for (std::size_t i = 0; i < z.data().size(); ++i) {
    CHECK(std::abs(back.data()[i] - z.data()[i]) <= std::ldexp(std::abs(z.data()[i]), -24));
    CHECK(back.data()[i] == static_cast<double>(static_cast<float>(z.data()[i])));
  }
  CHECK(fs::file_size(dir / "z.hsic") == 20 + 4 * z.data().size());
  fs::remove_all(dir);
}

TEST_CASE("cube decoding rejects malformed input") {
  Rng rng(2);
  const std::string good = encode_cube(random_cube(2, 3, 3, rng));

  std::string bad = good;
  bad[0] = 'X';
  try {
    decode_cube(bad);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic at offset 0") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_cube(""), FormatError);
  try {
    decode_cube("");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_cube(good.substr(0, good.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_cube(good + "abcd"), FormatError);

  std::string huge = "HSIC";
  put_u32(huge, 1);
  for (int i = 0; i < 3; ++i) put_u32(huge, 0xffffffffu);
  CHECK_THROWS_AS(decode_cube(huge), FormatError);

  std::string version = good;
  version[4] = 2;
  CHECK_THROWS_AS(decode_cube(version), FormatError);

  const fs::path dir = scratch_dir("empty");
  write_file((dir / "empty.hsic").string(), "");
  CHECK_THROWS_AS(load_cube((dir / "empty.hsic").string()), FormatError);
  CHECK_THROWS_AS(load_cube((dir / "missing.hsic").string()), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(3);
  ad::NetworkParams p;
  ad::Tensor a({2, 3, 1, 1});
  for (double& v : a.data) v = rng.uniform(-1, 1);
  ad::Tensor b({5});
  for (double& v : b.data) v = rng.uniform(-1, 1);
  p.set("layer.w", a);
  p.set("layer.b", b);
  const ad::NetworkParams back = decode_checkpoint(encode_checkpoint(p));
  REQUIRE(back.tensors().size() == 2);
  for (const auto& [name, t] : p.tensors()) {
    const ad::Tensor& u = back.at(name);
    CHECK(u.shape == t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      CHECK(u.data[i] == static_cast<double>(static_cast<float>(t.data[i])));
    }
  }
  CHECK(encode_checkpoint(p).substr(0, 4) == "HSPW");
  std::string bad = encode_checkpoint(p);
  bad[1] = 'Q';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(p) + "x"), FormatError);
}

TEST_CASE("matrix text round trip") {
  const std::vector<double> v{0.1, 1.0 / 3.0, 2e-17, 5.0, -0.0, 1e300};
  int rows = 0, cols = 0;
  const auto back = parse_matrix_text(matrix_text(v, 2, 3), rows, cols);
  CHECK(rows == 2);
  CHECK(cols == 3);
  CHECK(back == v);
  CHECK_THROWS_AS(parse_matrix_text("1 2\n3\n", rows, cols), FormatError);
  CHECK_THROWS_AS(parse_matrix_text("1 x\n", rows, cols), FormatError);
  CHECK_THROWS_AS(parse_matrix_text("", rows, cols), FormatError);

  const fs::path dir = scratch_dir("matrix");
  const BlurKernel k(3, {0.0, 0.1, 0.0, 0.1, 0.6, 0.1, 0.0, 0.1, 0.0});
  save_kernel(k, (dir / "k.txt").string());
  const BlurKernel kb = load_kernel((dir / "k.txt").string());
  CHECK(kb.size() == 3);
  CHECK(std::ranges::equal(kb.weights(), k.weights()));
  const SrfMatrix p(2, 3, {0.2, 0.3, 0.5, 0.6, 0.4, 0.0});
  save_srf(p, (dir / "p.txt").string());
  const SrfMatrix pb = load_srf((dir / "p.txt").string());
  CHECK(pb.out_bands() == 2);
  CHECK(std::ranges::equal(pb.weights(), p.weights()));
  write_file((dir / "bad.txt").string(), "0.5 0.5\n");
  CHECK_THROWS_AS(load_kernel((dir / "bad.txt").string()), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("ppm encoding") {
  RgbImage img{2, 1, {1, 2, 3, 4, 5, 6}};
  const std::string expect = std::string("P6\n2 1\n255\n") + "\x01\x02\x03\x04\x05\x06";
  CHECK(encode_ppm(img) == expect);
  img.pixels.pop_back();
  CHECK_THROWS_AS(encode_ppm(img), ShapeError);
}

TEST_CASE("pseudocolor stretch") {
  SUBCASE("constant cube is mid-gray") {
    HsiCube z(3, 4, 5);
    for (double& v : z.data()) v = 0.37;
    const RgbImage img = pseudocolor(z, {0, 1, 2});
    CHECK(img.width == 5);
    CHECK(img.height == 4);
    for (auto px : img.pixels) CHECK(px == 128);
  }
  SUBCASE("repeated band is grayscale") {
    Rng rng(4);
    const RgbImage img = pseudocolor(random_cube(3, 6, 6, rng), {1, 1, 1});
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      CHECK(img.pixels[i] == img.pixels[i + 1]);
      CHECK(img.pixels[i] == img.pixels[i + 2]);
    }
  }
  SUBCASE("2x2 bytes") {
    HsiCube z(2, 2, 2);
    // band 0: 0, 0.25, 0.5, 1 -> 0, 63.75, 127.5, 255
    // band 1: 10, 6, 4, 2     -> 255, 127.5, 63.75, 0
    const double b0[] = {0.0, 0.25, 0.5, 1.0};
    const double b1[] = {10.0, 6.0, 4.0, 2.0};
    for (int i = 0; i < 4; ++i) {
      z.at(0, i / 2, i % 2) = b0[i];
      z.at(1, i / 2, i % 2) = b1[i];
    }
    const RgbImage img = pseudocolor(z, {0, 1, 0});
    const std::vector<std::uint8_t> expect{0,   255, 0,   64,  128, 64,
                                           128, 64,  128, 255, 0,   255};
    CHECK(img.pixels == expect);
    CHECK_THROWS_AS(pseudocolor(z, {0, 2, 0}), ParameterError);
    CHECK_THROWS_AS(pseudocolor(z, {-1, 0, 0}), ParameterError);
  }
}

TEST_CASE("error map colour table") {
  CHECK(error_color(0) == std::array<std::uint8_t, 3>{0, 0, 0});
  CHECK(error_color(255) == std::array<std::uint8_t, 3>{255, 0, 0});

  HsiCube ref(2, 1, 4);
  HsiCube est(2, 1, 4);
  // Mean absolute spectral errors 0, 0.04, 0.085 and 0.5 (saturated).
  const double err[] = {0.0, 0.04, 0.085, 0.5};
  for (int c = 0; c < 4; ++c) {
    ref.at(0, 0, c) = 0.3;
    ref.at(1, 0, c) = 0.6;
    est.at(0, 0, c) = 0.3 + err[c];
    est.at(1, 0, c) = 0.6 - err[c];
  }
  const RgbImage same = error_map(ref, ref);
  for (auto px : same.pixels) CHECK(px == 0);

  // 0.04 -> index 102, t = 0.4 between blue and green: frac 0.6.
  // 0.085 -> index 217, t = 217/255 between yellow and red: frac 103/255.
  const RgbImage img = error_map(ref, est);
  const std::vector<std::uint8_t> expect{0,   0, 0, 0, 153, 102,
                                         255, 152, 0, 255, 0, 0};
  CHECK(img.pixels == expect);
  CHECK_THROWS_AS(error_map(ref, HsiCube(2, 1, 3)), ShapeError);
}

TEST_CASE("matrix image") {
  const std::vector<double> v{0.0, 1.0, 0.5, 0.25};
  const RgbImage img = matrix_image(v, 2, 2, 2);
  CHECK(img.width == 4);
  CHECK(img.height == 4);
  auto gray = [&](int r, int c) { return img.pixels[(r * 4 + c) * 3]; };
  CHECK(gray(0, 0) == 0);
  CHECK(gray(1, 1) == 0);
  CHECK(gray(0, 2) == 255);
  CHECK(gray(3, 1) == 128);
  CHECK(gray(3, 3) == 64);
}

TEST_CASE("experiment config") {
  const auto cfg = ExperimentConfig::parse("# comment\nseed = 7\n\nscale=4\nmode=joint\n");
  CHECK(cfg.get_int("seed", 0) == 7);
  CHECK(cfg.get_double("scale", 0) == 4.0);
  CHECK(cfg.get("mode", "") == "joint");
  CHECK(cfg.get("kernel", "none") == "none");
  CHECK(cfg.values().size() == 3);
  CHECK_THROWS_AS(ExperimentConfig::parse("seed=1\nbogus=2\n"), ParameterError);
  CHECK_THROWS_AS(ExperimentConfig::parse("seed=1\nseed=2\n"), ParameterError);
  CHECK_THROWS_AS(ExperimentConfig::parse("seed\n"), ParameterError);
  CHECK_THROWS_AS(ExperimentConfig::parse("seed=abc\n").get_int("seed", 0), ParameterError);
  CHECK_THROWS_AS(ExperimentConfig::parse("scale=2.5\n").get_int("scale", 0), ParameterError);
  ExperimentConfig c;
  CHECK_THROWS_AS(c.set("nope", "1"), ParameterError);
  for (const std::string& key : ExperimentConfig::known_keys()) CHECK_NOTHROW(c.set(key, "1"));
}
