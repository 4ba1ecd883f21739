#include <doctest.h>

#include <filesystem>

#include "hsifuse/commands.h"
#include "hsifuse/metrics.h"

using namespace hsifuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hsifuse_test_commands_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = ExperimentConfig::parse(
      "bands=6\nheight=16\nwidth=16\nscale=2\nmsi_bands=3\n"
      "kernel=gaussian:5:1.2\nsrf_c=0.01\nsnr_hsi=40\nsnr_msi=40\n"
      "train_scenes=2\nbackbone_width=4\nbackbone_depth=1\nepochs=2\nbatch_size=1\n"
      "meta_tasks=2\nmeta_epochs=2\ntasks_per_batch=2\nest_kernel_size=5\n"
      "recon_width=4\nfusion_depth=1\nembed=4\nouter_iters=3\ninner_iters=2\n");
  c.set("output", out.string());
  return c;
}

std::string file(const fs::path& p) { return read_file(p.string()); }

}  // namespace

TEST_CASE("kernel and band specs") {
  const KernelSpec g = parse_kernel_spec("gaussian:7:1.5");
  REQUIRE(std::holds_alternative<GaussianSpec>(g));
  CHECK(std::get<GaussianSpec>(g).size == 7);
  CHECK(std::get<GaussianSpec>(g).sigma == 1.5);
  const KernelSpec m = parse_kernel_spec("motion:9:0.25:2");
  REQUIRE(std::holds_alternative<MotionSpec>(m));
  CHECK(std::get<MotionSpec>(m).length == 9);
  CHECK(std::get<MotionSpec>(m).angle == 0.25);
  CHECK(std::get<MotionSpec>(m).thickness == 2.0);
  CHECK_THROWS_AS(parse_kernel_spec("gaussian:7"), ParameterError);
  CHECK_THROWS_AS(parse_kernel_spec("box:3"), ParameterError);
  CHECK_THROWS_AS(parse_kernel_spec("motion:a:0:1"), ParameterError);

  const fs::path dir = scratch_dir("spec");
  save_kernel(BlurKernel::uniform(3), (dir / "k.txt").string());
  const KernelSpec f = parse_kernel_spec("file:" + (dir / "k.txt").string());
  REQUIRE(std::holds_alternative<BlurKernel>(f));
  CHECK(std::get<BlurKernel>(f).size() == 3);
  fs::remove_all(dir);

  CHECK(parse_band_triplet("5,2,0", 6) == std::array<int, 3>{5, 2, 0});
  CHECK_THROWS_AS(parse_band_triplet("6,2,0", 6), ParameterError);
  CHECK_THROWS_AS(parse_band_triplet("1,2", 6), ParameterError);
  CHECK_THROWS_AS(parse_band_triplet("1,2.5,0", 6), ParameterError);
}

TEST_CASE("command table") {
  for (const char* name : {"simulate", "pretrain-backbone", "meta-pretrain", "fuse",
                           "ablate", "evaluate", "export"}) {
    CHECK(commands().count(name) == 1);
  }
  CHECK(commands().size() == 7);
}

TEST_CASE("pipeline end to end") {
  const fs::path root = scratch_dir("pipeline");
  const fs::path sim = root / "sim", bb = root / "bb", meta = root / "meta",
                 fuse = root / "fuse", abl = root / "ablate", ev = root / "eval",
                 ex = root / "export";

  const auto s = run_simulate(tiny(sim), 3);
  CHECK(s["command"] == "simulate");
  CHECK(s["seed"] == 3);
  CHECK(s["lr_hsi_shape"] == nlohmann::json({6, 8, 8}));
  CHECK(s["hr_msi_shape"] == nlohmann::json({3, 16, 16}));
  for (const char* f : {"truth.hsic", "lr_hsi.hsic", "hr_msi.hsic", "kernel.txt", "srf.txt",
                        "summary.json"}) {
    CHECK_MESSAGE(fs::exists(sim / f), f);
  }
  CHECK(nlohmann::json::parse(file(sim / "summary.json")) == s);
  CHECK(s["config"]["kernel"] == "gaussian:5:1.2");

  const auto b = run_pretrain_backbone(tiny(bb), 3);
  CHECK(b["epoch_losses"].size() == 2);
  REQUIRE(fs::exists(bb / "backbone.ckpt"));

  ExperimentConfig mc = tiny(meta);
  mc.set("backbone", (bb / "backbone.ckpt").string());
  const auto m = run_meta_pretrain(mc, 3);
  CHECK(m["tasks"] == 2);
  REQUIRE(fs::exists(meta / "recon.ckpt"));

  auto fuse_cfg = [&](const fs::path& out) {
    ExperimentConfig c = tiny(out);
    c.set("lr_hsi", (sim / "lr_hsi.hsic").string());
    c.set("hr_msi", (sim / "hr_msi.hsic").string());
    c.set("backbone", (bb / "backbone.ckpt").string());
    c.set("recon_init", (meta / "recon.ckpt").string());
    c.set("truth", (sim / "truth.hsic").string());
    c.set("kernel_truth", (sim / "kernel.txt").string());
    c.set("srf_truth", (sim / "srf.txt").string());
    return c;
  };
  const auto f = run_fuse(fuse_cfg(fuse), 3);
  CHECK(f["mode"] == "alternating");
  CHECK(f["result"]["steps"]["recon"] == 6);
  CHECK(f["result"].contains("kernel_error"));
  const std::string trace = file(fuse / "trace.csv");
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 4);
  const HsiCube z = load_cube((fuse / "z.hsic").string());
  CHECK(z.shape() == CubeShape{6, 16, 16});

  // Same config and seed into a second directory: identical artifacts.
  const fs::path again = root / "fuse2";
  run_fuse(fuse_cfg(again), 3);
  for (const char* name : {"z.hsic", "kernel.txt", "srf.txt", "trace.csv"}) {
    CHECK_MESSAGE(file(fuse / name) == file(again / name), name);
  }

  ExperimentConfig ac = fuse_cfg(abl);
  ac.set("regularizer", "tv:0.01");
  run_ablate(ac, 3);
  const std::string table = file(abl / "ablation.csv");
  CHECK(table.rfind("Method,RMSE,PSNR,SAM,SSIM\n", 0) == 0);
  for (const char* row : {"\nseparate,", "\njoint,", "\nalternating,", "\nmap,"}) {
    CHECK_MESSAGE(table.find(row) != std::string::npos, row);
  }
  for (const char* name : {"trace_separate.csv", "trace_joint.csv", "trace_alternating.csv"}) {
    CHECK(fs::exists(abl / name));
  }
  ExperimentConfig no_truth = tiny(root / "x");
  no_truth.set("lr_hsi", (sim / "lr_hsi.hsic").string());
  no_truth.set("hr_msi", (sim / "hr_msi.hsic").string());
  no_truth.set("backbone", (bb / "backbone.ckpt").string());
  CHECK_THROWS_AS(run_ablate(no_truth, 3), ParameterError);

  ExperimentConfig ec = tiny(ev);
  ec.set("truth", (sim / "truth.hsic").string());
  ec.set("input", (fuse / "z.hsic").string());
  const auto e = run_evaluate(ec, 3);
  const MetricReport direct = evaluate(load_cube((sim / "truth.hsic").string()), z);
  CHECK(e["metrics"]["psnr"].get<double>() == doctest::Approx(direct.psnr).epsilon(1e-12));

  ExperimentConfig xc = tiny(ex);
  xc.set("input", (fuse / "z.hsic").string());
  xc.set("truth", (sim / "truth.hsic").string());
  xc.set("kernel_file", (fuse / "kernel.txt").string());
  xc.set("srf_file", (fuse / "srf.txt").string());
  const auto x = run_export(xc, 3);
  CHECK(x["files"].size() == 6);
  const std::string ppm = file(ex / "pseudocolor.ppm");
  CHECK(ppm.rfind("P6\n16 16\n255\n", 0) == 0);
  CHECK(ppm.size() == 13 + 16 * 16 * 3);
  CHECK(fs::exists(ex / "error_map.ppm"));
  CHECK(file(ex / "kernel.txt") == file(fuse / "kernel.txt"));
  CHECK_THROWS_AS(run_export(tiny(root / "empty"), 3), ParameterError);

  fs::remove_all(root);
}

TEST_CASE("missing inputs are reported") {
  const fs::path dir = scratch_dir("missing");
  CHECK_THROWS_AS(run_fuse(tiny(dir), 1), ParameterError);
  ExperimentConfig c = tiny(dir);
  c.set("truth", (dir / "nope.hsic").string());
  c.set("input", (dir / "nope.hsic").string());
  CHECK_THROWS_AS(run_evaluate(c, 1), FormatError);
  fs::remove_all(dir);
}
