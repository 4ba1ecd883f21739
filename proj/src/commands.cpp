#include "hsifuse/commands.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "hsifuse/driver.h"
#include "hsifuse/estimation.h"
#include "hsifuse/metrics.h"
#include "hsifuse/reconstruction.h"
#include "hsifuse/scene.h"

namespace hsifuse {

using nlohmann::json;

namespace {

// Fixed stream offsets below the root seed.
enum Stream : std::uint64_t {
  kSceneStream = 1,
  kNoiseStream = 2,
  kTrainScenes = 100,
  kDatasetStream = 3,
  kBackboneInit = 4,
  kBackboneTrain = 5,
  kMetaTasks = 6,
  kMetaInit = 7,
  kMetaTrain = 8,
  kReconInit = 9,
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw ParameterError(what + ": '" + s + "' is not a number");
  }
  return v;
}

std::string require(const ExperimentConfig& cfg, const std::string& key) {
  if (!cfg.has(key)) throw ParameterError("config: missing required key '" + key + "'");
  return cfg.get(key, "");
}

int get_positive(const ExperimentConfig& cfg, const std::string& key, long fallback) {
  const long v = cfg.get_int(key, fallback);
  if (v < 1 || v > (1 << 20)) {
    throw ParameterError("config: " + key + " must be a positive integer");
  }
  return static_cast<int>(v);
}

std::filesystem::path output_dir(const ExperimentConfig& cfg) {
  std::filesystem::path dir = require(cfg, "output");
  std::filesystem::create_directories(dir);
  return dir;
}

json summary_head(const std::string& command, const ExperimentConfig& cfg,
                  std::uint64_t seed) {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  json c = json::object();
  for (const auto& [k, v] : cfg.values()) c[k] = v;
  j["config"] = c;
  return j;
}

json finish(json j, const std::filesystem::path& dir) {
  write_file((dir / "summary.json").string(), j.dump(2) + "\n");
  return j;
}

json metrics_json(const MetricReport& m) {
  return {{"rmse", m.rmse}, {"psnr", m.psnr}, {"sam", m.sam}, {"ssim", m.ssim}};
}

SrfMatrix base_srf(const ExperimentConfig& cfg, int msi_bands, int bands) {
  if (cfg.has("srf_path")) {
    SrfMatrix p = load_srf(cfg.get("srf_path", ""));
    if (p.out_bands() != msi_bands || p.in_bands() != bands) {
      throw ShapeError("srf_path: matrix is " + std::to_string(p.out_bands()) +
                       "x" + std::to_string(p.in_bands()) + ", expected " +
                       std::to_string(msi_bands) + "x" + std::to_string(bands));
    }
    return p;
  }
  return default_srf(msi_bands, bands);
}

struct SceneDims {
  int bands, height, width, scale, msi_bands;
};

SceneDims scene_dims(const ExperimentConfig& cfg) {
  return {get_positive(cfg, "bands", 16), get_positive(cfg, "height", 64),
          get_positive(cfg, "width", 64), get_positive(cfg, "scale", 4),
          get_positive(cfg, "msi_bands", 4)};
}

std::vector<HsiCube> training_scenes(const ExperimentConfig& cfg,
                                     const SceneDims& d, const Rng& root) {
  const int n = get_positive(cfg, "train_scenes", 12);
  std::vector<HsiCube> cubes;
  for (int i = 0; i < n; ++i) {
    Rng r = root.fork(kTrainScenes + i);
    cubes.push_back(synthetic_scene(d.bands, d.height, d.width, r));
  }
  return cubes;
}

BackboneConfig backbone_config_from(const ExperimentConfig& cfg) {
  BackboneConfig b;
  b.width = get_positive(cfg, "backbone_width", 32);
  b.depth = get_positive(cfg, "backbone_depth", 4);
  return b;
}

// Architecture of a stored backbone, read off its tensor names and shapes.
BackboneConfig backbone_config_from(const ad::NetworkParams& params) {
  BackboneConfig b;
  b.depth = 0;
  while (params.contains("bb.conv" + std::to_string(b.depth) + ".w")) ++b.depth;
  if (b.depth == 0) throw FormatError("backbone checkpoint: no bb.conv0.w tensor");
  b.width = params.at("bb.conv0.w").dim(0);
  return b;
}

ReconNetConfig recon_config(const ExperimentConfig& cfg) {
  ReconNetConfig r;
  r.spatial_width = r.spectral_width = get_positive(cfg, "recon_width", 32);
  r.fusion_depth = get_positive(cfg, "fusion_depth", 2);
  r.k_embed = r.p_embed = get_positive(cfg, "embed", 16);
  r.zero_output = cfg.get_int("recon_zero_init", 1) != 0;
  return r;
}

Schedule schedule_from(const ExperimentConfig& cfg) {
  Schedule s;
  s.outer_iters = get_positive(cfg, "outer_iters", s.outer_iters);
  s.inner_iters = get_positive(cfg, "inner_iters", s.inner_iters);
  s.lr_degeneration = cfg.get_double("lr_degeneration", s.lr_degeneration);
  s.lr_reconstruction = cfg.get_double("lr_reconstruction", s.lr_reconstruction);
  validate(s);
  return s;
}

Regularizer parse_regularizer(const std::string& text) {
  Regularizer r;
  if (text == "none") return r;
  const auto parts = split(text, ':');
  if (parts.size() != 2) {
    throw ParameterError("regularizer: expected none, tikhonov:W or tv:W, got '" + text + "'");
  }
  if (parts[0] == "tikhonov") {
    r.kind = RegularizerKind::kTikhonov;
  } else if (parts[0] == "tv") {
    r.kind = RegularizerKind::kTotalVariation;
  } else {
    throw ParameterError("regularizer: unknown kind '" + parts[0] + "'");
  }
  r.weight = to_double(parts[1], "regularizer weight");
  validate(r);
  return r;
}

// Inputs and state shared by fuse and ablate.
struct FusionSetup {
  HsiCube x;
  HsiCube y;
  int scale = 1;
  HsiCube zhat;
  BlurKernel k_init;
  SrfMatrix p_init;
  ad::NetworkParams theta;
  RunOptions options;
  std::optional<GroundTruth> truth;
};

FusionSetup fusion_setup(const ExperimentConfig& cfg, std::uint64_t seed) {
  FusionSetup f;
  f.x = load_cube(require(cfg, "lr_hsi"));
  f.y = load_cube(require(cfg, "hr_msi"));
  if (f.x.height() == 0 || f.y.height() % f.x.height() != 0 ||
      f.y.width() % f.x.width() != 0 ||
      f.y.height() / f.x.height() != f.y.width() / f.x.width()) {
    throw ShapeError("fuse: HR MSI " + to_string(f.y.shape()) +
                     " is not an integer multiple of LR HSI " + to_string(f.x.shape()));
  }
  f.scale = f.y.height() / f.x.height();
  if (cfg.has("scale") && cfg.get_int("scale", 0) != f.scale) {
    throw ShapeError("fuse: scale=" + cfg.get("scale", "") +
                     " disagrees with the input sizes (ratio " +
                     std::to_string(f.scale) + ")");
  }
  const ad::NetworkParams theta_f = load_checkpoint(require(cfg, "backbone"));
  Backbone bb = build_backbone(backbone_config_from(theta_f), f.x.shape(),
                               f.y.bands(), f.scale);
  f.zhat = backbone_forward(bb, theta_f, f.x, f.y);

  const int ksize = get_positive(cfg, "est_kernel_size", 9);
  if (ksize % 2 == 0) throw ParameterError("est_kernel_size must be odd");
  f.k_init = gaussian_kernel({ksize, 1.0});
  f.p_init = base_srf(cfg, f.y.bands(), f.x.bands());

  RunOptions& o = f.options;
  o.schedule = schedule_from(cfg);
  o.mode = parse_mode(cfg.get("mode", "alternating"));
  o.kernel_estimation.eta = cfg.get_double("eta", o.kernel_estimation.eta);
  o.srf_estimation.xi = cfg.get_double("xi", o.srf_estimation.xi);
  o.recon = recon_config(cfg);

  if (cfg.has("recon_init")) {
    f.theta = load_checkpoint(cfg.get("recon_init", ""));
  } else {
    ReconNet proto = build_recon_net(o.recon, f.zhat.shape(), ksize, f.y.bands());
    Rng r = Rng(seed).fork(kReconInit);
    f.theta = proto.graph.init_params(r);
  }

  if (cfg.has("truth")) {
    GroundTruth gt;
    gt.z = load_cube(cfg.get("truth", ""));
    require_same_shape(gt.z, f.zhat, "truth");
    gt.k = cfg.has("kernel_truth") ? load_kernel(cfg.get("kernel_truth", ""))
                                   : f.k_init;
    gt.p = cfg.has("srf_truth") ? load_srf(cfg.get("srf_truth", "")) : f.p_init;
    f.truth = std::move(gt);
  }
  return f;
}

json run_summary(const RunResult& r, const std::optional<GroundTruth>& truth) {
  json j;
  j["steps"] = {{"kernel", r.steps.kernel}, {"srf", r.steps.srf}, {"recon", r.steps.recon}};
  if (truth) {
    j["metrics"] = metrics_json(evaluate(truth->z, r.z));
    j["kernel_error"] = kernel_relative_error(r.k, truth->k);
    j["srf_error"] = srf_relative_error(r.p, truth->p);
  }
  if (!r.trace.records.empty()) {
    j["final_data_loss"] = r.trace.records.back().data_loss;
  }
  return j;
}

}  // namespace

KernelSpec parse_kernel_spec(const std::string& text) {
  const auto parts = split(text, ':');
  if (parts.empty()) throw ParameterError("kernel spec is empty");
  auto need = [&](std::size_t n) {
    if (parts.size() != n) {
      throw ParameterError("kernel spec '" + text + "': expected " +
                           std::to_string(n - 1) + " fields after '" + parts[0] + "'");
    }
  };
  if (parts[0] == "gaussian") {
    need(3);
    GaussianSpec g;
    g.size = static_cast<int>(to_double(parts[1], "kernel size"));
    g.sigma = to_double(parts[2], "kernel sigma");
    return g;
  }
  if (parts[0] == "motion") {
    need(4);
    MotionSpec m;
    m.length = static_cast<int>(to_double(parts[1], "motion length"));
    m.angle = to_double(parts[2], "motion angle");
    m.thickness = to_double(parts[3], "motion thickness");
    return m;
  }
  if (parts[0] == "file") {
    if (parts.size() < 2) throw ParameterError("kernel spec 'file:' needs a path");
    return load_kernel(text.substr(5));
  }
  throw ParameterError("kernel spec '" + text +
                       "': expected gaussian:, motion: or file:");
}

std::array<int, 3> parse_band_triplet(const std::string& text, int bands) {
  const auto parts = split(text, ',');
  if (parts.size() != 3) {
    throw ParameterError("rgb: expected three comma-separated band indices");
  }
  std::array<int, 3> out{};
  for (int i = 0; i < 3; ++i) {
    const double v = to_double(parts[i], "rgb band");
    if (v != std::floor(v) || v < 0 || v >= bands) {
      throw ParameterError("rgb: band " + parts[i] + " out of range [0, " +
                           std::to_string(bands) + ")");
    }
    out[i] = static_cast<int>(v);
  }
  return out;
}

json run_simulate(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  const Rng root(seed);
  HsiCube z;
  if (cfg.has("input")) {
    z = load_cube(cfg.get("input", ""));
  } else {
    const SceneDims d = scene_dims(cfg);
    Rng r = root.fork(kSceneStream);
    z = synthetic_scene(d.bands, d.height, d.width, r);
  }
  DegenerationConfig dc;
  dc.scale = get_positive(cfg, "scale", 4);
  dc.kernel = parse_kernel_spec(cfg.get("kernel", "motion:7:0.5:1"));
  dc.srf_base = base_srf(cfg, get_positive(cfg, "msi_bands", 4), z.bands());
  dc.srf_perturb_c = cfg.get_double("srf_c", 0.01);
  dc.snr_hsi_db = cfg.get_double("snr_hsi", dc.snr_hsi_db);
  dc.snr_msi_db = cfg.get_double("snr_msi", dc.snr_msi_db);
  Rng noise = root.fork(kNoiseStream);
  const SimulatedPair pair = simulate_pair(z, dc, noise);

  save_cube(z, (dir / "truth.hsic").string());
  save_cube(pair.lr_hsi, (dir / "lr_hsi.hsic").string());
  save_cube(pair.hr_msi, (dir / "hr_msi.hsic").string());
  save_kernel(pair.kernel, (dir / "kernel.txt").string());
  save_srf(pair.srf, (dir / "srf.txt").string());

  json j = summary_head("simulate", cfg, seed);
  j["truth_shape"] = {z.bands(), z.height(), z.width()};
  j["lr_hsi_shape"] = {pair.lr_hsi.bands(), pair.lr_hsi.height(), pair.lr_hsi.width()};
  j["hr_msi_shape"] = {pair.hr_msi.bands(), pair.hr_msi.height(), pair.hr_msi.width()};
  j["kernel_size"] = pair.kernel.size();
  j["srf_shift_from_base"] = srf_relative_error(pair.srf, dc.srf_base);
  return finish(j, dir);
}

json run_pretrain_backbone(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  const Rng root(seed);
  const SceneDims d = scene_dims(cfg);
  if (d.height % d.scale != 0 || d.width % d.scale != 0) {
    throw ShapeError("pretrain-backbone: height and width must be multiples of scale");
  }
  const auto cubes = training_scenes(cfg, d, root);
  Rng data_rng = root.fork(kDatasetStream);
  const auto data = make_backbone_dataset(
      cubes, base_srf(cfg, d.msi_bands, d.bands), d.scale,
      cfg.get_double("snr_hsi", 40.0), {}, data_rng);
  Backbone bb = build_backbone(backbone_config_from(cfg),
                               {d.bands, d.height / d.scale, d.width / d.scale},
                               d.msi_bands, d.scale);
  Rng init_rng = root.fork(kBackboneInit);
  TrainOptions to;
  to.epochs = get_positive(cfg, "epochs", to.epochs);
  to.batch_size = get_positive(cfg, "batch_size", to.batch_size);
  to.lr = cfg.get_double("train_lr", to.lr);
  Rng train_rng = root.fork(kBackboneTrain);
  const TrainResult tr = train_backbone(bb, bb.graph.init_params(init_rng), data, to, train_rng);
  save_checkpoint(tr.params, (dir / "backbone.ckpt").string());

  json j = summary_head("pretrain-backbone", cfg, seed);
  j["samples"] = data.size();
  j["epoch_losses"] = tr.epoch_losses;
  j["parameters"] = tr.params.scalar_count();
  return finish(j, dir);
}

json run_meta_pretrain(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  const Rng root(seed);
  const SceneDims d = scene_dims(cfg);
  const auto cubes = training_scenes(cfg, d, root);
  const SrfMatrix base = base_srf(cfg, d.msi_bands, d.bands);

  MetaTaskOptions mo;
  mo.scale = d.scale;
  mo.snr_db = cfg.get_double("snr_hsi", 40.0);
  mo.srf_base = base;
  Rng task_rng = root.fork(kMetaTasks);
  auto tasks = make_meta_tasks(cubes, mo, get_positive(cfg, "meta_tasks", 16), task_rng);

  const ad::NetworkParams theta_f = load_checkpoint(require(cfg, "backbone"));
  Backbone bb = build_backbone(backbone_config_from(theta_f), tasks.front().x.shape(),
                               d.msi_bands, d.scale);
  const int ksize = get_positive(cfg, "est_kernel_size", 9);
  const Schedule sch = schedule_from(cfg);
  prepare_meta_tasks(tasks, bb, theta_f, gaussian_kernel({ksize, 1.0}), base,
                     EstimationConfig{}, sch.total());

  ReconNetConfig rc = recon_config(cfg);
  rc.zero_output = false;
  ReconNet proto = build_recon_net(rc, tasks.front().z.shape(), ksize, d.msi_bands);
  Rng init_rng = root.fork(kMetaInit);
  MetaConfig mc;
  mc.epochs = get_positive(cfg, "meta_epochs", mc.epochs);
  mc.alpha = cfg.get_double("alpha", mc.alpha);
  mc.meta_lr = cfg.get_double("meta_lr", mc.meta_lr);
  mc.tasks_per_batch = get_positive(cfg, "tasks_per_batch", mc.tasks_per_batch);
  Rng meta_rng = root.fork(kMetaTrain);
  const MetaResult mr =
      maml_pretrain(tasks, rc, proto.graph.init_params(init_rng), mc, meta_rng);
  save_checkpoint(mr.theta, (dir / "recon.ckpt").string());

  json j = summary_head("meta-pretrain", cfg, seed);
  j["tasks"] = tasks.size();
  j["epoch_losses"] = mr.epoch_losses;
  return finish(j, dir);
}

json run_fuse(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  FusionSetup f = fusion_setup(cfg, seed);
  if (f.truth) f.options.truth = &*f.truth;
  RunResult r;
  try {
    r = run_alternating(f.x, f.y, f.scale, f.zhat, f.theta, f.k_init, f.p_init,
                        f.options);
  } catch (const RunError& e) {
    write_file((dir / "trace.csv").string(), e.partial().to_csv());
    throw;
  }
  save_cube(r.z, (dir / "z.hsic").string());
  save_kernel(r.k, (dir / "kernel.txt").string());
  save_srf(r.p, (dir / "srf.txt").string());
  write_file((dir / "trace.csv").string(), r.trace.to_csv());

  json j = summary_head("fuse", cfg, seed);
  j["mode"] = to_string(f.options.mode);
  j["result"] = run_summary(r, f.truth);
  if (f.truth) j["zhat_metrics"] = metrics_json(evaluate(f.truth->z, f.zhat));
  return finish(j, dir);
}

json run_ablate(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  require(cfg, "truth");
  FusionSetup f = fusion_setup(cfg, seed);
  f.options.truth = &*f.truth;
  std::string csv = "Method,RMSE,PSNR,SAM,SSIM\n";
  auto row = [&](const std::string& name, const MetricReport& m) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f\n", name.c_str(),
                  m.rmse, m.psnr, m.sam, m.ssim);
    csv += buf;
  };
  json j = summary_head("ablate", cfg, seed);
  json runs = json::object();
  std::optional<RunResult> separate;
  for (Mode m : {Mode::kSeparate, Mode::kJoint, Mode::kAlternating}) {
    RunOptions o = f.options;
    o.mode = m;
    RunResult r = run_alternating(f.x, f.y, f.scale, f.zhat, f.theta, f.k_init,
                                  f.p_init, o);
    write_file((dir / ("trace_" + to_string(m) + ".csv")).string(), r.trace.to_csv());
    row(to_string(m), evaluate(f.truth->z, r.z));
    runs[to_string(m)] = run_summary(r, f.truth);
    if (m == Mode::kSeparate) separate = std::move(r);
  }
  const Regularizer reg = parse_regularizer(cfg.get("regularizer", "none"));
  if (reg.kind != RegularizerKind::kNone) {
    const MapResult map = map_reconstruct(f.x, f.y, separate->k, separate->p,
                                          f.scale, reg,
                                          f.options.schedule.total());
    row("map", evaluate(f.truth->z, map.z));
    runs["map"] = {{"metrics", metrics_json(evaluate(f.truth->z, map.z))},
                   {"step", map.step}};
  }
  write_file((dir / "ablation.csv").string(), csv);
  j["runs"] = runs;
  return finish(j, dir);
}

json run_evaluate(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  const HsiCube ref = load_cube(require(cfg, "truth"));
  const HsiCube est = load_cube(require(cfg, "input"));
  json j = summary_head("evaluate", cfg, seed);
  j["metrics"] = metrics_json(evaluate(ref, est));
  return finish(j, dir);
}

json run_export(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dir = output_dir(cfg);
  json j = summary_head("export", cfg, seed);
  json files = json::array();
  if (cfg.has("input")) {
    const HsiCube z = load_cube(cfg.get("input", ""));
    const int b = z.bands();
    const std::string fallback = std::to_string(b - 1) + "," +
                                 std::to_string(b / 2) + "," + std::to_string(0);
    const auto rgb = parse_band_triplet(cfg.get("rgb", fallback), b);
    export_pseudocolor(z, rgb, (dir / "pseudocolor.ppm").string());
    files.push_back("pseudocolor.ppm");
    if (cfg.has("truth")) {
      const HsiCube ref = load_cube(cfg.get("truth", ""));
      export_error_map(ref, z, (dir / "error_map.ppm").string());
      files.push_back("error_map.ppm");
    }
  }
  if (cfg.has("kernel_file")) {
    const BlurKernel k = load_kernel(cfg.get("kernel_file", ""));
    save_ppm(matrix_image(k.weights(), k.size(), k.size(), 16),
             (dir / "kernel.ppm").string());
    save_kernel(k, (dir / "kernel.txt").string());
    files.push_back("kernel.ppm");
    files.push_back("kernel.txt");
  }
  if (cfg.has("srf_file")) {
    const SrfMatrix p = load_srf(cfg.get("srf_file", ""));
    save_ppm(matrix_image(p.weights(), p.out_bands(), p.in_bands(), 16),
             (dir / "srf.ppm").string());
    save_srf(p, (dir / "srf.txt").string());
    files.push_back("srf.ppm");
    files.push_back("srf.txt");
  }
  if (files.empty()) {
    throw ParameterError("export: nothing to export (set input, kernel_file or srf_file)");
  }
  j["files"] = files;
  return finish(j, dir);
}

const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table = {
      {"simulate", run_simulate},
      {"pretrain-backbone", run_pretrain_backbone},
      {"meta-pretrain", run_meta_pretrain},
      {"fuse", run_fuse},
      {"ablate", run_ablate},
      {"evaluate", run_evaluate},
      {"export", run_export},
  };
  return table;
}

}  // namespace hsifuse
