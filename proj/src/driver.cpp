#include "hsifuse/driver.h"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "hsifuse/degeneration.h"

namespace hsifuse {

namespace {

double residual_norm(const HsiCube& a, const HsiCube& b) {
  return norm(subtract(a, b));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct Recorder {
  const HsiCube& x;
  const HsiCube& y;
  int s;
  const GroundTruth* truth;
  RunTrace trace;

  void add(int outer, const HsiCube& z, const BlurKernel& k, const SrfMatrix& p,
           double data_loss) {
    TraceRecord r;
    r.outer = outer;
    r.residual_x = residual_norm(x, spatial_degrade(z, k, s));
    r.residual_y = residual_norm(y, spectral_degrade(z, p));
    r.data_loss = data_loss;
    if (truth) {
      r.kernel_error = kernel_relative_error(k, truth->k);
      r.srf_error = srf_relative_error(p, truth->p);
      if (z.height() >= 11 && z.width() >= 11) r.metrics = evaluate(truth->z, z);
    }
    trace.records.push_back(r);
  }
};

ad::NetworkParams single(const std::string& name, std::span<const double> v) {
  ad::NetworkParams out;
  out.set(name, ad::vector_tensor(v));
  return out;
}

void accumulate(ad::NetworkParams& acc, const ad::NetworkParams& g) {
  for (const auto& [name, t] : g.tensors()) {
    if (!acc.contains(name)) {
      acc.set(name, t);
      continue;
    }
    auto& dst = acc.at(name).data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += t.data[i];
  }
}

void scale_params(ad::NetworkParams& p, double f) {
  for (auto& [name, t] : p.tensors())
    for (double& v : t.data) v *= f;
}

}  // namespace

EstimationConfig default_srf_estimation() {
  EstimationConfig cfg;
  cfg.solver = EstimationSolver::kGradientDescent;
  cfg.lr_relative = true;
  cfg.lr = 0.05;
  cfg.srf_closed_form = false;
  return cfg;
}

void validate(const Schedule& s) {
  if (s.outer_iters < 1 || s.inner_iters < 1 || !(s.lr_degeneration > 0.0) ||
      !(s.lr_reconstruction > 0.0)) {
    throw ParameterError("schedule: iteration counts and rates must be > 0");
  }
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kSeparate:
      return "separate";
    case Mode::kJoint:
      return "joint";
    case Mode::kAlternating:
      return "alternating";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  if (name == "separate") return Mode::kSeparate;
  if (name == "joint") return Mode::kJoint;
  if (name == "alternating") return Mode::kAlternating;
  throw ParameterError("unknown mode '" + name +
                       "' (expected separate, joint or alternating)");
}

std::string RunTrace::to_csv() const {
  std::string out =
      "outer,residual_x,residual_y,data_loss,kernel_error,srf_error,rmse,psnr,"
      "sam,ssim\n";
  for (const TraceRecord& r : records) {
    out += std::to_string(r.outer) + "," + fmt(r.residual_x) + "," +
           fmt(r.residual_y) + "," + fmt(r.data_loss) + ",";
    out += (r.kernel_error ? fmt(*r.kernel_error) : "") + ",";
    out += (r.srf_error ? fmt(*r.srf_error) : "") + ",";
    if (r.metrics) {
      out += fmt(r.metrics->rmse) + "," + fmt(r.metrics->psnr) + "," +
             fmt(r.metrics->sam) + "," + fmt(r.metrics->ssim);
    } else {
      out += ",,,";
    }
    out += "\n";
  }
  return out;
}

RunResult run_alternating(const HsiCube& x, const HsiCube& y, int s,
                          const HsiCube& zhat, ad::NetworkParams theta_init,
                          const BlurKernel& k_init, const SrfMatrix& p_init,
                          const RunOptions& opts) {
  const Schedule& sch = opts.schedule;
  validate(sch);
  validate(opts.kernel_estimation);
  validate(opts.srf_estimation);
  if (zhat.bands() != x.bands() || zhat.height() != y.height() ||
      zhat.width() != y.width()) {
    throw ShapeError("run_alternating: Z-hat " + to_string(zhat.shape()) +
                     " inconsistent with X and Y");
  }

  Recorder rec{x, y, s, opts.truth, {}};
  RunResult res;
  res.k = k_init;
  res.p = p_init;
  DipSession session(opts.recon, x, y, zhat, s, k_init.size(),
                     std::move(theta_init), sch.lr_reconstruction);

  EstimationConfig kest = opts.kernel_estimation;
  EstimationConfig pest = opts.srf_estimation;
  pest.srf_closed_form = false;

  try {
    if (opts.mode == Mode::kAlternating) {
      kest.inner_iters = sch.inner_iters;
      pest.inner_iters = sch.inner_iters;
      HsiCube z = zhat;
      for (int t = 1; t <= sch.outer_iters; ++t) {
        res.k = estimate_kernel_step(x, z, s, res.k, kest).kernel;
        res.p = estimate_srf_step(y, z, res.p, pest).srf;
        res.steps.kernel += sch.inner_iters;
        res.steps.srf += sch.inner_iters;
        session.reset_best();
        for (int i = 0; i < sch.inner_iters; ++i) session.step(res.k, res.p);
        session.evaluate(res.k, res.p);
        res.steps.recon += sch.inner_iters;
        z = session.best();
        rec.add(t, z, res.k, res.p, session.best_loss());
      }
      res.z = std::move(z);
    } else if (opts.mode == Mode::kSeparate) {
      kest.inner_iters = sch.total();
      pest.inner_iters = sch.total();
      res.k = estimate_kernel_step(x, zhat, s, k_init, kest).kernel;
      res.p = estimate_srf_step(y, zhat, p_init, pest).srf;
      res.steps.kernel += sch.total();
      res.steps.srf += sch.total();
      for (int t = 1; t <= sch.outer_iters; ++t) {
        for (int i = 0; i < sch.inner_iters; ++i) session.step(res.k, res.p);
        res.steps.recon += sch.inner_iters;
        session.evaluate(res.k, res.p);
        rec.add(t, session.best(), res.k, res.p, session.best_loss());
      }
      res.z = session.best();
    } else {
      ad::NetworkParams kp = single("k", res.k.weights());
      ad::NetworkParams pp = single("p", res.p.weights());
      ad::AdamState k_adam, p_adam;
      k_adam.lr = sch.lr_degeneration;
      p_adam.lr = sch.lr_degeneration;
      for (int t = 1; t <= sch.outer_iters; ++t) {
        for (int i = 0; i < sch.inner_iters; ++i) {
          DipSession::FullGradient g = session.full_gradient(res.k, res.p);
          session.apply_theta_gradient(g.theta);
          ad::adam_step(kp, single("k", g.k), k_adam);
          ad::adam_step(pp, single("p", g.p), p_adam);
          res.k = project_kernel(res.k.size(), kp.at("k").data);
          res.p = project_srf(res.p.out_bands(), res.p.in_bands(),
                              pp.at("p").data);
          kp.at("k").data.assign(res.k.weights().begin(), res.k.weights().end());
          pp.at("p").data.assign(res.p.weights().begin(), res.p.weights().end());
        }
        res.steps.kernel += sch.inner_iters;
        res.steps.srf += sch.inner_iters;
        res.steps.recon += sch.inner_iters;
        session.evaluate(res.k, res.p);
        rec.add(t, session.current(), res.k, res.p, session.current_loss());
      }
      res.z = session.current();
    }
  } catch (const Error& e) {
    throw RunError(std::string("run_alternating (") + to_string(opts.mode) +
                       "): " + e.what(),
                   rec.trace);
  }
  res.trace = std::move(rec.trace);
  res.theta = session.theta();
  return res;
}

RunResult run_alternating(const HsiCube& x, const HsiCube& y, int s,
                          Backbone& backbone, const ad::NetworkParams& theta_f,
                          ad::NetworkParams theta_init, const BlurKernel& k_init,
                          const SrfMatrix& p_init, const RunOptions& opts) {
  const HsiCube zhat = backbone_forward(backbone, theta_f, x, y);
  return run_alternating(x, y, s, zhat, std::move(theta_init), k_init, p_init,
                         opts);
}

// ------------------------------------------------------------ meta-learning

std::vector<MetaTask> make_meta_tasks(const std::vector<HsiCube>& hr_cubes,
                                      const MetaTaskOptions& opts, int count,
                                      Rng& rng) {
  if (count < 1) throw ParameterError("make_meta_tasks: count must be >= 1");
  if (hr_cubes.empty()) throw ParameterError("make_meta_tasks: no cubes");
  const int s = opts.scale;
  for (const HsiCube& z : hr_cubes) {
    const int half = z.width() / 2;
    if (s < 1 || z.width() % 2 != 0 || half < s || half % s != 0 ||
        z.height() % s != 0 ||
        opts.ranges.kernel_size_max > std::min(z.height(), z.width())) {
      throw ShapeError("make_meta_tasks: cube " + to_string(z.shape()) +
                       " too small to split into support and query crops");
    }
  }
  std::vector<MetaTask> tasks;
  tasks.reserve(count);
  const PretrainRanges& rg = opts.ranges;
  for (int i = 0; i < count; ++i) {
    const HsiCube& z = hr_cubes[rng.uniform_int(0, static_cast<int>(hr_cubes.size()) - 1)];
    DegenerationConfig cfg;
    cfg.scale = s;
    GaussianSpec spec;
    spec.size = rg.kernel_size_min +
                2 * rng.uniform_int(0, (rg.kernel_size_max - rg.kernel_size_min) / 2);
    spec.sigma = rng.uniform(rg.sigma_min, rg.sigma_max);
    cfg.kernel = spec;
    cfg.srf_base = opts.srf_base;
    cfg.srf_perturb_c = rng.uniform(rg.c_min, rg.c_max);
    cfg.snr_hsi_db = opts.snr_db;
    cfg.snr_msi_db = opts.snr_db;
    SimulatedPair pair = simulate_pair(z, cfg, rng);
    MetaTask task;
    task.z = z;
    task.x = std::move(pair.lr_hsi);
    task.y = std::move(pair.hr_msi);
    task.k_true = std::move(pair.kernel);
    task.p_true = std::move(pair.srf);
    const int half = z.width() / 2;
    task.support = {0, half};
    task.query = {half, z.width() - half};
    tasks.push_back(std::move(task));
  }
  return tasks;
}

void prepare_meta_tasks(std::vector<MetaTask>& tasks, Backbone& backbone,
                        const ad::NetworkParams& theta_f,
                        const BlurKernel& k_init, const SrfMatrix& p_init,
                        const EstimationConfig& est, int est_iters) {
  EstimationConfig cfg = est;
  cfg.inner_iters = est_iters;
  cfg.srf_closed_form = false;
  for (MetaTask& t : tasks) {
    const int s = t.z.height() / t.x.height();
    t.zhat = backbone_forward(backbone, theta_f, t.x, t.y);
    t.k_est = estimate_kernel_step(t.x, t.zhat, s, k_init, cfg).kernel;
    t.p_est = estimate_srf_step(t.y, t.zhat, p_init, cfg).srf;
  }
}

void validate(const MetaConfig& cfg) {
  if (!(cfg.alpha >= 0.0) || cfg.epochs < 1 || cfg.tasks_per_batch < 1 ||
      !(cfg.meta_lr > 0.0) || cfg.alpha_halve_every < 1) {
    throw ParameterError("meta config: invalid rates or counts");
  }
  if (!cfg.first_order) {
    throw ParameterError(
        "meta config: only first-order meta-gradients are supported");
  }
}

MetaLearner::MetaLearner(const ReconNetConfig& cfg, const MetaTask& prototype)
    : net_(build_recon_net(cfg, prototype.z.shape(), prototype.k_est.size(),
                           prototype.y.bands())),
      scale_(prototype.z.height() / prototype.x.height()),
      support_win_(prototype.support),
      query_win_(prototype.query) {
  support_ = attach_data_loss(net_, scale_, support_win_.col,
                              support_win_.width, "x_sup", "y_sup");
  ad::Graph& g = net_.graph;
  const int h = net_.shape.height;
  const ad::NodeId zq = g.input("z_query", {net_.shape.bands, h, query_win_.width});
  query_ = g.mae(g.crop(net_.out, 0, query_win_.col, h, query_win_.width), zq);
}

ad::Bindings MetaLearner::bindings(const MetaTask& task) const {
  if (task.z.shape() != net_.shape || task.support.col != support_win_.col ||
      task.support.width != support_win_.width ||
      task.query.col != query_win_.col || task.query.width != query_win_.width) {
    throw ShapeError("meta task does not match the learner layout");
  }
  ad::Bindings b = recon_bindings(task.zhat, task.k_est, task.p_est);
  b["x_sup"] = ad::tensor_from_cube(
      crop_columns(task.x, support_win_.col / scale_, support_win_.width / scale_));
  b["y_sup"] = ad::tensor_from_cube(
      crop_columns(task.y, support_win_.col, support_win_.width));
  b["z_query"] = ad::tensor_from_cube(
      crop_columns(task.z, query_win_.col, query_win_.width));
  return b;
}

double MetaLearner::support_loss(const ad::NetworkParams& theta,
                                 const MetaTask& task, ad::NetworkParams* grad) {
  net_.graph.forward(theta, bindings(task));
  const double loss = net_.graph.value(support_).data[0];
  if (grad) *grad = net_.graph.backward(support_).params;
  return loss;
}

double MetaLearner::query_loss(const ad::NetworkParams& theta,
                               const MetaTask& task, ad::NetworkParams* grad) {
  net_.graph.forward(theta, bindings(task));
  const double loss = net_.graph.value(query_).data[0];
  if (grad) *grad = net_.graph.backward(query_).params;
  return loss;
}

double MetaLearner::task_gradient(const ad::NetworkParams& theta,
                                  const MetaTask& task, double alpha,
                                  ad::NetworkParams& grad) {
  ad::NetworkParams adapted = theta;
  if (alpha != 0.0) {
    ad::NetworkParams g_tr;
    support_loss(theta, task, &g_tr);
    for (auto& [name, t] : adapted.tensors()) {
      const auto& g = g_tr.at(name).data;
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= alpha * g[i];
    }
  }
  return query_loss(adapted, task, &grad);
}

double MetaLearner::multitask_gradient(const ad::NetworkParams& theta,
                                       const MetaTask& task,
                                       ad::NetworkParams& grad) {
  return query_loss(theta, task, &grad);
}

MetaResult maml_pretrain(const std::vector<MetaTask>& tasks,
                         const ReconNetConfig& recon,
                         ad::NetworkParams theta_init, const MetaConfig& cfg,
                         Rng& rng) {
  validate(cfg);
  if (tasks.empty()) throw ParameterError("maml_pretrain: no tasks");
  MetaLearner learner(recon, tasks.front());
  MetaResult res;
  res.theta = std::move(theta_init);
  ad::AdamState adam;
  adam.lr = cfg.meta_lr;
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double alpha = cfg.alpha * std::pow(0.5, epoch / cfg.alpha_halve_every);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.tasks_per_batch) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.tasks_per_batch));
      ad::NetworkParams meta_grad;
      for (std::size_t j = start; j < stop; ++j) {
        ad::NetworkParams g;
        epoch_loss += learner.task_gradient(res.theta, tasks[order[j]], alpha, g);
        accumulate(meta_grad, g);
      }
      scale_params(meta_grad, 1.0 / static_cast<double>(stop - start));
      if (!meta_grad.all_finite()) {
        throw SolverError("maml_pretrain: non-finite meta-gradient in epoch " +
                          std::to_string(epoch + 1));
      }
      ad::adam_step(res.theta, meta_grad, adam);
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(tasks.size()));
  }
  return res;
}

}  // namespace hsifuse
