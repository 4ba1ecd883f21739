#include "hsifuse/reconstruction.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hsifuse/degeneration.h"
#include "hsifuse/estimation.h"

namespace hsifuse {

namespace {

using ad::Graph;
using ad::InitKind;
using ad::NodeId;
using ad::ParamInit;
using ad::Tensor;

constexpr int kConv = 3;

double sq_norm(const HsiCube& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

void check_observations(const HsiCube& x, const HsiCube& y, int s,
                        const char* where) {
  if (s < 1) throw ParameterError(std::string(where) + ": scale must be >= 1");
  if (y.height() != x.height() * s || y.width() != x.width() * s) {
    throw ShapeError(std::string(where) + ": X " + to_string(x.shape()) +
                     " and Y " + to_string(y.shape()) +
                     " disagree with scale " + std::to_string(s));
  }
}

// Forward differences along columns (dx) and rows (dy); zero at the far edge.
void differences(std::span<const double> z, int h, int w, std::vector<double>& dx,
                 std::vector<double>& dy) {
  dx.assign(z.size(), 0.0);
  dy.assign(z.size(), 0.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      if (c + 1 < w) dx[i] = z[i + 1] - z[i];
      if (r + 1 < h) dy[i] = z[i + w] - z[i];
    }
  }
}

// out += D^T (gx, gy)
void differences_adjoint(const std::vector<double>& gx,
                         const std::vector<double>& gy, int h, int w,
                         std::span<double> out) {
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      if (c + 1 < w) {
        out[i] -= gx[i];
        out[i + 1] += gx[i];
      }
      if (r + 1 < h) {
        out[i] -= gy[i];
        out[i + w] += gy[i];
      }
    }
  }
}

// Lipschitz constant of the unweighted regularizer gradient.
double regularizer_lipschitz(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::kTikhonov:
      return 16.0;
    case RegularizerKind::kTotalVariation:
      return 8.0 / kTvEpsilon;
    case RegularizerKind::kNone:
      break;
  }
  return 0.0;
}

NodeId conv_layer(Graph& g, NodeId x, const std::string& name, int out_ch,
                  bool zero = false) {
  const int in_ch = g.shape(x)[0];
  const ParamInit w_init{zero ? InitKind::kZeros : InitKind::kKaimingUniform,
                         in_ch * kConv * kConv};
  const NodeId w = g.parameter(name + ".w", {out_ch, in_ch, kConv, kConv}, w_init);
  const NodeId b = g.parameter(name + ".b", {out_ch}, {InitKind::kZeros, 1});
  return g.conv2d(x, w, b);
}

NodeId dense_layer(Graph& g, NodeId x, const std::string& name, int out_ch,
                   bool zero = false) {
  const int in_ch = g.shape(x)[0];
  const ParamInit w_init{zero ? InitKind::kZeros : InitKind::kKaimingUniform,
                         in_ch};
  const NodeId w = g.parameter(name + ".w", {out_ch, in_ch}, w_init);
  const NodeId b = g.parameter(name + ".b", {out_ch}, {InitKind::kZeros, 1});
  return g.pointwise(x, w, b);
}

// Per-channel (scale, shift) from a guidance vector, applied to `features`.
NodeId modulate(Graph& g, NodeId features, NodeId guidance,
                const std::string& name, int embed) {
  const int channels = g.shape(features)[0];
  const NodeId e = g.leaky_relu(dense_layer(g, guidance, name + ".embed", embed));
  const NodeId gamma = dense_layer(g, e, name + ".gamma", channels);
  const NodeId beta = dense_layer(g, e, name + ".beta", channels);
  return g.scale_shift(features, gamma, beta);
}

}  // namespace

// ------------------------------------------------------------------ MAP

void validate(const Regularizer& reg) {
  if (!std::isfinite(reg.weight) || reg.weight < 0.0) {
    throw ParameterError("regularizer weight must be finite and >= 0");
  }
}

double regularizer_value(const HsiCube& z, RegularizerKind kind) {
  if (kind == RegularizerKind::kNone) return 0.0;
  std::vector<double> dx, dy;
  double total = 0.0;
  for (int b = 0; b < z.bands(); ++b) {
    differences(z.band(b), z.height(), z.width(), dx, dy);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double m = dx[i] * dx[i] + dy[i] * dy[i];
      total += kind == RegularizerKind::kTikhonov
                   ? m
                   : std::sqrt(m + kTvEpsilon * kTvEpsilon);
    }
  }
  return total;
}

HsiCube regularizer_gradient(const HsiCube& z, RegularizerKind kind) {
  HsiCube g(z.bands(), z.height(), z.width(), 0.0);
  if (kind == RegularizerKind::kNone) return g;
  std::vector<double> dx, dy;
  for (int b = 0; b < z.bands(); ++b) {
    differences(z.band(b), z.height(), z.width(), dx, dy);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (kind == RegularizerKind::kTikhonov) {
        dx[i] *= 2.0;
        dy[i] *= 2.0;
      } else {
        const double n =
            std::sqrt(dx[i] * dx[i] + dy[i] * dy[i] + kTvEpsilon * kTvEpsilon);
        dx[i] /= n;
        dy[i] /= n;
      }
    }
    differences_adjoint(dx, dy, z.height(), z.width(), g.band(b));
  }
  return g;
}

double total_variation(const HsiCube& z) {
  std::vector<double> dx, dy;
  double total = 0.0;
  for (int b = 0; b < z.bands(); ++b) {
    differences(z.band(b), z.height(), z.width(), dx, dy);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      total += std::sqrt(dx[i] * dx[i] + dy[i] * dy[i]);
    }
  }
  return total;
}

MapResult map_reconstruct(const HsiCube& x, const HsiCube& y,
                          const BlurKernel& k, const SrfMatrix& p, int s,
                          const Regularizer& reg, int iters, double lr) {
  validate(reg);
  check_observations(x, y, s, "map_reconstruct");
  if (iters < 0) throw ParameterError("map_reconstruct: iters must be >= 0");
  if (p.in_bands() != x.bands() || p.out_bands() != y.bands()) {
    throw ShapeError("map_reconstruct: SRF does not match the band counts");
  }
  const CubeShape zshape{x.bands(), y.height(), y.width()};

  auto loss_and_grad = [&](const HsiCube& z, HsiCube* grad) {
    const HsiCube ex = subtract(x, spatial_degrade(z, k, s));
    const HsiCube ey = subtract(y, spectral_degrade(z, p));
    double loss = sq_norm(ex) + sq_norm(ey);
    if (reg.weight > 0.0) loss += reg.weight * regularizer_value(z, reg.kind);
    if (grad) {
      *grad = combine(-2.0, spatial_degrade_adjoint(ex, k, s, zshape), -2.0,
                      spectral_degrade_adjoint(ey, p));
      if (reg.weight > 0.0) {
        *grad = combine(1.0, *grad, reg.weight,
                        regularizer_gradient(z, reg.kind));
      }
    }
    return loss;
  };

  if (!(lr > 0.0)) {
    // Largest eigenvalue of Phi^T Phi + Psi^T Psi by power iteration.
    Rng rng(0x6d6170);
    HsiCube v(zshape.bands, zshape.height, zshape.width);
    for (double& e : v.data()) e = rng.uniform(0.5, 1.5);
    double lambda = 0.0;
    for (int it = 0; it < 50; ++it) {
      v = scale(v, 1.0 / norm(v));
      HsiCube av = add(
          spatial_degrade_adjoint(spatial_degrade(v, k, s), k, s, zshape),
          spectral_degrade_adjoint(spectral_degrade(v, p), p));
      lambda = dot(v, av);
      v = std::move(av);
    }
    const double lipschitz = 2.0 * lambda * 1.05 +
                             reg.weight * regularizer_lipschitz(reg.kind);
    lr = 1.0 / lipschitz;
  }

  MapResult res;
  res.step = lr;
  HsiCube z = bicubic_upsample(x, s);
  HsiCube grad;
  double loss = loss_and_grad(z, &grad);
  res.loss_trace.push_back(loss);
  res.z = z;
  double best = loss;
  int increases = 0;
  for (int it = 1; it <= iters; ++it) {
    z = combine(1.0, z, -lr, grad);
    const double next = loss_and_grad(z, &grad);
    res.loss_trace.push_back(next);
    if (!std::isfinite(next)) {
      throw DivergenceError("map_reconstruct: non-finite loss", res.loss_trace);
    }
    increases = next > loss + 1e-12 * std::abs(loss) ? increases + 1 : 0;
    if (increases >= 5) {
      throw DivergenceError("map_reconstruct: loss increased 5 times in a row",
                            res.loss_trace);
    }
    if (next < best) {
      best = next;
      res.z = z;
      res.best_iter = it;
    }
    loss = next;
  }
  return res;
}

// ------------------------------------------------------------- Backbone

void validate(const BackboneConfig& cfg) {
  if (cfg.width < 1 || cfg.depth < 1) {
    throw ParameterError("backbone: width and depth must be >= 1");
  }
}

Backbone build_backbone(const BackboneConfig& cfg, const CubeShape& hsi_shape,
                        int msi_bands, int scale) {
  validate(cfg);
  if (scale < 1 || msi_bands < 1 || hsi_shape.size() == 0) {
    throw ParameterError("build_backbone: invalid shapes");
  }
  Backbone net;
  net.config = cfg;
  net.hsi_shape = hsi_shape;
  net.msi_bands = msi_bands;
  net.scale = scale;
  Graph& g = net.graph;
  const int H = hsi_shape.height * scale;
  const int W = hsi_shape.width * scale;
  net.x_in = g.input("x", {hsi_shape.bands, hsi_shape.height, hsi_shape.width});
  net.y_in = g.input("y", {msi_bands, H, W});
  net.upsampled = g.upsample_bilinear(net.x_in, scale);
  NodeId h = g.concat(net.upsampled, net.y_in);
  for (int d = 0; d < cfg.depth; ++d) {
    h = g.leaky_relu(conv_layer(g, h, "bb.conv" + std::to_string(d), cfg.width));
  }
  net.out_layer = "bb.out";
  const NodeId res = conv_layer(g, h, net.out_layer, hsi_shape.bands,
                                cfg.zero_output);
  net.out = g.add(net.upsampled, res);
  return net;
}

HsiCube backbone_forward(Backbone& net, const ad::NetworkParams& params,
                         const HsiCube& x, const HsiCube& y) {
  if (x.shape() != net.hsi_shape || y.bands() != net.msi_bands ||
      y.height() != net.hsi_shape.height * net.scale ||
      y.width() != net.hsi_shape.width * net.scale) {
    throw ShapeError("backbone_forward: inputs X " + to_string(x.shape()) +
                     ", Y " + to_string(y.shape()) +
                     " do not match the network");
  }
  net.graph.forward(params, {{"x", ad::tensor_from_cube(x)},
                             {"y", ad::tensor_from_cube(y)}});
  return ad::cube_from_tensor(net.graph.value(net.out));
}

TrainResult train_backbone(const Backbone& net, ad::NetworkParams init,
                           const std::vector<TrainingSample>& dataset,
                           const TrainOptions& opts, Rng& rng) {
  if (dataset.empty()) throw ParameterError("train_backbone: empty dataset");
  if (opts.epochs < 1 || opts.batch_size < 1 || !(opts.lr > 0.0)) {
    throw ParameterError("train_backbone: invalid options");
  }
  // Private copy of the network with the supervised loss attached.
  Backbone train_net =
      build_backbone(net.config, net.hsi_shape, net.msi_bands, net.scale);
  Graph& g = train_net.graph;
  const NodeId loss =
      g.mae(train_net.out, g.input("z_target", g.shape(train_net.out)));

  TrainResult res;
  res.params = std::move(init);
  ad::AdamState adam;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    adam.lr = opts.lr * std::pow(opts.decay, epoch / std::max(1, opts.decay_every));
    for (std::size_t i = order.size(); i > 1; --i) {
      const int j = rng.uniform_int(0, static_cast<int>(i) - 1);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opts.batch_size);
      ad::NetworkParams acc;
      for (std::size_t t = start; t < stop; ++t) {
        const TrainingSample& smp = dataset[order[t]];
        g.forward(res.params, {{"x", ad::tensor_from_cube(smp.x)},
                               {"y", ad::tensor_from_cube(smp.y)},
                               {"z_target", ad::tensor_from_cube(smp.z)}});
        epoch_loss += g.value(loss).data[0];
        ad::Gradients grads = g.backward(loss);
        for (auto& [name, t_grad] : grads.params.tensors()) {
          if (!acc.contains(name)) {
            acc.set(name, std::move(t_grad));
          } else {
            auto& dst = acc.at(name).data;
            for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += t_grad.data[e];
          }
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (auto& [name, t_grad] : acc.tensors()) {
        for (double& v : t_grad.data) v *= inv;
      }
      ad::adam_step(res.params, acc, adam);
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(dataset.size()));
  }
  return res;
}

std::vector<TrainingSample> make_backbone_dataset(
    const std::vector<HsiCube>& hr_cubes, const SrfMatrix& srf_base, int scale,
    double snr_db, const PretrainRanges& ranges, Rng& rng) {
  if (ranges.kernel_size_min % 2 == 0 || ranges.kernel_size_max % 2 == 0 ||
      ranges.kernel_size_min > ranges.kernel_size_max) {
    throw ParameterError("make_backbone_dataset: kernel size range must be odd");
  }
  std::vector<TrainingSample> out;
  out.reserve(hr_cubes.size());
  for (const HsiCube& z : hr_cubes) {
    DegenerationConfig cfg;
    cfg.scale = scale;
    const int steps = (ranges.kernel_size_max - ranges.kernel_size_min) / 2;
    GaussianSpec spec;
    spec.size = ranges.kernel_size_min + 2 * rng.uniform_int(0, steps);
    spec.sigma = rng.uniform(ranges.sigma_min, ranges.sigma_max);
    cfg.kernel = spec;
    cfg.srf_base = srf_base;
    cfg.srf_perturb_c = rng.uniform(ranges.c_min, ranges.c_max);
    cfg.snr_hsi_db = snr_db;
    cfg.snr_msi_db = snr_db;
    SimulatedPair pair = simulate_pair(z, cfg, rng);
    out.push_back({z, std::move(pair.lr_hsi), std::move(pair.hr_msi)});
  }
  return out;
}

// ------------------------------------------------------------ Recon net

void validate(const ReconNetConfig& cfg) {
  if (cfg.spatial_width < 1 || cfg.spectral_width < 1 || cfg.fusion_depth < 1 ||
      cfg.k_embed < 1 || cfg.p_embed < 1) {
    throw ParameterError("recon net: widths and depths must be >= 1");
  }
}

ReconNet build_recon_net(const ReconNetConfig& cfg, const CubeShape& shape,
                         int kernel_size, int msi_bands) {
  validate(cfg);
  if (kernel_size < 1 || kernel_size % 2 == 0 || msi_bands < 1 ||
      shape.size() == 0) {
    throw ParameterError("build_recon_net: invalid shapes");
  }
  ReconNet net;
  net.config = cfg;
  net.shape = shape;
  net.kernel_size = kernel_size;
  net.msi_bands = msi_bands;
  Graph& g = net.graph;
  const int kk = kernel_size * kernel_size;
  net.zhat = g.input("zhat", {shape.bands, shape.height, shape.width});
  net.k = g.input("k", {kk, 1, 1}, true);
  net.p = g.input("p", {msi_bands * shape.bands, 1, 1}, true);
  // Unit-mean guidance vectors.
  const NodeId k_in = g.scaled(net.k, kk);
  const NodeId p_in = g.scaled(net.p, shape.bands);

  net.k_embed_layer = "g.spa.mod.embed";
  NodeId s = g.leaky_relu(conv_layer(g, net.zhat, "g.spa.conv0", cfg.spatial_width));
  s = modulate(g, s, k_in, "g.spa.mod", cfg.k_embed);
  s = g.leaky_relu(conv_layer(g, s, "g.spa.conv1", cfg.spatial_width));

  NodeId t = g.leaky_relu(dense_layer(g, net.zhat, "g.spe.fc0", cfg.spectral_width));
  t = modulate(g, t, p_in, "g.spe.mod", cfg.p_embed);
  t = g.leaky_relu(dense_layer(g, t, "g.spe.fc1", cfg.spectral_width));

  NodeId f = g.concat(s, t);
  for (int d = 0; d < cfg.fusion_depth; ++d) {
    f = g.leaky_relu(
        conv_layer(g, f, "g.fuse.conv" + std::to_string(d), cfg.spatial_width));
  }
  net.out_layer = "g.out";
  const NodeId res = conv_layer(g, f, net.out_layer, shape.bands, cfg.zero_output);
  net.out = g.add(net.zhat, res);
  return net;
}

ad::Bindings recon_bindings(const HsiCube& zhat, const BlurKernel& k,
                            const SrfMatrix& p) {
  return {{"zhat", ad::tensor_from_cube(zhat)},
          {"k", ad::vector_tensor(k.weights())},
          {"p", ad::vector_tensor(p.weights())}};
}

HsiCube recon_forward(ReconNet& net, const ad::NetworkParams& params,
                      const HsiCube& zhat, const BlurKernel& k,
                      const SrfMatrix& p) {
  if (zhat.shape() != net.shape || k.size() != net.kernel_size ||
      p.out_bands() != net.msi_bands || p.in_bands() != net.shape.bands) {
    throw ShapeError("recon_forward: inputs do not match the network");
  }
  net.graph.forward(params, recon_bindings(zhat, k, p));
  return ad::cube_from_tensor(net.graph.value(net.out));
}

ad::NodeId attach_data_loss(ReconNet& net, int scale, int col, int width,
                            const std::string& x_name,
                            const std::string& y_name) {
  const CubeShape& sh = net.shape;
  if (scale < 1 || sh.height % scale != 0 || col % scale != 0 ||
      width % scale != 0 || col < 0 || width < 1 || col + width > sh.width) {
    throw ShapeError("attach_data_loss: window incompatible with scale");
  }
  Graph& g = net.graph;
  NodeId z = net.out;
  if (col != 0 || width != sh.width) z = g.crop(z, 0, col, sh.height, width);
  const NodeId xo = g.input(x_name, {sh.bands, sh.height / scale, width / scale});
  const NodeId yo = g.input(y_name, {net.msi_bands, sh.height, width});
  const NodeId lx = g.mae(g.spatial_degrade(z, net.k, net.kernel_size, scale), xo);
  const NodeId ly = g.mae(g.spectral_degrade(z, net.p, net.msi_bands), yo);
  return g.add(lx, ly);
}

HsiCube crop_columns(const HsiCube& z, int col, int width) {
  if (col < 0 || width < 1 || col + width > z.width()) {
    throw ShapeError("crop_columns: window outside the cube");
  }
  HsiCube out(z.bands(), z.height(), width);
  for (int b = 0; b < z.bands(); ++b) {
    for (int r = 0; r < z.height(); ++r) {
      for (int c = 0; c < width; ++c) out.at(b, r, c) = z.at(b, r, col + c);
    }
  }
  return out;
}

// ------------------------------------------------------------ DIP

DipSession::DipSession(const ReconNetConfig& cfg, const HsiCube& x,
                       const HsiCube& y, const HsiCube& zhat, int scale,
                       int kernel_size, ad::NetworkParams theta, double lr)
    : net_(build_recon_net(cfg, zhat.shape(), kernel_size, y.bands())),
      theta_(std::move(theta)) {
  check_observations(x, y, scale, "dip");
  if (x.bands() != zhat.bands() || y.height() != zhat.height() ||
      y.width() != zhat.width()) {
    throw ShapeError("dip: Z-hat " + to_string(zhat.shape()) +
                     " inconsistent with the observations");
  }
  if (!(lr > 0.0)) throw ParameterError("dip: lr must be > 0");
  loss_ = attach_data_loss(net_, scale, 0, zhat.width(), "x_obs", "y_obs");
  inputs_["zhat"] = ad::tensor_from_cube(zhat);
  inputs_["x_obs"] = ad::tensor_from_cube(x);
  inputs_["y_obs"] = ad::tensor_from_cube(y);
  adam_.lr = lr;
}

void DipSession::run_forward(const BlurKernel& k, const SrfMatrix& p) {
  if (k.size() != net_.kernel_size || p.out_bands() != net_.msi_bands ||
      p.in_bands() != net_.shape.bands) {
    throw ShapeError("dip: operator shapes do not match the session");
  }
  inputs_["k"] = ad::vector_tensor(k.weights());
  inputs_["p"] = ad::vector_tensor(p.weights());
  net_.graph.forward(theta_, inputs_);
  current_loss_ = net_.graph.value(loss_).data[0];
  trace_.push_back(current_loss_);
  if (!std::isfinite(current_loss_)) {
    throw DivergenceError("dip: non-finite loss", trace_);
  }
  current_ = ad::cube_from_tensor(net_.graph.value(net_.out));
  record();
}

void DipSession::record() {
  if (!has_best_ || current_loss_ < best_loss_) {
    best_ = current_;
    best_loss_ = current_loss_;
    has_best_ = true;
  }
}

void DipSession::reset_best() { has_best_ = false; }

double DipSession::evaluate(const BlurKernel& k, const SrfMatrix& p) {
  run_forward(k, p);
  return current_loss_;
}

double DipSession::step(const BlurKernel& k, const SrfMatrix& p) {
  run_forward(k, p);
  ad::Gradients grads = net_.graph.backward(loss_);
  ad::adam_step(theta_, grads.params, adam_);
  return current_loss_;
}

DipSession::FullGradient DipSession::full_gradient(const BlurKernel& k,
                                                   const SrfMatrix& p) {
  run_forward(k, p);
  ad::Gradients grads = net_.graph.backward(loss_);
  FullGradient out;
  out.loss = current_loss_;
  out.theta = std::move(grads.params);
  out.k = std::move(grads.inputs.at("k").data);
  out.p = std::move(grads.inputs.at("p").data);
  return out;
}

void DipSession::apply_theta_gradient(const ad::NetworkParams& grad) {
  ad::adam_step(theta_, grad, adam_);
}

DipResult dip_optimize(const ReconNetConfig& cfg, const HsiCube& x,
                       const HsiCube& y, const BlurKernel& k,
                       const SrfMatrix& p, int scale, const HsiCube& zhat,
                       ad::NetworkParams theta_init, const DipOptions& opts) {
  if (opts.iters < 0) throw ParameterError("dip_optimize: iters must be >= 0");
  DipSession session(cfg, x, y, zhat, scale, k.size(), std::move(theta_init),
                     opts.lr);
  for (int t = 0; t < opts.iters; ++t) {
    session.step(k, p);
    if (opts.on_step) opts.on_step(t, session.current());
  }
  session.evaluate(k, p);
  if (opts.on_step) opts.on_step(opts.iters, session.current());
  return {session.best(), session.theta(), session.loss_trace()};
}

}  // namespace hsifuse
