#include "hsifuse/estimation.h"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "hsifuse/degeneration.h"

namespace hsifuse {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

constexpr int kDivergencePatience = 5;

double sq(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

double inner(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Tracks consecutive objective increases.
class DivergenceMonitor {
 public:
  explicit DivergenceMonitor(const char* where) : where_(where) {}
  void observe(const std::vector<double>& trace) {
    const double cur = trace.back();
    if (!std::isfinite(cur)) {
      throw DivergenceError(std::string(where_) + ": non-finite objective",
                            trace);
    }
    if (trace.size() < 2) return;
    const double prev = trace[trace.size() - 2];
    if (cur > prev + 1e-12 * std::abs(prev)) {
      if (++increases_ >= kDivergencePatience) {
        throw DivergenceError(std::string(where_) +
                                  ": objective increased for 5 consecutive "
                                  "iterations",
                              trace);
      }
    } else {
      increases_ = 0;
    }
  }

 private:
  const char* where_;
  int increases_ = 0;
};

void check_kernel_inputs(const HsiCube& x, const HsiCube& z, int s,
                         const BlurKernel& k) {
  if (s < 1 || z.height() % s != 0 || z.width() % s != 0) {
    throw ShapeError("estimate_kernel_step: scale does not divide Z");
  }
  if (x.bands() != z.bands() || x.height() * s != z.height() ||
      x.width() * s != z.width()) {
    throw ShapeError("estimate_kernel_step: X " + to_string(x.shape()) +
                     " inconsistent with Z " + to_string(z.shape()));
  }
  if (k.size() > std::min(z.height(), z.width())) {
    throw ShapeError("estimate_kernel_step: kernel larger than image");
  }
}

}  // namespace

void validate(const EstimationConfig& cfg) {
  if (!(cfg.eta >= 0.0) || !(cfg.xi >= 0.0)) {
    throw ParameterError("estimation: eta and xi must be >= 0");
  }
  if (cfg.inner_iters < 1) {
    throw ParameterError("estimation: inner_iters must be >= 1");
  }
  if (cfg.solver == EstimationSolver::kGradientDescent && !(cfg.lr > 0.0)) {
    throw ParameterError("estimation: gradient descent needs lr > 0");
  }
}

std::vector<double> clamp_normalize(std::span<const double> raw) {
  std::vector<double> out(raw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!std::isfinite(raw[i])) {
      throw ParameterError("projection: non-finite input");
    }
    out[i] = std::max(0.0, raw[i]);
    total += out[i];
  }
  if (total <= 0.0) {
    std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(raw.size()));
  } else {
    for (double& v : out) v /= total;
  }
  return out;
}

BlurKernel project_kernel(int size, std::span<const double> raw) {
  return BlurKernel(size, clamp_normalize(raw));
}

SrfMatrix project_srf(int out_bands, int in_bands, std::span<const double> raw) {
  if (raw.size() != static_cast<std::size_t>(out_bands) * in_bands) {
    throw ShapeError("project_srf: raw length does not match b x B");
  }
  std::vector<double> w;
  w.reserve(raw.size());
  for (int j = 0; j < out_bands; ++j) {
    const auto row = clamp_normalize(raw.subspan(j * in_bands, in_bands));
    w.insert(w.end(), row.begin(), row.end());
  }
  return SrfMatrix(out_bands, in_bands, std::move(w));
}

double kernel_objective(const HsiCube& x, const HsiCube& z, int s, int ksize,
                        std::span<const double> weights, double eta) {
  const HsiCube pred = spatial_degrade(z, ksize, weights, s);
  return sq(subtract(x, pred).data()) + eta * sq(weights);
}

double srf_objective(const HsiCube& y, const HsiCube& z, int out_bands,
                     std::span<const double> weights, double xi) {
  const HsiCube pred = spectral_degrade(z, out_bands, weights);
  return sq(subtract(y, pred).data()) + xi * sq(weights);
}

KernelEstimate estimate_kernel_step(const HsiCube& x, const HsiCube& z, int s,
                                    const BlurKernel& k_init,
                                    const EstimationConfig& cfg) {
  validate(cfg);
  check_kernel_inputs(x, z, s, k_init);
  const int ks = k_init.size();
  const std::size_t n = static_cast<std::size_t>(ks) * ks;
  const double eta = cfg.eta;

  std::vector<double> k(k_init.weights().begin(), k_init.weights().end());
  auto apply = [&](std::span<const double> w) {
    return spatial_degrade(z, ks, w, s);
  };
  // e = X - A k; gradient of the objective is -2 (A^T e - eta k).
  HsiCube e = subtract(x, apply(k));
  auto normal_residual = [&]() {
    std::vector<double> r = spatial_kernel_adjoint(z, e, ks, s);
    for (std::size_t i = 0; i < n; ++i) r[i] -= eta * k[i];
    return r;
  };

  KernelEstimate est;
  est.loss_trace.push_back(sq(e.data()) + eta * sq(k));
  DivergenceMonitor monitor("estimate_kernel_step");

  if (cfg.solver == EstimationSolver::kGradientDescent) {
    double lr = cfg.lr;
    if (cfg.lr_relative) {
      // Power iteration for the largest eigenvalue of A^T A.
      std::vector<double> v(n, 1.0);
      double lambda = 0.0;
      for (int it = 0; it < 30; ++it) {
        const double nv = std::sqrt(sq(v));
        for (double& e : v) e /= nv;
        v = spatial_kernel_adjoint(z, apply(v), ks, s);
        lambda = std::sqrt(sq(v));
      }
      lr /= 2.0 * (lambda + eta);
    }
    for (int it = 0; it < cfg.inner_iters; ++it) {
      const std::vector<double> r = normal_residual();
      for (std::size_t i = 0; i < n; ++i) k[i] += 2.0 * lr * r[i];
      e = subtract(x, apply(k));
      est.loss_trace.push_back(sq(e.data()) + eta * sq(k));
      monitor.observe(est.loss_trace);
    }
  } else {
    std::vector<double> r = normal_residual();
    std::vector<double> p = r;
    double rr = sq(r);
    const double b_norm = std::sqrt(sq(spatial_kernel_adjoint(z, x, ks, s)));
    const double tiny = std::pow(1e-15 * std::max(b_norm, 1e-300), 2);
    int since_restart = 0;
    for (int it = 0; it < cfg.inner_iters; ++it) {
      if (rr > tiny) {
        const HsiCube ap = apply(p);
        std::vector<double> mp = spatial_kernel_adjoint(z, ap, ks, s);
        for (std::size_t i = 0; i < n; ++i) mp[i] += eta * p[i];
        const double pmp = inner(p, mp);
        if (pmp > 0.0) {
          const double alpha = rr / pmp;
          for (std::size_t i = 0; i < n; ++i) {
            k[i] += alpha * p[i];
            r[i] -= alpha * mp[i];
          }
          auto ed = e.data();
          auto apd = ap.data();
          for (std::size_t i = 0; i < ed.size(); ++i) ed[i] -= alpha * apd[i];
          if (++since_restart >= static_cast<int>(n)) {
            // Periodic restart limits drift of the recursive residuals.
            e = subtract(x, apply(k));
            r = normal_residual();
            p = r;
            rr = sq(r);
            since_restart = 0;
          } else {
            const double rr_new = sq(r);
            const double beta = rr_new / rr;
            for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
            rr = rr_new;
          }
        } else {
          rr = 0.0;
        }
      }
      est.loss_trace.push_back(sq(e.data()) + eta * sq(k));
      monitor.observe(est.loss_trace);
    }
  }
  est.kernel = project_kernel(ks, k);
  est.raw = std::move(k);
  return est;
}

SrfEstimate estimate_srf_step(const HsiCube& y, const HsiCube& z,
                              const SrfMatrix& p_init,
                              const EstimationConfig& cfg) {
  validate(cfg);
  const int nb = z.bands();
  const int b = y.bands();
  if (p_init.in_bands() != nb || p_init.out_bands() != b) {
    throw ShapeError("estimate_srf_step: p_init is " +
                     std::to_string(p_init.out_bands()) + "x" +
                     std::to_string(p_init.in_bands()) + ", data need " +
                     std::to_string(b) + "x" + std::to_string(nb));
  }
  if (y.height() != z.height() || y.width() != z.width()) {
    throw ShapeError("estimate_srf_step: Y and Z differ spatially");
  }
  const std::size_t pixels = z.shape().plane();
  ConstMatMap zm(z.data().data(), nb, static_cast<Eigen::Index>(pixels));
  ConstMatMap ym(y.data().data(), b, static_cast<Eigen::Index>(pixels));
  const RowMatrix gram = zm * zm.transpose();
  const RowMatrix cross = ym * zm.transpose();
  const double y_energy = ym.squaredNorm();
  const double xi = cfg.xi;

  auto objective = [&](const RowMatrix& p) {
    // ||Y - PZ||^2 = tr(P G P^T) - 2 tr(P C^T) + ||Y||^2
    return (p * gram).cwiseProduct(p).sum() - 2.0 * p.cwiseProduct(cross).sum() +
           y_energy + xi * p.squaredNorm();
  };

  RowMatrix p = ConstMatMap(p_init.weights().data(), b, nb);
  SrfEstimate est;
  est.loss_trace.push_back(objective(p));

  const bool closed_form = cfg.solver == EstimationSolver::kConjugateGradient &&
                           cfg.srf_closed_form && nb <= 64;
  if (closed_form) {
    RowMatrix normal = gram;
    normal.diagonal().array() += xi;
    Eigen::LLT<RowMatrix> llt(normal);
    const bool singular = llt.info() != Eigen::Success || llt.rcond() < 1e-13;
    if (singular) {
      throw SolverError(
          "estimate_srf_step: normal matrix Z Z^T + xi I is singular" +
          std::string(xi == 0.0 ? "; use xi > 0" : ""));
    }
    p = llt.solve(cross.transpose()).transpose();
    est.loss_trace.push_back(objective(p));
  } else {
    DivergenceMonitor monitor("estimate_srf_step");
    RowMatrix normal = gram;
    normal.diagonal().array() += xi;
    if (cfg.solver == EstimationSolver::kGradientDescent) {
      double lr = cfg.lr;
      if (cfg.lr_relative) {
        Eigen::SelfAdjointEigenSolver<RowMatrix> eig(normal,
                                                     Eigen::EigenvaluesOnly);
        lr /= 2.0 * eig.eigenvalues().maxCoeff();
      }
      for (int it = 0; it < cfg.inner_iters; ++it) {
        p -= 2.0 * lr * (p * normal - cross);
        est.loss_trace.push_back(objective(p));
        monitor.observe(est.loss_trace);
      }
    } else {
      // Independent CG per row on (G + xi I) p_j = c_j.
      RowMatrix r = cross - p * normal;
      RowMatrix dir = r;
      Eigen::VectorXd rr = r.rowwise().squaredNorm();
      const double tiny = 1e-30 * std::max(cross.squaredNorm(), 1e-300);
      for (int it = 0; it < cfg.inner_iters; ++it) {
        const RowMatrix md = dir * normal;
        for (int j = 0; j < b; ++j) {
          if (rr[j] <= tiny) continue;
          const double dmd = dir.row(j).dot(md.row(j));
          if (dmd <= 0.0) {
            rr[j] = 0.0;
            continue;
          }
          const double alpha = rr[j] / dmd;
          p.row(j) += alpha * dir.row(j);
          r.row(j) -= alpha * md.row(j);
          const double rr_new = r.row(j).squaredNorm();
          dir.row(j) = r.row(j) + (rr_new / rr[j]) * dir.row(j);
          rr[j] = rr_new;
        }
        est.loss_trace.push_back(objective(p));
        monitor.observe(est.loss_trace);
      }
    }
  }
  est.raw.assign(p.data(), p.data() + p.size());
  est.srf = project_srf(b, nb, est.raw);
  return est;
}

BlurKernel resize_kernel(const BlurKernel& k, int size) {
  if (size < 1 || size % 2 == 0) {
    throw ParameterError("resize_kernel: size must be odd");
  }
  if (size == k.size()) return k;
  std::vector<double> w(static_cast<std::size_t>(size) * size, 0.0);
  const int off = (size - k.size()) / 2;
  for (int r = 0; r < k.size(); ++r) {
    for (int c = 0; c < k.size(); ++c) {
      const int rr = r + off;
      const int cc = c + off;
      if (rr >= 0 && rr < size && cc >= 0 && cc < size) {
        w[rr * size + cc] = k.at(r, c);
      }
    }
  }
  return BlurKernel(size, clamp_normalize(w));
}

double kernel_relative_error(const BlurKernel& est, const BlurKernel& truth) {
  const int size = std::max(est.size(), truth.size());
  const BlurKernel a = resize_kernel(est, size);
  const BlurKernel b = resize_kernel(truth, size);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.weights().size(); ++i) {
    const double d = a.weights()[i] - b.weights()[i];
    num += d * d;
    den += b.weights()[i] * b.weights()[i];
  }
  return std::sqrt(num / den);
}

double srf_relative_error(const SrfMatrix& est, const SrfMatrix& truth) {
  if (est.out_bands() != truth.out_bands() ||
      est.in_bands() != truth.in_bands()) {
    throw ShapeError("srf_relative_error: shape mismatch");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < est.weights().size(); ++i) {
    const double d = est.weights()[i] - truth.weights()[i];
    num += d * d;
    den += truth.weights()[i] * truth.weights()[i];
  }
  return std::sqrt(num / den);
}

}  // namespace hsifuse
