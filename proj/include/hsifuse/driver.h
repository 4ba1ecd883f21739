// Orchestration: the blind fusion loop in its three optimization manners and
// meta-learned initialization of the reconstruction network.

#ifndef HSIFUSE_DRIVER_H_
#define HSIFUSE_DRIVER_H_

#include <optional>
#include <string>
#include <vector>

#include "hsifuse/autodiff.h"
#include "hsifuse/core.h"
#include "hsifuse/estimation.h"
#include "hsifuse/metrics.h"
#include "hsifuse/reconstruction.h"

namespace hsifuse {

struct Schedule {
  int outer_iters = 40;
  int inner_iters = 10;
  double lr_degeneration = 1e-4;
  double lr_reconstruction = 1e-3;

  int total() const { return outer_iters * inner_iters; }
};

void validate(const Schedule& s);

enum class Mode { kSeparate, kJoint, kAlternating };

std::string to_string(Mode m);
Mode parse_mode(const std::string& name);

struct TraceRecord {
  int outer = 0;             // 1-based
  double residual_x = 0.0;   // ||X - Phi Z||
  double residual_y = 0.0;   // ||Y - Psi Z||
  double data_loss = 0.0;    // l1 loss of the reconstruction network
  std::optional<double> kernel_error;
  std::optional<double> srf_error;
  std::optional<MetricReport> metrics;
};

struct RunTrace {
  std::vector<TraceRecord> records;

  // Header plus one row per record; missing values are left empty.
  std::string to_csv() const;
};

// Raised when a sub-solver fails; carries the records completed so far.
class RunError : public SolverError {
 public:
  RunError(const std::string& what, RunTrace partial)
      : SolverError(what), partial_(std::move(partial)) {}
  const RunTrace& partial() const { return partial_; }

 private:
  RunTrace partial_;
};

struct GroundTruth {
  HsiCube z;
  BlurKernel k;
  SrfMatrix p;
};

// Default SRF update: warm-started gradient descent at 0.05 of the
// stability limit. Only the well-determined directions of P move within a
// step budget.
EstimationConfig default_srf_estimation();

struct RunOptions {
  Schedule schedule;
  Mode mode = Mode::kAlternating;
  EstimationConfig kernel_estimation;
  EstimationConfig srf_estimation = default_srf_estimation();
  ReconNetConfig recon;
  const GroundTruth* truth = nullptr;  // enables error columns in the trace
};

struct StepCounts {
  long kernel = 0;
  long srf = 0;
  long recon = 0;
};

struct RunResult {
  HsiCube z;
  BlurKernel k;
  SrfMatrix p;
  RunTrace trace;
  ad::NetworkParams theta;
  StepCounts steps;
};

// Blind fusion starting from the rough estimate Z-hat (Z0 = Z-hat).
//   Alternating: per outer iteration, inner_iters kernel solver iterations,
//     inner_iters SRF solver iterations and inner_iters network steps, each
//     warm-started.
//   Separate: k and P estimated once from Z-hat with the full budget, then
//     the full network budget.
//   Joint: every step updates k and P (Adam at lr_degeneration, then
//     projection) and theta (Adam at lr_reconstruction) from the gradient of
//     the same l1 data loss.
// Every group receives outer_iters * inner_iters updates in each mode.
RunResult run_alternating(const HsiCube& x, const HsiCube& y, int s,
                          const HsiCube& zhat, ad::NetworkParams theta_init,
                          const BlurKernel& k_init, const SrfMatrix& p_init,
                          const RunOptions& opts);

// Same, with Z-hat = backbone_forward(X, Y, theta_f).
RunResult run_alternating(const HsiCube& x, const HsiCube& y, int s,
                          Backbone& backbone, const ad::NetworkParams& theta_f,
                          ad::NetworkParams theta_init, const BlurKernel& k_init,
                          const SrfMatrix& p_init, const RunOptions& opts);

// ------------------------------------------------------------ meta-learning

struct ColumnWindow {
  int col = 0;
  int width = 0;
};

struct MetaTask {
  HsiCube z;
  HsiCube x;
  HsiCube y;
  BlurKernel k_true;
  SrfMatrix p_true;
  ColumnWindow support;  // L^tr: unsupervised data loss
  ColumnWindow query;    // L^te: l1 error against z
  // Filled by prepare_meta_tasks.
  HsiCube zhat;
  BlurKernel k_est;
  SrfMatrix p_est;
};

struct MetaTaskOptions {
  int scale = 4;
  double snr_db = 40.0;
  SrfMatrix srf_base;
  PretrainRanges ranges;
};

// Each task picks a cube uniformly, draws k and c from the ranges and
// simulates (X, Y). Support is the left half of the columns, query the right.
std::vector<MetaTask> make_meta_tasks(const std::vector<HsiCube>& hr_cubes,
                                      const MetaTaskOptions& opts, int count,
                                      Rng& rng);

// Z-hat from the backbone, then k and P estimated from Z-hat starting at the
// default inits (kernel size of k_init).
void prepare_meta_tasks(std::vector<MetaTask>& tasks, Backbone& backbone,
                        const ad::NetworkParams& theta_f,
                        const BlurKernel& k_init, const SrfMatrix& p_init,
                        const EstimationConfig& est, int est_iters);

struct MetaConfig {
  double alpha = 1e-3;        // task-level step
  int alpha_halve_every = 10; // epochs
  int epochs = 100;
  int tasks_per_batch = 4;
  bool first_order = true;
  double meta_lr = 1e-3;      // outer Adam step
};

void validate(const MetaConfig& cfg);

// Builds the two task losses on one reconstruction network.
class MetaLearner {
 public:
  MetaLearner(const ReconNetConfig& cfg, const MetaTask& prototype);

  double support_loss(const ad::NetworkParams& theta, const MetaTask& task,
                      ad::NetworkParams* grad);
  double query_loss(const ad::NetworkParams& theta, const MetaTask& task,
                    ad::NetworkParams* grad);

  // First-order MAML gradient of one task: grad L^te at
  // theta - alpha grad L^tr(theta). Returns L^te(theta').
  double task_gradient(const ad::NetworkParams& theta, const MetaTask& task,
                       double alpha, ad::NetworkParams& grad);
  // Plain multi-task gradient grad L^te(theta).
  double multitask_gradient(const ad::NetworkParams& theta,
                            const MetaTask& task, ad::NetworkParams& grad);

  ReconNet& net() { return net_; }

 private:
  ad::Bindings bindings(const MetaTask& task) const;

  ReconNet net_;
  ad::NodeId support_ = -1;
  ad::NodeId query_ = -1;
  int scale_ = 1;
  ColumnWindow support_win_;
  ColumnWindow query_win_;
};

struct MetaResult {
  ad::NetworkParams theta;
  std::vector<double> epoch_losses;  // mean L^te(theta') per epoch
};

MetaResult maml_pretrain(const std::vector<MetaTask>& tasks,
                         const ReconNetConfig& recon,
                         ad::NetworkParams theta_init, const MetaConfig& cfg,
                         Rng& rng);

}  // namespace hsifuse

#endif  // HSIFUSE_DRIVER_H_
