// Reconstruction paths for the latent cube Z:
//   map_reconstruct  pixel-space gradient descent with a hand-crafted prior,
//   Backbone         fusion network F(X, Y) giving the rough estimate Z-hat,
//   ReconNet         guided generator G(Z-hat, k, P) fitted per scene.

#ifndef HSIFUSE_RECONSTRUCTION_H_
#define HSIFUSE_RECONSTRUCTION_H_

#include <functional>
#include <string>
#include <vector>

#include "hsifuse/autodiff.h"
#include "hsifuse/core.h"

namespace hsifuse {

// ---------------------------------------------------------------- MAP

enum class RegularizerKind { kNone, kTikhonov, kTotalVariation };

struct Regularizer {
  RegularizerKind kind = RegularizerKind::kNone;
  double weight = 0.0;
};

void validate(const Regularizer& reg);

// Smoothing constant of the TV term sqrt(dx^2 + dy^2 + eps^2).
inline constexpr double kTvEpsilon = 1e-3;

// Unweighted regularizer value and gradient. Differences are forward
// differences; the last row/column difference is zero.
double regularizer_value(const HsiCube& z, RegularizerKind kind);
HsiCube regularizer_gradient(const HsiCube& z, RegularizerKind kind);
// Isotropic total variation sum sqrt(dx^2 + dy^2), no smoothing.
double total_variation(const HsiCube& z);

struct MapResult {
  HsiCube z;                        // best-loss iterate
  std::vector<double> loss_trace;   // loss at Z0 and after every step
  int best_iter = 0;
  double step = 0.0;                // step size actually used
};

// Gradient descent on ||X - Phi Z||^2 + ||Y - Psi Z||^2 + lambda R(Z) from
// Z0 = bicubic_upsample(X, s). lr <= 0 selects 1/L with L estimated by power
// iteration.
MapResult map_reconstruct(const HsiCube& x, const HsiCube& y,
                          const BlurKernel& k, const SrfMatrix& p, int s,
                          const Regularizer& reg, int iters, double lr = 0.0);

// ----------------------------------------------------------- Backbone

struct BackboneConfig {
  int width = 32;
  int depth = 4;
  bool zero_output = false;
};

void validate(const BackboneConfig& cfg);

// F(X, Y) = up(X) + body(concat(up(X), Y)), up = bilinear x s.
struct Backbone {
  BackboneConfig config;
  CubeShape hsi_shape;  // X
  int msi_bands = 0;
  int scale = 1;
  ad::Graph graph;
  ad::NodeId x_in = -1;
  ad::NodeId y_in = -1;
  ad::NodeId upsampled = -1;
  ad::NodeId out = -1;
  std::string out_layer;  // name prefix of the final convolution
};

Backbone build_backbone(const BackboneConfig& cfg, const CubeShape& hsi_shape,
                        int msi_bands, int scale);

HsiCube backbone_forward(Backbone& net, const ad::NetworkParams& params,
                         const HsiCube& x, const HsiCube& y);

struct TrainingSample {
  HsiCube z;
  HsiCube x;
  HsiCube y;
};

struct TrainOptions {
  int epochs = 150;
  double lr = 1e-4;
  int batch_size = 6;
  int decay_every = 10;
  double decay = 0.7;
};

struct TrainResult {
  ad::NetworkParams params;
  std::vector<double> epoch_losses;  // mean l1 loss seen during each epoch
};

// Adam on the mean l1 error ||Z - F(X, Y)||; a batch averages the gradients
// of batch_size shuffled samples.
TrainResult train_backbone(const Backbone& net, ad::NetworkParams init,
                           const std::vector<TrainingSample>& dataset,
                           const TrainOptions& opts, Rng& rng);

// Draws a k from the pre-training ranges (odd size in [5,15], sigma in
// [0.5,2]) and c in [5e-3, 8e-3] per cube, then simulates (X, Y).
struct PretrainRanges {
  int kernel_size_min = 5;
  int kernel_size_max = 15;
  double sigma_min = 0.5;
  double sigma_max = 2.0;
  double c_min = 5e-3;
  double c_max = 8e-3;
};

std::vector<TrainingSample> make_backbone_dataset(
    const std::vector<HsiCube>& hr_cubes, const SrfMatrix& srf_base, int scale,
    double snr_db, const PretrainRanges& ranges, Rng& rng);

// --------------------------------------------------------- Recon net G

struct ReconNetConfig {
  int spatial_width = 32;
  int spectral_width = 32;
  int fusion_depth = 2;
  int k_embed = 16;
  int p_embed = 16;
  // Start the final convolution at zero so that G(Z-hat) = Z-hat initially.
  bool zero_output = false;
};

void validate(const ReconNetConfig& cfg);

// Inputs: "zhat" [B,H,W], "k" [K*K,1,1], "p" [b*B,1,1]. Output Z [B,H,W].
struct ReconNet {
  ReconNetConfig config;
  CubeShape shape;
  int kernel_size = 1;
  int msi_bands = 1;
  ad::Graph graph;
  ad::NodeId zhat = -1;
  ad::NodeId k = -1;
  ad::NodeId p = -1;
  ad::NodeId out = -1;
  std::string out_layer;
  std::string k_embed_layer;
};

ReconNet build_recon_net(const ReconNetConfig& cfg, const CubeShape& shape,
                         int kernel_size, int msi_bands);

ad::Bindings recon_bindings(const HsiCube& zhat, const BlurKernel& k,
                            const SrfMatrix& p);

HsiCube recon_forward(ReconNet& net, const ad::NetworkParams& params,
                      const HsiCube& zhat, const BlurKernel& k,
                      const SrfMatrix& p);

// Attaches the unsupervised l1 loss mae(Phi_k(Z_rc), X_rc) + mae(Psi_P(Z_rc),
// Y_rc) for the column window [col, col + width) of the network output;
// observation inputs are named x_name / y_name. Returns the loss node.
ad::NodeId attach_data_loss(ReconNet& net, int scale, int col, int width,
                            const std::string& x_name,
                            const std::string& y_name);

// Column window [col, col + width) of a cube.
HsiCube crop_columns(const HsiCube& z, int col, int width);

struct DipOptions {
  int iters = 10;
  double lr = 1e-3;
  // Called with (completed steps t, output at t) for t = 0..iters.
  std::function<void(int, const HsiCube&)> on_step;
};

// Persistent state of the per-scene fit: the graph with the data loss, the
// parameters and Adam moments, and the best iterate seen so far.
class DipSession {
 public:
  DipSession(const ReconNetConfig& cfg, const HsiCube& x, const HsiCube& y,
             const HsiCube& zhat, int scale, int kernel_size,
             ad::NetworkParams theta, double lr);

  // Loss and Z at the current parameters for the given operators.
  double evaluate(const BlurKernel& k, const SrfMatrix& p);
  // One Adam step on theta with k, P held fixed; returns the loss at the
  // parameters before the step.
  double step(const BlurKernel& k, const SrfMatrix& p);
  // Gradients of the data loss at the current state with respect to theta,
  // k and P (k, P as flat vectors).
  struct FullGradient {
    double loss;
    ad::NetworkParams theta;
    std::vector<double> k;
    std::vector<double> p;
  };
  FullGradient full_gradient(const BlurKernel& k, const SrfMatrix& p);
  void apply_theta_gradient(const ad::NetworkParams& grad);
  // Forget the best iterate (operators changed, losses not comparable).
  void reset_best();

  const HsiCube& current() const { return current_; }
  double current_loss() const { return current_loss_; }
  const HsiCube& best() const { return best_; }
  double best_loss() const { return best_loss_; }
  const ad::NetworkParams& theta() const { return theta_; }
  const ad::AdamState& adam() const { return adam_; }
  const std::vector<double>& loss_trace() const { return trace_; }
  ReconNet& net() { return net_; }

 private:
  void run_forward(const BlurKernel& k, const SrfMatrix& p);
  void record();

  ReconNet net_;
  ad::NodeId loss_ = -1;
  ad::Bindings inputs_;
  ad::NetworkParams theta_;
  ad::AdamState adam_;
  HsiCube current_;
  double current_loss_ = 0.0;
  HsiCube best_;
  double best_loss_ = 0.0;
  bool has_best_ = false;
  std::vector<double> trace_;
};

struct DipResult {
  HsiCube z;                 // best-loss output
  ad::NetworkParams theta;   // final parameters
  std::vector<double> loss_trace;
};

// iters Adam steps on theta; loss is evaluated iters + 1 times and the
// output with the lowest loss is returned.
DipResult dip_optimize(const ReconNetConfig& cfg, const HsiCube& x,
                       const HsiCube& y, const BlurKernel& k,
                       const SrfMatrix& p, int scale, const HsiCube& zhat,
                       ad::NetworkParams theta_init, const DipOptions& opts);

}  // namespace hsifuse

#endif  // HSIFUSE_RECONSTRUCTION_H_
