// Minimal reverse-mode automatic differentiation over a static graph.
//
// A Graph is built once for fixed tensor shapes: leaves are named inputs and
// named parameters, every other node applies one layer to earlier nodes.
// forward() evaluates all nodes in creation order and keeps the activations;
// backward() walks them in reverse and returns gradients for every parameter
// (and for inputs created with requires_grad).
//
// Feature maps are [channels, height, width]; vectors are [n, 1, 1].

#ifndef HSIFUSE_AUTODIFF_H_
#define HSIFUSE_AUTODIFF_H_

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hsifuse/core.h"

namespace hsifuse::ad {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, double fill = 0.0);
  Tensor(std::vector<int> dims, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  int dim(std::size_t i) const { return shape[i]; }
  bool all_finite() const;
};

std::size_t element_count(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

Tensor tensor_from_cube(const HsiCube& cube);
HsiCube cube_from_tensor(const Tensor& t);
// [n, 1, 1] tensor holding `values`.
Tensor vector_tensor(std::span<const double> values);

using Bindings = std::map<std::string, Tensor>;

// Named parameter tensors, iterated in name order.
class NetworkParams {
 public:
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
  bool contains(const std::string& name) const {
    return tensors_.count(name) != 0;
  }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::map<std::string, Tensor>& tensors() { return tensors_; }
  std::size_t scalar_count() const;
  bool all_finite() const;

 private:
  std::map<std::string, Tensor> tensors_;
};

struct Gradients {
  NetworkParams params;
  Bindings inputs;
};

enum class InitKind { kZeros, kKaimingUniform };

struct ParamInit {
  InitKind kind = InitKind::kKaimingUniform;
  int fan_in = 1;
};

inline constexpr double kLeakySlope = 0.2;

using NodeId = int;

class Op;

class Graph {
 public:
  Graph();
  ~Graph();
  Graph(Graph&&) noexcept;
  Graph& operator=(Graph&&) noexcept;

  NodeId input(const std::string& name, std::vector<int> shape,
               bool requires_grad = false);
  NodeId parameter(const std::string& name, std::vector<int> shape,
                   ParamInit init);

  // x [C,H,W], weight [O,C,K,K], bias [O]; stride 1, mirror padding.
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias);
  // 1x1 convolution / dense layer: weight [O,C], bias [O].
  NodeId pointwise(NodeId x, NodeId weight, NodeId bias);
  NodeId leaky_relu(NodeId x, double slope = kLeakySlope);
  NodeId upsample_nearest(NodeId x, int s);
  // Half-pixel-centre bilinear interpolation with clamped borders.
  NodeId upsample_bilinear(NodeId x, int s);
  NodeId add(NodeId a, NodeId b);
  NodeId concat(NodeId a, NodeId b);
  NodeId scaled(NodeId x, double factor);
  // x * (1 + scale[c]) + shift[c]; scale and shift hold C values each.
  NodeId scale_shift(NodeId x, NodeId scale, NodeId shift);
  NodeId crop(NodeId x, int row, int col, int height, int width);
  // Blur-and-decimate with a K*K kernel node; differentiable in both.
  NodeId spatial_degrade(NodeId z, NodeId kernel, int ksize, int s);
  // Band mixing with a (b*B) SRF node; differentiable in both.
  NodeId spectral_degrade(NodeId z, NodeId srf, int out_bands);
  NodeId mse(NodeId a, NodeId b);
  // Mean absolute error; subgradient 0 where a == b.
  NodeId mae(NodeId a, NodeId b);

  const std::vector<int>& shape(NodeId id) const;
  std::size_t node_count() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  NetworkParams init_params(Rng& rng) const;

  void forward(const NetworkParams& params, const Bindings& inputs);
  const Tensor& value(NodeId id) const;
  // `loss` must hold a single element.
  Gradients backward(NodeId loss);

  // Values feeding every leaky-ReLU in the last forward pass.
  std::vector<const Tensor*> activation_inputs() const;

 private:
  struct Node;
  NodeId push(std::unique_ptr<Op> op, std::vector<NodeId> inputs,
              std::vector<int> shape);
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  bool forward_done_ = false;
};

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// Bias-corrected Adam update of every parameter that has a gradient. Throws
// ParameterError and leaves params/state untouched if any gradient is
// non-finite.
void adam_step(NetworkParams& params, const NetworkParams& grads,
               AdamState& state);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

inline constexpr double kGradCheckFloor = 1e-6;

// Central differences of the loss for every parameter entry and every entry
// of inputs created with requires_grad.
Gradients numeric_gradients(Graph& graph, const NetworkParams& params,
                            const Bindings& inputs, NodeId loss, double eps);

// Relative error per entry is
// |analytic - numeric| / max(|analytic|, |numeric|, kGradCheckFloor).
GradCheckReport compare_gradients(const Gradients& analytic,
                                  const Gradients& numeric, double tol);

GradCheckReport grad_check(Graph& graph, const NetworkParams& params,
                           const Bindings& inputs, NodeId loss,
                           double eps = 1e-3, double tol = 1e-4);

}  // namespace hsifuse::ad

#endif  // HSIFUSE_AUTODIFF_H_
