#include "hsifuse/autodiff.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "hsifuse/degeneration.h"

namespace hsifuse::ad {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void accumulate(Tensor* g, std::size_t i, double v) {
  if (g) g->data[i] += v;
}

}  // namespace

Tensor::Tensor(std::vector<int> dims, double fill)
    : shape(std::move(dims)), data(element_count(shape), fill) {}

Tensor::Tensor(std::vector<int> dims, std::vector<double> values)
    : shape(std::move(dims)), data(std::move(values)) {
  if (data.size() != element_count(shape)) {
    throw ShapeError("tensor data length does not match shape " +
                     shape_string(shape));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](double v) { return std::isfinite(v); });
}

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor tensor_from_cube(const HsiCube& cube) {
  return Tensor({cube.bands(), cube.height(), cube.width()},
                std::vector<double>(cube.data().begin(), cube.data().end()));
}

HsiCube cube_from_tensor(const Tensor& t) {
  require(t.shape.size() == 3, "cube_from_tensor: tensor must be 3-D");
  return HsiCube({t.shape[0], t.shape[1], t.shape[2]}, t.data);
}

Tensor vector_tensor(std::span<const double> values) {
  return Tensor({static_cast<int>(values.size()), 1, 1},
                std::vector<double>(values.begin(), values.end()));
}

Tensor& NetworkParams::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ParameterError("unknown parameter " + name);
  return it->second;
}

const Tensor& NetworkParams::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ParameterError("unknown parameter " + name);
  return it->second;
}

std::size_t NetworkParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

bool NetworkParams::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const auto& kv) { return kv.second.all_finite(); });
}

// ---------------------------------------------------------------------------
// Layers

class Op {
 public:
  virtual ~Op() = default;
  virtual void forward(std::span<const Tensor* const> in, Tensor& out) = 0;
  // Accumulates input gradients; entries of `gin` are null for inputs that
  // do not require a gradient.
  virtual void backward(std::span<const Tensor* const> in, const Tensor& out,
                        const Tensor& gout, std::span<Tensor* const> gin) = 0;
  virtual bool is_leaky_relu() const { return false; }
};

namespace {

class LeafOp final : public Op {
 public:
  void forward(std::span<const Tensor* const>, Tensor&) override {}
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor&,
                std::span<Tensor* const>) override {}
};

// im2col with mirror padding; columns are (c, u, v), rows are pixels.
class Conv2dOp final : public Op {
 public:
  Conv2dOp(int channels, int height, int width, int out_channels, int ksize)
      : c_(channels), h_(height), w_(width), o_(out_channels), k_(ksize) {
    const int r = k_ / 2;
    rows_.resize(static_cast<std::size_t>(h_) * k_);
    cols_.resize(static_cast<std::size_t>(w_) * k_);
    for (int y = 0; y < h_; ++y)
      for (int u = 0; u < k_; ++u) rows_[y * k_ + u] = mirror(y + u - r, h_);
    for (int x = 0; x < w_; ++x)
      for (int v = 0; v < k_; ++v) cols_[x * k_ + v] = mirror(x + v - r, w_);
  }

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    const Tensor& x = *in[0];
    const Tensor& wt = *in[1];
    const Tensor& b = *in[2];
    const int hw = h_ * w_;
    const int ck = c_ * k_ * k_;
    col_.resize(static_cast<std::size_t>(ck) * hw);
    for (int c = 0; c < c_; ++c) {
      const double* src = x.data.data() + static_cast<std::size_t>(c) * hw;
      for (int u = 0; u < k_; ++u) {
        for (int v = 0; v < k_; ++v) {
          double* dst = col_.data() +
                        static_cast<std::size_t>((c * k_ + u) * k_ + v) * hw;
          for (int y = 0; y < h_; ++y) {
            const double* row = src + rows_[y * k_ + u] * w_;
            double* d = dst + y * w_;
            for (int xx = 0; xx < w_; ++xx) d[xx] = row[cols_[xx * k_ + v]];
          }
        }
      }
    }
    MatMap o(out.data.data(), o_, hw);
    ConstMatMap wm(wt.data.data(), o_, ck);
    ConstMatMap cm(col_.data(), ck, hw);
    o.noalias() = wm * cm;
    for (int oc = 0; oc < o_; ++oc) o.row(oc).array() += b.data[oc];
  }

  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    const int hw = h_ * w_;
    const int ck = c_ * k_ * k_;
    ConstMatMap g(gout.data.data(), o_, hw);
    ConstMatMap cm(col_.data(), ck, hw);
    if (gin[1]) {
      MatMap gw(gin[1]->data.data(), o_, ck);
      gw.noalias() += g * cm.transpose();
    }
    if (gin[2]) {
      for (int oc = 0; oc < o_; ++oc) gin[2]->data[oc] += g.row(oc).sum();
    }
    if (gin[0]) {
      gcol_.resize(static_cast<std::size_t>(ck) * hw);
      MatMap gc(gcol_.data(), ck, hw);
      ConstMatMap wm(in[1]->data.data(), o_, ck);
      gc.noalias() = wm.transpose() * g;
      double* gx = gin[0]->data.data();
      for (int c = 0; c < c_; ++c) {
        double* dst = gx + static_cast<std::size_t>(c) * hw;
        for (int u = 0; u < k_; ++u) {
          for (int v = 0; v < k_; ++v) {
            const double* src =
                gcol_.data() +
                static_cast<std::size_t>((c * k_ + u) * k_ + v) * hw;
            for (int y = 0; y < h_; ++y) {
              double* row = dst + rows_[y * k_ + u] * w_;
              const double* s = src + y * w_;
              for (int xx = 0; xx < w_; ++xx) row[cols_[xx * k_ + v]] += s[xx];
            }
          }
        }
      }
    }
  }

 private:
  int c_, h_, w_, o_, k_;
  std::vector<int> rows_, cols_;
  std::vector<double> col_, gcol_;
};

class PointwiseOp final : public Op {
 public:
  PointwiseOp(int channels, int pixels, int out_channels)
      : c_(channels), p_(pixels), o_(out_channels) {}

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    MatMap o(out.data.data(), o_, p_);
    ConstMatMap wm(in[1]->data.data(), o_, c_);
    ConstMatMap xm(in[0]->data.data(), c_, p_);
    o.noalias() = wm * xm;
    for (int oc = 0; oc < o_; ++oc) o.row(oc).array() += in[2]->data[oc];
  }

  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    ConstMatMap g(gout.data.data(), o_, p_);
    if (gin[0]) {
      MatMap gx(gin[0]->data.data(), c_, p_);
      ConstMatMap wm(in[1]->data.data(), o_, c_);
      gx.noalias() += wm.transpose() * g;
    }
    if (gin[1]) {
      MatMap gw(gin[1]->data.data(), o_, c_);
      ConstMatMap xm(in[0]->data.data(), c_, p_);
      gw.noalias() += g * xm.transpose();
    }
    if (gin[2]) {
      for (int oc = 0; oc < o_; ++oc) gin[2]->data[oc] += g.row(oc).sum();
    }
  }

 private:
  int c_, p_, o_;
};

class LeakyReluOp final : public Op {
 public:
  explicit LeakyReluOp(double slope) : slope_(slope) {}
  bool is_leaky_relu() const override { return true; }

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    const auto& x = in[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) {
      out.data[i] = x[i] > 0.0 ? x[i] : slope_ * x[i];
    }
  }

  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const auto& x = in[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) {
      gin[0]->data[i] += x[i] > 0.0 ? gout.data[i] : slope_ * gout.data[i];
    }
  }

 private:
  double slope_;
};

class UpsampleNearestOp final : public Op {
 public:
  UpsampleNearestOp(int channels, int height, int width, int s)
      : c_(channels), h_(height), w_(width), s_(s) {}

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    const int ow = w_ * s_;
    const int oh = h_ * s_;
    for (int c = 0; c < c_; ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          out.data[(c * oh + y) * ow + x] =
              in[0]->data[(c * h_ + y / s_) * w_ + x / s_];
  }

  void backward(std::span<const Tensor* const>, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const int ow = w_ * s_;
    const int oh = h_ * s_;
    for (int c = 0; c < c_; ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          gin[0]->data[(c * h_ + y / s_) * w_ + x / s_] +=
              gout.data[(c * oh + y) * ow + x];
  }

 private:
  int c_, h_, w_, s_;
};

class UpsampleBilinearOp final : public Op {
 public:
  UpsampleBilinearOp(int channels, int height, int width, int s)
      : c_(channels), h_(height), w_(width), s_(s) {
    make_taps(h_, ry0_, ry1_, rwy_);
    make_taps(w_, rx0_, rx1_, rwx_);
  }

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    const int oh = h_ * s_;
    const int ow = w_ * s_;
    for (int c = 0; c < c_; ++c) {
      const double* src = in[0]->data.data() + static_cast<std::size_t>(c) * h_ * w_;
      double* dst = out.data.data() + static_cast<std::size_t>(c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const double* r0 = src + ry0_[y] * w_;
        const double* r1 = src + ry1_[y] * w_;
        const double wy = rwy_[y];
        for (int x = 0; x < ow; ++x) {
          const double wx = rwx_[x];
          const double top = (1 - wx) * r0[rx0_[x]] + wx * r0[rx1_[x]];
          const double bot = (1 - wx) * r1[rx0_[x]] + wx * r1[rx1_[x]];
          dst[y * ow + x] = (1 - wy) * top + wy * bot;
        }
      }
    }
  }

  void backward(std::span<const Tensor* const>, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const int oh = h_ * s_;
    const int ow = w_ * s_;
    for (int c = 0; c < c_; ++c) {
      double* dst = gin[0]->data.data() + static_cast<std::size_t>(c) * h_ * w_;
      const double* g = gout.data.data() + static_cast<std::size_t>(c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        double* r0 = dst + ry0_[y] * w_;
        double* r1 = dst + ry1_[y] * w_;
        const double wy = rwy_[y];
        for (int x = 0; x < ow; ++x) {
          const double wx = rwx_[x];
          const double gv = g[y * ow + x];
          r0[rx0_[x]] += (1 - wy) * (1 - wx) * gv;
          r0[rx1_[x]] += (1 - wy) * wx * gv;
          r1[rx0_[x]] += wy * (1 - wx) * gv;
          r1[rx1_[x]] += wy * wx * gv;
        }
      }
    }
  }

 private:
  void make_taps(int n, std::vector<int>& i0, std::vector<int>& i1,
                 std::vector<double>& wt) const {
    const int m = n * s_;
    i0.resize(m);
    i1.resize(m);
    wt.resize(m);
    for (int d = 0; d < m; ++d) {
      const double src = std::clamp((d + 0.5) / s_ - 0.5, 0.0, n - 1.0);
      const int base = std::min(static_cast<int>(std::floor(src)), n - 1);
      i0[d] = base;
      i1[d] = std::min(base + 1, n - 1);
      wt[d] = src - base;
    }
  }

  int c_, h_, w_, s_;
  std::vector<int> ry0_, ry1_, rx0_, rx1_;
  std::vector<double> rwy_, rwx_;
};

class AddOp final : public Op {
 public:
  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data[i] = in[0]->data[i] + in[1]->data[i];
  }
  void backward(std::span<const Tensor* const>, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    for (int k = 0; k < 2; ++k) {
      if (!gin[k]) continue;
      for (std::size_t i = 0; i < gout.size(); ++i) gin[k]->data[i] += gout.data[i];
    }
  }
};

class ScaledOp final : public Op {
 public:
  explicit ScaledOp(double factor) : factor_(factor) {}
  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data[i] = factor_ * in[0]->data[i];
  }
  void backward(std::span<const Tensor* const>, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i)
      gin[0]->data[i] += factor_ * gout.data[i];
  }

 private:
  double factor_;
};

class ConcatOp final : public Op {
 public:
  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    std::copy(in[0]->data.begin(), in[0]->data.end(), out.data.begin());
    std::copy(in[1]->data.begin(), in[1]->data.end(),
              out.data.begin() + in[0]->size());
  }
  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    const std::size_t na = in[0]->size();
    if (gin[0])
      for (std::size_t i = 0; i < na; ++i) gin[0]->data[i] += gout.data[i];
    if (gin[1])
      for (std::size_t i = 0; i < in[1]->size(); ++i)
        gin[1]->data[i] += gout.data[na + i];
  }
};

class ScaleShiftOp final : public Op {
 public:
  ScaleShiftOp(int channels, std::size_t plane) : c_(channels), plane_(plane) {}

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    for (int c = 0; c < c_; ++c) {
      const double a = 1.0 + in[1]->data[c];
      const double b = in[2]->data[c];
      const double* x = in[0]->data.data() + c * plane_;
      double* o = out.data.data() + c * plane_;
      for (std::size_t i = 0; i < plane_; ++i) o[i] = x[i] * a + b;
    }
  }

  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    for (int c = 0; c < c_; ++c) {
      const double a = 1.0 + in[1]->data[c];
      const double* x = in[0]->data.data() + c * plane_;
      const double* g = gout.data.data() + c * plane_;
      double gs = 0.0, gb = 0.0;
      for (std::size_t i = 0; i < plane_; ++i) {
        gs += g[i] * x[i];
        gb += g[i];
      }
      if (gin[0]) {
        double* gx = gin[0]->data.data() + c * plane_;
        for (std::size_t i = 0; i < plane_; ++i) gx[i] += a * g[i];
      }
      accumulate(gin[1], c, gs);
      accumulate(gin[2], c, gb);
    }
  }

 private:
  int c_;
  std::size_t plane_;
};

class CropOp final : public Op {
 public:
  CropOp(int channels, int height, int width, int row, int col, int ch, int cw)
      : c_(channels), h_(height), w_(width), r_(row), q_(col), ch_(ch), cw_(cw) {}

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    for (int c = 0; c < c_; ++c)
      for (int y = 0; y < ch_; ++y)
        for (int x = 0; x < cw_; ++x)
          out.data[(c * ch_ + y) * cw_ + x] =
              in[0]->data[(c * h_ + r_ + y) * w_ + q_ + x];
  }

  void backward(std::span<const Tensor* const>, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (int c = 0; c < c_; ++c)
      for (int y = 0; y < ch_; ++y)
        for (int x = 0; x < cw_; ++x)
          gin[0]->data[(c * h_ + r_ + y) * w_ + q_ + x] +=
              gout.data[(c * ch_ + y) * cw_ + x];
  }

 private:
  int c_, h_, w_, r_, q_, ch_, cw_;
};

class SpatialDegradeOp final : public Op {
 public:
  SpatialDegradeOp(int ksize, int s) : k_(ksize), s_(s) {}

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    const HsiCube z = cube_from_tensor(*in[0]);
    const HsiCube x = hsifuse::spatial_degrade(z, k_, in[1]->data, s_);
    std::copy(x.data().begin(), x.data().end(), out.data.begin());
  }

  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    const HsiCube g = cube_from_tensor(gout);
    if (gin[0]) {
      const auto& sh = in[0]->shape;
      const HsiCube gz = hsifuse::spatial_degrade_adjoint(
          g, k_, in[1]->data, s_, {sh[0], sh[1], sh[2]});
      for (std::size_t i = 0; i < gz.size(); ++i) gin[0]->data[i] += gz.data()[i];
    }
    if (gin[1]) {
      const HsiCube z = cube_from_tensor(*in[0]);
      const auto gk = hsifuse::spatial_kernel_adjoint(z, g, k_, s_);
      for (std::size_t i = 0; i < gk.size(); ++i) gin[1]->data[i] += gk[i];
    }
  }

 private:
  int k_, s_;
};

class SpectralDegradeOp final : public Op {
 public:
  SpectralDegradeOp(int in_bands, int out_bands, std::size_t plane)
      : nb_(in_bands), b_(out_bands), plane_(plane) {}

  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    MatMap o(out.data.data(), b_, plane_);
    ConstMatMap p(in[1]->data.data(), b_, nb_);
    ConstMatMap z(in[0]->data.data(), nb_, plane_);
    o.noalias() = p * z;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    ConstMatMap g(gout.data.data(), b_, plane_);
    if (gin[0]) {
      MatMap gz(gin[0]->data.data(), nb_, plane_);
      ConstMatMap p(in[1]->data.data(), b_, nb_);
      gz.noalias() += p.transpose() * g;
    }
    if (gin[1]) {
      MatMap gp(gin[1]->data.data(), b_, nb_);
      ConstMatMap z(in[0]->data.data(), nb_, plane_);
      gp.noalias() += g * z.transpose();
    }
  }

 private:
  int nb_, b_;
  std::size_t plane_;
};

class MseOp final : public Op {
 public:
  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    double acc = 0.0;
    for (std::size_t i = 0; i < in[0]->size(); ++i) {
      const double d = in[0]->data[i] - in[1]->data[i];
      acc += d * d;
    }
    out.data[0] = acc / static_cast<double>(in[0]->size());
  }
  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    const double f = 2.0 * gout.data[0] / static_cast<double>(in[0]->size());
    for (std::size_t i = 0; i < in[0]->size(); ++i) {
      const double d = f * (in[0]->data[i] - in[1]->data[i]);
      accumulate(gin[0], i, d);
      accumulate(gin[1], i, -d);
    }
  }
};

class MaeOp final : public Op {
 public:
  void forward(std::span<const Tensor* const> in, Tensor& out) override {
    double acc = 0.0;
    for (std::size_t i = 0; i < in[0]->size(); ++i)
      acc += std::abs(in[0]->data[i] - in[1]->data[i]);
    out.data[0] = acc / static_cast<double>(in[0]->size());
  }
  void backward(std::span<const Tensor* const> in, const Tensor&,
                const Tensor& gout, std::span<Tensor* const> gin) override {
    const double f = gout.data[0] / static_cast<double>(in[0]->size());
    for (std::size_t i = 0; i < in[0]->size(); ++i) {
      const double d = in[0]->data[i] - in[1]->data[i];
      const double g = d > 0.0 ? f : (d < 0.0 ? -f : 0.0);
      accumulate(gin[0], i, g);
      accumulate(gin[1], i, -g);
    }
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Graph

struct Graph::Node {
  std::unique_ptr<Op> op;
  std::vector<NodeId> inputs;
  std::vector<int> shape;
  enum class Kind { kInput, kParameter, kOp } kind = Kind::kOp;
  std::string name;
  ParamInit init;
  bool requires_grad = false;
};

Graph::Graph() = default;
Graph::~Graph() = default;
Graph::Graph(Graph&&) noexcept = default;
Graph& Graph::operator=(Graph&&) noexcept = default;

void Graph::check_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ParameterError("graph: invalid node id " + std::to_string(id));
  }
}

NodeId Graph::push(std::unique_ptr<Op> op, std::vector<NodeId> inputs,
                   std::vector<int> shape) {
  Node n;
  n.op = std::move(op);
  n.requires_grad = false;
  for (NodeId i : inputs) {
    check_id(i);
    n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.shape = std::move(shape);
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(const std::string& name, std::vector<int> shape,
                    bool requires_grad) {
  for (const Node& n : nodes_) {
    if (n.kind != Node::Kind::kOp && n.name == name) {
      throw ParameterError("graph: duplicate leaf name " + name);
    }
  }
  NodeId id = push(std::make_unique<LeafOp>(), {}, std::move(shape));
  nodes_[id].kind = Node::Kind::kInput;
  nodes_[id].name = name;
  nodes_[id].requires_grad = requires_grad;
  return id;
}

NodeId Graph::parameter(const std::string& name, std::vector<int> shape,
                        ParamInit init) {
  NodeId id = input(name, std::move(shape), true);
  nodes_[id].kind = Node::Kind::kParameter;
  nodes_[id].init = init;
  return id;
}

NodeId Graph::conv2d(NodeId x, NodeId weight, NodeId bias) {
  const auto& xs = shape(x);
  const auto& ws = shape(weight);
  require(xs.size() == 3, "conv2d: input must be [C,H,W]");
  require(ws.size() == 4 && ws[1] == xs[0] && ws[2] == ws[3] && ws[2] % 2 == 1,
          "conv2d: weight must be [O,C,K,K] with odd K, got " +
              shape_string(ws) + " for input " + shape_string(xs));
  require(element_count(shape(bias)) == static_cast<std::size_t>(ws[0]),
          "conv2d: bias length must equal output channels");
  require(ws[2] / 2 < std::min(xs[1], xs[2]) || ws[2] == 1,
          "conv2d: kernel too large for mirror padding");
  return push(std::make_unique<Conv2dOp>(xs[0], xs[1], xs[2], ws[0], ws[2]),
              {x, weight, bias}, {ws[0], xs[1], xs[2]});
}

NodeId Graph::pointwise(NodeId x, NodeId weight, NodeId bias) {
  const auto xs = shape(x);
  const auto& ws = shape(weight);
  require(xs.size() == 3, "pointwise: input must be [C,H,W]");
  require(ws.size() == 2 && ws[1] == xs[0],
          "pointwise: weight must be [O,C], got " + shape_string(ws) +
              " for input " + shape_string(xs));
  require(element_count(shape(bias)) == static_cast<std::size_t>(ws[0]),
          "pointwise: bias length must equal output channels");
  return push(std::make_unique<PointwiseOp>(xs[0], xs[1] * xs[2], ws[0]),
              {x, weight, bias}, {ws[0], xs[1], xs[2]});
}

NodeId Graph::leaky_relu(NodeId x, double slope) {
  auto s = shape(x);
  return push(std::make_unique<LeakyReluOp>(slope), {x}, std::move(s));
}

NodeId Graph::upsample_nearest(NodeId x, int s) {
  const auto xs = shape(x);
  require(xs.size() == 3 && s >= 1, "upsample_nearest: bad input or scale");
  return push(std::make_unique<UpsampleNearestOp>(xs[0], xs[1], xs[2], s), {x},
              {xs[0], xs[1] * s, xs[2] * s});
}

NodeId Graph::upsample_bilinear(NodeId x, int s) {
  const auto xs = shape(x);
  require(xs.size() == 3 && s >= 1, "upsample_bilinear: bad input or scale");
  return push(std::make_unique<UpsampleBilinearOp>(xs[0], xs[1], xs[2], s),
              {x}, {xs[0], xs[1] * s, xs[2] * s});
}

NodeId Graph::add(NodeId a, NodeId b) {
  auto s = shape(a);
  require(s == shape(b), "add: shape mismatch " + shape_string(s) + " vs " +
                             shape_string(shape(b)));
  return push(std::make_unique<AddOp>(), {a, b}, std::move(s));
}

NodeId Graph::concat(NodeId a, NodeId b) {
  auto sa = shape(a);
  const auto& sb = shape(b);
  require(sa.size() == 3 && sb.size() == 3 && sa[1] == sb[1] && sa[2] == sb[2],
          "concat: spatial shapes differ");
  sa[0] += sb[0];
  return push(std::make_unique<ConcatOp>(), {a, b}, std::move(sa));
}

NodeId Graph::scaled(NodeId x, double factor) {
  auto s = shape(x);
  return push(std::make_unique<ScaledOp>(factor), {x}, std::move(s));
}

NodeId Graph::scale_shift(NodeId x, NodeId scale, NodeId shift) {
  auto xs = shape(x);
  require(xs.size() == 3, "scale_shift: input must be [C,H,W]");
  require(element_count(shape(scale)) == static_cast<std::size_t>(xs[0]) &&
              element_count(shape(shift)) == static_cast<std::size_t>(xs[0]),
          "scale_shift: scale/shift length must equal channels");
  const std::size_t plane = static_cast<std::size_t>(xs[1]) * xs[2];
  auto op = std::make_unique<ScaleShiftOp>(xs[0], plane);
  return push(std::move(op), {x, scale, shift}, std::move(xs));
}

NodeId Graph::crop(NodeId x, int row, int col, int height, int width) {
  const auto xs = shape(x);
  require(xs.size() == 3 && row >= 0 && col >= 0 && height >= 1 &&
              width >= 1 && row + height <= xs[1] && col + width <= xs[2],
          "crop: window outside input " + shape_string(xs));
  return push(std::make_unique<CropOp>(xs[0], xs[1], xs[2], row, col, height,
                                       width),
              {x}, {xs[0], height, width});
}

NodeId Graph::spatial_degrade(NodeId z, NodeId kernel, int ksize, int s) {
  const auto zs = shape(z);
  require(zs.size() == 3, "spatial_degrade: input must be [B,H,W]");
  require(element_count(shape(kernel)) ==
              static_cast<std::size_t>(ksize) * ksize,
          "spatial_degrade: kernel node must hold K*K values");
  require(s >= 1 && zs[1] % s == 0 && zs[2] % s == 0,
          "spatial_degrade: scale must divide the input size");
  require(ksize % 2 == 1 && ksize <= std::min(zs[1], zs[2]),
          "spatial_degrade: kernel size must be odd and fit the image");
  return push(std::make_unique<SpatialDegradeOp>(ksize, s), {z, kernel},
              {zs[0], zs[1] / s, zs[2] / s});
}

NodeId Graph::spectral_degrade(NodeId z, NodeId srf, int out_bands) {
  const auto zs = shape(z);
  require(zs.size() == 3, "spectral_degrade: input must be [B,H,W]");
  require(element_count(shape(srf)) ==
              static_cast<std::size_t>(out_bands) * zs[0],
          "spectral_degrade: SRF node must hold b*B values");
  const std::size_t plane = static_cast<std::size_t>(zs[1]) * zs[2];
  return push(std::make_unique<SpectralDegradeOp>(zs[0], out_bands, plane),
              {z, srf}, {out_bands, zs[1], zs[2]});
}

NodeId Graph::mse(NodeId a, NodeId b) {
  require(shape(a) == shape(b), "mse: shape mismatch");
  return push(std::make_unique<MseOp>(), {a, b}, {1});
}

NodeId Graph::mae(NodeId a, NodeId b) {
  require(shape(a) == shape(b), "mae: shape mismatch");
  return push(std::make_unique<MaeOp>(), {a, b}, {1});
}

const std::vector<int>& Graph::shape(NodeId id) const {
  check_id(id);
  return nodes_[id].shape;
}

std::size_t Graph::node_count() const { return nodes_.size(); }

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const Node& n : nodes_)
    if (n.kind == Node::Kind::kParameter) names.push_back(n.name);
  return names;
}

std::size_t Graph::parameter_count() const {
  std::size_t total = 0;
  for (const Node& n : nodes_)
    if (n.kind == Node::Kind::kParameter) total += element_count(n.shape);
  return total;
}

NetworkParams Graph::init_params(Rng& rng) const {
  NetworkParams params;
  for (const Node& n : nodes_) {
    if (n.kind != Node::Kind::kParameter) continue;
    Tensor t(n.shape, 0.0);
    if (n.init.kind == InitKind::kKaimingUniform) {
      const double bound = std::sqrt(
          6.0 / ((1.0 + kLeakySlope * kLeakySlope) * std::max(1, n.init.fan_in)));
      for (double& v : t.data) v = rng.uniform(-bound, bound);
    }
    params.set(n.name, std::move(t));
  }
  return params;
}

void Graph::forward(const NetworkParams& params, const Bindings& inputs) {
  forward_done_ = false;
  values_.resize(nodes_.size());
  std::vector<const Tensor*> in;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind != Node::Kind::kOp) {
      const Tensor* src = nullptr;
      if (n.kind == Node::Kind::kParameter) {
        if (!params.contains(n.name)) {
          throw ParameterError("forward: parameter " + n.name + " not bound");
        }
        src = &params.at(n.name);
      } else {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) {
          throw ParameterError("forward: input " + n.name + " not bound");
        }
        src = &it->second;
      }
      if (src->shape != n.shape) {
        throw ShapeError("forward: " + n.name + " expects " +
                         shape_string(n.shape) + ", got " +
                         shape_string(src->shape));
      }
      values_[id] = *src;
      continue;
    }
    in.clear();
    for (NodeId i : n.inputs) in.push_back(&values_[i]);
    Tensor& out = values_[id];
    out.shape = n.shape;
    out.data.assign(element_count(n.shape), 0.0);
    n.op->forward(in, out);
  }
  forward_done_ = true;
}

const Tensor& Graph::value(NodeId id) const {
  check_id(id);
  if (!forward_done_) throw ParameterError("graph: value() before forward()");
  return values_[id];
}

Gradients Graph::backward(NodeId loss) {
  check_id(loss);
  if (!forward_done_) throw ParameterError("backward called before forward");
  if (element_count(nodes_[loss].shape) != 1) {
    throw ShapeError("backward: loss must be a scalar node");
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[loss] = Tensor(nodes_[loss].shape, 1.0);
  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (NodeId id = loss; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (n.kind != Node::Kind::kOp || grads[id].data.empty()) continue;
    in.clear();
    gin.clear();
    for (NodeId i : n.inputs) {
      in.push_back(&values_[i]);
      if (nodes_[i].requires_grad) {
        if (grads[i].data.empty()) grads[i] = Tensor(nodes_[i].shape, 0.0);
        gin.push_back(&grads[i]);
      } else {
        gin.push_back(nullptr);
      }
    }
    n.op->backward(in, values_[id], grads[id], gin);
    if (id != loss) grads[id] = Tensor();  // release activation gradient
  }
  Gradients out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind == Node::Kind::kOp || !n.requires_grad) continue;
    Tensor g = grads[id].data.empty() ? Tensor(n.shape, 0.0) : std::move(grads[id]);
    if (n.kind == Node::Kind::kParameter) {
      out.params.set(n.name, std::move(g));
    } else {
      out.inputs[n.name] = std::move(g);
    }
  }
  return out;
}

std::vector<const Tensor*> Graph::activation_inputs() const {
  std::vector<const Tensor*> out;
  if (!forward_done_) return out;
  for (const Node& n : nodes_) {
    if (n.kind == Node::Kind::kOp && n.op->is_leaky_relu()) {
      out.push_back(&values_[n.inputs[0]]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(NetworkParams& params, const NetworkParams& grads,
               AdamState& state) {
  for (const auto& [name, g] : grads.tensors()) {
    if (!g.all_finite()) {
      throw ParameterError("adam_step: non-finite gradient for " + name);
    }
    if (params.at(name).shape != g.shape) {
      throw ShapeError("adam_step: gradient shape mismatch for " + name);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads.tensors()) {
    Tensor& p = params.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != g.size()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g.data[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p.data[i] -= state.lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

Gradients numeric_gradients(Graph& graph, const NetworkParams& params,
                            const Bindings& inputs, NodeId loss, double eps) {
  NetworkParams p = params;
  Bindings b = inputs;
  auto eval = [&]() {
    graph.forward(p, b);
    return graph.value(loss).data[0];
  };
  auto differentiate = [&](Tensor& t) {
    Tensor g(t.shape, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + eps;
      const double up = eval();
      t.data[i] = orig - eps;
      const double down = eval();
      t.data[i] = orig;
      g.data[i] = (up - down) / (2.0 * eps);
    }
    return g;
  };
  // Probe the graph once to learn which inputs carry gradients.
  graph.forward(p, b);
  const Gradients probe = graph.backward(loss);
  Gradients out;
  for (auto& [name, t] : p.tensors()) out.params.set(name, differentiate(t));
  for (const auto& [name, unused] : probe.inputs) {
    out.inputs[name] = differentiate(b.at(name));
  }
  return out;
}

GradCheckReport compare_gradients(const Gradients& analytic,
                                  const Gradients& numeric, double tol) {
  GradCheckReport report;
  auto visit = [&](const std::string& name, const Tensor& a, const Tensor& n) {
    if (a.shape != n.shape) {
      throw ShapeError("compare_gradients: shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double denom =
          std::max({std::abs(a.data[i]), std::abs(n.data[i]), kGradCheckFloor});
      const double rel = std::abs(a.data[i] - n.data[i]) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
        report.worst_name = name;
        report.worst_index = i;
      }
    }
  };
  for (const auto& [name, n] : numeric.params.tensors()) {
    visit(name, analytic.params.at(name), n);
  }
  for (const auto& [name, n] : numeric.inputs) {
    auto it = analytic.inputs.find(name);
    if (it == analytic.inputs.end()) {
      throw ParameterError("compare_gradients: missing input gradient " + name);
    }
    visit(name, it->second, n);
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

GradCheckReport grad_check(Graph& graph, const NetworkParams& params,
                           const Bindings& inputs, NodeId loss, double eps,
                           double tol) {
  graph.forward(params, inputs);
  const Gradients analytic = graph.backward(loss);
  const Gradients numeric = numeric_gradients(graph, params, inputs, loss, eps);
  return compare_gradients(analytic, numeric, tol);
}

}  // namespace hsifuse::ad
