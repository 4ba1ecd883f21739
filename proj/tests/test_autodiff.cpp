#include <doctest.h>

#include <cmath>

#include "helpers.h"
#include "hsifuse/autodiff.h"

using namespace hsifuse;
using namespace hsifuse::ad;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Random tensor whose entries all have magnitude in [lo, hi].
Tensor away_from_zero(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(lo, hi);
  return t;
}

// Reference correlation with mirror padding.
std::vector<double> conv_ref(const std::vector<double>& x, int C, int H, int W,
                             const std::vector<double>& w, const std::vector<double>& b,
                             int O, int K) {
  auto m = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
  };
  std::vector<double> out(static_cast<std::size_t>(O) * H * W);
  const int r = K / 2;
  for (int o = 0; o < O; ++o)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        double acc = b[o];
        for (int c = 0; c < C; ++c)
          for (int u = 0; u < K; ++u)
            for (int v = 0; v < K; ++v)
              acc += w[((o * C + c) * K + u) * K + v] * x[(c * H + m(y + u - r, H)) * W + m(xx + v - r, W)];
        out[(o * H + y) * W + xx] = acc;
      }
  return out;
}

// Builds loss = mse(node, target) and runs the dense check.
GradCheckReport check_mse(Graph& g, NodeId out, NetworkParams params, Bindings in, Rng& rng) {
  in["target"] = random_tensor(g.shape(out), rng);
  const NodeId loss = g.mse(out, g.input("target", g.shape(out)));
  return grad_check(g, params, in, loss);
}

}  // namespace

TEST_CASE("forward basics") {
  Graph g;
  NodeId x = g.input("x", {2, 3, 3});
  NodeId id = g.scaled(x, 1.0);
  Rng rng(1);
  Tensor xv = random_tensor({2, 3, 3}, rng);
  g.forward({}, {{"x", xv}});
  CHECK(g.value(id).data == xv.data);

  Graph z;
  NodeId zx = z.input("x", {3, 2, 2});
  NodeId w = z.parameter("w", {2, 3}, {InitKind::kZeros, 3});
  NodeId b = z.parameter("b", {2}, {InitKind::kZeros, 1});
  NodeId out = z.pointwise(zx, w, b);
  NetworkParams p;
  p.set("w", Tensor({2, 3}, 0.0));
  p.set("b", Tensor({2}, {0.3, -0.7}));
  z.forward(p, {{"x", random_tensor({3, 2, 2}, rng)}});
  for (int i = 0; i < 4; ++i) {
    CHECK(z.value(out).data[i] == 0.3);
    CHECK(z.value(out).data[4 + i] == -0.7);
  }
}

TEST_CASE("two conv layers match a loop implementation") {
  Graph g;
  NodeId x = g.input("x", {1, 5, 6});
  NodeId w1 = g.parameter("w1", {2, 1, 3, 3}, {InitKind::kKaimingUniform, 9});
  NodeId b1 = g.parameter("b1", {2}, {InitKind::kZeros, 1});
  NodeId w2 = g.parameter("w2", {1, 2, 3, 3}, {InitKind::kKaimingUniform, 18});
  NodeId b2 = g.parameter("b2", {1}, {InitKind::kZeros, 1});
  NodeId out = g.conv2d(g.conv2d(x, w1, b1), w2, b2);
  Rng rng(2);
  NetworkParams p = g.init_params(rng);
  p.at("b1").data = {0.1, -0.2};
  p.at("b2").data = {0.05};
  Tensor ramp({1, 5, 6});
  for (int i = 0; i < 30; ++i) ramp.data[i] = 0.1 * i;
  g.forward(p, {{"x", ramp}});
  auto h = conv_ref(ramp.data, 1, 5, 6, p.at("w1").data, p.at("b1").data, 2, 3);
  auto o = conv_ref(h, 2, 5, 6, p.at("w2").data, p.at("b2").data, 1, 3);
  for (std::size_t i = 0; i < o.size(); ++i) CHECK(g.value(out).data[i] == doctest::Approx(o[i]).epsilon(1e-13));
}

TEST_CASE("backward basics") {
  Graph g;
  NodeId x = g.input("x", {1, 1, 1}, true);
  NodeId zero = g.input("zero", {1, 1, 1});
  NodeId loss = g.mse(x, zero);
  g.parameter("unused", {3}, {InitKind::kZeros, 1});
  CHECK_THROWS_AS(g.backward(loss), ParameterError);
  NetworkParams p;
  p.set("unused", Tensor({3}, 0.5));
  g.forward(p, {{"x", Tensor({1, 1, 1}, 3.0)}, {"zero", Tensor({1, 1, 1}, 0.0)}});
  Gradients gr = g.backward(loss);
  CHECK(gr.inputs.at("x").data[0] == doctest::Approx(6.0));
  for (double v : gr.params.at("unused").data) CHECK(v == 0.0);
  CHECK_THROWS_AS(g.forward(p, {{"x", Tensor({1, 1, 1}, 3.0)}}), ParameterError);
  CHECK_THROWS_AS(g.forward(p, {{"x", Tensor({1, 1, 2}, 3.0)}, {"zero", Tensor({1, 1, 1}, 0.0)}}),
                  ShapeError);
}

TEST_CASE("layer gradients") {
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    const int C = rng.uniform_int(1, 8), H = rng.uniform_int(3, 16), W = rng.uniform_int(3, 16);
    const int O = rng.uniform_int(1, 8), K = 2 * rng.uniform_int(0, (std::min(H, W) - 1) / 2) + 1;
    CAPTURE(C);
    CAPTURE(H);
    CAPTURE(W);
    SUBCASE("conv2d") {
      Graph g;
      NodeId x = g.input("x", {C, H, W}, true);
      NodeId out = g.conv2d(x, g.parameter("w", {O, C, K, K}, {InitKind::kKaimingUniform, C * K * K}),
                            g.parameter("b", {O}, {InitKind::kKaimingUniform, C * K * K}));
      CHECK(check_mse(g, out, g.init_params(rng), {{"x", random_tensor({C, H, W}, rng)}}, rng).passed);
    }
    SUBCASE("pointwise") {
      Graph g;
      NodeId x = g.input("x", {C, H, W}, true);
      NodeId out = g.pointwise(x, g.parameter("w", {O, C}, {InitKind::kKaimingUniform, C}),
                               g.parameter("b", {O}, {InitKind::kKaimingUniform, C}));
      CHECK(check_mse(g, out, g.init_params(rng), {{"x", random_tensor({C, H, W}, rng)}}, rng).passed);
    }
    SUBCASE("leaky relu") {
      Graph g;
      NodeId x = g.input("x", {C, H, W}, true);
      NodeId out = g.leaky_relu(x);
      CHECK(check_mse(g, out, {}, {{"x", away_from_zero({C, H, W}, rng, 0.01, 1.0)}}, rng).passed);
    }
    SUBCASE("upsampling") {
      Graph g;
      NodeId x = g.input("x", {C, H, W}, true);
      NodeId out = g.add(g.upsample_nearest(x, 2), g.upsample_bilinear(x, 2));
      CHECK(check_mse(g, out, {}, {{"x", random_tensor({C, H, W}, rng)}}, rng).passed);
    }
    SUBCASE("add concat scaled crop") {
      Graph g;
      NodeId a = g.input("a", {C, H, W}, true);
      NodeId b = g.input("b", {O, H, W}, true);
      NodeId cat = g.scaled(g.concat(a, b), -1.7);
      NodeId out = g.crop(g.add(cat, cat), 1, 1, H - 2, W - 1);
      CHECK(check_mse(g, out, {}, {{"a", random_tensor({C, H, W}, rng)}, {"b", random_tensor({O, H, W}, rng)}},
                      rng).passed);
    }
    SUBCASE("scale shift") {
      Graph g;
      NodeId x = g.input("x", {C, H, W}, true);
      NodeId sc = g.input("s", {C, 1, 1}, true);
      NodeId sh = g.input("t", {C, 1, 1}, true);
      NodeId out = g.scale_shift(x, sc, sh);
      CHECK(check_mse(g, out, {},
                      {{"x", random_tensor({C, H, W}, rng)}, {"s", random_tensor({C, 1, 1}, rng)},
                       {"t", random_tensor({C, 1, 1}, rng)}},
                      rng).passed);
    }
    SUBCASE("degradation layers") {
      const int s = rng.uniform_int(1, 3);
      const int h = s * std::max(1, H / s), w = s * std::max(1, W / s);
      const int k = 2 * rng.uniform_int(0, (std::min(h, w) - 1) / 2) + 1;
      const int b = rng.uniform_int(1, C);
      Graph g;
      NodeId z = g.input("z", {C, h, w}, true);
      NodeId kn = g.input("k", {k * k, 1, 1}, true);
      NodeId pn = g.input("p", {b * C, 1, 1}, true);
      NodeId x = g.spatial_degrade(z, kn, k, s);
      NodeId y = g.spectral_degrade(z, pn, b);
      {
        Bindings in = {{"z", random_tensor({C, h, w}, rng)},
                       {"k", random_tensor({k * k, 1, 1}, rng, 0, 1)},
                       {"p", random_tensor({b * C, 1, 1}, rng, 0, 1)},
                       {"tx", random_tensor(g.shape(x), rng)},
                       {"ty", random_tensor(g.shape(y), rng)}};
        NodeId loss = g.add(g.mse(x, g.input("tx", g.shape(x))), g.mse(y, g.input("ty", g.shape(y))));
        CHECK(grad_check(g, {}, in, loss).passed);
      }
    }
    SUBCASE("mae") {
      Graph g;
      NodeId a = g.input("a", {C, H, W}, true);
      NodeId t = g.input("t", {C, H, W});
      NodeId loss = g.mae(a, t);
      Tensor av = random_tensor({C, H, W}, rng);
      Tensor tv = av;
      Tensor off = away_from_zero({C, H, W}, rng, 0.01, 1.0);
      for (std::size_t i = 0; i < tv.data.size(); ++i) tv.data[i] += off.data[i];
      CHECK(grad_check(g, {}, {{"a", av}, {"t", tv}}, loss).passed);
    }
  }
}

TEST_CASE("mae subgradient is zero at equality") {
  Graph g;
  NodeId a = g.input("a", {1, 1, 2}, true);
  NodeId t = g.input("t", {1, 1, 2});
  NodeId loss = g.mae(a, t);
  g.forward({}, {{"a", Tensor({1, 1, 2}, {0.5, 1.0})}, {"t", Tensor({1, 1, 2}, {0.5, 0.0})}});
  Gradients gr = g.backward(loss);
  CHECK(gr.inputs.at("a").data[0] == 0.0);
  CHECK(gr.inputs.at("a").data[1] == doctest::Approx(0.5));
}

TEST_CASE("corrupted gradient fails the check") {
  Graph g;
  NodeId x = g.input("x", {2, 4, 4});
  NodeId out = g.pointwise(x, g.parameter("w", {3, 2}, {InitKind::kKaimingUniform, 2}),
                           g.parameter("b", {3}, {InitKind::kKaimingUniform, 2}));
  NodeId loss = g.mse(out, g.input("t", {3, 4, 4}));
  Rng rng(5);
  NetworkParams p = g.init_params(rng);
  Bindings in = {{"x", random_tensor({2, 4, 4}, rng)}, {"t", random_tensor({3, 4, 4}, rng)}};
  CHECK(grad_check(g, p, in, loss).passed);
  g.forward(p, in);
  Gradients analytic = g.backward(loss);
  Gradients numeric = numeric_gradients(g, p, in, loss, 1e-3);
  analytic.params.at("w").data[2] *= 1.1;
  GradCheckReport r = compare_gradients(analytic, numeric, 1e-4);
  CHECK_FALSE(r.passed);
  CHECK(r.worst_name == "w");
  CHECK(r.worst_index == 2);
}

TEST_CASE("forward is deterministic and parameter count stable") {
  auto build = [] {
    Graph g;
    NodeId x = g.input("x", {3, 6, 6});
    NodeId h = g.leaky_relu(g.conv2d(x, g.parameter("w", {4, 3, 3, 3}, {InitKind::kKaimingUniform, 27}),
                                     g.parameter("b", {4}, {InitKind::kZeros, 1})));
    g.pointwise(h, g.parameter("w2", {2, 4}, {InitKind::kKaimingUniform, 4}),
                g.parameter("b2", {2}, {InitKind::kZeros, 1}));
    return g;
  };
  Graph a = build(), b = build();
  CHECK(a.parameter_count() == 4 * 27 + 4 + 8 + 2);
  CHECK(a.parameter_count() == b.parameter_count());
  Rng r1(8), r2(8);
  NetworkParams p = a.init_params(r1);
  CHECK(p.scalar_count() == a.parameter_count());
  NetworkParams q = b.init_params(r2);
  Rng rng(9);
  Tensor x = random_tensor({3, 6, 6}, rng);
  a.forward(p, {{"x", x}});
  b.forward(q, {{"x", x}});
  const NodeId last = static_cast<NodeId>(a.node_count()) - 1;
  CHECK(a.value(last).data == b.value(last).data);
}

TEST_CASE("adam") {
  NetworkParams p;
  p.set("a", Tensor({3}, {1.0, -2.0, 0.5}));
  NetworkParams zero;
  zero.set("a", Tensor({3}, 0.0));
  AdamState st;
  adam_step(p, zero, st);
  CHECK(p.at("a").data == std::vector<double>{1.0, -2.0, 0.5});

  NetworkParams q;
  q.set("a", Tensor({2}, {0.0, 0.0}));
  NetworkParams g;
  g.set("a", Tensor({2}, {0.3, -2.0}));
  AdamState s1;
  s1.lr = 0.01;
  adam_step(q, g, s1);
  CHECK(q.at("a").data[0] == doctest::Approx(-0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(q.at("a").data[1] == doctest::Approx(0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));

  NetworkParams bad;
  bad.set("a", Tensor({2}, {NAN, 0.0}));
  CHECK_THROWS_AS(adam_step(q, bad, s1), ParameterError);
  CHECK(s1.step == 1);

  // Quadratic bowl sum (x - c)^2.
  Rng rng(10);
  std::vector<double> c(10);
  NetworkParams x;
  x.set("x", Tensor({10}));
  for (int i = 0; i < 10; ++i) {
    c[i] = rng.uniform(-1, 1);
    x.at("x").data[i] = c[i] + (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(2.5, 3.5);
  }
  AdamState sb;
  sb.lr = 1e-2;
  double prev = 1e300;
  for (int t = 0; t < 200; ++t) {
    NetworkParams grad;
    grad.set("x", Tensor({10}));
    double loss = 0;
    for (int i = 0; i < 10; ++i) {
      const double d = x.at("x").data[i] - c[i];
      loss += d * d;
      grad.at("x").data[i] = 2 * d;
    }
    if (t >= 5) CHECK(loss < prev);
    prev = loss;
    adam_step(x, grad, sb);
  }
}
