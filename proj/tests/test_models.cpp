#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stg/models.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace stg;
using namespace stg::models;
using stg::testing::dense_add;
using stg::testing::dense_mm;
using stg::testing::random_tensor;
using stg::testing::relative_error;
using stg::testing::weighted_sum;

namespace {

graph::AdjMatrix ring(std::size_t n, double w = 1.0) {
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    a.at(i, (i + 1) % n) = w;
    a.at((i + 1) % n, i) = w;
  }
  if (n == 2) a = Tensor::matrix({{0, w}, {w, 0}});
  return graph::AdjMatrix::make(a, graph::GraphKind::connectivity, false);
}

graph::AdjMatrix random_fixed(std::mt19937_64& rng, std::size_t n, bool directed) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = directed ? 0 : i + 1; j < n; ++j) {
      if (i == j || u(rng) < 0.4) continue;
      a.at(i, j) = 0.1 + u(rng);
      if (!directed) a.at(j, i) = a.at(i, j);
    }
  return graph::AdjMatrix::make(a, graph::GraphKind::distance, directed);
}

ModelSpec small_spec(Archetype arch, std::size_t n, std::size_t p, std::size_t q, graph::AdjMatrix g) {
  ModelSpec s;
  s.archetype = arch;
  s.input_len = p;
  s.horizon = q;
  s.nodes = n;
  s.channels = 2;
  s.hidden = 4;
  s.heads = 2;
  s.blocks = 2;
  s.graph.graph = std::move(g);
  s.seed = 5;
  while (receptive_field(s.kernel, s.blocks) < p) ++s.blocks;
  return s;
}

Tensor run(Model& m, const Tensor& window, Trace* trace = nullptr) {
  Tape t;
  return m.forward(t, window, false, trace).value();
}

// Reorders the node axis of [B, P, N, D] so that out[..., i, :] = in[..., perm[i], :].
Tensor permute_nodes(const Tensor& x, const std::vector<std::size_t>& perm, std::size_t node_axis) {
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < node_axis; ++d) outer *= s[d];
  for (std::size_t d = node_axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[node_axis];
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < inner; ++k) out[(o * n + i) * inner + k] = x[(o * n + perm[i]) * inner + k];
  return out;
}

graph::AdjMatrix permute_graph(const graph::AdjMatrix& a, const std::vector<std::size_t>& perm) {
  Tensor w({a.n, a.n});
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.n; ++j) w.at(i, j) = a(perm[i], perm[j]);
  return graph::AdjMatrix::make(w, a.kind, a.directed);
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Largest relative error between tape gradients of weighted_sum(forecast)
// and central differences over every parameter entry.
double model_gradcheck(Model& m, const Tensor& window, double h = 1e-5) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (Parameter* p : m.parameters())
    for (double& v : p->value.data()) v += jitter(rng);
  auto build = [&](Tape& t) {
    Var root = weighted_sum(m.forward(t, window, false));
    if (auto pen = m.penalty(t)) root = add(root, *pen);
    return root;
  };
  {
    Tape t;
    t.backward(build(t));
  }
  auto loss = [&] {
    Tape t;
    return build(t).value().item();
  };
  double worst = 0.0;
  for (Parameter* p : m.parameters()) {
    const Tensor analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss();
      p->value[i] = keep - h;
      const double down = loss();
      p->value[i] = keep;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------
// GCGRU

TEST(Gcgru, SaturatedUpdateGateCarriesState) {
  ParameterStore ps(1);
  nn::ConvSpec conv;
  GCGRUCell cell(ps, "cell", conv, 2, 3, 4);
  ps.get("cell.u.b").value = Tensor({3}, 60.0);
  std::mt19937_64 rng(2);
  Tape t;
  graph::GraphContext g(t, ring(4));
  Var h = t.constant(random_tensor(rng, {4, 3}));
  Var out = gcgru_step(t, cell, g, t.constant(random_tensor(rng, {4, 2})), h);
  EXPECT_EQ(out.value(), h.value());
}

TEST(Gcgru, EmptyGraphIsPlainGru) {
  ParameterStore ps(3);
  GCGRUCell cell(ps, "cell", nn::ConvSpec{}, 2, 3, 4);
  std::mt19937_64 rng(4);
  for (auto* p : ps.all()) p->value = random_tensor(rng, p->value.shape(), -1, 1);
  Tensor x = random_tensor(rng, {4, 2}), h = random_tensor(rng, {4, 3});
  Tape t;
  graph::GraphContext g(t, graph::AdjMatrix::make(Tensor::zeros({4, 4}), graph::GraphKind::connectivity, false));
  Tensor got = gcgru_step(t, cell, g, t.constant(x), t.constant(h)).value();
  for (std::size_t i = 0; i < 4; ++i) {
    auto gate = [&](const std::string& name, const std::vector<double>& in, std::size_t j) {
      const Tensor& w = ps.get("cell." + name + ".w").value;
      double s = ps.get("cell." + name + ".b").value[j];
      for (std::size_t k = 0; k < in.size(); ++k) s += in[k] * w.at(k, j);
      return s;
    };
    std::vector<double> xh{x.at(i, 0), x.at(i, 1), h.at(i, 0), h.at(i, 1), h.at(i, 2)};
    std::vector<double> r(3), u(3);
    for (std::size_t j = 0; j < 3; ++j) {
      r[j] = sigmoid(gate("r", xh, j));
      u[j] = sigmoid(gate("u", xh, j));
    }
    std::vector<double> xrh{x.at(i, 0), x.at(i, 1), r[0] * h.at(i, 0), r[1] * h.at(i, 1), r[2] * h.at(i, 2)};
    for (std::size_t j = 0; j < 3; ++j) {
      const double c = std::tanh(gate("c", xrh, j));
      EXPECT_NEAR(got.at(i, j), u[j] * h.at(i, j) + (1 - u[j]) * c, 1e-14);
    }
  }
}

TEST(Gcgru, TwoNodeStepMatchesDenseOracle) {
  ParameterStore ps(6);
  GCGRUCell cell(ps, "cell", nn::ConvSpec{}, 1, 2, 2);
  std::mt19937_64 rng(7);
  for (auto* p : ps.all()) p->value = random_tensor(rng, p->value.shape(), -1, 1);
  const Tensor a = Tensor::matrix({{0, 0.5}, {0.5, 0}});
  // I + D^-1/2 A D^-1/2 with degrees 0.5: off-diagonal weight 0.5 / 0.5 = 1
  const Tensor prop = Tensor::matrix({{1, 1}, {1, 1}});
  Tensor x = random_tensor(rng, {2, 1}), h = random_tensor(rng, {2, 2});
  auto gc = [&](const std::string& name, const Tensor& in) {
    Tensor z = dense_mm(dense_mm(prop, in), ps.get("cell." + name + ".w").value);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) z.at(i, j) += ps.get("cell." + name + ".b").value[j];
    return z;
  };
  auto cat = [](const Tensor& l, const Tensor& r) {
    Tensor o({2, l.dim(1) + r.dim(1)});
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < l.dim(1); ++j) o.at(i, j) = l.at(i, j);
      for (std::size_t j = 0; j < r.dim(1); ++j) o.at(i, l.dim(1) + j) = r.at(i, j);
    }
    return o;
  };
  Tensor r = gc("r", cat(x, h)), u = gc("u", cat(x, h));
  for (auto& v : r.data()) v = sigmoid(v);
  for (auto& v : u.data()) v = sigmoid(v);
  Tensor rh = h;
  for (std::size_t i = 0; i < rh.size(); ++i) rh[i] *= r[i];
  Tensor c = gc("c", cat(x, rh));
  Tensor expected({2, 2});
  for (std::size_t i = 0; i < 4; ++i) expected[i] = u[i] * h[i] + (1 - u[i]) * std::tanh(c[i]);

  Tape t;
  graph::GraphContext g(t, graph::AdjMatrix::make(a, graph::GraphKind::distance, false));
  Tensor got = gcgru_step(t, cell, g, t.constant(x), t.constant(h)).value();
  EXPECT_LT(max_abs_diff(got, expected), 1e-14);
  EXPECT_THROW(gcgru_step(t, cell, g, t.constant(Tensor::ones({2, 2})), t.constant(h)), DimensionError);
}

// ---------------------------------------------------------------------------
// Shapes, zero init, determinism

TEST(Forecast, ShapesForEveryArchetype) {
  std::mt19937_64 rng(8);
  for (auto arch : {Archetype::rnn, Archetype::cnn, Archetype::attention}) {
    auto spec = small_spec(arch, 5, 4, 3, ring(5));
    Model m(spec);
    EXPECT_EQ(run(m, random_tensor(rng, {2, 4, 5, 2})).shape(), (Shape{2, 3, 5, 2}));
    EXPECT_EQ(run(m, random_tensor(rng, {4, 5, 2})).shape(), (Shape{3, 5, 2}));
    EXPECT_THROW(run(m, random_tensor(rng, {2, 3, 5, 2})), DimensionError);
    spec.out_channels = 1;
    Model narrow(spec);
    EXPECT_EQ(run(narrow, random_tensor(rng, {2, 4, 5, 2})).shape(), (Shape{2, 3, 5, 1}));
  }
}

TEST(Forecast, ZeroParametersGiveZeroForecast) {
  std::mt19937_64 rng(9);
  for (auto arch : {Archetype::rnn, Archetype::cnn, Archetype::attention}) {
    Model m(small_spec(arch, 4, 3, 3, ring(4)));
    for (auto* p : m.parameters()) p->value = Tensor::zeros(p->value.shape());
    EXPECT_EQ(run(m, random_tensor(rng, {2, 3, 4, 2})), Tensor::zeros({2, 3, 4, 2}));
  }
}

TEST(Forecast, SeedDeterminesInitializationAndForecasts) {
  std::mt19937_64 rng(10);
  Tensor w = random_tensor(rng, {2, 4, 5, 2});
  for (auto arch : {Archetype::rnn, Archetype::cnn, Archetype::attention}) {
    auto spec = small_spec(arch, 5, 4, 3, ring(5));
    Model a(spec), b(spec);
    EXPECT_EQ(run(a, w), run(b, w));
    spec.seed = 6;
    Model c(spec);
    EXPECT_NE(run(a, w), run(c, w));
  }
}

// ---------------------------------------------------------------------------
// CNN

TEST(CnnForecast, ReceptiveField) {
  EXPECT_EQ(receptive_field(2, 3), 8u);
  EXPECT_EQ(receptive_field(2, 4), 16u);
  EXPECT_EQ(receptive_field(3, 2), 7u);
  auto spec = small_spec(Archetype::cnn, 3, 12, 2, ring(3));
  spec.blocks = 3;
  try {
    Model m(spec);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("need at least 4 blocks"), std::string::npos) << e.what();
  }
}

TEST(CnnForecast, BlocksAreCausal) {
  std::mt19937_64 rng(11);
  auto spec = small_spec(Archetype::cnn, 4, 8, 2, ring(4));
  spec.blocks = 3;
  Model m(spec);
  Tensor x = random_tensor(rng, {1, 8, 4, 2});
  Trace base;
  run(m, x, &base);
  for (std::size_t t0 = 0; t0 < 8; ++t0) {
    Tensor y = x;
    for (std::size_t i = 0; i < 4 * 2; ++i) y[t0 * 8 + i] += 1.0;
    Trace moved;
    run(m, y, &moved);
    for (std::size_t b = 0; b < base.blocks.size(); ++b) {
      const Tensor& before = base.blocks[b];
      const Tensor& after = moved.blocks[b];
      const std::size_t per_step = 4 * spec.hidden;
      for (std::size_t i = 0; i < t0 * per_step; ++i) ASSERT_EQ(before[i], after[i]) << "block " << b;
      double changed = 0;
      for (std::size_t i = t0 * per_step; i < before.size(); ++i) changed += std::abs(before[i] - after[i]);
      EXPECT_GT(changed, 0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// Attention

TEST(AttentionForecast, SinglePositionAndRowSums) {
  std::mt19937_64 rng(12);
  Model one(small_spec(Archetype::attention, 3, 1, 2, ring(3)));
  Trace tr;
  run(one, random_tensor(rng, {2, 1, 3, 2}), &tr);
  for (double v : tr.attention[0].data()) EXPECT_EQ(v, 1.0);

  auto spec = small_spec(Archetype::attention, 4, 5, 2, ring(4));
  spec.layers = 2;
  Model m(spec);
  Trace tr2;
  run(m, random_tensor(rng, {2, 5, 4, 2}), &tr2);
  ASSERT_EQ(tr2.attention.size(), 2u);
  for (const auto& att : tr2.attention) {
    const Tensor& a = att;
    for (std::size_t r = 0; r < a.size() / 5; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a[r * 5 + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(AttentionForecast, WithoutPositionalEncodingTimeOrderIsIrrelevant) {
  std::mt19937_64 rng(13);
  auto spec = small_spec(Archetype::attention, 3, 2, 2, ring(3));
  spec.positional_encoding = false;
  Model m(spec);
  Tensor x = random_tensor(rng, {1, 2, 3, 2});
  Tensor swapped = x;
  for (std::size_t i = 0; i < 6; ++i) std::swap(swapped[i], swapped[6 + i]);
  EXPECT_LT(max_abs_diff(run(m, x), run(m, swapped)), 1e-14);
  spec.positional_encoding = true;
  Model with(spec);
  EXPECT_GT(max_abs_diff(run(with, x), run(with, swapped)), 1e-6);
}

TEST(AttentionForecast, HeadsMustDivideWidth) {
  auto spec = small_spec(Archetype::attention, 3, 2, 2, ring(3));
  spec.heads = 3;
  EXPECT_THROW(Model m(spec), ConfigError);
}

// ---------------------------------------------------------------------------
// Whole-network properties

TEST(Forecast, NodePermutationEquivariance) {
  std::mt19937_64 rng(14);
  std::vector<std::pair<nn::ConvKind, bool>> convs{{nn::ConvKind::gcn, false},      {nn::ConvKind::cheb, false},
                                                   {nn::ConvKind::diffusion, true}, {nn::ConvKind::multi_hop, true},
                                                   {nn::ConvKind::gat, true}};
  for (auto arch : {Archetype::rnn, Archetype::cnn, Archetype::attention}) {
    for (auto [conv, directed] : convs) {
      for (std::size_t n : {3u, 8u}) {
        auto g = random_fixed(rng, n, directed);
        auto spec = small_spec(arch, n, 3, 2, g);
        spec.conv.kind = conv;
        spec.conv.heads = 2;
        Model m(spec);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        spec.graph.graph = permute_graph(g, perm);
        Model mp(spec);  // same seed, so identical parameters on the permuted graph
        Tensor x = random_tensor(rng, {2, 3, n, 2});
        Tensor expected = permute_nodes(run(m, x), perm, 2);
        EXPECT_LT(max_abs_diff(run(mp, permute_nodes(x, perm, 2)), expected), 1e-10)
            << to_string(arch) << " " << nn::to_string(conv) << " n=" << n;
      }
    }
  }
}

TEST(Forecast, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(15);
  for (auto arch : {Archetype::rnn, Archetype::cnn, Archetype::attention}) {
    auto spec = small_spec(arch, 4, 3, 3, random_fixed(rng, 4, false));
    spec.channels = 1;
    spec.hidden = 2;
    spec.heads = 1;
    Model m(spec);
    Tensor x = random_tensor(rng, {2, 3, 4, 1});
    EXPECT_LT(model_gradcheck(m, x), 1e-5) << to_string(arch);
  }
}

TEST(Forecast, GradientsReachLearnedGraphs) {
  std::mt19937_64 rng(16);
  auto prior = random_fixed(rng, 4, false);
  struct Source {
    nn::SourceKind kind;
    graph::AdaptiveVariant variant;
  };
  for (auto src : {Source{nn::SourceKind::adaptive, graph::AdaptiveVariant::undirected},
                   Source{nn::SourceKind::adaptive, graph::AdaptiveVariant::directed},
                   Source{nn::SourceKind::adaptive, graph::AdaptiveVariant::unidirected},
                   Source{nn::SourceKind::adaptive, graph::AdaptiveVariant::direct},
                   Source{nn::SourceKind::sampled, graph::AdaptiveVariant::undirected}}) {
    auto spec = small_spec(Archetype::cnn, 4, 3, 2, prior);
    spec.channels = 1;
    spec.hidden = 2;
    spec.conv.kind = nn::ConvKind::diffusion;
    spec.graph.kind = src.kind;
    spec.graph.variant = src.variant;
    spec.graph.embed_dim = 2;
    spec.graph.lambda = 0.1;
    Model m(spec);
    EXPECT_LT(model_gradcheck(m, random_tensor(rng, {2, 3, 4, 1})), 1e-5);
  }
}

TEST(Forecast, SampledGraphDrawsNoiseOnlyWhenTraining) {
  std::mt19937_64 rng(17);
  auto spec = small_spec(Archetype::cnn, 4, 3, 2, random_fixed(rng, 4, false));
  spec.graph.kind = nn::SourceKind::sampled;
  spec.conv.kind = nn::ConvKind::diffusion;
  Model m(spec);
  Tensor x = random_tensor(rng, {1, 3, 4, 2});
  Tape t1, t2, t3, t4;
  EXPECT_EQ(m.forward(t1, x, false).value(), m.forward(t2, x, false).value());
  EXPECT_NE(m.forward(t3, x, true).value(), m.forward(t4, x, true).value());
}

TEST(Forecast, ChebNeedsUndirectedSource) {
  std::mt19937_64 rng(18);
  auto spec = small_spec(Archetype::rnn, 4, 3, 2, random_fixed(rng, 4, true));
  spec.conv.kind = nn::ConvKind::cheb;
  EXPECT_THROW(Model m(spec), ConfigError);
  spec.graph.graph.reset();
  spec.graph.kind = nn::SourceKind::adaptive;
  spec.graph.variant = graph::AdaptiveVariant::undirected;
  EXPECT_NO_THROW(Model m(spec));
  spec.graph.variant = graph::AdaptiveVariant::attention;
  EXPECT_THROW(Model m(spec), ConfigError);
}

// ---------------------------------------------------------------------------
// Parameter counts

TEST(CountParameters, Examples) {
  ParameterStore ps(1);
  nn::GraphConv gc(ps, "gc", nn::ConvSpec{}, 5, 3, 4);
  EXPECT_EQ(ps.scalar_count(), 5u * 3u + 3u);

  auto spec = small_spec(Archetype::rnn, 6, 3, 2, ring(6));
  spec.layers = 1;
  auto gate_params = [](std::size_t in, std::size_t hid) { return 3 * ((in + hid) * hid + hid); };
  const std::size_t base = count_parameters(spec);
  const std::size_t d = spec.channels, h = spec.hidden;
  EXPECT_EQ(base, gate_params(d, h) + gate_params(d, h) + h * d + d);

  // doubling the width quadruples the state-to-state blocks exactly; the
  // input-to-state blocks and biases only double
  auto cell_count = [](std::size_t in, std::size_t hid) {
    ParameterStore cps(0);
    GCGRUCell cell(cps, "c", nn::ConvSpec{}, in, hid, 3);
    return cps.scalar_count();
  };
  for (std::size_t hid : {1u, 4u, 16u}) {
    EXPECT_EQ(cell_count(d, hid), gate_params(d, hid));
    EXPECT_EQ(3 * (2 * hid) * (2 * hid), 4 * (3 * hid * hid));
    EXPECT_EQ(cell_count(d, 2 * hid), 4 * 3 * hid * hid + 2 * (3 * d * hid + 3 * hid));
    EXPECT_LT(cell_count(d, 2 * hid), 4 * cell_count(d, hid));
    EXPECT_EQ(cell_count(0 + 1, 2 * hid) - 3 * 2 * hid - 3 * 2 * hid, 4 * 3 * hid * hid);
  }

  auto adaptive = spec;
  adaptive.graph.kind = nn::SourceKind::adaptive;
  adaptive.graph.variant = graph::AdaptiveVariant::undirected;
  adaptive.graph.embed_dim = 7;
  EXPECT_EQ(count_parameters(adaptive), base + 6u * 7u);
  adaptive.graph.variant = graph::AdaptiveVariant::directed;
  EXPECT_EQ(count_parameters(adaptive), base + 2u * 6u * 7u);
}
