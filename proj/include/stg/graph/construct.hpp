#pragma once

// Graph construction: pre-defined graphs from prior knowledge, adaptive
// graphs from trainable node embeddings, and Gumbel-sampled graphs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stg/autodiff.hpp"
#include "stg/traffic.hpp"

namespace stg::graph {

enum class GraphKind {
  distance,
  connectivity,
  semantic,
  functionality,
  distribution,
  adaptive_direct,
  adaptive_undirected,
  adaptive_directed,
  adaptive_unidirected,
  adaptive_attention,
  sampled,
};

inline constexpr std::array<std::pair<GraphKind, std::string_view>, 11> kGraphKindNames{{
    {GraphKind::distance, "distance"},
    {GraphKind::connectivity, "connectivity"},
    {GraphKind::semantic, "semantic"},
    {GraphKind::functionality, "functionality"},
    {GraphKind::distribution, "distribution"},
    {GraphKind::adaptive_direct, "adaptive-direct"},
    {GraphKind::adaptive_undirected, "adaptive-undirected"},
    {GraphKind::adaptive_directed, "adaptive-directed"},
    {GraphKind::adaptive_unidirected, "adaptive-unidirected"},
    {GraphKind::adaptive_attention, "adaptive-attention"},
    {GraphKind::sampled, "sampled"},
}};

inline std::string_view to_string(GraphKind k) {
  for (const auto& [kind, name] : kGraphKindNames)
    if (kind == k) return name;
  return "unknown";
}

inline GraphKind parse_graph_kind(std::string_view s) {
  for (const auto& [kind, name] : kGraphKindNames)
    if (name == s) return kind;
  throw InputError("unknown graph kind '" + std::string(s) + "'");
}

inline constexpr double kSymmetryTolerance = 1e-12;

/// Dense nonnegative n x n weights tagged with the construction that made them.
struct AdjMatrix {
  std::size_t n = 0;
  Tensor weights;
  GraphKind kind = GraphKind::connectivity;
  bool directed = false;

  static AdjMatrix make(Tensor w, GraphKind kind, bool directed) {
    if (w.rank() != 2 || w.dim(0) != w.dim(1)) {
      throw DimensionError("adjacency must be square, got " + shape_str(w.shape()));
    }
    const std::size_t n = w.dim(0);
    for (double v : w.data()) {
      if (!(v >= 0.0)) throw InputError("adjacency weights must be nonnegative");
    }
    if (!directed) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (std::abs(w.at(i, j) - w.at(j, i)) > kSymmetryTolerance) {
            throw InputError("undirected adjacency is not symmetric at (" + std::to_string(i) + "," +
                             std::to_string(j) + ")");
          }
    }
    return AdjMatrix{n, std::move(w), kind, directed};
  }

  double operator()(std::size_t i, std::size_t j) const { return weights.at(i, j); }

  bool is_symmetric(double tol = kSymmetryTolerance) const {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (std::abs(weights.at(i, j) - weights.at(j, i)) > tol) return false;
    return true;
  }
};

/// Pairwise measured distances d_ij. Pairs never measured are marked unknown
/// and produce no edge.
class DistanceTable {
 public:
  explicit DistanceTable(Tensor d) : DistanceTable(d, std::vector<bool>(d.size(), true)) {}

  DistanceTable(Tensor d, std::vector<bool> known) : d_(std::move(d)), known_(std::move(known)) {
    if (d_.rank() != 2 || d_.dim(0) != d_.dim(1)) throw DimensionError("distance table must be square");
    if (known_.size() != d_.size()) throw DimensionError("distance mask size mismatch");
    for (std::size_t i = 0; i < n(); ++i) {
      if (d_.at(i, i) != 0.0) throw InputError("distance table diagonal must be zero");
    }
    for (double v : d_.data()) {
      if (v < 0.0) throw InputError("distances must be nonnegative");
    }
  }

  std::size_t n() const { return d_.dim(0); }
  double operator()(std::size_t i, std::size_t j) const { return d_.at(i, j); }
  bool known(std::size_t i, std::size_t j) const { return known_[i * n() + j]; }
  const Tensor& values() const { return d_; }

  bool is_symmetric() const {
    for (std::size_t i = 0; i < n(); ++i)
      for (std::size_t j = i + 1; j < n(); ++j)
        if (known(i, j) != known(j, i) || (known(i, j) && d_.at(i, j) != d_.at(j, i))) return false;
    return true;
  }

 private:
  Tensor d_;
  std::vector<bool> known_;
};

/// Per-node POI category densities, one row per node.
class PoiProfile {
 public:
  explicit PoiProfile(Tensor profiles) : p_(std::move(profiles)) {
    if (p_.rank() != 2) throw DimensionError("POI profile must be nodes x categories");
    for (double v : p_.data()) {
      if (v < 0.0) throw InputError("POI densities must be nonnegative");
    }
    for (std::size_t i = 0; i < p_.dim(0); ++i) {
      bool any = false;
      for (std::size_t c = 0; c < p_.dim(1); ++c) any = any || p_.at(i, c) > 0.0;
      if (!any) throw InputError("POI profile of node " + std::to_string(i) + " is all zero");
    }
  }

  std::size_t n() const { return p_.dim(0); }
  std::size_t categories() const { return p_.dim(1); }
  const Tensor& values() const { return p_; }

 private:
  Tensor p_;
};

/// Node embeddings for adaptive graphs. Single-embedding variants read only
/// `source`. The attention variant also needs the two projections.
struct EmbeddingPair {
  Tensor source;  // N x d
  Tensor target;  // N x d, equal to source for single-embedding variants
  double alpha = 3.0;
  std::optional<Tensor> w1;  // (F + d) x k
  std::optional<Tensor> w2;  // (F + d) x k
};

/// Edge-retention probabilities for Gumbel sampling, clamped away from 0 and 1.
class ProbabilityGraph {
 public:
  static constexpr double kMargin = 1e-6;

  ProbabilityGraph(Tensor theta, double temperature) : theta_(std::move(theta)), temperature_(temperature) {
    if (theta_.rank() != 2 || theta_.dim(0) != theta_.dim(1)) throw DimensionError("probability graph must be square");
    if (!(temperature_ > 0.0)) throw ContractError("Gumbel temperature must be positive");
    for (double& v : theta_.data()) {
      if (v < 0.0 || v > 1.0) throw InputError("edge probabilities must lie in [0,1]");
      v = std::clamp(v, kMargin, 1.0 - kMargin);
    }
  }

  std::size_t n() const { return theta_.dim(0); }
  const Tensor& theta() const { return theta_; }
  double temperature() const { return temperature_; }

 private:
  Tensor theta_;
  double temperature_;
};

// ---------------------------------------------------------------------------
// Pre-defined graphs

/// Thresholded Gaussian kernel exp(-d^2 / sigma2), zero below `eps` and on the diagonal.
inline AdjMatrix build_distance_graph(const DistanceTable& dt, double sigma2, double eps) {
  if (!(sigma2 > 0.0)) throw ContractError("build_distance_graph: sigma2 must be positive");
  if (!(eps >= 0.0 && eps <= 1.0)) throw ContractError("build_distance_graph: eps must lie in [0,1]");
  const std::size_t n = dt.n();
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || !dt.known(i, j)) continue;
      const double v = std::exp(-dt(i, j) * dt(i, j) / sigma2);
      if (v >= eps) w.at(i, j) = v;
    }
  return AdjMatrix::make(std::move(w), GraphKind::distance, !dt.is_symmetric());
}

struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
};

/// Binary road-connectivity graph. Self-loops are dropped.
inline AdjMatrix build_connectivity_graph(std::span<const Edge> edges, std::size_t n, bool directed) {
  if (n == 0) throw InputError("build_connectivity_graph: node count must be positive");
  Tensor w({n, n});
  for (const auto& e : edges) {
    if (e.from >= n || e.to >= n) {
      throw InputError("edge (" + std::to_string(e.from) + "," + std::to_string(e.to) + ") out of range for " +
                       std::to_string(n) + " nodes");
    }
    if (e.from == e.to) continue;
    w.at(e.from, e.to) = 1.0;
    if (!directed) w.at(e.to, e.from) = 1.0;
  }
  return AdjMatrix::make(std::move(w), GraphKind::connectivity, directed);
}

/// Dynamic time warping with |a_i - b_j| cost. `band` restricts alignments
/// to |i - j| <= band and must cover the length difference.
inline double dtw_distance(std::span<const double> a, std::span<const double> b,
                           std::optional<std::size_t> band = std::nullopt) {
  if (a.empty() || b.empty()) throw InputError("dtw_distance: series must be nonempty");
  const std::size_t n = a.size(), m = b.size();
  const std::size_t diff = n > m ? n - m : m - n;
  if (band && *band < diff) {
    throw InputError("dtw_distance: band " + std::to_string(*band) + " narrower than length difference " +
                     std::to_string(diff));
  }
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    std::fill(cur.begin(), cur.end(), inf);
    std::size_t lo = 1, hi = m;
    if (band) {
      lo = i > *band ? std::max<std::size_t>(1, i - *band) : 1;
      hi = std::min(m, i + *band);
    }
    for (std::size_t j = lo; j <= hi; ++j) {
      const double cost = std::abs(a[i - 1] - b[j - 1]);
      cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

/// Binary similarity graph: edge when the DTW distance between two node
/// series is at most `eps`.
inline AdjMatrix build_semantic_graph(const TrafficTensor& x, std::size_t channel, double eps,
                                      std::optional<std::size_t> band = std::nullopt) {
  if (x.steps() < 2) throw InputError("build_semantic_graph: need at least 2 time steps");
  if (!(eps >= 0.0)) throw ContractError("build_semantic_graph: eps must be nonnegative");
  const std::size_t n = x.nodes();
  std::vector<std::vector<double>> series;
  for (std::size_t i = 0; i < n; ++i) series.push_back(x.series(i, channel));
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (dtw_distance(series[i], series[j], band) <= eps) w.at(i, j) = w.at(j, i) = 1.0;
    }
  return AdjMatrix::make(std::move(w), GraphKind::semantic, false);
}

/// Cosine similarity of POI profiles.
inline AdjMatrix build_functionality_graph(const PoiProfile& profiles) {
  const std::size_t n = profiles.n(), c = profiles.categories();
  const Tensor& p = profiles.values();
  std::vector<double> norm(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) norm[i] += p.at(i, k) * p.at(i, k);
    norm[i] = std::sqrt(norm[i]);
    if (norm[i] == 0.0) throw InputError("zero-norm POI profile at node " + std::to_string(i));
  }
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    w.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += p.at(i, k) * p.at(j, k);
      w.at(i, j) = w.at(j, i) = std::clamp(dot / (norm[i] * norm[j]), 0.0, 1.0);
    }
  }
  return AdjMatrix::make(std::move(w), GraphKind::functionality, false);
}

inline constexpr double kDistributionTolerance = 1e-9;

/// Jensen-Shannon divergence in bits, bounded in [0, 1].
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw InputError("js_divergence: distributions differ in length");
  auto check = [](std::span<const double> d) {
    double s = 0.0;
    for (double v : d) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("js_divergence: negative or non-finite probability");
      s += v;
    }
    if (std::abs(s - 1.0) > kDistributionTolerance) throw InputError("js_divergence: probabilities do not sum to 1");
  };
  check(p);
  check(q);
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = std::min(p[i], q[i]), b = std::max(p[i], q[i]);
    const double m = 0.5 * (a + b);
    if (a > 0.0) js += 0.5 * a * std::log2(a / m);
    if (b > 0.0) js += 0.5 * b * std::log2(b / m);
  }
  return std::clamp(js, 0.0, 1.0);
}

inline constexpr std::size_t kDefaultHistogramBins = 32;
inline constexpr double kHistogramSmoothing = 1e-6;

/// 1 - JSD between per-node value histograms over the channel's global range.
inline AdjMatrix build_distribution_graph(const TrafficTensor& x, std::size_t channel,
                                          std::size_t bins = kDefaultHistogramBins) {
  if (x.steps() < 2) throw InputError("build_distribution_graph: need at least 2 time steps");
  if (bins < 2) throw ContractError("build_distribution_graph: need at least 2 bins");
  if (channel >= x.features()) throw DimensionError("build_distribution_graph: channel out of range");
  const std::size_t n = x.nodes(), steps = x.steps();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      lo = std::min(lo, x.at(t, i, channel));
      hi = std::max(hi, x.at(t, i, channel));
    }
  if (!(hi > lo)) {
    throw InputError("build_distribution_graph: channel " + std::to_string(channel) +
                     " is constant; histogram range is degenerate");
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<std::vector<double>> hist(n, std::vector<double>(bins, kHistogramSmoothing));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < steps; ++t) {
      auto b = static_cast<std::size_t>((x.at(t, i, channel) - lo) / width);
      hist[i][std::min(b, bins - 1)] += 1.0;
    }
    double total = 0.0;
    for (double v : hist[i]) total += v;
    for (double& v : hist[i]) v /= total;
  }
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    w.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) w.at(i, j) = w.at(j, i) = 1.0 - js_divergence(hist[i], hist[j]);
  }
  return AdjMatrix::make(std::move(w), GraphKind::distribution, false);
}

// ---------------------------------------------------------------------------
// Adaptive graphs

enum class AdaptiveVariant { direct, undirected, directed, unidirected, attention };

inline GraphKind kind_of(AdaptiveVariant v) {
  switch (v) {
    case AdaptiveVariant::direct: return GraphKind::adaptive_direct;
    case AdaptiveVariant::undirected: return GraphKind::adaptive_undirected;
    case AdaptiveVariant::directed: return GraphKind::adaptive_directed;
    case AdaptiveVariant::unidirected: return GraphKind::adaptive_unidirected;
    case AdaptiveVariant::attention: return GraphKind::adaptive_attention;
  }
  return GraphKind::adaptive_direct;
}

inline AdaptiveVariant adaptive_variant_of(GraphKind k) {
  switch (k) {
    case GraphKind::adaptive_direct: return AdaptiveVariant::direct;
    case GraphKind::adaptive_undirected: return AdaptiveVariant::undirected;
    case GraphKind::adaptive_directed: return AdaptiveVariant::directed;
    case GraphKind::adaptive_unidirected: return AdaptiveVariant::unidirected;
    case GraphKind::adaptive_attention: return AdaptiveVariant::attention;
    default: throw InputError("graph kind '" + std::string(to_string(k)) + "' is not adaptive");
  }
}

inline bool is_directed(AdaptiveVariant v) { return v != AdaptiveVariant::undirected; }

/// Tape-resident adaptive adjacency. `target` is ignored by single-embedding
/// variants; `features`, `w1`, `w2` are required by the attention variant.
struct AdaptiveInputs {
  Var source;
  Var target;
  double alpha = 3.0;
  std::optional<Var> features;
  std::optional<Var> w1;
  std::optional<Var> w2;
};

inline Var adaptive_graph(AdaptiveVariant variant, const AdaptiveInputs& in) {
  switch (variant) {
    case AdaptiveVariant::direct:
      return relu(in.source);
    case AdaptiveVariant::undirected:
      return relu(stg::tanh(scale(matmul(in.source, transpose(in.source)), in.alpha)));
    case AdaptiveVariant::directed:
      return relu(stg::tanh(scale(matmul(in.source, transpose(in.target)), in.alpha)));
    case AdaptiveVariant::unidirected: {
      Var m = sub(matmul(in.source, transpose(in.target)), matmul(in.target, transpose(in.source)));
      return relu(stg::tanh(scale(m, in.alpha)));
    }
    case AdaptiveVariant::attention: {
      if (!in.features || !in.w1 || !in.w2) {
        throw ContractError("adaptive_graph: attention variant needs node features and both projections");
      }
      const double d = static_cast<double>(in.source.dim(1));
      Var z = concat({*in.features, in.source}, 1);
      Var scores = matmul(matmul(z, *in.w1), transpose(matmul(z, *in.w2)));
      return softmax(scale(scores, 1.0 / std::sqrt(d)), 1);
    }
  }
  throw ContractError("adaptive_graph: unknown variant");
}

/// Value-level adaptive adjacency from fixed embeddings.
inline AdjMatrix adaptive_graph(AdaptiveVariant variant, const EmbeddingPair& emb,
                                const std::optional<Tensor>& features = std::nullopt) {
  Tape tape;
  AdaptiveInputs in{tape.constant(emb.source), tape.constant(emb.target), emb.alpha, std::nullopt, std::nullopt,
                    std::nullopt};
  if (variant == AdaptiveVariant::attention) {
    if (!features || !emb.w1 || !emb.w2) {
      throw ContractError("adaptive_graph: attention variant needs node features and both projections");
    }
    in.features = tape.constant(*features);
    in.w1 = tape.constant(*emb.w1);
    in.w2 = tape.constant(*emb.w2);
  }
  Var a = adaptive_graph(variant, in);
  return AdjMatrix::make(a.value(), kind_of(variant), is_directed(variant));
}

// ---------------------------------------------------------------------------
// Sampled graphs

inline constexpr double kDefaultTemperature = 0.5;

/// Difference of two independent standard Gumbel draws (a standard logistic variate).
inline double gumbel_difference(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
  auto gumbel = [&] { return -std::log(-std::log(u(rng))); };
  const double g1 = gumbel();
  const double g2 = gumbel();
  return g1 - g2;
}

inline Tensor gumbel_noise(std::size_t n, std::mt19937_64& rng) {
  Tensor g({n, n});
  for (auto& v : g.data()) v = gumbel_difference(rng);
  return g;
}

/// sigma((logits + noise) / s) on the tape; logits are log(theta / (1 - theta)).
inline Var gumbel_relaxed_graph(const Var& logits, const Tensor& noise, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("Gumbel temperature must be positive");
  return sigmoid(scale(add_const(logits, noise), 1.0 / temperature));
}

inline Tensor logit(const Tensor& theta) {
  Tensor out(theta.shape());
  for (std::size_t i = 0; i < theta.size(); ++i) out[i] = std::log(theta[i] / (1.0 - theta[i]));
  return out;
}

inline AdjMatrix sample_graph_gumbel(const ProbabilityGraph& pg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor lg = logit(pg.theta());
  Tensor w(lg.shape());
  const double hi = std::nextafter(1.0, 0.0), lo = std::numeric_limits<double>::min();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double z = (lg[i] + gumbel_difference(rng)) / pg.temperature();
    w[i] = std::clamp(detail::stable_sigmoid(z), lo, hi);
  }
  return AdjMatrix::make(std::move(w), GraphKind::sampled, true);
}

/// lambda * ||A - prior||_F^2, keeping a learned graph near a prior one.
inline Var graph_deviation_penalty(const Var& adjacency, const Tensor& prior, double lambda) {
  if (adjacency.shape() != prior.shape()) {
    throw DimensionError("graph_deviation_penalty: prior shape " + shape_str(prior.shape()) + " differs from " +
                         shape_str(adjacency.shape()));
  }
  return scale(sum(square(sub(adjacency, adjacency.tape()->constant(prior)))), lambda);
}

}  // namespace stg::graph
