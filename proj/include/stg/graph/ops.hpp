#pragma once

// Graph convolution operators on the autodiff tape. Node features are laid
// out with nodes on the second-to-last axis: [..., N, F].

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "stg/autodiff.hpp"
#include "stg/graph/construct.hpp"

namespace stg::graph {

/// Normalized Laplacian L = I - D^{-1/2} A D^{-1/2} and its rescaling
/// 2L/lambda_max - I with lambda_max = 2.
struct SpectralBasis {
  Tensor laplacian;
  double lambda_max = 2.0;
  Tensor scaled;
};

namespace detail {

inline Tensor symmetric_normalized(const Tensor& a) {
  const std::size_t n = a.dim(0);
  std::vector<double> r(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += a.at(i, j);
    r[i] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
  }
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = (r[i] * r[j]) * a.at(i, j);
  return out;
}

}  // namespace detail

inline SpectralBasis normalized_laplacian(const AdjMatrix& a) {
  if (a.directed) throw ContractError("normalized_laplacian: adjacency must be undirected");
  const Tensor s = detail::symmetric_normalized(a.weights);
  SpectralBasis b{Tensor::identity(a.n), 2.0, Tensor({a.n, a.n})};
  for (std::size_t i = 0; i < s.size(); ++i) {
    b.laplacian[i] -= s[i];
    b.scaled[i] = 2.0 * b.laplacian[i] / b.lambda_max;
  }
  for (std::size_t i = 0; i < a.n; ++i) b.scaled.at(i, i) -= 1.0;
  return b;
}

/// Adjacency on a tape plus lazily built normalizations, shared by every
/// operator applied within one forward pass.
class GraphContext {
 public:
  GraphContext(Var adjacency, bool directed) : adj_(std::move(adjacency)), directed_(directed) {
    if (adj_.rank() != 2 || adj_.dim(0) != adj_.dim(1)) {
      throw DimensionError("graph adjacency must be square, got " + shape_str(adj_.shape()));
    }
  }
  GraphContext(Tape& tape, const AdjMatrix& a) : GraphContext(tape.constant(a.weights), a.directed) {}

  std::size_t nodes() const { return adj_.dim(0); }
  bool directed() const { return directed_; }
  const Var& adjacency() const { return adj_; }
  Tape& tape() const { return *adj_.tape(); }

  /// D^{-1/2} A D^{-1/2}
  const Var& sym_normalized() {
    if (!sym_) {
      Var r = safe_rsqrt(reduce_sum(adj_, 1));
      sym_ = mul(mul(adj_, column(r)), r);
    }
    return *sym_;
  }

  /// -D^{-1/2} A D^{-1/2}, the scaled Laplacian for lambda_max = 2.
  const Var& scaled_laplacian() {
    if (directed_) throw ContractError("scaled_laplacian: spectral filters need an undirected graph");
    if (!scaled_) scaled_ = neg(sym_normalized());
    return *scaled_;
  }

  /// D_O^{-1} A
  const Var& forward_transition() {
    if (!fwd_) fwd_ = row_normalize(adj_);
    return *fwd_;
  }

  /// D_I^{-1} A^T
  const Var& backward_transition() {
    if (!bwd_) bwd_ = row_normalize(transpose(adj_));
    return *bwd_;
  }

  /// A + I
  const Var& with_self_loops() {
    if (!loops_) loops_ = add_const(adj_, Tensor::identity(nodes()));
    return *loops_;
  }

  /// D^{-1}(A + I)
  const Var& self_loop_transition() {
    if (!loop_walk_) loop_walk_ = row_normalize(with_self_loops());
    return *loop_walk_;
  }

  /// 1 where A + I is nonzero.
  const Tensor& neighborhood() {
    if (!mask_) {
      Tensor m({nodes(), nodes()});
      const Tensor& a = adj_.value();
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i] != 0.0 ? 1.0 : 0.0;
      for (std::size_t i = 0; i < nodes(); ++i) m.at(i, i) = 1.0;
      mask_ = std::move(m);
    }
    return *mask_;
  }

 private:
  Var column(const Var& v) const { return broadcast(reshape(v, {nodes(), 1}), {nodes(), nodes()}); }
  Var row_normalize(const Var& m) const { return mul(m, column(safe_reciprocal(reduce_sum(m, 1)))); }

  Var adj_;
  bool directed_;
  std::optional<Var> sym_, scaled_, fwd_, bwd_, loops_, loop_walk_;
  std::optional<Tensor> mask_;
};

namespace detail {

inline void require_nodes(const GraphContext& g, const Var& x, std::string_view op) {
  if (x.rank() < 2 || x.dim(x.rank() - 2) != g.nodes()) {
    throw DimensionError(std::string(op) + ": features " + shape_str(x.shape()) + " do not have " +
                         std::to_string(g.nodes()) + " nodes on axis -2");
  }
}

inline Var scalar_times(const Var& s, const Var& x) { return mul(broadcast(s, x.shape()), x); }

/// Elementwise max(a, b) = b + relu(a - b).
inline Var maximum(const Var& a, const Var& b) { return add(b, relu(sub(a, b))); }

template <class L>
Var cheb_sum(const Var& x, const std::vector<Var>& theta, L&& laplacian) {
  if (theta.empty()) throw ContractError("cheb_conv: order K must be at least 1");
  Var out = matmul(x, theta[0]);
  if (theta.size() == 1) return out;
  const Var l = laplacian();
  Var t_prev = x;
  Var t_cur = matmul(l, x);
  out = add(out, matmul(t_cur, theta[1]));
  for (std::size_t k = 2; k < theta.size(); ++k) {
    Var t_next = sub(scale(matmul(l, t_cur), 2.0), t_prev);
    out = add(out, matmul(t_next, theta[k]));
    t_prev = t_cur;
    t_cur = t_next;
  }
  return out;
}

}  // namespace detail

/// sum_{k<K} T_k(L~) X Theta_k with the Chebyshev recurrence on X.
inline Var cheb_conv(GraphContext& g, const Var& x, const std::vector<Var>& theta) {
  detail::require_nodes(g, x, "cheb_conv");
  return detail::cheb_sum(x, theta, [&] { return g.scaled_laplacian(); });
}

inline Var cheb_conv(const SpectralBasis& basis, const Var& x, const std::vector<Var>& theta) {
  const std::size_t n = basis.scaled.dim(0);
  if (x.rank() < 2 || x.dim(x.rank() - 2) != n) {
    throw DimensionError("cheb_conv: features " + shape_str(x.shape()) + " do not have " + std::to_string(n) +
                         " nodes on axis -2");
  }
  return detail::cheb_sum(x, theta, [&] { return x.tape()->constant(basis.scaled); });
}

/// (I + D^{-1/2} A D^{-1/2}) X W + b
inline Var gcn_layer(GraphContext& g, const Var& x, const Var& w, const Var& b) {
  detail::require_nodes(g, x, "gcn_layer");
  Var xw = matmul(x, w);
  return add(add(xw, matmul(g.sym_normalized(), xw)), b);
}

/// Diffusion coefficients: rank 1 [K] gives scalar weights per power, rank 3
/// [K, F_in, F_out] gives a weight matrix per power.
struct DiffusionParams {
  Var forward;
  Var backward;
};

/// sum_{k<K} theta_{k,1} (D_O^{-1}A)^k X + theta_{k,2} (D_I^{-1}A^T)^k X
inline Var diffusion_conv(GraphContext& g, const Var& x, const DiffusionParams& p) {
  detail::require_nodes(g, x, "diffusion_conv");
  if (p.forward.shape() != p.backward.shape() || (p.forward.rank() != 1 && p.forward.rank() != 3)) {
    throw DimensionError("diffusion_conv: coefficient shapes " + shape_str(p.forward.shape()) + " and " +
                         shape_str(p.backward.shape()) + " must agree and be [K] or [K,F_in,F_out]");
  }
  const bool matrix = p.forward.rank() == 3;
  const std::size_t k_max = p.forward.dim(0);
  if (matrix && p.forward.dim(1) != x.dim(x.rank() - 1)) {
    throw DimensionError("diffusion_conv: weight input width " + std::to_string(p.forward.dim(1)) +
                         " differs from feature width " + std::to_string(x.dim(x.rank() - 1)));
  }
  auto coef = [&](const Var& c, std::size_t k, const Var& h) {
    if (!matrix) return detail::scalar_times(slice(c, 0, k, k + 1), h);
    return matmul(h, reshape(slice(c, 0, k, k + 1), {c.dim(1), c.dim(2)}));
  };
  Var hf = x, hb = x;
  Var out = add(coef(p.forward, 0, x), coef(p.backward, 0, x));
  for (std::size_t k = 1; k < k_max; ++k) {
    hf = matmul(g.forward_transition(), hf);
    hb = matmul(g.backward_transition(), hb);
    out = add(out, add(coef(p.forward, k, hf), coef(p.backward, k, hb)));
  }
  return out;
}

enum class HopAggregation { linear, max, avg, attention };

inline HopAggregation parse_hop_aggregation(std::string_view s) {
  if (s == "linear") return HopAggregation::linear;
  if (s == "max") return HopAggregation::max;
  if (s == "avg") return HopAggregation::avg;
  if (s == "attention") return HopAggregation::attention;
  throw ConfigError("unknown hop aggregation '" + std::string(s) + "' (linear, max, avg, attention)");
}

inline std::string_view to_string(HopAggregation a) {
  switch (a) {
    case HopAggregation::linear: return "linear";
    case HopAggregation::max: return "max";
    case HopAggregation::avg: return "avg";
    case HopAggregation::attention: return "attention";
  }
  return "linear";
}

/// K hop outputs H^0..H^{K-1}: one weight per propagation step (K-1 of
/// them), linear weights alpha [K], and a scoring vector [F,1] for attention.
struct MultiHopParams {
  std::vector<Var> weights;
  std::optional<Var> alphas;
  std::optional<Var> query;
};

inline Var multi_hop_conv(GraphContext& g, const Var& x, const MultiHopParams& p, double beta,
                          HopAggregation agg = HopAggregation::linear) {
  detail::require_nodes(g, x, "multi_hop_conv");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("multi_hop_conv: beta must lie in [0,1]");
  const std::size_t k_total = p.weights.size() + 1;
  const std::size_t f = x.dim(x.rank() - 1);
  for (const auto& w : p.weights) {
    if (w.shape() != Shape{f, f}) {
      throw DimensionError("multi_hop_conv: hop weight " + shape_str(w.shape()) + " must be [" + std::to_string(f) +
                           "," + std::to_string(f) + "] to keep the residual width");
    }
  }
  std::vector<Var> hops{x};
  for (std::size_t k = 0; k + 1 < k_total; ++k) {
    const Var& walk = g.self_loop_transition();
    Var h = relu(matmul(walk, matmul(hops.back(), p.weights[k])));
    h = add(scale(x, beta), scale(matmul(walk, h), 1.0 - beta));
    hops.push_back(h);
  }
  switch (agg) {
    case HopAggregation::linear: {
      if (!p.alphas || p.alphas->shape() != Shape{k_total}) {
        throw DimensionError("multi_hop_conv: linear aggregation needs alphas of length " + std::to_string(k_total));
      }
      Var out = detail::scalar_times(slice(*p.alphas, 0, 0, 1), hops[0]);
      for (std::size_t k = 1; k < k_total; ++k)
        out = add(out, detail::scalar_times(slice(*p.alphas, 0, k, k + 1), hops[k]));
      return out;
    }
    case HopAggregation::max: {
      Var out = hops[0];
      for (std::size_t k = 1; k < k_total; ++k) out = detail::maximum(out, hops[k]);
      return out;
    }
    case HopAggregation::avg: {
      Var out = hops[0];
      for (std::size_t k = 1; k < k_total; ++k) out = add(out, hops[k]);
      return scale(out, 1.0 / static_cast<double>(k_total));
    }
    case HopAggregation::attention: {
      if (!p.query || p.query->shape() != Shape{f, 1}) {
        throw DimensionError("multi_hop_conv: attention aggregation needs a query of shape [" + std::to_string(f) +
                             ",1]");
      }
      std::vector<Var> scores;
      for (const auto& h : hops) scores.push_back(matmul(h, *p.query));
      Var w = softmax(concat(scores, x.rank() - 1), x.rank() - 1);
      Var out;
      for (std::size_t k = 0; k < k_total; ++k) {
        Var term = mul(broadcast(slice(w, x.rank() - 1, k, k + 1), hops[k].shape()), hops[k]);
        out = k == 0 ? term : add(out, term);
      }
      return out;
    }
  }
  throw ContractError("multi_hop_conv: unknown aggregation");
}

/// One attention head: projection W [F_in, F_h] and scoring vector a [2 F_h, 1].
struct GatHead {
  Var w;
  Var a;
};

/// Attention coefficients of one head over the self-looped neighborhood, [..., N, N].
inline Var gat_attention(GraphContext& g, const Var& z, const Var& a) {
  const std::size_t fh = z.dim(z.rank() - 1);
  if (a.shape() != Shape{2 * fh, 1}) {
    throw DimensionError("gat_layer: scoring vector " + shape_str(a.shape()) + " must be [" +
                         std::to_string(2 * fh) + ",1]");
  }
  const std::size_t n = g.nodes();
  Var src = matmul(z, slice(a, 0, 0, fh));       // [..., N, 1]
  Var dst = matmul(z, slice(a, 0, fh, 2 * fh));  // [..., N, 1]
  Shape full = z.shape();
  full.back() = n;
  Var e = add(broadcast(src, full), broadcast(transpose(dst), full));
  const Tensor& nb = g.neighborhood();
  Tensor mask(full);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = nb[i % (n * n)];
  return masked_softmax(leaky_relu(e, 0.2), mask, full.size() - 1);
}

/// Concatenation over heads of sigma(sum_j alpha_ij W h_j); identity instead
/// of sigma when `terminal`.
inline Var gat_layer(GraphContext& g, const Var& x, const std::vector<GatHead>& heads, bool terminal = false) {
  if (heads.empty()) throw ContractError("gat_layer: need at least one head");
  detail::require_nodes(g, x, "gat_layer");
  std::vector<Var> outs;
  for (const auto& h : heads) {
    Var z = matmul(x, h.w);
    Var y = matmul(gat_attention(g, z, h.a), z);
    outs.push_back(terminal ? y : sigmoid(y));
  }
  return outs.size() == 1 ? outs[0] : concat(outs, x.rank() - 1);
}

/// ((A + I) .* M) H W
inline Var masked_attention_conv(GraphContext& g, const Var& m, const Var& h, const Var& w) {
  detail::require_nodes(g, h, "masked_attention_conv");
  if (m.shape() != Shape{g.nodes(), g.nodes()}) {
    throw DimensionError("masked_attention_conv: attention matrix " + shape_str(m.shape()) + " must be " +
                         std::to_string(g.nodes()) + "x" + std::to_string(g.nodes()));
  }
  return matmul(mul(g.with_self_loops(), m), matmul(h, w));
}

}  // namespace stg::graph
