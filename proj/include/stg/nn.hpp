#pragma once

// Parameter ownership and reusable layers shared by the forecasting models.

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stg/autodiff.hpp"
#include "stg/graph/construct.hpp"
#include "stg/graph/ops.hpp"

namespace stg::nn {

/// Owns named parameters at stable addresses, initialized from one seeded stream.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    params_.push_back(Parameter{name, std::move(init), {}});
    index_.emplace(name, &params_.back());
    return params_.back();
  }

  /// Uniform in +-1/sqrt(fan_in).
  Parameter& weight(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = u(rng_);
    return add(name, std::move(t));
  }

  Parameter& bias(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return *it->second;
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::mt19937_64 rng_;
  std::deque<Parameter> params_;
  std::map<std::string, Parameter*> index_;
};

/// y = x W + b over the last axis.
struct Linear {
  Parameter* w = nullptr;
  Parameter* b = nullptr;

  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, bool bias = true)
      : w(&ps.weight(name + ".w", {in, out}, in)), b(bias ? &ps.bias(name + ".b", {out}) : nullptr) {}

  Var operator()(Tape& t, const Var& x) const {
    Var y = matmul(x, t.watch(*w));
    return b ? add(y, t.watch(*b)) : y;
  }
};

// ---------------------------------------------------------------------------
// Graph convolution modules

enum class ConvKind { gcn, cheb, diffusion, multi_hop, gat, masked_attention };

inline ConvKind parse_conv_kind(std::string_view s) {
  if (s == "gcn") return ConvKind::gcn;
  if (s == "cheb") return ConvKind::cheb;
  if (s == "diffusion") return ConvKind::diffusion;
  if (s == "multi-hop") return ConvKind::multi_hop;
  if (s == "gat") return ConvKind::gat;
  if (s == "masked-attention") return ConvKind::masked_attention;
  throw ConfigError("unknown graph convolution '" + std::string(s) +
                    "' (gcn, cheb, diffusion, multi-hop, gat, masked-attention)");
}

inline std::string_view to_string(ConvKind k) {
  switch (k) {
    case ConvKind::gcn: return "gcn";
    case ConvKind::cheb: return "cheb";
    case ConvKind::diffusion: return "diffusion";
    case ConvKind::multi_hop: return "multi-hop";
    case ConvKind::gat: return "gat";
    case ConvKind::masked_attention: return "masked-attention";
  }
  return "unknown";
}

struct ConvSpec {
  ConvKind kind = ConvKind::gcn;
  std::size_t order = 2;  // K for cheb, diffusion and multi-hop
  std::size_t heads = 1;  // gat
  double beta = 0.05;     // multi-hop residual retention
  graph::HopAggregation aggregation = graph::HopAggregation::linear;
};

/// One graph convolution mapping width `in` to `out`, with a bias. Operators
/// whose native form keeps the width (multi-hop) get an input projection.
class GraphConv {
 public:
  GraphConv() = default;
  GraphConv(ParameterStore& ps, const std::string& name, const ConvSpec& spec, std::size_t in, std::size_t out,
            std::size_t nodes)
      : spec_(spec) {
    if (spec.order < 1) throw ConfigError(name + ": graph convolution order must be at least 1");
    switch (spec.kind) {
      case ConvKind::gcn:
        w_.push_back(&ps.weight(name + ".w", {in, out}, in));
        break;
      case ConvKind::cheb:
        for (std::size_t k = 0; k < spec.order; ++k)
          w_.push_back(&ps.weight(name + ".theta" + std::to_string(k), {in, out}, in * spec.order));
        break;
      case ConvKind::diffusion:
        w_.push_back(&ps.weight(name + ".fwd", {spec.order, in, out}, 2 * in * spec.order));
        w_.push_back(&ps.weight(name + ".bwd", {spec.order, in, out}, 2 * in * spec.order));
        break;
      case ConvKind::multi_hop: {
        if (spec.beta < 0.0 || spec.beta > 1.0) throw ConfigError(name + ": multi-hop beta must lie in [0,1]");
        w_.push_back(&ps.weight(name + ".proj", {in, out}, in));
        for (std::size_t k = 0; k + 1 < spec.order; ++k)
          hop_.push_back(&ps.weight(name + ".hop" + std::to_string(k), {out, out}, out));
        if (spec.aggregation == graph::HopAggregation::linear)
          extra_ = &ps.add(name + ".alpha", Tensor({spec.order}, 1.0 / static_cast<double>(spec.order)));
        if (spec.aggregation == graph::HopAggregation::attention)
          extra_ = &ps.weight(name + ".query", {out, 1}, out);
        break;
      }
      case ConvKind::gat: {
        if (spec.heads < 1 || out % spec.heads != 0) {
          throw ConfigError(name + ": output width " + std::to_string(out) + " is not divisible by " +
                            std::to_string(spec.heads) + " attention heads");
        }
        const std::size_t fh = out / spec.heads;
        for (std::size_t h = 0; h < spec.heads; ++h) {
          w_.push_back(&ps.weight(name + ".head" + std::to_string(h) + ".w", {in, fh}, in));
          hop_.push_back(&ps.weight(name + ".head" + std::to_string(h) + ".a", {2 * fh, 1}, 2 * fh));
        }
        break;
      }
      case ConvKind::masked_attention:
        w_.push_back(&ps.weight(name + ".w", {in, out}, in));
        extra_ = &ps.add(name + ".mask", Tensor::ones({nodes, nodes}));
        break;
    }
    b_ = &ps.bias(name + ".b", {out});
  }

  const ConvSpec& spec() const { return spec_; }

  Var operator()(Tape& t, graph::GraphContext& g, const Var& x) const {
    Var y;
    switch (spec_.kind) {
      case ConvKind::gcn:
        return graph::gcn_layer(g, x, t.watch(*w_[0]), t.watch(*b_));
      case ConvKind::cheb: {
        std::vector<Var> th;
        for (auto* p : w_) th.push_back(t.watch(*p));
        y = graph::cheb_conv(g, x, th);
        break;
      }
      case ConvKind::diffusion:
        y = graph::diffusion_conv(g, x, {t.watch(*w_[0]), t.watch(*w_[1])});
        break;
      case ConvKind::multi_hop: {
        graph::MultiHopParams p;
        for (auto* h : hop_) p.weights.push_back(t.watch(*h));
        if (spec_.aggregation == graph::HopAggregation::linear) p.alphas = t.watch(*extra_);
        if (spec_.aggregation == graph::HopAggregation::attention) p.query = t.watch(*extra_);
        y = graph::multi_hop_conv(g, matmul(x, t.watch(*w_[0])), p, spec_.beta, spec_.aggregation);
        break;
      }
      case ConvKind::gat: {
        std::vector<graph::GatHead> heads;
        for (std::size_t h = 0; h < w_.size(); ++h) heads.push_back({t.watch(*w_[h]), t.watch(*hop_[h])});
        y = graph::gat_layer(g, x, heads, true);
        break;
      }
      case ConvKind::masked_attention:
        y = graph::masked_attention_conv(g, t.watch(*extra_), x, t.watch(*w_[0]));
        break;
    }
    return add(y, t.watch(*b_));
  }

 private:
  ConvSpec spec_;
  std::vector<Parameter*> w_;
  std::vector<Parameter*> hop_;
  Parameter* extra_ = nullptr;
  Parameter* b_ = nullptr;
};

// ---------------------------------------------------------------------------
// Graph sources

enum class SourceKind { fixed, adaptive, sampled };

inline SourceKind parse_source_kind(std::string_view s) {
  if (s == "fixed") return SourceKind::fixed;
  if (s == "adaptive") return SourceKind::adaptive;
  if (s == "sampled") return SourceKind::sampled;
  throw ConfigError("unknown graph source '" + std::string(s) + "' (fixed, adaptive, sampled)");
}

inline std::string_view to_string(SourceKind k) {
  switch (k) {
    case SourceKind::fixed: return "fixed";
    case SourceKind::adaptive: return "adaptive";
    case SourceKind::sampled: return "sampled";
  }
  return "fixed";
}

struct GraphSourceSpec {
  SourceKind kind = SourceKind::fixed;
  graph::AdaptiveVariant variant = graph::AdaptiveVariant::undirected;
  std::size_t embed_dim = 10;
  double alpha = 3.0;
  double temperature = graph::kDefaultTemperature;
  double lambda = 0.0;                   // weight of the deviation penalty against `graph`
  std::optional<graph::AdjMatrix> graph;  // the fixed graph, or the prior for learned sources
};

/// Produces the adjacency for each forward pass. Learned sources are
/// rebuilt on every tape so their parameters train with the model.
class GraphSource {
 public:
  GraphSource() = default;
  GraphSource(ParameterStore& ps, const GraphSourceSpec& spec, std::size_t nodes, std::uint64_t noise_seed)
      : spec_(spec), nodes_(nodes), noise_(noise_seed) {
    if (spec.graph && spec.graph->n != nodes) {
      throw ConfigError("graph has " + std::to_string(spec.graph->n) + " nodes, data has " + std::to_string(nodes));
    }
    switch (spec.kind) {
      case SourceKind::fixed:
        if (!spec.graph) throw ConfigError("fixed graph source needs a graph");
        break;
      case SourceKind::adaptive:
        if (spec.variant == graph::AdaptiveVariant::attention) {
          throw ConfigError("adaptive-attention graphs depend on per-sample features and cannot drive a model");
        }
        if (spec.variant == graph::AdaptiveVariant::direct) {
          e1_ = &ps.weight("graph.direct", {nodes, nodes}, nodes);
        } else {
          e1_ = &ps.weight("graph.source", {nodes, spec.embed_dim}, spec.embed_dim);
          if (spec.variant != graph::AdaptiveVariant::undirected)
            e2_ = &ps.weight("graph.target", {nodes, spec.embed_dim}, spec.embed_dim);
        }
        break;
      case SourceKind::sampled: {
        if (!(spec.temperature > 0.0)) throw ConfigError("Gumbel temperature must be positive");
        Tensor theta({nodes, nodes}, 0.5);
        if (spec.graph) {
          for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = std::min(1.0, spec.graph->weights[i]);
        }
        e1_ = &ps.add("graph.logits", graph::logit(graph::ProbabilityGraph(theta, spec.temperature).theta()));
        break;
      }
    }
    if (spec.lambda < 0.0) throw ConfigError("graph regularization weight must be nonnegative");
    if (spec.lambda > 0.0 && !spec.graph) throw ConfigError("graph regularization needs a prior graph");
  }

  const GraphSourceSpec& spec() const { return spec_; }

  bool directed() const {
    switch (spec_.kind) {
      case SourceKind::fixed: return spec_.graph->directed;
      case SourceKind::adaptive: return graph::is_directed(spec_.variant);
      case SourceKind::sampled: return true;
    }
    return true;
  }

  /// Adjacency on `t`. Sampled sources draw fresh Gumbel noise when training
  /// and use the noise-free relaxation otherwise.
  Var adjacency(Tape& t, bool training) {
    switch (spec_.kind) {
      case SourceKind::fixed:
        return t.constant(spec_.graph->weights);
      case SourceKind::adaptive: {
        Var src = t.watch(*e1_);
        Var dst = e2_ ? t.watch(*e2_) : src;
        return graph::adaptive_graph(spec_.variant, {src, dst, spec_.alpha, {}, {}, {}});
      }
      case SourceKind::sampled: {
        Tensor noise = training ? graph::gumbel_noise(nodes_, noise_) : Tensor::zeros({nodes_, nodes_});
        return graph::gumbel_relaxed_graph(t.watch(*e1_), noise, spec_.temperature);
      }
    }
    throw ContractError("unknown graph source");
  }

  /// lambda * ||G - prior||_F^2, with G the learned adjacency (adaptive) or
  /// the retention probabilities sigma(logits) (sampled). Empty when unused.
  std::optional<Var> penalty(Tape& t) {
    if (spec_.kind == SourceKind::fixed || spec_.lambda == 0.0) return std::nullopt;
    Var g = spec_.kind == SourceKind::sampled ? sigmoid(t.watch(*e1_)) : adjacency(t, false);
    return graph::graph_deviation_penalty(g, spec_.graph->weights, spec_.lambda);
  }

  /// Value of the graph the model currently uses at evaluation.
  graph::AdjMatrix current() {
    Tape t;
    Tensor w = adjacency(t, false).value();
    const auto kind = spec_.kind == SourceKind::fixed      ? spec_.graph->kind
                      : spec_.kind == SourceKind::adaptive ? graph::kind_of(spec_.variant)
                                                           : graph::GraphKind::sampled;
    return graph::AdjMatrix::make(std::move(w), kind, directed());
  }

 private:
  GraphSourceSpec spec_;
  std::size_t nodes_ = 0;
  std::mt19937_64 noise_;
  Parameter* e1_ = nullptr;
  Parameter* e2_ = nullptr;
};

}  // namespace stg::nn
