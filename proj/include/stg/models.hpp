#pragma once

// The three forecasting archetypes: a graph-convolutional GRU
// encoder-decoder, gated dilated temporal convolution blocks interleaved
// with graph convolution, and per-node temporal self-attention interleaved
// with graph convolution. Windows are [B, P, N, D]; forecasts [B, Q, N, D'].

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stg/nn.hpp"

namespace stg::models {

using nn::ConvSpec;
using nn::GraphConv;
using nn::GraphSourceSpec;
using nn::Linear;
using nn::ParameterStore;

enum class Archetype { rnn, cnn, attention };

inline Archetype parse_archetype(std::string_view s) {
  if (s == "rnn") return Archetype::rnn;
  if (s == "cnn") return Archetype::cnn;
  if (s == "attention") return Archetype::attention;
  throw ConfigError("unknown archetype '" + std::string(s) + "' (rnn, cnn, attention)");
}

inline std::string_view to_string(Archetype a) {
  switch (a) {
    case Archetype::rnn: return "rnn";
    case Archetype::cnn: return "cnn";
    case Archetype::attention: return "attention";
  }
  return "unknown";
}

struct ModelSpec {
  Archetype archetype = Archetype::rnn;
  std::size_t input_len = 12;  // P
  std::size_t horizon = 12;    // Q
  std::size_t nodes = 0;       // N
  std::size_t channels = 1;    // D
  std::size_t out_channels = 0;  // D'; 0 means D
  std::size_t hidden = 32;
  std::size_t layers = 1;  // stacked GCGRU layers (rnn) or attention blocks (attention)
  ConvSpec conv;
  GraphSourceSpec graph;
  std::size_t kernel = 2;  // cnn temporal kernel
  std::size_t blocks = 4;  // cnn blocks, dilation 2^b
  std::size_t heads = 4;   // attention heads
  bool positional_encoding = true;
  std::uint64_t seed = 0;

  std::size_t output_channels() const { return out_channels == 0 ? channels : out_channels; }
};

/// 1 + (kernel - 1) * sum of dilations 1, 2, ..., 2^(blocks-1).
inline std::size_t receptive_field(std::size_t kernel, std::size_t blocks) {
  return 1 + (kernel - 1) * ((std::size_t{1} << blocks) - 1);
}

/// Intermediate values exposed for inspection.
struct Trace {
  std::vector<Tensor> blocks;     // per-block outputs [B, P, N, C]
  std::vector<Tensor> attention;  // per-layer attention weights [B, N, H, P, P]
};

// ---------------------------------------------------------------------------
// GCGRU

struct GCGRUCell {
  std::size_t input = 0;
  std::size_t hidden = 0;
  GraphConv reset, update, candidate;

  GCGRUCell() = default;
  GCGRUCell(ParameterStore& ps, const std::string& name, const ConvSpec& conv, std::size_t in, std::size_t hid,
            std::size_t nodes)
      : input(in),
        hidden(hid),
        reset(ps, name + ".r", conv, in + hid, hid, nodes),
        update(ps, name + ".u", conv, in + hid, hid, nodes),
        candidate(ps, name + ".c", conv, in + hid, hid, nodes) {}
};

/// r = sigma(GC([X || H])), u = sigma(GC([X || H])), c = tanh(GC([X || r*H])),
/// H' = u*H + (1-u)*c. X is [..., N, in], H is [..., N, hidden].
inline Var gcgru_step(Tape& t, const GCGRUCell& cell, graph::GraphContext& g, const Var& x, const Var& h) {
  const std::size_t ax = x.rank() - 1;
  if (x.dim(ax) != cell.input || h.dim(h.rank() - 1) != cell.hidden || x.rank() != h.rank()) {
    throw DimensionError("gcgru_step: input " + shape_str(x.shape()) + " / state " + shape_str(h.shape()) +
                         " do not match cell widths " + std::to_string(cell.input) + "/" +
                         std::to_string(cell.hidden));
  }
  Var xh = concat({x, h}, ax);
  Var r = sigmoid(cell.reset(t, g, xh));
  Var u = sigmoid(cell.update(t, g, xh));
  Var c = stg::tanh(cell.candidate(t, g, concat({x, mul(r, h)}, ax)));
  return add(mul(u, h), mul(rsub_scalar(1.0, u), c));
}

// ---------------------------------------------------------------------------
// Model

namespace detail {

/// Fixed sinusoidal encoding [P, C].
inline Tensor positional_encoding(std::size_t len, std::size_t width) {
  Tensor pe({len, width});
  for (std::size_t p = 0; p < len; ++p)
    for (std::size_t i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      pe.at(p, i) = i % 2 == 0 ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
    }
  return pe;
}

/// x[t - shift] along axis 1, zero-filled on the left.
inline Var delay(Tape& t, const Var& x, std::size_t shift) {
  if (shift == 0) return x;
  const std::size_t len = x.dim(1);
  Shape pad = x.shape();
  pad[1] = std::min(shift, len);
  Var zeros = t.constant(Tensor::zeros(pad));
  if (shift >= len) return zeros;
  return concat({zeros, slice(x, 1, 0, len - shift)}, 1);
}

}  // namespace detail

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)), ps_(spec_.seed) {
    const auto& s = spec_;
    if (s.input_len < 1 || s.horizon < 1) throw ConfigError("P and Q must be at least 1");
    if (s.nodes < 1 || s.channels < 1) throw ConfigError("model needs at least one node and one channel");
    if (s.hidden < 1) throw ConfigError("hidden width must be at least 1");
    source_ = nn::GraphSource(ps_, s.graph, s.nodes, s.seed ^ 0x9e3779b97f4a7c15ULL);
    if (s.conv.kind == nn::ConvKind::cheb && source_.directed()) {
      throw ConfigError("cheb convolution needs an undirected graph source");
    }
    const std::size_t d_out = s.output_channels();
    switch (s.archetype) {
      case Archetype::rnn:
        if (s.layers < 1) throw ConfigError("rnn needs at least one layer");
        for (std::size_t l = 0; l < s.layers; ++l) {
          encoder_.emplace_back(ps_, "enc" + std::to_string(l), s.conv, l == 0 ? s.channels : s.hidden, s.hidden,
                                s.nodes);
        }
        for (std::size_t l = 0; l < s.layers; ++l) {
          decoder_.emplace_back(ps_, "dec" + std::to_string(l), s.conv, l == 0 ? d_out : s.hidden, s.hidden,
                                s.nodes);
        }
        out_ = Linear(ps_, "out", s.hidden, d_out);
        break;
      case Archetype::cnn: {
        if (s.kernel < 2) throw ConfigError("cnn kernel size must be at least 2");
        if (s.blocks < 1) throw ConfigError("cnn needs at least one block");
        const std::size_t rf = receptive_field(s.kernel, s.blocks);
        if (rf < s.input_len) {
          std::size_t need = s.blocks;
          while (receptive_field(s.kernel, need) < s.input_len) ++need;
          throw ConfigError("cnn receptive field " + std::to_string(rf) + " is shorter than P=" +
                            std::to_string(s.input_len) + "; need at least " + std::to_string(need) +
                            " blocks with kernel " + std::to_string(s.kernel));
        }
        in_ = Linear(ps_, "in", s.channels, s.hidden);
        for (std::size_t b = 0; b < s.blocks; ++b) {
          const std::string name = "block" + std::to_string(b);
          tcn_w_.push_back(&ps_.weight(name + ".tcn.w", {s.kernel, s.hidden, 2 * s.hidden}, s.kernel * s.hidden));
          tcn_b_.push_back(&ps_.bias(name + ".tcn.b", {2 * s.hidden}));
          gconv_.emplace_back(ps_, name + ".gc", s.conv, s.hidden, s.hidden, s.nodes);
        }
        head_ = Linear(ps_, "head", s.hidden, s.hidden);
        out_ = Linear(ps_, "out", s.hidden, s.horizon * d_out);
        break;
      }
      case Archetype::attention: {
        if (s.layers < 1) throw ConfigError("attention needs at least one layer");
        if (s.heads < 1 || s.hidden % s.heads != 0) {
          throw ConfigError("attention width " + std::to_string(s.hidden) + " is not divisible by " +
                            std::to_string(s.heads) + " heads");
        }
        in_ = Linear(ps_, "in", s.channels, s.hidden);
        for (std::size_t l = 0; l < s.layers; ++l) {
          const std::string name = "layer" + std::to_string(l);
          attn_.push_back({Linear(ps_, name + ".q", s.hidden, s.hidden), Linear(ps_, name + ".k", s.hidden, s.hidden),
                           Linear(ps_, name + ".v", s.hidden, s.hidden), Linear(ps_, name + ".o", s.hidden, s.hidden)});
          gconv_.emplace_back(ps_, name + ".gc", s.conv, s.hidden, s.hidden, s.nodes);
        }
        head_ = Linear(ps_, "head", s.hidden, s.hidden);
        out_ = Linear(ps_, "out", s.hidden, s.horizon * d_out);
        break;
      }
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter*> parameters() { return ps_.all(); }
  std::size_t parameter_count() const { return ps_.scalar_count(); }
  ParameterStore& store() { return ps_; }
  nn::GraphSource& graph_source() { return source_; }

  /// Forecast for a [B, P, N, D] window (or an unbatched [P, N, D] one).
  Var forward(Tape& t, const Tensor& window, bool training = false, Trace* trace = nullptr) {
    const bool unbatched = window.rank() == 3;
    const Shape& ws = window.shape();
    const std::size_t off = unbatched ? 0 : 1;
    if ((window.rank() != 3 && window.rank() != 4) || ws[off] != spec_.input_len || ws[off + 1] != spec_.nodes ||
        ws[off + 2] != spec_.channels) {
      throw DimensionError("forecast: window " + shape_str(ws) + " does not match [B," +
                           std::to_string(spec_.input_len) + "," + std::to_string(spec_.nodes) + "," +
                           std::to_string(spec_.channels) + "]");
    }
    Tensor batched = unbatched ? window.reshaped({1, ws[0], ws[1], ws[2]}) : window;
    graph::GraphContext g(source_.adjacency(t, training), source_.directed());
    Var x = t.constant(std::move(batched));
    Var y;
    switch (spec_.archetype) {
      case Archetype::rnn: y = forward_rnn(t, g, x); break;
      case Archetype::cnn: y = forward_cnn(t, g, x, trace); break;
      case Archetype::attention: y = forward_attention(t, g, x, trace); break;
    }
    if (unbatched) y = reshape(y, {spec_.horizon, spec_.nodes, spec_.output_channels()});
    return y;
  }

  /// Graph regularization term for the loss, when configured.
  std::optional<Var> penalty(Tape& t) { return source_.penalty(t); }

 private:
  struct AttentionLayer {
    Linear q, k, v, o;
  };

  Var forward_rnn(Tape& t, graph::GraphContext& g, const Var& x) {
    const std::size_t b = x.dim(0), n = spec_.nodes, d_out = spec_.output_channels();
    std::vector<Var> h(spec_.layers, t.constant(Tensor::zeros({b, n, spec_.hidden})));
    for (std::size_t p = 0; p < spec_.input_len; ++p) {
      Var in = reshape(slice(x, 1, p, p + 1), {b, n, spec_.channels});
      for (std::size_t l = 0; l < spec_.layers; ++l) {
        h[l] = gcgru_step(t, encoder_[l], g, in, h[l]);
        in = h[l];
      }
    }
    Var prev = t.constant(Tensor::zeros({b, n, d_out}));
    std::vector<Var> steps;
    for (std::size_t q = 0; q < spec_.horizon; ++q) {
      Var in = prev;
      for (std::size_t l = 0; l < spec_.layers; ++l) {
        h[l] = gcgru_step(t, decoder_[l], g, in, h[l]);
        in = h[l];
      }
      prev = out_(t, in);
      steps.push_back(reshape(prev, {b, 1, n, d_out}));
    }
    return steps.size() == 1 ? steps[0] : concat(steps, 1);
  }

  Var readout(Tape& t, const Var& z) {
    const std::size_t b = z.dim(0), n = spec_.nodes, d_out = spec_.output_channels();
    Var y = out_(t, relu(head_(t, relu(z))));
    return permute(reshape(y, {b, n, spec_.horizon, d_out}), {0, 2, 1, 3});
  }

  Var forward_cnn(Tape& t, graph::GraphContext& g, const Var& x, Trace* trace) {
    const std::size_t c = spec_.hidden, p = spec_.input_len;
    Var h = in_(t, x);
    for (std::size_t b = 0; b < spec_.blocks; ++b) {
      const std::size_t dilation = std::size_t{1} << b;
      Var w = t.watch(*tcn_w_[b]);
      Var conv;
      for (std::size_t j = 0; j < spec_.kernel; ++j) {
        Var wj = reshape(slice(w, 0, j, j + 1), {c, 2 * c});
        Var term = matmul(detail::delay(t, h, j * dilation), wj);
        conv = j == 0 ? term : add(conv, term);
      }
      conv = add(conv, t.watch(*tcn_b_[b]));
      Var gated = mul(stg::tanh(slice(conv, 3, 0, c)), sigmoid(slice(conv, 3, c, 2 * c)));
      h = add(h, gconv_[b](t, g, gated));
      if (trace) trace->blocks.push_back(h.value());
    }
    return readout(t, reshape(slice(h, 1, p - 1, p), {x.dim(0), spec_.nodes, c}));
  }

  Var forward_attention(Tape& t, graph::GraphContext& g, const Var& x, Trace* trace) {
    const std::size_t b = x.dim(0), n = spec_.nodes, p = spec_.input_len, c = spec_.hidden;
    const std::size_t heads = spec_.heads, dh = c / heads;
    Var h = in_(t, x);  // [B, P, N, C]
    if (spec_.positional_encoding) {
      Var pe = t.constant(detail::positional_encoding(p, c).reshaped({p, 1, c}));
      h = add(h, broadcast(pe, h.shape()));
    }
    auto split = [&](const Var& v) { return permute(reshape(v, {b, n, p, heads, dh}), {0, 1, 3, 2, 4}); };
    for (std::size_t l = 0; l < attn_.size(); ++l) {
      const auto& layer = attn_[l];
      Var hn = permute(h, {0, 2, 1, 3});  // [B, N, P, C]
      Var q = split(layer.q(t, hn)), k = split(layer.k(t, hn)), v = split(layer.v(t, hn));
      Var att = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh))), 4);
      if (trace) trace->attention.push_back(att.value());
      Var o = reshape(permute(matmul(att, v), {0, 1, 3, 2, 4}), {b, n, p, c});
      Var a = permute(add(hn, layer.o(t, o)), {0, 2, 1, 3});  // [B, P, N, C]
      h = add(a, relu(gconv_[l](t, g, a)));
      if (trace) trace->blocks.push_back(h.value());
    }
    return readout(t, reduce_mean(h, 1));
  }

  ModelSpec spec_;
  ParameterStore ps_;
  nn::GraphSource source_;
  std::vector<GCGRUCell> encoder_, decoder_;
  std::vector<Parameter*> tcn_w_, tcn_b_;
  std::vector<GraphConv> gconv_;
  std::vector<AttentionLayer> attn_;
  Linear in_, head_, out_;
};

/// Scalar learnables of the model described by `spec`.
inline std::size_t count_parameters(ModelSpec spec) {
  if (spec.graph.kind == nn::SourceKind::fixed && !spec.graph.graph) {
    spec.graph.graph = graph::AdjMatrix::make(Tensor::zeros({spec.nodes, spec.nodes}), graph::GraphKind::connectivity,
                                              false);
  }
  return Model(std::move(spec)).parameter_count();
}

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  nlohmann::json g{{"source", nn::to_string(s.graph.kind)},
                   {"variant", graph::to_string(graph::kind_of(s.graph.variant))},
                   {"embed_dim", s.graph.embed_dim},
                   {"alpha", s.graph.alpha},
                   {"temperature", s.graph.temperature},
                   {"lambda", s.graph.lambda}};
  if (s.graph.graph) {
    g["adjacency"] = {{"kind", graph::to_string(s.graph.graph->kind)},
                      {"directed", s.graph.graph->directed},
                      {"weights", s.graph.graph->weights.data()}};
  }
  return {{"archetype", to_string(s.archetype)},
          {"input_len", s.input_len},
          {"horizon", s.horizon},
          {"nodes", s.nodes},
          {"channels", s.channels},
          {"out_channels", s.out_channels},
          {"hidden", s.hidden},
          {"layers", s.layers},
          {"conv",
           {{"kind", nn::to_string(s.conv.kind)},
            {"order", s.conv.order},
            {"heads", s.conv.heads},
            {"beta", s.conv.beta},
            {"aggregation", graph::to_string(s.conv.aggregation)}}},
          {"graph", g},
          {"kernel", s.kernel},
          {"blocks", s.blocks},
          {"heads", s.heads},
          {"positional_encoding", s.positional_encoding},
          {"seed", s.seed}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.archetype = parse_archetype(j.at("archetype").get<std::string>());
  s.input_len = j.at("input_len").get<std::size_t>();
  s.horizon = j.at("horizon").get<std::size_t>();
  s.nodes = j.at("nodes").get<std::size_t>();
  s.channels = j.at("channels").get<std::size_t>();
  s.out_channels = j.at("out_channels").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.layers = j.at("layers").get<std::size_t>();
  const auto& c = j.at("conv");
  s.conv.kind = nn::parse_conv_kind(c.at("kind").get<std::string>());
  s.conv.order = c.at("order").get<std::size_t>();
  s.conv.heads = c.at("heads").get<std::size_t>();
  s.conv.beta = c.at("beta").get<double>();
  s.conv.aggregation = graph::parse_hop_aggregation(c.at("aggregation").get<std::string>());
  const auto& g = j.at("graph");
  s.graph.kind = nn::parse_source_kind(g.at("source").get<std::string>());
  s.graph.variant = graph::adaptive_variant_of(graph::parse_graph_kind(g.at("variant").get<std::string>()));
  s.graph.embed_dim = g.at("embed_dim").get<std::size_t>();
  s.graph.alpha = g.at("alpha").get<double>();
  s.graph.temperature = g.at("temperature").get<double>();
  s.graph.lambda = g.at("lambda").get<double>();
  if (g.contains("adjacency")) {
    const auto& a = g["adjacency"];
    s.graph.graph = graph::AdjMatrix::make(Tensor({s.nodes, s.nodes}, a.at("weights").get<std::vector<double>>()),
                                           graph::parse_graph_kind(a.at("kind").get<std::string>()),
                                           a.at("directed").get<bool>());
  }
  s.kernel = j.at("kernel").get<std::size_t>();
  s.blocks = j.at("blocks").get<std::size_t>();
  s.heads = j.at("heads").get<std::size_t>();
  s.positional_encoding = j.at("positional_encoding").get<bool>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace stg::models
