#pragma once

// Config-driven pipeline behind the command-line verbs: ingest, build-graph,
// train, evaluate, benchmark, report. Artifacts live under the output root
// in cache/, logs/, models/ and reports/.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "stg/data.hpp"
#include "stg/graph/io.hpp"
#include "stg/trainer.hpp"

namespace stg::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kInputError = 2, kStateError = 3 };

// ---------------------------------------------------------------------------
// Configuration

struct DataSection {
  std::string source = "synthetic";  // synthetic or csv
  fs::path path;
  fs::path metadata;
  std::vector<std::string> channels;  // empty keeps every channel
  data::SynthSpec synth;
  data::SplitSpec split = data::SplitSpec::speed();
  std::size_t input_len = 12;
  std::size_t horizon = 12;
};

struct GraphSection {
  graph::GraphKind kind = graph::GraphKind::distance;
  std::optional<fs::path> distances, edges, poi, prior;
  std::optional<double> sigma2;  // unset: variance of the known distances
  double eps = 0.1;
  bool directed = false;
  std::string channel;  // name; empty is the first channel
  double semantic_eps = 0.0;
  std::optional<std::size_t> band;
  std::size_t bins = graph::kDefaultHistogramBins;
  double temperature = graph::kDefaultTemperature;
  std::uint64_t seed = 0;
};

struct OutputSection {
  fs::path root;
  fs::path cache, logs, models, reports;
};

struct BenchmarkEntry {
  models::Archetype archetype;
  nn::ConvKind conv;
  nn::SourceKind source;
  std::string name() const {
    return std::string(models::to_string(archetype)) + "-" + std::string(nn::to_string(conv)) + "-" +
           std::string(nn::to_string(source));
  }
};

struct BenchmarkSection {
  std::vector<BenchmarkEntry> models;
  std::vector<train::Baseline> baselines{train::Baseline::persistence, train::Baseline::historical_average};
};

struct RunConfig {
  fs::path file;
  std::string text;
  DataSection data;
  GraphSection graph;
  models::ModelSpec model;  // nodes, channels, P, Q and graph are filled from the dataset
  std::string model_name;
  train::TrainConfig train;
  OutputSection output;
  BenchmarkSection benchmark;

  std::string run_name() const {
    if (!model_name.empty()) return model_name;
    return BenchmarkEntry{model.archetype, model.conv.kind, model.graph.kind}.name();
  }
};

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
  auto n = csv::try_number(v);
  if (!n || *n < 0 || *n != std::floor(*n)) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  return static_cast<std::size_t>(*n);
}

inline double to_double(const std::string& key, const std::string& v) {
  auto n = csv::try_number(v);
  if (!n || !std::isfinite(*n)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return *n;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  const auto s = boost::algorithm::to_lower_copy(v);
  if (s == "true" || s == "yes" || s == "1" || s == "on") return true;
  if (s == "false" || s == "no" || s == "0" || s == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  boost::algorithm::split(out, v, boost::algorithm::is_any_of(","));
  for (auto& s : out) boost::algorithm::trim(s);
  std::erase_if(out, [](const std::string& s) { return s.empty(); });
  return out;
}

inline data::SplitSpec to_split(const std::string& key, const std::string& v) {
  if (v == "speed") return data::SplitSpec::speed();
  if (v == "flow") return data::SplitSpec::flow();
  std::vector<std::string> parts;
  boost::algorithm::split(parts, v, boost::algorithm::is_any_of(":"));
  if (parts.size() != 3) throw ConfigError(key + ": expected speed, flow or a:b:c, got '" + v + "'");
  double r[3], total = 0.0;
  for (int i = 0; i < 3; ++i) total += r[i] = to_double(key, boost::algorithm::trim_copy(parts[i]));
  if (!(total > 0)) throw ConfigError(key + ": ratios must be positive");
  data::SplitSpec s{r[0] / total, r[1] / total, r[2] / total};
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
  return s;
}

template <class F>
auto rethrow_as(const std::string& key, F f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  } catch (const InputError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline BenchmarkEntry to_entry(const std::string& key, const std::string& v) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, v, boost::algorithm::is_any_of("/"));
  if (parts.size() < 2 || parts.size() > 3) {
    throw ConfigError(key + ": expected archetype/conv[/source], got '" + v + "'");
  }
  return rethrow_as(key, [&] {
    return BenchmarkEntry{models::parse_archetype(parts[0]), nn::parse_conv_kind(parts[1]),
                          parts.size() == 3 ? nn::parse_source_kind(parts[2]) : nn::SourceKind::fixed};
  });
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, std::map<std::string, Setter>>& schema() {
  static const std::map<std::string, std::map<std::string, Setter>> s = {
      {"data",
       {
           {"source", [](RunConfig& c, auto& k, auto& v) {
              if (v != "synthetic" && v != "csv") throw ConfigError(k + ": expected synthetic or csv, got '" + v + "'");
              c.data.source = v;
            }},
           {"path", [](RunConfig& c, auto&, auto& v) { c.data.path = v; }},
           {"metadata", [](RunConfig& c, auto&, auto& v) { c.data.metadata = v; }},
           {"channels", [](RunConfig& c, auto&, auto& v) { c.data.channels = to_list(v); }},
           {"split", [](RunConfig& c, auto& k, auto& v) { c.data.split = to_split(k, v); }},
           {"input_len", [](RunConfig& c, auto& k, auto& v) { c.data.input_len = to_size(k, v); }},
           {"horizon", [](RunConfig& c, auto& k, auto& v) { c.data.horizon = to_size(k, v); }},
           {"synth_nodes", [](RunConfig& c, auto& k, auto& v) { c.data.synth.nodes = to_size(k, v); }},
           {"synth_steps", [](RunConfig& c, auto& k, auto& v) { c.data.synth.steps = to_size(k, v); }},
           {"synth_seed", [](RunConfig& c, auto& k, auto& v) { c.data.synth.seed = to_size(k, v); }},
           {"synth_missing", [](RunConfig& c, auto& k, auto& v) { c.data.synth.missing = to_double(k, v); }},
       }},
      {"graph",
       {
           {"kind", [](RunConfig& c, auto& k, auto& v) {
              c.graph.kind = rethrow_as(k, [&] { return graph::parse_graph_kind(v); });
            }},
           {"distances", [](RunConfig& c, auto&, auto& v) { c.graph.distances = v; }},
           {"edges", [](RunConfig& c, auto&, auto& v) { c.graph.edges = v; }},
           {"poi", [](RunConfig& c, auto&, auto& v) { c.graph.poi = v; }},
           {"prior", [](RunConfig& c, auto&, auto& v) { c.graph.prior = v; }},
           {"sigma2", [](RunConfig& c, auto& k, auto& v) { c.graph.sigma2 = to_double(k, v); }},
           {"eps", [](RunConfig& c, auto& k, auto& v) { c.graph.eps = to_double(k, v); }},
           {"directed", [](RunConfig& c, auto& k, auto& v) { c.graph.directed = to_bool(k, v); }},
           {"channel", [](RunConfig& c, auto&, auto& v) { c.graph.channel = v; }},
           {"semantic_eps", [](RunConfig& c, auto& k, auto& v) { c.graph.semantic_eps = to_double(k, v); }},
           {"band", [](RunConfig& c, auto& k, auto& v) { c.graph.band = to_size(k, v); }},
           {"bins", [](RunConfig& c, auto& k, auto& v) { c.graph.bins = to_size(k, v); }},
           {"temperature", [](RunConfig& c, auto& k, auto& v) { c.graph.temperature = to_double(k, v); }},
           {"seed", [](RunConfig& c, auto& k, auto& v) { c.graph.seed = to_size(k, v); }},
       }},
      {"model",
       {
           {"name", [](RunConfig& c, auto&, auto& v) { c.model_name = v; }},
           {"archetype", [](RunConfig& c, auto& k, auto& v) {
              c.model.archetype = rethrow_as(k, [&] { return models::parse_archetype(v); });
            }},
           {"conv", [](RunConfig& c, auto& k, auto& v) {
              c.model.conv.kind = rethrow_as(k, [&] { return nn::parse_conv_kind(v); });
            }},
           {"order", [](RunConfig& c, auto& k, auto& v) { c.model.conv.order = to_size(k, v); }},
           {"gat_heads", [](RunConfig& c, auto& k, auto& v) { c.model.conv.heads = to_size(k, v); }},
           {"beta", [](RunConfig& c, auto& k, auto& v) { c.model.conv.beta = to_double(k, v); }},
           {"aggregation", [](RunConfig& c, auto& k, auto& v) {
              c.model.conv.aggregation = rethrow_as(k, [&] { return graph::parse_hop_aggregation(v); });
            }},
           {"hidden", [](RunConfig& c, auto& k, auto& v) { c.model.hidden = to_size(k, v); }},
           {"layers", [](RunConfig& c, auto& k, auto& v) { c.model.layers = to_size(k, v); }},
           {"kernel", [](RunConfig& c, auto& k, auto& v) { c.model.kernel = to_size(k, v); }},
           {"blocks", [](RunConfig& c, auto& k, auto& v) { c.model.blocks = to_size(k, v); }},
           {"heads", [](RunConfig& c, auto& k, auto& v) { c.model.heads = to_size(k, v); }},
           {"positional_encoding",
            [](RunConfig& c, auto& k, auto& v) { c.model.positional_encoding = to_bool(k, v); }},
           {"source", [](RunConfig& c, auto& k, auto& v) {
              c.model.graph.kind = rethrow_as(k, [&] { return nn::parse_source_kind(v); });
            }},
           {"variant", [](RunConfig& c, auto& k, auto& v) {
              c.model.graph.variant =
                  rethrow_as(k, [&] { return graph::adaptive_variant_of(graph::parse_graph_kind("adaptive-" + v)); });
            }},
           {"embed_dim", [](RunConfig& c, auto& k, auto& v) { c.model.graph.embed_dim = to_size(k, v); }},
           {"alpha", [](RunConfig& c, auto& k, auto& v) { c.model.graph.alpha = to_double(k, v); }},
           {"temperature", [](RunConfig& c, auto& k, auto& v) { c.model.graph.temperature = to_double(k, v); }},
           {"seed", [](RunConfig& c, auto& k, auto& v) { c.model.seed = to_size(k, v); }},
       }},
      {"train",
       {
           {"max_epochs", [](RunConfig& c, auto& k, auto& v) { c.train.max_epochs = to_size(k, v); }},
           {"patience", [](RunConfig& c, auto& k, auto& v) { c.train.patience = to_size(k, v); }},
           {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = to_size(k, v); }},
           {"learning_rate", [](RunConfig& c, auto& k, auto& v) { c.train.learning_rate = to_double(k, v); }},
           {"curriculum", [](RunConfig& c, auto& k, auto& v) {
              if (v == "auto") c.train.curriculum.reset();
              else c.train.curriculum = to_bool(k, v);
            }},
           {"curriculum_step", [](RunConfig& c, auto& k, auto& v) { c.train.curriculum_step = to_size(k, v); }},
           {"loss", [](RunConfig& c, auto&, auto& v) { c.train.loss = v; }},
           {"seed", [](RunConfig& c, auto& k, auto& v) { c.train.seed = to_size(k, v); }},
           {"lambda", [](RunConfig& c, auto& k, auto& v) { c.train.lambda = to_double(k, v); }},
           {"clip", [](RunConfig& c, auto& k, auto& v) { c.train.clip = to_double(k, v); }},
       }},
      {"output",
       {
           {"root", [](RunConfig& c, auto&, auto& v) { c.output.root = v; }},
           {"cache", [](RunConfig& c, auto&, auto& v) { c.output.cache = v; }},
           {"logs", [](RunConfig& c, auto&, auto& v) { c.output.logs = v; }},
           {"models", [](RunConfig& c, auto&, auto& v) { c.output.models = v; }},
           {"reports", [](RunConfig& c, auto&, auto& v) { c.output.reports = v; }},
       }},
      {"benchmark",
       {
           {"models", [](RunConfig& c, auto& k, auto& v) {
              c.benchmark.models.clear();
              for (const auto& e : to_list(v)) c.benchmark.models.push_back(to_entry(k, e));
            }},
           {"baselines", [](RunConfig& c, auto& k, auto& v) {
              c.benchmark.baselines.clear();
              for (const auto& b : to_list(v))
                c.benchmark.baselines.push_back(rethrow_as(k, [&] { return train::parse_baseline(b); }));
            }},
       }},
  };
  return s;
}

inline fs::path resolve(const fs::path& base, const fs::path& p) { return p.empty() || p.is_absolute() ? p : base / p; }

inline void require_file(const std::string& key, const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError(key + ": path not found: " + p.string());
}

}  // namespace detail

/// Parses and validates a run configuration without touching the file
/// system beyond reading it and checking that referenced inputs exist.
inline RunConfig parse_config(const std::string& text, const fs::path& file = {},
                              std::optional<std::uint64_t> seed = std::nullopt) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  c.file = file;
  c.text = text;
  const auto& schema = detail::schema();
  for (const auto& [section, body] : tree) {
    auto sec = schema.find(section);
    if (sec == schema.end()) {
      if (body.empty()) throw ConfigError("key '" + section + "' outside any section");
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      auto it = sec->second.find(key);
      if (it == sec->second.end()) throw ConfigError("unknown key [" + section + "] " + key);
      it->second(c, section + "." + key, value.get_value<std::string>());
    }
  }
  if (seed) {
    c.train.seed = *seed;
    c.model.seed = *seed;
    c.graph.seed = *seed;
  }

  const fs::path base = file.empty() ? fs::current_path() : fs::absolute(file).parent_path();
  c.data.path = detail::resolve(base, c.data.path);
  c.data.metadata = detail::resolve(base, c.data.metadata);
  for (auto* p : {&c.graph.distances, &c.graph.edges, &c.graph.poi, &c.graph.prior})
    if (*p) *p = detail::resolve(base, **p);
  auto& o = c.output;
  o.root = detail::resolve(base, o.root.empty() ? fs::path("run") : o.root);
  o.cache = o.cache.empty() ? o.root / "cache" : detail::resolve(base, o.cache);
  o.logs = o.logs.empty() ? o.root / "logs" : detail::resolve(base, o.logs);
  o.models = o.models.empty() ? o.root / "models" : detail::resolve(base, o.models);
  o.reports = o.reports.empty() ? o.root / "reports" : detail::resolve(base, o.reports);

  if (c.data.source == "csv") {
    if (c.data.path.empty()) throw ConfigError("data.path: required when data.source = csv");
    if (c.data.metadata.empty()) throw ConfigError("data.metadata: required when data.source = csv");
    detail::require_file("data.path", c.data.path);
    detail::require_file("data.metadata", c.data.metadata);
  } else {
    if (c.data.synth.nodes < 2) throw ConfigError("data.synth_nodes: need at least 2 nodes");
    if (c.data.synth.steps < 288) throw ConfigError("data.synth_steps: need at least 288 steps");
    if (!(c.data.synth.missing >= 0 && c.data.synth.missing < 1)) throw ConfigError("data.synth_missing: must lie in [0,1)");
  }
  if (c.data.input_len < 1 || c.data.horizon < 1) throw ConfigError("data.input_len and data.horizon must be positive");
  if (c.graph.distances) detail::require_file("graph.distances", *c.graph.distances);
  if (c.graph.edges) detail::require_file("graph.edges", *c.graph.edges);
  if (c.graph.poi) detail::require_file("graph.poi", *c.graph.poi);
  if (c.graph.prior) {
    auto csv_path = *c.graph.prior;
    csv_path += ".csv";
    detail::require_file("graph.prior", csv_path);
  }
  switch (c.graph.kind) {
    case graph::GraphKind::connectivity:
      if (!c.graph.edges) throw ConfigError("graph.edges: required for the connectivity graph");
      break;
    case graph::GraphKind::functionality:
      if (!c.graph.poi) throw ConfigError("graph.poi: required for the functionality graph");
      break;
    case graph::GraphKind::distance:
      if (c.data.source == "csv" && !c.graph.distances)
        throw ConfigError("graph.distances: required for the distance graph");
      break;
    case graph::GraphKind::semantic:
    case graph::GraphKind::distribution:
      break;
    case graph::GraphKind::sampled:
      if (c.data.source == "csv" && !c.graph.prior && !c.graph.distances)
        throw ConfigError("graph.prior: required for the sampled graph");
      break;
    default:
      throw ConfigError("graph.kind: '" + std::string(graph::to_string(c.graph.kind)) +
                        "' graphs are learned during training; set [model] source = adaptive");
  }
  if (c.graph.sigma2 && !(*c.graph.sigma2 > 0)) throw ConfigError("graph.sigma2: must be positive");
  if (!(c.graph.eps >= 0 && c.graph.eps <= 1)) throw ConfigError("graph.eps: must lie in [0,1]");
  if (!(c.graph.temperature > 0)) throw ConfigError("graph.temperature: must be positive");
  detail::rethrow_as("train", [&] {
    c.train.validate();
    return 0;
  });
  if (c.train.lambda > 0) c.model.graph.lambda = c.train.lambda;
  return c;
}

inline RunConfig load_config(const fs::path& file, std::optional<std::uint64_t> seed = std::nullopt) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), file, seed);
}

// ---------------------------------------------------------------------------
// File system helpers

/// Exclusive ownership of an output root for the lifetime of a command.
class RunLock {
 public:
  explicit RunLock(const fs::path& root) : path_(root / ".lock") {
    fs::create_directories(root);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw StateError("run directory is locked by another command: " + path_.string());
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

/// Runs `write` against a fresh staging directory, then renames every file
/// it produced into `dir`.
inline void staged(const fs::path& dir, const std::function<void(const fs::path&)>& write) {
  fs::create_directories(dir);
  const fs::path stage = dir / (".stage-" + std::to_string(::getpid()));
  fs::remove_all(stage);
  fs::create_directories(stage);
  try {
    write(stage);
  } catch (...) {
    fs::remove_all(stage);
    throw;
  }
  for (const auto& e : fs::directory_iterator(stage)) fs::rename(e.path(), dir / e.path().filename());
  fs::remove_all(stage);
}

inline void write_text(const fs::path& dir, const std::string& name, const std::string& text) {
  staged(dir, [&](const fs::path& s) {
    std::ofstream out(s / name, std::ios::binary);
    if (!out) throw StateError("cannot write " + (dir / name).string());
    out << text;
  });
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw StateError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string percent(double ratio) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(3);
  s << ratio * 100.0 << "%";
  return s.str();
}

// ---------------------------------------------------------------------------
// Commands

inline fs::path series_stem(const RunConfig& c) { return c.output.cache / "series"; }
inline fs::path graph_stem(const RunConfig& c) { return c.output.cache / "graph"; }

inline data::RawSeries select_channels(data::RawSeries rs, const std::vector<std::string>& names) {
  if (names.empty()) return rs;
  std::vector<std::size_t> idx;
  for (const auto& n : names) {
    auto it = std::find(rs.channels.begin(), rs.channels.end(), n);
    if (it == rs.channels.end()) throw ConfigError("data.channels: no channel named '" + n + "'");
    idx.push_back(static_cast<std::size_t>(it - rs.channels.begin()));
  }
  data::RawSeries out;
  out.nodes = rs.nodes;
  out.interval_minutes = rs.interval_minutes;
  out.values = TrafficTensor(rs.steps(), rs.node_count(), idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    out.channels.push_back(rs.channels[idx[k]]);
    for (std::size_t t = 0; t < rs.steps(); ++t)
      for (std::size_t n = 0; n < rs.node_count(); ++n) out.values.at(t, n, k) = rs.values.at(t, n, idx[k]);
  }
  return out;
}

inline int cmd_ingest(const RunConfig& c, std::ostream& out) {
  RunLock lock(c.output.root);
  data::RawSeries rs;
  std::optional<data::SynthData> syn;
  if (c.data.source == "csv") {
    rs = data::ingest_csv(c.data.path, c.data.metadata);
  } else {
    syn = data::synth_traffic(c.data.synth);
    rs = syn->series;
  }
  rs = select_channels(std::move(rs), c.data.channels);
  const auto st = data::compute_stats(rs);
  staged(c.output.cache, [&](const fs::path& s) {
    data::save_series(s / "series", rs);
    nlohmann::json j{{"nodes", st.nodes}, {"steps", st.steps}, {"channels", st.channels},
                     {"missing_ratio", st.missing_ratio}, {"interval_minutes", rs.interval_minutes}};
    std::ofstream(s / "stats.json") << j.dump(2) << '\n';
    if (syn) {
      std::ofstream d(s / "distances.csv");
      d << "from,to,distance\n";
      const auto& xy = syn->coordinates;
      for (std::size_t i = 0; i < st.nodes; ++i)
        for (std::size_t j = 0; j < st.nodes; ++j)
          if (i != j)
            d << rs.nodes[i] << ',' << rs.nodes[j] << ',' << csv::format(std::hypot(xy.at(i, 0) - xy.at(j, 0), xy.at(i, 1) - xy.at(j, 1)))
              << '\n';
    }
  });
  out << "nodes          " << st.nodes << "\n"
      << "steps          " << st.steps << "\n"
      << "channels       " << st.channels << "\n"
      << "interval       " << rs.interval_minutes << " min\n"
      << "missing ratio  " << percent(st.missing_ratio) << "\n";
  return kOk;
}

inline data::RawSeries load_cached_series(const RunConfig& c) {
  auto stem = series_stem(c);
  if (!fs::exists(fs::path(stem) += ".json")) throw StateError("no ingested data in " + c.output.cache.string() + "; run ingest first");
  return data::load_series(stem);
}

inline std::size_t channel_index(const RunConfig& c, const data::RawSeries& rs) {
  if (c.graph.channel.empty()) return 0;
  auto it = std::find(rs.channels.begin(), rs.channels.end(), c.graph.channel);
  if (it == rs.channels.end()) throw ConfigError("graph.channel: no channel named '" + c.graph.channel + "'");
  return static_cast<std::size_t>(it - rs.channels.begin());
}

inline graph::AdjMatrix distance_graph(const RunConfig& c, const data::RawSeries& rs, nlohmann::json& params) {
  fs::path file = c.graph.distances ? *c.graph.distances : c.output.cache / "distances.csv";
  if (!fs::exists(file)) throw ConfigError("graph.distances: required for the distance graph");
  const auto dt = graph::read_distance_csv(file, graph::NodeIndex(rs.nodes));
  double sigma2 = 0.0;
  if (c.graph.sigma2) {
    sigma2 = *c.graph.sigma2;
  } else {
    double s = 0, sq = 0, n = 0;
    for (std::size_t i = 0; i < dt.n(); ++i)
      for (std::size_t j = 0; j < dt.n(); ++j)
        if (i != j && dt.known(i, j)) s += dt(i, j), sq += dt(i, j) * dt(i, j), ++n;
    if (n == 0) throw InputError(file.string() + ": no distances");
    sigma2 = sq / n - (s / n) * (s / n);
    if (!(sigma2 > 0)) throw InputError(file.string() + ": distances have zero spread; set graph.sigma2");
  }
  params["sigma2"] = sigma2;
  params["eps"] = c.graph.eps;
  return graph::build_distance_graph(dt, sigma2, c.graph.eps);
}

inline int cmd_build_graph(const RunConfig& c, std::ostream& out) {
  using graph::GraphKind;
  RunLock lock(c.output.root);
  const auto rs = load_cached_series(c);
  nlohmann::json params{{"kind", graph::to_string(c.graph.kind)}};
  std::optional<std::uint64_t> seed;
  graph::AdjMatrix a;
  switch (c.graph.kind) {
    case GraphKind::distance:
      a = distance_graph(c, rs, params);
      break;
    case GraphKind::connectivity:
      if (!c.graph.edges) throw ConfigError("graph.edges: required for the connectivity graph");
      a = graph::build_connectivity_graph(graph::read_edge_csv(*c.graph.edges, graph::NodeIndex(rs.nodes)),
                                          rs.node_count(), c.graph.directed);
      params["directed"] = c.graph.directed;
      break;
    case GraphKind::semantic:
      a = graph::build_semantic_graph(rs.values, channel_index(c, rs), c.graph.semantic_eps, c.graph.band);
      params["eps"] = c.graph.semantic_eps;
      params["band"] = c.graph.band ? nlohmann::json(*c.graph.band) : nlohmann::json(nullptr);
      break;
    case GraphKind::functionality:
      if (!c.graph.poi) throw ConfigError("graph.poi: required for the functionality graph");
      a = graph::build_functionality_graph(graph::read_poi_csv(*c.graph.poi, graph::NodeIndex(rs.nodes)));
      break;
    case GraphKind::distribution:
      a = graph::build_distribution_graph(rs.values, channel_index(c, rs), c.graph.bins);
      params["bins"] = c.graph.bins;
      break;
    case GraphKind::sampled: {
      Tensor theta = c.graph.prior ? graph::read_graph(*c.graph.prior).weights : distance_graph(c, rs, params).weights;
      a = graph::sample_graph_gumbel(graph::ProbabilityGraph(std::move(theta), c.graph.temperature), c.graph.seed);
      params["temperature"] = c.graph.temperature;
      seed = c.graph.seed;
      break;
    }
    default:
      throw ConfigError("graph.kind: '" + std::string(graph::to_string(c.graph.kind)) +
                        "' graphs are learned during training; set [model] source = adaptive");
  }
  staged(c.output.cache, [&](const fs::path& s) { graph::write_graph(s / "graph", a, params, seed); });
  std::size_t edges = 0;
  for (double v : a.weights.data()) edges += v > 0;
  out << "graph " << graph::to_string(a.kind) << ": " << a.n << " nodes, " << edges << " nonzero entries"
      << (a.directed ? ", directed" : "") << "\n";
  return kOk;
}

inline data::Dataset load_dataset(const RunConfig& c) {
  return data::prepare(load_cached_series(c), c.data.split, c.data.input_len, c.data.horizon);
}

inline models::ModelSpec model_spec(const RunConfig& c, const data::Dataset& ds, const BenchmarkEntry* entry = nullptr) {
  models::ModelSpec s = c.model;
  if (entry) {
    s.archetype = entry->archetype;
    s.conv.kind = entry->conv;
    s.graph.kind = entry->source;
  }
  s.nodes = ds.raw.node_count();
  s.channels = ds.raw.channel_count();
  s.out_channels = 0;
  s.input_len = ds.input_len;
  s.horizon = ds.horizon;
  const auto stem = graph_stem(c);
  const bool have_graph = fs::exists(fs::path(stem) += ".json");
  if (have_graph) {
    auto g = graph::read_graph(stem);
    if (g.n != s.nodes) throw StateError("cached graph has " + std::to_string(g.n) + " nodes, data has " + std::to_string(s.nodes));
    s.graph.graph = std::move(g);
  } else if (s.graph.kind == nn::SourceKind::fixed) {
    throw StateError("no graph in " + c.output.cache.string() + "; run build-graph first");
  }
  return s;
}

inline nlohmann::json snapshot(const RunConfig& c) { return {{"file", c.file.string()}, {"text", c.text}}; }

struct TrainedRun {
  train::RunRecord record;
  data::HorizonReport test;
};

inline TrainedRun train_and_record(const RunConfig& c, const data::Dataset& ds, const models::ModelSpec& spec,
                                   const std::string& name, std::ostream& out) {
  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::EpochRecord& e) {
    out << name << " epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " ("
        << e.seconds << " s)\n"
        << std::flush;
  };
  fs::path stage = c.output.models / (".stage-" + std::to_string(::getpid()));
  fs::create_directories(stage);
  train::TrainResult res;
  try {
    res = train::train(spec, ds, c.train, stage / name, hooks);
  } catch (...) {
    fs::remove_all(stage);
    throw;
  }
  res.record.model_name = name;
  res.record.config["run"] = snapshot(c);
  const auto test = train::evaluate(*res.model, ds, data::Part::test, c.train.eval_batch_size);
  res.record.test = test;
  for (const auto& e : fs::directory_iterator(stage)) fs::rename(e.path(), c.output.models / e.path().filename());
  fs::remove_all(stage);
  write_text(c.output.logs, name + ".jsonl", res.record.jsonl());
  write_text(c.output.reports, name + "_metrics.csv", data::metrics_csv(test));
  if (res.record.status == "diverged") {
    out << name << " diverged at epoch " << *res.record.diverged_epoch << "\n";
  }
  return {std::move(res.record), test};
}

inline int cmd_train(const RunConfig& c, std::ostream& out) {
  RunLock lock(c.output.root);
  const auto ds = load_dataset(c);
  const auto spec = model_spec(c, ds);
  const auto name = c.run_name();
  auto run = train_and_record(c, ds, spec, name, out);
  out << name << ": " << run.record.epochs.size() << " epochs, best " << (run.record.best_epoch ? std::to_string(*run.record.best_epoch) : "none")
      << ", test MAE " << run.test.average.mae << "\n";
  return run.record.status == "diverged" ? kFailure : kOk;
}

inline int cmd_evaluate(const RunConfig& c, std::ostream& out) {
  RunLock lock(c.output.root);
  const auto ds = load_dataset(c);
  const auto name = c.run_name();
  const auto stem = c.output.models / name;
  if (!fs::exists(fs::path(stem) += ".json")) throw StateError("no checkpoint " + stem.string() + "; run train first");
  auto loaded = train::load_model(stem);
  try {
    train::check_compatible(loaded.model->spec(), ds);
  } catch (const ContractError& e) {
    throw StateError(std::string("incompatible checkpoint: ") + e.what());
  }
  const auto r = train::evaluate(*loaded.model, ds, data::Part::test, c.train.eval_batch_size);
  write_text(c.output.reports, name + "_metrics.csv", data::metrics_csv(r));
  out << data::metrics_csv(r);
  return kOk;
}

inline std::vector<std::size_t> report_horizons(std::size_t q) {
  std::vector<std::size_t> h;
  for (std::size_t x : {3u, 6u, 12u})
    if (x <= q) h.push_back(x);
  if (h.empty()) h.push_back(q);
  return h;
}

inline std::string comparison_header(std::size_t q) {
  std::string s = "model,parameters";
  for (std::size_t h : report_horizons(q)) {
    const auto t = std::to_string(h);
    s += ",mae_h" + t + ",rmse_h" + t + ",mape_h" + t;
  }
  return s + ",mae_avg,rmse_avg,mape_avg\n";
}

inline std::string comparison_row(const std::string& name, std::size_t params, const data::HorizonReport& r) {
  std::string s = name + "," + std::to_string(params);
  for (std::size_t h : report_horizons(r.horizons.size())) {
    const auto& m = r.horizons[h - 1];
    s += "," + csv::format(m.mae) + "," + csv::format(m.rmse) + "," + csv::format(m.mape);
  }
  return s + "," + csv::format(r.average.mae) + "," + csv::format(r.average.rmse) + "," + csv::format(r.average.mape) +
         "\n";
}

inline int cmd_benchmark(const RunConfig& c, std::ostream& out) {
  RunLock lock(c.output.root);
  const auto ds = load_dataset(c);
  std::vector<models::ModelSpec> specs;
  for (const auto& e : c.benchmark.models) specs.push_back(model_spec(c, ds, &e));
  std::string table = comparison_header(ds.horizon);
  std::string timing = "model,parameters,seconds_per_epoch,epochs\n";
  for (auto b : c.benchmark.baselines) {
    const auto r = train::evaluate_baseline(b, ds, data::Part::test);
    table += comparison_row(std::string(train::to_string(b)), 0, r);
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto name = c.benchmark.models[i].name();
    auto run = train_and_record(c, ds, specs[i], name, out);
    table += comparison_row(name, run.record.parameter_count, run.test);
    timing += name + "," + std::to_string(run.record.parameter_count) + "," +
              csv::format(run.record.seconds_per_epoch()) + "," + std::to_string(run.record.epochs.size()) + "\n";
  }
  write_text(c.output.reports, "benchmark.csv", table);
  write_text(c.output.reports, "benchmark_timing.csv", timing);
  out << table;
  return kOk;
}

inline int cmd_report(const RunConfig& c, std::ostream& out) {
  RunLock lock(c.output.root);
  std::vector<fs::path> logs;
  if (fs::is_directory(c.output.logs))
    for (const auto& e : fs::directory_iterator(c.output.logs))
      if (e.path().extension() == ".jsonl") logs.push_back(e.path());
  std::sort(logs.begin(), logs.end());
  if (logs.empty()) throw InputError("no run logs in " + c.output.logs.string());
  std::map<std::string, std::string> files;
  std::string summary = "model,parameters,seconds_per_epoch\n";
  for (const auto& p : logs) {
    const auto rec = train::RunRecord::from_jsonl(read_text(p));
    const auto name = p.stem().string();
    if (!rec.test) throw StateError(p.string() + ": run has no test metrics");
    std::string h = "horizon,mae\n";
    for (std::size_t k = 0; k < rec.test->horizons.size(); ++k)
      h += std::to_string(k + 1) + "," + csv::format(rec.test->horizons[k].mae) + "\n";
    files[name + "_horizon_mae.csv"] = h;
    summary += name + "," + std::to_string(rec.parameter_count) + "," + csv::format(rec.seconds_per_epoch()) + "\n";
  }
  files["params_time.csv"] = summary;
  staged(c.output.reports, [&](const fs::path& s) {
    for (const auto& [name, text] : files) std::ofstream(s / name, std::ios::binary) << text;
  });
  out << "wrote " << files.size() << " report files to " << c.output.reports.string() << "\n";
  return kOk;
}

inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v{"ingest", "build-graph", "train", "evaluate", "benchmark", "report"};
  return v;
}

/// Runs one verb and maps failures onto the exit-code contract.
inline int run(const std::string& verb, const fs::path& config, std::optional<std::uint64_t> seed, std::ostream& out,
               std::ostream& err) {
  try {
    const auto c = load_config(config, seed);
    if (verb == "ingest") return cmd_ingest(c, out);
    if (verb == "build-graph") return cmd_build_graph(c, out);
    if (verb == "train") return cmd_train(c, out);
    if (verb == "evaluate") return cmd_evaluate(c, out);
    if (verb == "benchmark") return cmd_benchmark(c, out);
    if (verb == "report") return cmd_report(c, out);
    err << "error: unknown verb '" << verb << "'\n";
    return kInputError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kInputError;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kInputError;
  } catch (const MetricError& e) {
    err << "input error: " << e.what() << "\n";
    return kInputError;
  } catch (const StateError& e) {
    err << "state error: " << e.what() << "\n";
    return kStateError;
  } catch (const ContractError& e) {
    err << "state error: " << e.what() << "\n";
    return kStateError;
  } catch (const DimensionError& e) {
    err << "state error: " << e.what() << "\n";
    return kStateError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace stg::cli
