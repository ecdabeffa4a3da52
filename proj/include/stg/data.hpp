#pragma once

// Traffic series ingestion, z-score scaling, chronological splits, lazy
// sliding windows, masked metrics and a synthetic generator.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stg/checkpoint.hpp"
#include "stg/csv.hpp"
#include "stg/graph/construct.hpp"
#include "stg/traffic.hpp"

namespace stg::data {

namespace fs = std::filesystem;

inline constexpr double kMinutesPerDay = 1440.0;

struct RawSeries {
  TrafficTensor values;  // T x N x D, exact zeros are missing
  std::vector<std::string> nodes;
  double interval_minutes = 5.0;
  std::vector<std::string> channels;

  std::size_t steps() const { return values.steps(); }
  std::size_t node_count() const { return values.nodes(); }
  std::size_t channel_count() const { return values.features(); }

  void validate() const {
    if (nodes.size() != values.nodes()) {
      throw InputError("series has " + std::to_string(values.nodes()) + " node columns but " +
                       std::to_string(nodes.size()) + " node identifiers");
    }
    if (channels.size() != values.features()) throw InputError("channel names do not match the series width");
    if (!(interval_minutes > 0.0)) throw InputError("sampling interval must be positive");
  }
};

/// Reads one CSV per channel. `path` is either a single channel file or the
/// directory holding the files named in the metadata. Metadata keys:
/// nodes (count or identifier list), interval_minutes, channels
/// ([{name, file}]), time_column (leading column to skip).
inline RawSeries ingest_csv(const fs::path& path, const fs::path& metadata_path) {
  std::ifstream mf(metadata_path);
  if (!mf) throw InputError("cannot open metadata " + metadata_path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed metadata " + metadata_path.string() + ": " + e.what());
  }
  RawSeries rs;
  rs.interval_minutes = meta.value("interval_minutes", 5.0);
  const bool time_column = meta.value("time_column", false);
  const std::size_t skip = time_column ? 1 : 0;

  std::optional<std::size_t> declared_nodes;
  if (meta.contains("nodes")) {
    const auto& n = meta["nodes"];
    if (n.is_number_unsigned()) {
      declared_nodes = n.get<std::size_t>();
    } else if (n.is_array()) {
      rs.nodes = n.get<std::vector<std::string>>();
      declared_nodes = rs.nodes.size();
    } else {
      throw InputError(metadata_path.string() + ": 'nodes' must be a count or a list of identifiers");
    }
  }

  std::vector<std::pair<std::string, fs::path>> files;
  const bool is_dir = fs::is_directory(path);
  if (meta.contains("channels")) {
    for (const auto& c : meta["channels"]) {
      const auto name = c.at("name").get<std::string>();
      fs::path file = c.contains("file") ? fs::path(c["file"].get<std::string>()) : fs::path(name + ".csv");
      files.emplace_back(name, is_dir ? path / file : file.is_absolute() ? file : path.parent_path() / file);
    }
  }
  if (!is_dir) {
    if (files.size() > 1) throw InputError("several channels declared but " + path.string() + " is a single file");
    files = {{files.empty() ? std::string("value") : files[0].first, path}};
  }
  if (files.empty()) throw InputError(metadata_path.string() + ": no channels declared");

  std::vector<std::vector<csv::Row>> tables;
  std::size_t steps = 0, width = 0;
  for (std::size_t c = 0; c < files.size(); ++c) {
    const auto& file = files[c].second;
    auto rows = csv::read(file);
    if (!rows.empty() && rows.front().cells.size() > skip && !csv::try_number(rows.front().cells[skip])) {
      if (rs.nodes.empty()) rs.nodes.assign(rows.front().cells.begin() + static_cast<std::ptrdiff_t>(skip),
                                            rows.front().cells.end());
      rows.erase(rows.begin());
    }
    if (rows.empty()) throw InputError(file.string() + ": no data rows");
    const std::size_t w = rows.front().cells.size() - std::min(skip, rows.front().cells.size());
    for (const auto& r : rows) {
      if (r.cells.size() != w + skip) {
        throw InputError(file.string() + ":" + std::to_string(r.line) + ": expected " + std::to_string(w + skip) +
                         " columns, found " + std::to_string(r.cells.size()));
      }
    }
    if (c == 0) {
      steps = rows.size();
      width = w;
    } else if (rows.size() != steps || w != width) {
      throw InputError("shape mismatch: " + file.string() + " is " + std::to_string(rows.size()) + "x" +
                       std::to_string(w) + ", " + files[0].second.string() + " is " + std::to_string(steps) + "x" +
                       std::to_string(width));
    }
    tables.push_back(std::move(rows));
  }
  if (declared_nodes && *declared_nodes != width) {
    throw InputError("metadata declares " + std::to_string(*declared_nodes) + " nodes, files have " +
                     std::to_string(width) + " columns");
  }
  if (rs.nodes.empty()) {
    for (std::size_t i = 0; i < width; ++i) rs.nodes.push_back(std::to_string(i));
  }
  if (rs.nodes.size() != width) throw InputError("header lists " + std::to_string(rs.nodes.size()) + " nodes, rows have " + std::to_string(width));

  rs.values = TrafficTensor(steps, width, files.size());
  for (std::size_t c = 0; c < files.size(); ++c) {
    rs.channels.push_back(files[c].first);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t n = 0; n < width; ++n) rs.values.at(t, n, c) = csv::number(files[c].second, tables[c][t], n + skip);
  }
  rs.validate();
  return rs;
}

struct DatasetStats {
  std::size_t nodes = 0;
  std::size_t steps = 0;
  std::size_t channels = 0;
  double missing_ratio = 0.0;
};

inline DatasetStats compute_stats(const RawSeries& rs) {
  const auto d = rs.values.tensor().data();
  std::size_t zeros = 0;
  for (double v : d) zeros += v == 0.0;
  return {rs.node_count(), rs.steps(), rs.channel_count(),
          d.empty() ? 0.0 : static_cast<double>(zeros) / static_cast<double>(d.size())};
}

inline void save_series(const fs::path& stem, const RawSeries& rs) {
  save_checkpoint(stem, {{"series", rs.values.tensor()}},
                  {{"nodes", rs.nodes}, {"interval_minutes", rs.interval_minutes}, {"channels", rs.channels}});
}

inline RawSeries load_series(const fs::path& stem) {
  auto cp = load_checkpoint(stem);
  RawSeries rs;
  rs.values = TrafficTensor(cp.get("series"));
  rs.nodes = cp.meta.at("nodes").get<std::vector<std::string>>();
  rs.interval_minutes = cp.meta.at("interval_minutes").get<double>();
  rs.channels = cp.meta.at("channels").get<std::vector<std::string>>();
  rs.validate();
  return rs;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;

  static SplitSpec speed() { return {0.7, 0.1, 0.2}; }
  static SplitSpec flow() { return {0.6, 0.2, 0.2}; }

  void validate() const {
    if (!(train > 0 && val > 0 && test > 0)) throw ConfigError("split fractions must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  }
};

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

enum class Part { train, val, test };

struct SplitBounds {
  Range train, val, test;
  const Range& operator[](Part p) const { return p == Part::train ? train : p == Part::val ? val : test; }
};

inline SplitBounds split_bounds(std::size_t steps, const SplitSpec& s) {
  s.validate();
  const auto a = static_cast<std::size_t>(std::llround(static_cast<double>(steps) * s.train));
  const auto b = static_cast<std::size_t>(std::llround(static_cast<double>(steps) * (s.train + s.val)));
  return {{0, a}, {a, b}, {b, steps}};
}

// ---------------------------------------------------------------------------
// Scaling

struct Scaler {
  std::vector<double> mean;
  std::vector<double> sd;

  Tensor transform(const Tensor& x) const { return apply(x, false); }
  Tensor inverse(const Tensor& x) const { return apply(x, true); }

  double inverse(double v, std::size_t channel) const { return v * sd[channel] + mean[channel]; }

  nlohmann::json to_json() const { return {{"mean", mean}, {"sd", sd}}; }
  static Scaler from_json(const nlohmann::json& j) {
    return {j.at("mean").get<std::vector<double>>(), j.at("sd").get<std::vector<double>>()};
  }

 private:
  Tensor apply(const Tensor& x, bool back) const {
    if (x.rank() == 0 || x.shape().back() != mean.size()) {
      throw DimensionError("scaler expects a trailing channel axis of " + std::to_string(mean.size()) + ", got " +
                           shape_str(x.shape()));
    }
    Tensor out = x;
    auto d = out.data();
    const std::size_t c = mean.size();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t k = i % c;
      d[i] = back ? d[i] * sd[k] + mean[k] : (d[i] - mean[k]) / sd[k];
    }
    return out;
  }
};

/// Per-channel mean and population sd over the nonzero entries of `range`.
inline Scaler fit_scaler(const TrafficTensor& x, Range range) {
  if (range.size() == 0) throw InputError("scaler: training split is empty");
  Scaler s;
  for (std::size_t c = 0; c < x.features(); ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = range.begin; t < range.end; ++t)
      for (std::size_t n = 0; n < x.nodes(); ++n)
        if (const double v = x.at(t, n, c); v != 0.0) sum += v, ++count;
    if (count == 0) throw InputError("scaler: channel " + std::to_string(c) + " has no observed training values");
    const double mu = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t t = range.begin; t < range.end; ++t)
      for (std::size_t n = 0; n < x.nodes(); ++n)
        if (const double v = x.at(t, n, c); v != 0.0) sq += (v - mu) * (v - mu);
    const double sd = std::sqrt(sq / static_cast<double>(count));
    if (!(sd > 0.0)) throw InputError("scaler: channel " + std::to_string(c) + " has zero variance on the training split");
    s.mean.push_back(mu);
    s.sd.push_back(sd);
  }
  return s;
}

inline std::pair<Scaler, TrafficTensor> zscore_fit_transform(const RawSeries& rs, const SplitSpec& split) {
  Scaler s = fit_scaler(rs.values, split_bounds(rs.steps(), split).train);
  return {s, TrafficTensor(s.transform(rs.values.tensor()))};
}

inline Tensor zscore_inverse(const Scaler& s, const Tensor& x) { return s.inverse(x); }

// ---------------------------------------------------------------------------
// Windows

/// One (input, target) pair, materialized on request from the base series.
struct WindowedSample {
  const TrafficTensor* base = nullptr;
  std::size_t start = 0;
  std::size_t input_len = 0;
  std::size_t horizon = 0;

  Tensor input() const { return copy(start, input_len); }
  Tensor target() const { return copy(start + input_len, horizon); }

 private:
  Tensor copy(std::size_t from, std::size_t len) const {
    const std::size_t step = base->nodes() * base->features();
    const auto src = base->tensor().data().subspan(from * step, len * step);
    return Tensor({len, base->nodes(), base->features()}, std::vector<double>(src.begin(), src.end()));
  }
};

/// Stride-1 windows whose full input+target span lies inside `range`.
class WindowView {
 public:
  WindowView(const TrafficTensor& series, Range range, std::size_t input_len, std::size_t horizon)
      : base_(&series), range_(range), p_(input_len), q_(horizon) {
    if (p_ == 0 || q_ == 0) throw ContractError("window lengths must be positive");
    if (range_.end > series.steps()) throw ContractError("window range exceeds the series");
    if (range_.size() < p_ + q_) {
      throw InputError("range of " + std::to_string(range_.size()) + " steps is shorter than P + Q = " +
                       std::to_string(p_ + q_));
    }
  }

  std::size_t size() const { return range_.size() - p_ - q_ + 1; }
  std::size_t input_len() const { return p_; }
  std::size_t horizon() const { return q_; }
  const TrafficTensor& base() const { return *base_; }

  WindowedSample operator[](std::size_t k) const {
    if (k >= size()) throw ContractError("window index out of range");
    return {base_, range_.begin + k, p_, q_};
  }

  /// Stacks inputs ([B, P, N, D]) or targets ([B, Q, N, D]) of the given windows.
  Tensor gather(std::span<const std::size_t> idx, bool targets) const {
    const std::size_t len = targets ? q_ : p_;
    const std::size_t step = base_->nodes() * base_->features();
    std::vector<double> out;
    out.reserve(idx.size() * len * step);
    const auto src = base_->tensor().data();
    for (std::size_t k : idx) {
      if (k >= size()) throw ContractError("window index out of range");
      const std::size_t from = (range_.begin + k + (targets ? p_ : 0)) * step;
      out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(from),
                 src.begin() + static_cast<std::ptrdiff_t>(from + len * step));
    }
    return Tensor({idx.size(), len, base_->nodes(), base_->features()}, std::move(out));
  }

 private:
  const TrafficTensor* base_;
  Range range_;
  std::size_t p_, q_;
};

inline WindowView make_windows(const TrafficTensor& series, std::size_t input_len, std::size_t horizon) {
  return WindowView(series, {0, series.steps()}, input_len, horizon);
}

/// A series prepared for training: scaled copy, split bounds and window geometry.
struct Dataset {
  RawSeries raw;
  Scaler scaler;
  TrafficTensor scaled;
  SplitBounds bounds;
  std::size_t input_len = 12;
  std::size_t horizon = 12;

  WindowView inputs(Part p) const { return WindowView(scaled, bounds[p], input_len, horizon); }
  WindowView targets(Part p) const { return WindowView(raw.values, bounds[p], input_len, horizon); }
  std::size_t windows(Part p) const { return inputs(p).size(); }
};

inline Dataset prepare(RawSeries raw, const SplitSpec& split, std::size_t input_len, std::size_t horizon) {
  raw.validate();
  Dataset ds;
  ds.bounds = split_bounds(raw.steps(), split);
  for (Part p : {Part::train, Part::val, Part::test}) {
    if (ds.bounds[p].size() < input_len + horizon) {
      throw InputError("split holds " + std::to_string(ds.bounds[p].size()) + " steps, fewer than P + Q = " +
                       std::to_string(input_len + horizon));
    }
  }
  ds.scaler = fit_scaler(raw.values, ds.bounds.train);
  ds.scaled = TrafficTensor(ds.scaler.transform(raw.values.tensor()));
  ds.raw = std::move(raw);
  ds.input_len = input_len;
  ds.horizon = horizon;
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// Masked MAE/RMSE/MAPE per horizon, accumulated batch by batch over
/// [B, Q, N, D] tensors. Entries whose ground truth is zero are skipped.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t horizons) : sums_(horizons) {}

  void add(const Tensor& truth, const Tensor& pred) {
    if (truth.shape() != pred.shape()) {
      throw DimensionError("metrics: truth " + shape_str(truth.shape()) + " vs prediction " + shape_str(pred.shape()));
    }
    if (truth.rank() < 2 || truth.dim(1) != sums_.size()) {
      throw DimensionError("metrics: expected [B, " + std::to_string(sums_.size()) + ", ...], got " +
                           shape_str(truth.shape()));
    }
    const std::size_t per_h = truth.size() / (truth.dim(0) * truth.dim(1));
    const auto y = truth.data(), p = pred.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == 0.0) continue;
      Sum& s = sums_[(i / per_h) % sums_.size()];
      const double e = std::abs(p[i] - y[i]);
      s.abs += e;
      s.sq += e * e;
      s.ape += e / std::abs(y[i]);
      ++s.count;
    }
  }

  std::size_t horizons() const { return sums_.size(); }

  Metrics horizon(std::size_t h) const {
    const Sum& s = sums_.at(h);
    if (s.count == 0) throw MetricError("metrics: every entry at horizon " + std::to_string(h + 1) + " is masked");
    const double m = static_cast<double>(s.count);
    return {s.abs / m, std::sqrt(s.sq / m), 100.0 * s.ape / m};
  }

  /// Mean of the per-horizon metrics.
  Metrics average() const {
    Metrics a;
    for (std::size_t h = 0; h < sums_.size(); ++h) {
      const Metrics m = horizon(h);
      a.mae += m.mae;
      a.rmse += m.rmse;
      a.mape += m.mape;
    }
    const double q = static_cast<double>(sums_.size());
    return {a.mae / q, a.rmse / q, a.mape / q};
  }

 private:
  struct Sum {
    double abs = 0.0, sq = 0.0, ape = 0.0;
    std::size_t count = 0;
  };
  std::vector<Sum> sums_;
};

inline Metrics masked_metrics(const Tensor& truth, const Tensor& pred) {
  if (truth.shape() != pred.shape()) {
    throw DimensionError("metrics: truth " + shape_str(truth.shape()) + " vs prediction " + shape_str(pred.shape()));
  }
  MetricAccumulator acc(1);
  acc.add(Tensor({1, 1, truth.size()}, std::vector<double>(truth.data().begin(), truth.data().end())),
          Tensor({1, 1, pred.size()}, std::vector<double>(pred.data().begin(), pred.data().end())));
  return acc.horizon(0);
}

struct HorizonReport {
  std::vector<Metrics> horizons;
  Metrics average;

  static HorizonReport from(const MetricAccumulator& acc) {
    HorizonReport r;
    for (std::size_t h = 0; h < acc.horizons(); ++h) r.horizons.push_back(acc.horizon(h));
    r.average = acc.average();
    return r;
  }

  nlohmann::json to_json() const {
    auto one = [](const Metrics& m) { return nlohmann::json{{"mae", m.mae}, {"rmse", m.rmse}, {"mape", m.mape}}; };
    nlohmann::json j{{"horizons", nlohmann::json::array()}, {"average", one(average)}};
    for (const auto& m : horizons) j["horizons"].push_back(one(m));
    return j;
  }
};

inline std::string metrics_csv(const HorizonReport& r) {
  std::string out = "horizon,mae,rmse,mape\n";
  auto row = [&](const std::string& label, const Metrics& m) {
    out += label + "," + csv::format(m.mae) + "," + csv::format(m.rmse) + "," + csv::format(m.mape) + "\n";
  };
  for (std::size_t h = 0; h < r.horizons.size(); ++h) row(std::to_string(h + 1), r.horizons[h]);
  row("average", r.average);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic traffic

struct SynthSpec {
  std::size_t nodes = 20;
  std::size_t steps = 2880;
  std::uint64_t seed = 0;
  double missing = 0.01;
  double base = 60.0;
  double amplitude = 10.0;
  std::size_t period = 288;
  double phase_spread = 0.5;  // radians across the unit square
  double ar = 0.99;
  double ar_sd = 4.0;          // stationary sd of the diffused AR component
  double noise_sd = 3.0;
  double eps = 0.1;            // distance-graph threshold
};

struct SynthData {
  RawSeries series;
  graph::AdjMatrix graph;
  Tensor coordinates;  // N x 2
};

/// Random geometric network with a thresholded Gaussian distance graph;
/// signals are a daily sinusoid with position-dependent phase, plus
/// independent AR(1) processes averaged over each node's closed
/// neighbourhood and rescaled to `ar_sd`, plus observation noise, with a
/// random fraction of entries zeroed.
inline SynthData synth_traffic(const SynthSpec& s) {
  if (s.nodes < 2) throw ContractError("synth_traffic needs at least 2 nodes");
  if (s.steps < 288) throw ContractError("synth_traffic needs at least 288 steps");
  if (!(s.missing >= 0.0 && s.missing < 1.0)) throw ContractError("missing fraction must lie in [0,1)");
  std::mt19937_64 rng(s.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = s.nodes;

  Tensor xy({n, 2});
  for (double& v : xy.data()) v = unit(rng);
  Tensor d({n, n});
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      d.at(i, j) = std::hypot(xy.at(i, 0) - xy.at(j, 0), xy.at(i, 1) - xy.at(j, 1));
      if (i != j) sum += d.at(i, j), sq += d.at(i, j) * d.at(i, j);
    }
  const double pairs = static_cast<double>(n * (n - 1));
  const double var = sq / pairs - (sum / pairs) * (sum / pairs);
  auto g = graph::build_distance_graph(graph::DistanceTable(d), var, s.eps);

  Tensor w = g.weights;
  for (std::size_t i = 0; i < n; ++i) {
    w.at(i, i) += 1.0;
    double r = 0.0;
    for (std::size_t j = 0; j < n; ++j) r += w.at(i, j);
    for (std::size_t j = 0; j < n; ++j) w.at(i, j) /= r;
  }

  std::vector<double> norm(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) norm[i] += w.at(i, j) * w.at(i, j);
    norm[i] = 1.0 / std::sqrt(norm[i]);
  }
  const double innov = s.ar_sd * std::sqrt(1.0 - s.ar * s.ar);
  std::vector<double> u(n), z(n);
  for (double& v : u) v = s.ar_sd * gauss(rng);

  RawSeries rs;
  rs.values = TrafficTensor(s.steps, n, 1);
  rs.interval_minutes = kMinutesPerDay / static_cast<double>(s.period);
  rs.channels = {"speed"};
  for (std::size_t i = 0; i < n; ++i) rs.nodes.push_back("s" + std::to_string(i));
  const double omega = 2.0 * std::numbers::pi / static_cast<double>(s.period);
  for (std::size_t t = 0; t < s.steps; ++t) {
    for (double& v : u) v = s.ar * v + innov * gauss(rng);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += w.at(i, j) * u[j];
      z[i] = acc * norm[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double phase = s.phase_spread * (xy.at(i, 0) + xy.at(i, 1));
      const double v = s.base + s.amplitude * std::sin(omega * static_cast<double>(t) + phase) + z[i] +
                       s.noise_sd * gauss(rng);
      const bool drop = unit(rng) < s.missing;
      rs.values.at(t, i, 0) = drop ? 0.0 : std::max(v, 1.0);
    }
  }
  return {std::move(rs), std::move(g), std::move(xy)};
}

}  // namespace stg::data
