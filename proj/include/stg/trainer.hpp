#pragma once

// Training loop (masked MAE on scaled targets, optional horizon curriculum,
// early stopping on validation loss, best-checkpoint retention), evaluation
// in original units, and the persistence / historical-average baselines.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stg/checkpoint.hpp"
#include "stg/data.hpp"
#include "stg/models.hpp"
#include "stg/optim.hpp"

namespace stg::train {

namespace fs = std::filesystem;
using data::Dataset;
using data::HorizonReport;
using data::Part;
using models::Model;
using models::ModelSpec;

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t patience = 15;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::optional<bool> curriculum;  // unset: on for the rnn archetype only
  std::size_t curriculum_step = 300;  // tau, optimizer steps per horizon increment
  std::string loss = "masked_mae";
  std::uint64_t seed = 0;
  double lambda = 0.0;
  double clip = 5.0;
  std::size_t eval_batch_size = 128;

  void validate() const {
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (curriculum_step < 1) throw ConfigError("curriculum step interval must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
    if (!(clip > 0.0)) throw ConfigError("gradient clip must be positive");
    if (loss != "masked_mae") throw ConfigError("unknown loss '" + loss + "' (masked_mae)");
  }

  bool curriculum_for(models::Archetype a) const { return curriculum.value_or(a == models::Archetype::rnn); }

  nlohmann::json to_json() const {
    return {{"max_epochs", max_epochs},
            {"patience", patience},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"curriculum", curriculum ? nlohmann::json(*curriculum) : nlohmann::json(nullptr)},
            {"curriculum_step", curriculum_step},
            {"loss", loss},
            {"seed", seed},
            {"lambda", lambda},
            {"clip", clip}};
  }
};

/// Active horizon after `step` optimizer updates: 1 + floor(step / tau), capped at Q.
inline std::size_t curriculum_horizon(std::size_t step, std::size_t tau, std::size_t q) {
  return std::min(q, 1 + step / tau);
}

/// Epoch index at which a run stops, given its validation losses so far:
/// the epoch `patience` epochs after the best one, if that has been reached.
inline std::optional<std::size_t> early_stop_epoch(const std::vector<double>& val, std::size_t patience) {
  if (val.empty()) return std::nullopt;
  std::size_t best = 0;
  for (std::size_t e = 1; e < val.size(); ++e)
    if (val[e] < val[best]) best = e;
  if (val.size() - 1 - best >= patience) return best + patience;
  return std::nullopt;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
  std::size_t active_horizon = 0;
  std::size_t steps = 0;  // cumulative optimizer steps
};

struct RunRecord {
  nlohmann::json config;
  std::string model_name;
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;
  std::optional<HorizonReport> test;
  std::size_t parameter_count = 0;
  std::string status = "completed";  // completed, early-stopped, diverged
  std::optional<std::size_t> diverged_epoch;

  double seconds_per_epoch() const {
    if (epochs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : epochs) s += e.seconds;
    return s / static_cast<double>(epochs.size());
  }

  /// One JSON object per epoch followed by a summary object.
  std::string jsonl(bool include_timing = true) const {
    std::string out;
    for (const auto& e : epochs) {
      nlohmann::json j{{"type", "epoch"},
                       {"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss},
                       {"active_horizon", e.active_horizon},
                       {"steps", e.steps}};
      if (include_timing) j["seconds"] = e.seconds;
      out += j.dump() + "\n";
    }
    nlohmann::json s{{"type", "summary"},
                     {"model", model_name},
                     {"config", config},
                     {"status", status},
                     {"best_epoch", best_epoch ? nlohmann::json(*best_epoch) : nlohmann::json(nullptr)},
                     {"diverged_epoch", diverged_epoch ? nlohmann::json(*diverged_epoch) : nlohmann::json(nullptr)},
                     {"parameter_count", parameter_count},
                     {"test", test ? test->to_json() : nlohmann::json(nullptr)}};
    if (include_timing) s["seconds_per_epoch"] = seconds_per_epoch();
    out += s.dump() + "\n";
    return out;
  }

  static RunRecord from_jsonl(const std::string& text) {
    RunRecord r;
    std::size_t pos = 0;
    bool summary = false;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      const auto line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() : nl + 1;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("type") == "epoch") {
        r.epochs.push_back({j.at("epoch").get<std::size_t>(), j.at("train_loss").get<double>(),
                            j.at("val_loss").get<double>(), j.value("seconds", 0.0),
                            j.at("active_horizon").get<std::size_t>(), j.at("steps").get<std::size_t>()});
        continue;
      }
      summary = true;
      r.model_name = j.at("model").get<std::string>();
      r.config = j.at("config");
      r.status = j.at("status").get<std::string>();
      if (!j.at("best_epoch").is_null()) r.best_epoch = j["best_epoch"].get<std::size_t>();
      if (!j.at("diverged_epoch").is_null()) r.diverged_epoch = j["diverged_epoch"].get<std::size_t>();
      r.parameter_count = j.at("parameter_count").get<std::size_t>();
      if (!j.at("test").is_null()) {
        HorizonReport h;
        auto one = [](const nlohmann::json& m) {
          return data::Metrics{m.at("mae").get<double>(), m.at("rmse").get<double>(), m.at("mape").get<double>()};
        };
        for (const auto& m : j["test"].at("horizons")) h.horizons.push_back(one(m));
        h.average = one(j["test"].at("average"));
        r.test = h;
      }
    }
    if (!summary) throw StateError("run log has no summary line");
    return r;
  }
};

// ---------------------------------------------------------------------------
// Loss

/// Mean |pred - target| over entries whose raw ground truth is nonzero,
/// restricted to the first `active` horizons. Returns nullopt when every
/// entry is masked.
inline std::optional<Var> masked_mae_loss(Tape& t, const Var& pred, const Tensor& target_scaled, const Tensor& raw,
                                          std::size_t active) {
  const Shape& s = pred.shape();
  if (s != target_scaled.shape() || s != raw.shape()) {
    throw DimensionError("loss: prediction " + shape_str(s) + " vs target " + shape_str(target_scaled.shape()));
  }
  const std::size_t q = s[1];
  active = std::min(active, q);
  Tensor mask = Tensor::zeros(s);
  const std::size_t per_h = raw.size() / (s[0] * q);
  std::size_t count = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != 0.0 && (i / per_h) % q < active) {
      mask[i] = 1.0;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  Var err = mul(abs(sub(pred, t.constant(target_scaled))), t.constant(mask));
  return scale(sum(err), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Evaluation

inline Tensor scaled_targets(const Dataset& ds, const Tensor& raw) { return ds.scaler.transform(raw); }

/// Masked MAE on scaled values over every horizon of a split, pooled over entries.
inline double validation_loss(Model& m, const Dataset& ds, Part part, std::size_t batch) {
  const auto in = ds.inputs(part);
  const auto out = ds.targets(part);
  double total = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < in.size(); b += batch) {
    idx.resize(std::min(batch, in.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    Tape t;
    const Tensor pred = m.forward(t, in.gather(idx, false), false).value();
    const Tensor raw = out.gather(idx, true);
    const Tensor y = scaled_targets(ds, raw);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] == 0.0) continue;
      total += std::abs(pred[i] - y[i]);
      ++count;
    }
  }
  if (count == 0) throw MetricError("validation split is entirely masked");
  return total / static_cast<double>(count);
}

inline void check_compatible(const ModelSpec& spec, const Dataset& ds) {
  if (spec.nodes != ds.raw.node_count() || spec.channels != ds.raw.channel_count() ||
      spec.output_channels() != ds.raw.channel_count() || spec.input_len != ds.input_len ||
      spec.horizon != ds.horizon) {
    throw ContractError("model expects N=" + std::to_string(spec.nodes) + " D=" + std::to_string(spec.channels) +
                        " P=" + std::to_string(spec.input_len) + " Q=" + std::to_string(spec.horizon) +
                        ", dataset has N=" + std::to_string(ds.raw.node_count()) +
                        " D=" + std::to_string(ds.raw.channel_count()) + " P=" + std::to_string(ds.input_len) +
                        " Q=" + std::to_string(ds.horizon));
  }
}

/// Masked MAE/RMSE/MAPE in original units per horizon plus the all-horizon average.
inline HorizonReport evaluate(Model& m, const Dataset& ds, Part part, std::size_t batch = 128) {
  check_compatible(m.spec(), ds);
  const auto in = ds.inputs(part);
  const auto out = ds.targets(part);
  data::MetricAccumulator acc(ds.horizon);
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < in.size(); b += batch) {
    idx.resize(std::min(batch, in.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    Tape t;
    const Tensor pred = ds.scaler.inverse(m.forward(t, in.gather(idx, false), false).value());
    acc.add(out.gather(idx, true), pred);
  }
  return HorizonReport::from(acc);
}

// ---------------------------------------------------------------------------
// Baselines

enum class Baseline { persistence, historical_average };

inline Baseline parse_baseline(std::string_view s) {
  if (s == "persistence") return Baseline::persistence;
  if (s == "historical-average") return Baseline::historical_average;
  throw ConfigError("unknown baseline '" + std::string(s) + "' (persistence, historical-average)");
}

inline std::string_view to_string(Baseline b) {
  return b == Baseline::persistence ? "persistence" : "historical-average";
}

/// Time-of-day profile: mean of the nonzero training values per (slot, node, channel).
class HistoricalAverage {
 public:
  HistoricalAverage(const data::RawSeries& rs, data::Range train) {
    const double slots = data::kMinutesPerDay / rs.interval_minutes;
    if (std::abs(slots - std::round(slots)) > 1e-9 || slots < 1) {
      throw ConfigError("historical average needs a sampling interval that divides one day, got " +
                        std::to_string(rs.interval_minutes) + " minutes");
    }
    slots_ = static_cast<std::size_t>(std::llround(slots));
    width_ = rs.node_count() * rs.channel_count();
    mean_.assign(slots_ * width_, 0.0);
    std::vector<std::size_t> count(mean_.size(), 0);
    const auto v = rs.values.tensor().data();
    for (std::size_t t = train.begin; t < train.end; ++t)
      for (std::size_t k = 0; k < width_; ++k)
        if (const double x = v[t * width_ + k]; x != 0.0) {
          mean_[(t % slots_) * width_ + k] += x;
          ++count[(t % slots_) * width_ + k];
        }
    for (std::size_t i = 0; i < mean_.size(); ++i)
      if (count[i]) mean_[i] /= static_cast<double>(count[i]);
  }

  double at(std::size_t step, std::size_t k) const { return mean_[(step % slots_) * width_ + k]; }
  std::size_t slots() const { return slots_; }

 private:
  std::size_t slots_ = 0, width_ = 0;
  std::vector<double> mean_;
};

/// Forecasts [Q, N, D] for window `k` of a split view. Persistence repeats
/// the last observed (nonzero) value of each series in the input window.
inline Tensor baseline_forecast(Baseline kind, const data::WindowView& raw, std::size_t k,
                                const HistoricalAverage* ha = nullptr) {
  const auto w = raw[k];
  const std::size_t width = raw.base().nodes() * raw.base().features();
  const std::size_t q = raw.horizon(), p = raw.input_len();
  Tensor out({q, raw.base().nodes(), raw.base().features()});
  const auto v = raw.base().tensor().data();
  for (std::size_t j = 0; j < width; ++j) {
    double f = 0.0;
    if (kind == Baseline::persistence) {
      for (std::size_t s = p; s-- > 0;)
        if (const double x = v[(w.start + s) * width + j]; x != 0.0) {
          f = x;
          break;
        }
      for (std::size_t h = 0; h < q; ++h) out[h * width + j] = f;
    } else {
      if (!ha) throw ContractError("historical-average forecast needs a fitted profile");
      for (std::size_t h = 0; h < q; ++h) out[h * width + j] = ha->at(w.start + p + h, j);
    }
  }
  return out;
}

inline HorizonReport evaluate_baseline(Baseline kind, const Dataset& ds, Part part) {
  std::optional<HistoricalAverage> ha;
  if (kind == Baseline::historical_average) ha.emplace(ds.raw, ds.bounds.train);
  const auto raw = ds.targets(part);
  data::MetricAccumulator acc(ds.horizon);
  for (std::size_t k = 0; k < raw.size(); ++k) {
    Tensor f = baseline_forecast(kind, raw, k, ha ? &*ha : nullptr);
    Tensor y = raw[k].target();
    Shape s{1, ds.horizon, ds.raw.node_count(), ds.raw.channel_count()};
    acc.add(Tensor(s, std::vector<double>(y.data().begin(), y.data().end())),
            Tensor(s, std::vector<double>(f.data().begin(), f.data().end())));
  }
  return HorizonReport::from(acc);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_model(const fs::path& stem, Model& m, const data::Scaler& scaler,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  save_checkpoint(stem, snapshot(m.parameters()),
                  {{"model", models::spec_to_json(m.spec())}, {"scaler", scaler.to_json()}, {"extra", extra}});
}

struct LoadedModel {
  std::unique_ptr<Model> model;
  data::Scaler scaler;
  nlohmann::json extra;
};

inline LoadedModel load_model(const fs::path& stem) {
  auto cp = load_checkpoint(stem);
  if (!cp.meta.contains("model")) throw StateError("checkpoint " + stem.string() + " carries no model description");
  LoadedModel out;
  try {
    out.model = std::make_unique<Model>(models::spec_from_json(cp.meta.at("model")));
    out.scaler = data::Scaler::from_json(cp.meta.at("scaler"));
  } catch (const nlohmann::json::exception& e) {
    throw StateError("checkpoint " + stem.string() + " has a malformed model description: " + e.what());
  }
  restore(out.model->parameters(), cp);
  out.extra = cp.meta.value("extra", nlohmann::json::object());
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  RunRecord record;
  std::unique_ptr<Model> model;  // holds the best-validation parameters
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

inline TrainResult train(ModelSpec spec, const Dataset& ds, const TrainConfig& cfg,
                         const std::optional<fs::path>& checkpoint = std::nullopt, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.lambda > 0.0) spec.graph.lambda = cfg.lambda;
  auto model = std::make_unique<Model>(spec);
  check_compatible(model->spec(), ds);
  Model& m = *model;

  RunRecord rec;
  rec.config = {{"model", models::spec_to_json(m.spec())}, {"train", cfg.to_json()}};
  rec.model_name = std::string(models::to_string(spec.archetype)) + "/" + std::string(nn::to_string(spec.conv.kind));
  rec.parameter_count = m.parameter_count();

  const auto params = m.parameters();
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  std::mt19937_64 rng(cfg.seed);
  const bool curriculum = cfg.curriculum_for(spec.archetype);
  const auto in = ds.inputs(Part::train);
  const auto out = ds.targets(Part::train);
  std::vector<std::size_t> order(in.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<NamedTensor> best;
  std::vector<double> val_history;
  std::size_t steps = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    bool diverged = false;
    std::size_t active = ds.horizon;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, order.size() - b));
      active = curriculum ? curriculum_horizon(steps, cfg.curriculum_step, ds.horizon) : ds.horizon;
      const Tensor raw = out.gather(idx, true);
      try {
        Tape t;
        Var pred = m.forward(t, in.gather(idx, false), true);
        auto loss = masked_mae_loss(t, pred, scaled_targets(ds, raw), raw, active);
        if (!loss) continue;
        Var total = *loss;
        if (auto pen = m.penalty(t)) total = add(total, *pen);
        if (!std::isfinite(total.value().item())) {
          diverged = true;
          break;
        }
        for (auto* p : params) p->grad = Tensor::zeros(p->value.shape());
        t.backward(total);
        clip_gradient_norm(params, cfg.clip);
        optimizer_step(params, adam);
        loss_sum += loss->value().item();
      } catch (const NumericalError&) {
        diverged = true;
        break;
      }
      ++steps;
      ++batches;
    }
    double val = 0.0;
    if (!diverged) {
      try {
        val = validation_loss(m, ds, Part::val, cfg.eval_batch_size);
      } catch (const NumericalError&) {
        diverged = true;
      }
      if (!std::isfinite(val)) diverged = true;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (diverged) {
      rec.status = "diverged";
      rec.diverged_epoch = epoch;
      break;
    }
    rec.epochs.push_back({epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, val, secs, active, steps});
    if (hooks.on_epoch) hooks.on_epoch(rec.epochs.back());
    val_history.push_back(val);
    if (!rec.best_epoch || val < rec.epochs[*rec.best_epoch].val_loss) {
      rec.best_epoch = epoch;
      best = snapshot(params);
    }
    if (auto stop = early_stop_epoch(val_history, cfg.patience); stop && *stop == epoch) {
      rec.status = "early-stopped";
      break;
    }
  }

  if (!best.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i].value;
  }
  if (checkpoint && rec.best_epoch) {
    save_model(*checkpoint, m, ds.scaler, {{"best_epoch", *rec.best_epoch}});
  }
  return {std::move(rec), std::move(model)};
}

}  // namespace stg::train
