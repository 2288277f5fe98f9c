#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "modex/data.hpp"
#include "modex/key_values.hpp"
#include "modex/model.hpp"
#include "modex/param_store.hpp"

namespace modex {

struct TrainConfig {
  double lr = 3e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;
  std::uint64_t seed = 2024;
  double lr_decay = 0.8;
  std::size_t decay_after = 3;  // epochs 1..decay_after run at the base rate
  std::size_t eval_batch_size = 256;
  AdamConfig adam;

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
    if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
    if (!(lr_decay > 0) || lr_decay > 1) throw ConfigError("lr_decay must be in (0, 1]");
    if (eval_batch_size == 0) throw ConfigError("eval_batch_size must be positive");
  }

  double lr_at(std::size_t epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(epoch > decay_after ? epoch - decay_after : 0));
  }

  static std::vector<std::string> keys() {
    return {"lr", "batch_size", "max_epochs", "patience", "train_seed", "lr_decay", "decay_after", "eval_batch_size"};
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("lr", ModelConfig::format_real(lr));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("max_epochs", std::to_string(max_epochs));
    kv.set("patience", std::to_string(patience));
    kv.set("train_seed", std::to_string(seed));
    kv.set("lr_decay", ModelConfig::format_real(lr_decay));
    kv.set("decay_after", std::to_string(decay_after));
    kv.set("eval_batch_size", std::to_string(eval_batch_size));
    return kv;
  }

  void apply(const KeyValues& kv) {
    for (const auto& [key, value] : kv.pairs()) {
      if (key == "lr") lr = parse::real(key, value);
      else if (key == "batch_size") batch_size = parse::unsigned_int(key, value);
      else if (key == "max_epochs") max_epochs = parse::unsigned_int(key, value);
      else if (key == "patience") patience = parse::unsigned_int(key, value);
      else if (key == "train_seed") seed = parse::unsigned_int(key, value);
      else if (key == "lr_decay") lr_decay = parse::real(key, value);
      else if (key == "decay_after") decay_after = parse::unsigned_int(key, value);
      else if (key == "eval_batch_size") eval_batch_size = parse::unsigned_int(key, value);
    }
  }
};

/// Counts epochs without improvement; asks to stop once that count exceeds
/// `patience`.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Returns true when `value` is a new best.
  bool update(double value) {
    ++epoch_;
    if (value < best_) {
      best_ = value;
      best_epoch_ = epoch_;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ > patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t stale_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) comp_ += (sum_ - t) + v;
    else comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0;
  double comp_ = 0;
};

struct EvalReport {
  double mse = 0;
  double mae = 0;
  std::vector<double> per_horizon_mse;
  std::vector<double> per_horizon_mae;
  std::size_t windows = 0;
  double train_seconds = 0;
  double infer_seconds = 0;

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("mse", ModelConfig::format_real(mse));
    kv.set("mae", ModelConfig::format_real(mae));
    kv.set("windows", std::to_string(windows));
    kv.set("train_seconds", ModelConfig::format_real(train_seconds));
    kv.set("infer_seconds", ModelConfig::format_real(infer_seconds));
    return kv;
  }
};

template <class T>
EvalReport evaluate(const BasicModel<T>& model, const data::WindowSet& windows, std::size_t batch_size = 256) {
  if (windows.size() == 0) throw ConfigError("evaluation split has no windows");
  const std::size_t H = windows.horizon();
  CompensatedSum se, ae;
  std::vector<CompensatedSum> se_h(H), ae_h(H);
  const auto begin = std::chrono::steady_clock::now();
  for (const auto& idx : data::batch_indices(windows.size(), batch_size)) {
    const auto batch = windows.batch<T>(idx);
    const Tensor<T> pred = model.predict(batch.x);
    for (std::size_t r = 0; r < pred.rows(); ++r) {
      for (std::size_t h = 0; h < H; ++h) {
        const double d = static_cast<double>(pred.at(r, h)) - static_cast<double>(batch.y.at(r, h));
        se.add(d * d);
        ae.add(std::abs(d));
        se_h[h].add(d * d);
        ae_h[h].add(std::abs(d));
      }
    }
  }
  EvalReport report;
  report.infer_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count();
  report.windows = windows.size();
  const double per_step = static_cast<double>(windows.size() * windows.num_variates());
  report.mse = se.value() / (per_step * H);
  report.mae = ae.value() / (per_step * H);
  for (std::size_t h = 0; h < H; ++h) {
    report.per_horizon_mse.push_back(se_h[h].value() / per_step);
    report.per_horizon_mae.push_back(ae_h[h].value() / per_step);
  }
  if (!std::isfinite(report.mse) || !std::isfinite(report.mae)) {
    throw NumericalError("evaluation produced non-finite metrics");
  }
  return report;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0;
  double val_mse = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mse = 0;
  bool stopped_early = false;
  double train_seconds = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on windowed MSE with per-epoch validation. The parameters of the best
/// validation epoch are restored before returning.
template <class T>
TrainResult train(BasicModel<T>& model, const data::WindowSet& train_set, const data::WindowSet& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw ConfigError("training split has no windows");
  if (train_set.lookback() != model.config().lookback || train_set.horizon() != model.config().horizon) {
    throw ConfigError("window lookback/horizon do not match the model config");
  }
  auto& params = model.params();
  TrainResult result;
  EarlyStopper stopper(cfg.patience);
  std::vector<Tensor<T>> best;
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    AdamConfig adam = cfg.adam;
    adam.lr = cfg.lr_at(epoch);
    const std::uint64_t shuffle_seed = cfg.seed ^ (0x9E3779B97F4A7C15ULL * epoch);
    CompensatedSum loss_sum;
    std::size_t count = 0, step = 0;
    for (const auto& idx : data::batch_indices(train_set.size(), cfg.batch_size, shuffle_seed)) {
      ++step;
      const auto batch = train_set.batch<T>(idx);
      Tape<T> tape;
      const Var<T> loss = ops::mse(*model.forward(tape.input(batch.x)).output, batch.y);
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
      }
      tape.backward(loss);
      adam_step(params, adam);
      loss_sum.add(value * static_cast<double>(batch.y.size()));
      count += batch.y.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    rec.train_mse = loss_sum.value() / static_cast<double>(count);
    rec.val_mse = evaluate(model, val_set, cfg.eval_batch_size).mse;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (stopper.update(rec.val_mse)) {
      best.clear();
      for (const auto& e : params) best.push_back(e.value);
    }
    if (stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) params[i].value = best[i];
  result.best_epoch = stopper.best_epoch();
  result.best_val_mse = stopper.best();
  result.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

template <class T>
TrainResult train(BasicModel<T>& model, const data::Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {}) {
  return train(model, data.windows(data::Segment::train), data.windows(data::Segment::val), cfg, on_epoch);
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "epoch,train_mse,val_mse,lr\n";
  for (const auto& r : history) out << r.epoch << ',' << r.train_mse << ',' << r.val_mse << ',' << r.lr << '\n';
  if (!out) throw IoError("failed writing " + path);
}

/// One header row and one value row: the report's metrics followed by `extra`.
inline void write_report_csv(const std::string& path, const EvalReport& report, const KeyValues& extra = {}) {
  KeyValues columns = report.to_key_values();
  columns.merge(extra);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  std::string header, row;
  for (const auto& [k, v] : columns.pairs()) {
    header += (header.empty() ? "" : ",") + k;
    row += (row.empty() ? "" : ",") + v;
  }
  out << header << '\n' << row << '\n';
  if (!out) throw IoError("failed writing " + path);
}

inline void write_per_horizon_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "step,mse,mae\n";
  for (std::size_t h = 0; h < report.per_horizon_mse.size(); ++h)
    out << h + 1 << ',' << report.per_horizon_mse[h] << ',' << report.per_horizon_mae[h] << '\n';
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace modex
