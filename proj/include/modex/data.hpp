#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "modex/key_values.hpp"
#include "modex/tensor.hpp"

namespace modex::data {

/// Variates x time matrix plus informational timestamps.
struct MultivariateSeries {
  std::vector<std::string> timestamps;
  std::vector<std::string> variate_names;
  std::vector<double> values;  // [variate][time], row-major
  std::size_t length = 0;

  std::size_t num_variates() const { return variate_names.size(); }
  double& at(std::size_t variate, std::size_t t) { return values[variate * length + t]; }
  double at(std::size_t variate, std::size_t t) const { return values[variate * length + t]; }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(KeyValues::trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

/// Parses comma-separated text with a header row. The column named
/// `date_column` (or the first column when empty) holds timestamps; every
/// other column is a variate in file order.
inline MultivariateSeries parse_csv(const std::string& text, const std::string& origin = "csv",
                                    const std::string& date_column = "date") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return origin + ":" + std::to_string(line_no); };

  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!KeyValues::trim(line).empty()) {
      header = detail::split_csv_line(line);
      break;
    }
  }
  if (header.empty()) throw ConfigError(origin + ": empty file");
  std::size_t date_index = 0;
  if (!date_column.empty()) {
    auto it = std::find(header.begin(), header.end(), date_column);
    if (it == header.end()) throw ConfigError(origin + ": no '" + date_column + "' column in header");
    date_index = static_cast<std::size_t>(it - header.begin());
  }
  MultivariateSeries series;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != date_index) series.variate_names.push_back(header[c]);
  if (series.variate_names.empty()) throw ConfigError(origin + ": no variate columns");

  const std::size_t n = series.variate_names.size();
  std::vector<std::vector<double>> columns(n);
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (KeyValues::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ConfigError(where() + ": expected " + std::to_string(header.size()) + " cells, got " +
                        std::to_string(cells.size()));
    }
    std::size_t v = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == date_index) {
        series.timestamps.push_back(cells[c]);
        continue;
      }
      const std::string& cell = cells[c];
      char* end = nullptr;
      const double value = std::strtod(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size() || !std::isfinite(value)) {
        throw ConfigError(where() + ": non-numeric value '" + cell + "' in column '" + header[c] + "'");
      }
      columns[v++].push_back(value);
    }
  }
  if (series.timestamps.empty()) throw ConfigError(origin + ": no data rows");
  series.length = series.timestamps.size();
  series.values.reserve(n * series.length);
  for (const auto& col : columns) series.values.insert(series.values.end(), col.begin(), col.end());
  return series;
}

inline MultivariateSeries load_csv(const std::string& path, const std::string& date_column = "date") {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open data file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path, date_column);
}

inline void write_csv(const MultivariateSeries& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "date";
  for (const auto& name : series.variate_names) out << ',' << name;
  out << '\n';
  out.precision(10);
  for (std::size_t t = 0; t < series.length; ++t) {
    out << series.timestamps[t];
    for (std::size_t v = 0; v < series.num_variates(); ++v) out << ',' << series.at(v, t);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

// ---- splits -----------------------------------------------------------------

enum class SplitPreset { ett_hourly, ett_minutely, ratios };

inline SplitPreset parse_preset(const std::string& text) {
  if (text == "ett_hourly" || text == "etth") return SplitPreset::ett_hourly;
  if (text == "ett_minutely" || text == "ettm") return SplitPreset::ett_minutely;
  if (text == "ratios" || text == "custom") return SplitPreset::ratios;
  throw ConfigError("unknown split preset '" + text + "' (expected ett_hourly, ett_minutely, ratios)");
}

inline std::string to_string(SplitPreset p) {
  switch (p) {
    case SplitPreset::ett_hourly: return "ett_hourly";
    case SplitPreset::ett_minutely: return "ett_minutely";
    case SplitPreset::ratios: return "ratios";
  }
  return "?";
}

struct SplitPlan {
  SplitPreset preset = SplitPreset::ratios;
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

/// Chronological [0, train_end) / [train_end, val_end) / [val_end, test_end)
/// boundaries and the per-variate scaler fit on the train segment.
struct SplitSpec {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t test_end = 0;
  std::vector<double> mean;
  std::vector<double> stdev;
};

inline constexpr double kScalerStdFloor = 1e-8;

inline SplitSpec make_splits(const MultivariateSeries& series, const SplitPlan& plan, std::size_t lookback,
                             std::size_t horizon) {
  SplitSpec split;
  const std::size_t T = series.length;
  if (plan.preset == SplitPreset::ratios) {
    if (plan.train <= 0 || plan.val <= 0 || plan.test <= 0) {
      throw ConfigError("split ratios must be positive");
    }
    if (plan.train + plan.val + plan.test > 1.0 + 1e-9) {
      throw ConfigError("split ratios sum to more than 1");
    }
    const auto train_len = static_cast<std::size_t>(std::floor(T * plan.train + 1e-9));
    const auto test_len = static_cast<std::size_t>(std::floor(T * plan.test + 1e-9));
    split.train_end = train_len;
    split.test_end = T;
    split.val_end = T - test_len;
  } else {
    // 12 / 4 / 4 months of 30 days.
    const std::size_t per_hour = plan.preset == SplitPreset::ett_minutely ? 4 : 1;
    const std::size_t month = 30 * 24 * per_hour;
    split.train_end = 12 * month;
    split.val_end = 16 * month;
    split.test_end = 20 * month;
    if (T < split.test_end) {
      throw ConfigError("series has " + std::to_string(T) + " steps; the ETT preset needs " +
                        std::to_string(split.test_end));
    }
  }
  const std::size_t need = lookback + horizon;
  const std::size_t starts[3] = {0, split.train_end, split.val_end};
  const std::size_t ends[3] = {split.train_end, split.val_end, split.test_end};
  const char* names[3] = {"train", "val", "test"};
  for (int s = 0; s < 3; ++s) {
    if (ends[s] < starts[s] || ends[s] - starts[s] < need) {
      throw ConfigError(std::string(names[s]) + " segment has " + std::to_string(ends[s] - starts[s]) +
                        " steps, fewer than lookback + horizon = " + std::to_string(need));
    }
  }

  const std::size_t n = series.num_variates();
  split.mean.assign(n, 0.0);
  split.stdev.assign(n, 1.0);
  for (std::size_t v = 0; v < n; ++v) {
    double acc = 0;
    for (std::size_t t = 0; t < split.train_end; ++t) acc += series.at(v, t);
    const double mu = acc / static_cast<double>(split.train_end);
    double sq = 0;
    for (std::size_t t = 0; t < split.train_end; ++t) {
      const double d = series.at(v, t) - mu;
      sq += d * d;
    }
    split.mean[v] = mu;
    split.stdev[v] = std::max(std::sqrt(sq / static_cast<double>(split.train_end)), kScalerStdFloor);
  }
  return split;
}

inline MultivariateSeries standardize(const MultivariateSeries& series, const SplitSpec& split) {
  MultivariateSeries out = series;
  for (std::size_t v = 0; v < series.num_variates(); ++v)
    for (std::size_t t = 0; t < series.length; ++t)
      out.at(v, t) = (series.at(v, t) - split.mean[v]) / split.stdev[v];
  return out;
}

// ---- windows ----------------------------------------------------------------

template <class T = double>
struct WindowBatch {
  Tensor<T> x;  // [B, N, L]
  Tensor<T> y;  // [B, N, H]
  std::vector<std::size_t> starts;
};

enum class Segment { train, val, test };

/// Stride-1 windows whose targets lie in [begin, end). With `borderless`,
/// inputs may start up to `lookback` steps before `begin`.
class WindowSet {
 public:
  WindowSet(const MultivariateSeries* series, std::size_t lookback, std::size_t horizon, std::size_t begin,
            std::size_t end, bool borderless)
      : series_(series), lookback_(lookback), horizon_(horizon) {
    first_ = borderless ? (begin >= lookback ? begin - lookback : 0) : begin;
    if (end >= first_ + lookback + horizon) count_ = end - lookback - horizon - first_ + 1;
  }

  std::size_t size() const { return count_; }
  std::size_t lookback() const { return lookback_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t num_variates() const { return series_->num_variates(); }
  // Input start of window i; its target begins at start + lookback.
  std::size_t start(std::size_t i) const { return first_ + i; }

  template <class T = double>
  WindowBatch<T> batch(std::span<const std::size_t> indices) const {
    const std::size_t B = indices.size(), N = num_variates(), L = lookback_, H = horizon_;
    WindowBatch<T> out{Tensor<T>({B, N, L}), Tensor<T>({B, N, H}), {}};
    for (std::size_t b = 0; b < B; ++b) {
      if (indices[b] >= count_) throw UsageError("window index out of range");
      const std::size_t s = start(indices[b]);
      out.starts.push_back(s);
      for (std::size_t v = 0; v < N; ++v) {
        for (std::size_t t = 0; t < L; ++t) out.x[(b * N + v) * L + t] = static_cast<T>(series_->at(v, s + t));
        for (std::size_t t = 0; t < H; ++t)
          out.y[(b * N + v) * H + t] = static_cast<T>(series_->at(v, s + L + t));
      }
    }
    return out;
  }

  template <class T = double>
  WindowBatch<T> all() const {
    std::vector<std::size_t> idx(count_);
    std::iota(idx.begin(), idx.end(), 0);
    return batch<T>(idx);
  }

 private:
  const MultivariateSeries* series_;
  std::size_t lookback_, horizon_;
  std::size_t first_ = 0;
  std::size_t count_ = 0;
};

/// Splits [0, count) into batches; the last incomplete batch is kept. With a
/// seed the order is a deterministic shuffle, otherwise chronological.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                           std::optional<std::uint64_t> shuffle_seed = {}) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < count; i += batch_size)
    batches.emplace_back(order.begin() + i, order.begin() + std::min(count, i + batch_size));
  return batches;
}

/// A loaded series with its split, scaler and (optionally) standardized values.
class Dataset {
 public:
  Dataset(MultivariateSeries raw, const SplitPlan& plan, std::size_t lookback, std::size_t horizon,
          bool standardize_values = true)
      : raw_(std::move(raw)), lookback_(lookback), horizon_(horizon) {
    split_ = make_splits(raw_, plan, lookback, horizon);
    scaled_ = standardize_values ? standardize(raw_, split_) : raw_;
  }

  Dataset(const Dataset&) = delete;
  Dataset& operator=(const Dataset&) = delete;

  const MultivariateSeries& raw() const { return raw_; }
  const MultivariateSeries& values() const { return scaled_; }
  const SplitSpec& split() const { return split_; }
  std::size_t num_variates() const { return raw_.num_variates(); }
  std::size_t lookback() const { return lookback_; }
  std::size_t horizon() const { return horizon_; }

  WindowSet windows(Segment segment) const {
    switch (segment) {
      case Segment::train: return {&scaled_, lookback_, horizon_, 0, split_.train_end, false};
      case Segment::val: return {&scaled_, lookback_, horizon_, split_.train_end, split_.val_end, true};
      case Segment::test: return {&scaled_, lookback_, horizon_, split_.val_end, split_.test_end, true};
    }
    throw UsageError("bad segment");
  }

 private:
  MultivariateSeries raw_;
  MultivariateSeries scaled_;
  SplitSpec split_;
  std::size_t lookback_, horizon_;
};

// ---- registry -----------------------------------------------------------------

struct DatasetEntry {
  std::string name;
  std::string file;
  SplitPreset preset = SplitPreset::ratios;
  std::size_t num_variates = 0;
};

/// Name -> file/preset table. Built-in ETT/Weather/Electricity entries can be
/// overridden or extended by `registry.txt` in the data directory, one
/// `name=file,preset,N` per line.
class Registry {
 public:
  explicit Registry(std::string data_dir) : data_dir_(std::move(data_dir)) {
    entries_ = {
        {"etth1", "ETTh1.csv", SplitPreset::ett_hourly, 7},
        {"etth2", "ETTh2.csv", SplitPreset::ett_hourly, 7},
        {"ettm1", "ETTm1.csv", SplitPreset::ett_minutely, 7},
        {"ettm2", "ETTm2.csv", SplitPreset::ett_minutely, 7},
        {"weather", "weather.csv", SplitPreset::ratios, 21},
        {"electricity", "electricity.csv", SplitPreset::ratios, 321},
    };
    const auto extra = std::filesystem::path(data_dir_) / "registry.txt";
    if (!data_dir_.empty() && std::filesystem::exists(extra)) {
      const KeyValues table = KeyValues::load(extra.string());
      for (const auto& [name, spec] : table.pairs()) {
        const auto parts = parse::split(spec);
        if (parts.size() != 3) throw ConfigError("registry entry '" + name + "' needs file,preset,N");
        add({name, parts[0], parse_preset(parts[1]), parse::unsigned_int(name, parts[2])});
      }
    }
  }

  static Registry from_environment() {
    const char* dir = std::getenv("MODEX_DATA_DIR");
    return Registry(dir ? dir : "");
  }

  void add(DatasetEntry entry) {
    for (DatasetEntry& e : entries_) {
      if (e.name == entry.name) {
        e = std::move(entry);
        return;
      }
    }
    entries_.push_back(std::move(entry));
  }

  const DatasetEntry& find(const std::string& name) const {
    for (const DatasetEntry& e : entries_)
      if (e.name == name) return e;
    throw ConfigError("unknown dataset '" + name + "'; registered datasets: " + names());
  }

  std::string path_of(const DatasetEntry& e) const {
    const std::filesystem::path file(e.file);
    if (file.is_absolute() || data_dir_.empty()) return file.string();
    return (std::filesystem::path(data_dir_) / file).string();
  }

  bool available(const std::string& name) const {
    return std::filesystem::exists(path_of(find(name)));
  }

  std::string names() const {
    std::string out;
    for (const DatasetEntry& e : entries_) out += (out.empty() ? "" : ", ") + e.name;
    return out;
  }

  const std::string& data_dir() const { return data_dir_; }
  const std::vector<DatasetEntry>& entries() const { return entries_; }

 private:
  std::string data_dir_;
  std::vector<DatasetEntry> entries_;
};

// ---- synthetic series -------------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_variates = 7;
  std::size_t length = 17420;
  std::size_t period = 24;        // daily cycle at hourly sampling
  std::size_t long_period = 168;  // weekly cycle
  double noise = 0.3;
  double drift = 0.02;
  std::uint64_t seed = 7;
  std::size_t minutes_per_step = 60;
};

/// ETT-shaped data: per-variate daily and weekly cycles, a slow random-walk
/// level, AR(1) noise, and a shared load factor mixed into every variate.
inline MultivariateSeries synthetic_series(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MultivariateSeries s;
  s.length = spec.length;
  s.values.assign(spec.num_variates * spec.length, 0.0);
  for (std::size_t v = 0; v < spec.num_variates; ++v)
    s.variate_names.push_back(v + 1 == spec.num_variates ? "OT" : "V" + std::to_string(v));

  std::vector<double> shared(spec.length);
  double level = 0;
  for (std::size_t t = 0; t < spec.length; ++t) {
    level += spec.drift * gauss(rng);
    shared[t] = level + std::sin(2 * std::numbers::pi * t / spec.period);
  }
  for (std::size_t v = 0; v < spec.num_variates; ++v) {
    const double amp = 0.5 + 1.5 * unif(rng), amp_long = 0.3 + unif(rng);
    const double phase = 2 * std::numbers::pi * unif(rng), phase_long = 2 * std::numbers::pi * unif(rng);
    const double mix = 0.3 + 0.7 * unif(rng), offset = 10 * unif(rng);
    double walk = 0, ar = 0;
    for (std::size_t t = 0; t < spec.length; ++t) {
      walk += spec.drift * gauss(rng);
      ar = 0.7 * ar + spec.noise * gauss(rng);
      s.at(v, t) = offset + amp * std::sin(2 * std::numbers::pi * t / spec.period + phase) +
                   amp_long * std::sin(2 * std::numbers::pi * t / spec.long_period + phase_long) + walk +
                   mix * shared[t] + ar;
    }
  }
  const std::chrono::sys_days origin = std::chrono::year{2016} / 7 / 1;
  for (std::size_t t = 0; t < spec.length; ++t) {
    const std::size_t minutes = t * spec.minutes_per_step;
    const std::chrono::year_month_day ymd{origin + std::chrono::days(minutes / (24 * 60))};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02zu:%02zu:00", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), (minutes / 60) % 24,
                  minutes % 60);
    s.timestamps.emplace_back(buf);
  }
  return s;
}

}  // namespace modex::data
