#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modex/data.hpp"
#include "modex/model.hpp"

namespace modex::sensitivity {

enum class Mode { abs_rowmean, positive_rowmean, center_row, signed_rowmean };

inline Mode parse_mode(const std::string& text) {
  if (text == "abs_rowmean") return Mode::abs_rowmean;
  if (text == "positive_rowmean") return Mode::positive_rowmean;
  if (text == "center_row") return Mode::center_row;
  if (text == "signed_rowmean") return Mode::signed_rowmean;
  throw ConfigError("unknown attribution mode '" + text +
                    "' (expected abs_rowmean, positive_rowmean, center_row, signed_rowmean)");
}

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::abs_rowmean: return "abs_rowmean";
    case Mode::positive_rowmean: return "positive_rowmean";
    case Mode::center_row: return "center_row";
    case Mode::signed_rowmean: return "signed_rowmean";
  }
  return "?";
}

/// dG_l/dx for one variate token: `rows` = D features, `cols` = L inputs.
struct JacobianBlock {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  JacobianBlock() = default;
  JacobianBlock(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct SensitivityMap {
  std::size_t layer = 0;
  std::vector<double> values;
  std::optional<std::size_t> variate;  // empty: averaged over variates
  std::string input_id;
  Mode mode = Mode::abs_rowmean;
};

/// Column aggregation of a Jacobian into a length-L map.
inline std::vector<double> aggregate(const JacobianBlock& j, Mode mode) {
  std::vector<double> out(j.cols, 0.0);
  if (mode == Mode::center_row) {
    const std::size_t c = j.rows / 2;
    for (std::size_t k = 0; k < j.cols; ++k) out[k] = std::abs(j.at(c, k));
    return out;
  }
  for (std::size_t i = 0; i < j.rows; ++i) {
    for (std::size_t k = 0; k < j.cols; ++k) {
      const double v = j.at(i, k);
      switch (mode) {
        case Mode::abs_rowmean: out[k] += std::abs(v); break;
        case Mode::positive_rowmean: out[k] += std::max(v, 0.0); break;
        case Mode::signed_rowmean: out[k] += v; break;
        case Mode::center_row: break;
      }
    }
  }
  for (double& v : out) v /= static_cast<double>(j.rows);
  return out;
}

namespace detail {

// Accepts [L], [N,L] or [1,N,L]; returns [1,N,L].
template <class T>
Tensor<T> as_window(const Tensor<T>& x, std::size_t lookback) {
  if (x.cols() != lookback || x.rank() > 3 || (x.rank() == 3 && x.shape()[0] != 1)) {
    throw DimensionError("sensitivity: expected one window [N," + std::to_string(lookback) + "], got " +
                         shape_string(x.shape()));
  }
  return x.reshaped({1, x.rows(), lookback});
}

template <class T>
void check_probe(const BasicModel<T>& model, std::size_t layer, std::size_t variate, std::size_t variates) {
  if (layer > model.num_layers()) {
    throw UsageError("layer index " + std::to_string(layer) + " out of range [0, " +
                     std::to_string(model.num_layers()) + "]");
  }
  if (variate >= variates) throw UsageError("variate index " + std::to_string(variate) + " out of range");
  if (!model.parameters_finite()) throw NumericalError("model has non-finite parameters");
}

}  // namespace detail

/// Jacobian of G_l with respect to the whole window: rows indexed (variate,
/// feature), columns (variate, time). Off-diagonal variate blocks are zero for
/// a channel-independent model.
template <class T>
JacobianBlock window_jacobian(const BasicModel<T>& model, const Tensor<T>& window, std::size_t layer,
                              RevinGrad revin = RevinGrad::through_stats) {
  const std::size_t L = model.config().lookback, D = model.config().hidden_dim;
  const Tensor<T> x = detail::as_window(window, L);
  const std::size_t N = x.shape()[1];
  detail::check_probe(model, layer, 0, N);
  Tape<T> tape(false);
  const Var<T> input = tape.input(x, true);
  ForwardOptions opts;
  opts.revin_grad = revin;
  opts.stop_after_layer = layer;
  const Var<T> feature = model.forward(input, opts).features.at(layer);
  JacobianBlock jac(N * D, N * L);
  Tensor<T> seed(feature.shape(), T(0));
  for (std::size_t r = 0; r < N * D; ++r) {
    tape.zero_grad();
    seed[r] = T(1);
    tape.backward(feature, seed, false);
    seed[r] = T(0);
    const Tensor<T>& g = tape.grad(input);
    for (std::size_t c = 0; c < N * L; ++c) jac.at(r, c) = static_cast<double>(g[c]);
  }
  return jac;
}

/// dG_l/dx for one variate token via D one-hot-seeded backward passes.
template <class T>
JacobianBlock jacobian(const BasicModel<T>& model, const Tensor<T>& window, std::size_t variate, std::size_t layer,
                       RevinGrad revin = RevinGrad::through_stats) {
  const std::size_t L = model.config().lookback, D = model.config().hidden_dim;
  const Tensor<T> x = detail::as_window(window, L);
  detail::check_probe(model, layer, variate, x.shape()[1]);
  Tape<T> tape(false);
  const Var<T> input = tape.input(x, true);
  ForwardOptions opts;
  opts.revin_grad = revin;
  opts.stop_after_layer = layer;
  const Var<T> feature = model.forward(input, opts).features.at(layer);
  JacobianBlock jac(D, L);
  Tensor<T> seed(feature.shape(), T(0));
  for (std::size_t i = 0; i < D; ++i) {
    tape.zero_grad();
    seed.at(variate, i) = T(1);
    tape.backward(feature, seed, false);
    seed.at(variate, i) = T(0);
    const Tensor<T>& g = tape.grad(input);
    for (std::size_t t = 0; t < L; ++t) jac.at(i, t) = static_cast<double>(g.at(variate, t));
  }
  return jac;
}

/// Central differences on the raw input with step 1e-4 * max(1, |x_t|).
template <class T>
JacobianBlock finite_difference_jacobian(const BasicModel<T>& model, const Tensor<T>& window, std::size_t variate,
                                         std::size_t layer, RevinGrad revin = RevinGrad::through_stats,
                                         double rel_step = 1e-4) {
  const std::size_t L = model.config().lookback, D = model.config().hidden_dim;
  Tensor<T> x = detail::as_window(window, L);
  detail::check_probe(model, layer, variate, x.shape()[1]);
  JacobianBlock jac(D, L);
  for (std::size_t t = 0; t < L; ++t) {
    T& slot = x.at(variate, t);
    const T original = slot;
    const double h = rel_step * std::max(1.0, std::abs(static_cast<double>(original)));
    slot = static_cast<T>(original + h);
    const Tensor<T> plus = model.feature_probe(x, layer, revin);
    slot = static_cast<T>(original - h);
    const Tensor<T> minus = model.feature_probe(x, layer, revin);
    slot = original;
    for (std::size_t i = 0; i < D; ++i)
      jac.at(i, t) = (static_cast<double>(plus.at(variate, i)) - static_cast<double>(minus.at(variate, i))) / (2 * h);
  }
  return jac;
}

template <class T>
SensitivityMap layer_sensitivity(const BasicModel<T>& model, const Tensor<T>& window, std::size_t variate,
                                 std::size_t layer, Mode mode = Mode::abs_rowmean,
                                 RevinGrad revin = RevinGrad::through_stats) {
  SensitivityMap map;
  map.layer = layer;
  map.variate = variate;
  map.mode = mode;
  map.values = aggregate(jacobian(model, window, variate, layer, revin), mode);
  return map;
}

/// Per-variate maps averaged over all variates of the window.
template <class T>
SensitivityMap mean_sensitivity(const BasicModel<T>& model, const Tensor<T>& window, std::size_t layer,
                                Mode mode = Mode::abs_rowmean, RevinGrad revin = RevinGrad::through_stats) {
  const std::size_t N = detail::as_window(window, model.config().lookback).shape()[1];
  SensitivityMap map;
  map.layer = layer;
  map.mode = mode;
  map.values.assign(model.config().lookback, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const auto s = aggregate(jacobian(model, window, n, layer, revin), mode);
    for (std::size_t t = 0; t < s.size(); ++t) map.values[t] += s[t] / static_cast<double>(N);
  }
  return map;
}

template <class T>
SensitivityMap attribution_variants(const BasicModel<T>& model, const Tensor<T>& window, std::size_t variate,
                                    std::size_t layer, Mode mode) {
  return layer_sensitivity(model, window, variate, layer, mode);
}

struct SweepSample {
  std::size_t id = 0;
  Tensor<double> window;               // [N, L]
  std::optional<std::size_t> variate;  // empty: average over variates
};

struct ManifestRow {
  std::size_t sample = 0;
  std::size_t argmax_layer = 0;
  bool tied = false;
  std::vector<double> layer_means;
};

struct SweepResult {
  std::vector<std::size_t> layers;
  std::vector<ManifestRow> rows;
  std::vector<std::string> files;
};

inline std::string heatmap_name(std::size_t sample, std::size_t layer) {
  return "sens_s" + std::to_string(sample) + "_l" + std::to_string(layer) + ".csv";
}

/// Highest mean wins; equal means resolve to the lowest layer.
inline ManifestRow pick_layer(std::size_t sample, const std::vector<std::size_t>& layers,
                              const std::vector<double>& means) {
  ManifestRow row{sample, layers.at(0), false, means};
  double best = means.at(0);
  for (std::size_t k = 1; k < layers.size(); ++k) {
    if (means[k] > best) {
      best = means[k];
      row.argmax_layer = layers[k];
      row.tied = false;
    } else if (means[k] == best) {
      row.tied = true;
    }
  }
  return row;
}

/// Writes sens_s{sample}_l{layer}.csv (t,input,value) per pair and
/// manifest.csv (sample,argmax_layer,mean_l...,tied) into `out_dir`.
template <class T>
SweepResult sensitivity_sweep(const BasicModel<T>& model, const std::vector<SweepSample>& samples,
                              std::vector<std::size_t> layers, const std::string& out_dir,
                              Mode mode = Mode::abs_rowmean, RevinGrad revin = RevinGrad::through_stats) {
  if (layers.empty()) throw ConfigError("sensitivity sweep needs at least one layer");
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir + ": " + ec.message());

  const std::size_t L = model.config().lookback;
  SweepResult result;
  result.layers = layers;
  for (const SweepSample& sample : samples) {
    const Tensor<T> window = sample.window.template cast<T>();
    const std::size_t N = detail::as_window(window, L).shape()[1];
    std::vector<double> input(L, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      if (sample.variate) {
        input[t] = sample.window.at(*sample.variate, t);
      } else {
        for (std::size_t n = 0; n < N; ++n) input[t] += sample.window.at(n, t) / static_cast<double>(N);
      }
    }
    std::vector<double> means;
    for (std::size_t layer : layers) {
      const SensitivityMap map = sample.variate ? layer_sensitivity(model, window, *sample.variate, layer, mode, revin)
                                                : mean_sensitivity(model, window, layer, mode, revin);
      const std::string path = (std::filesystem::path(out_dir) / heatmap_name(sample.id, layer)).string();
      std::ofstream out(path);
      if (!out) throw IoError("cannot write " + path);
      out.precision(17);
      out << "t,input,value\n";
      double total = 0;
      for (std::size_t t = 0; t < L; ++t) {
        out << t << ',' << input[t] << ',' << map.values[t] << '\n';
        total += map.values[t];
      }
      if (!out) throw IoError("failed writing " + path);
      result.files.push_back(path);
      means.push_back(total / static_cast<double>(L));
    }
    result.rows.push_back(pick_layer(sample.id, layers, means));
  }

  const std::string manifest = (std::filesystem::path(out_dir) / "manifest.csv").string();
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest);
  out.precision(17);
  out << "sample,argmax_layer";
  for (std::size_t layer : layers) out << ",mean_l" << layer;
  out << ",tied\n";
  for (const ManifestRow& row : result.rows) {
    out << row.sample << ',' << row.argmax_layer;
    for (double m : row.layer_means) out << ',' << m;
    out << ',' << (row.tied ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("failed writing " + manifest);
  result.files.push_back(manifest);
  return result;
}

// ---- window curation ----------------------------------------------------------

/// R^2 of the least-squares line through the window.
inline double trend_score(std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  double mt = (n - 1) / 2, mx = 0;
  for (double v : x) mx += v / n;
  double stt = 0, stx = 0, sxx = 0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    stt += (t - mt) * (t - mt);
    stx += (t - mt) * (x[t] - mx);
    sxx += (x[t] - mx) * (x[t] - mx);
  }
  return sxx > 0 && stt > 0 ? stx * stx / (stt * sxx) : 0.0;
}

/// Peak autocorrelation over lags [2, len/2] after removing the linear trend.
inline double periodicity_score(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 4) return 0.0;
  const double mt = (n - 1) / 2.0;
  double mx = 0;
  for (double v : x) mx += v / static_cast<double>(n);
  double stt = 0, stx = 0;
  for (std::size_t t = 0; t < n; ++t) {
    stt += (t - mt) * (t - mt);
    stx += (t - mt) * (x[t] - mx);
  }
  const double slope = stx / stt;
  std::vector<double> r(n);
  double energy = 0, total = 0;
  for (std::size_t t = 0; t < n; ++t) {
    r[t] = x[t] - mx - slope * (t - mt);
    energy += r[t] * r[t];
    total += (x[t] - mx) * (x[t] - mx);
  }
  // A residual at roundoff level carries no periodic structure.
  if (energy <= 1e-20 * total || energy <= 0) return 0.0;
  double best = 0;
  for (std::size_t lag = 2; lag <= n / 2; ++lag) {
    double acc = 0;
    for (std::size_t t = 0; t + lag < n; ++t) acc += r[t] * r[t + lag];
    best = std::max(best, acc / energy);
  }
  return best;
}

/// Chooses `count` non-overlapping windows of one variate: alternately the
/// most periodic and the most trending remaining candidates.
inline std::vector<std::size_t> curate_windows(const data::WindowSet& set, std::size_t count, std::size_t variate) {
  if (set.size() == 0) throw ConfigError("cannot curate windows from an empty split");
  const std::size_t L = set.lookback();
  const std::size_t stride = std::max<std::size_t>(1, set.size() / 1024);
  struct Candidate {
    std::size_t index;
    double periodic;
    double trend;
  };
  std::vector<Candidate> candidates;
  for (std::size_t i = 0; i < set.size(); i += stride) {
    const std::vector<std::size_t> one{i};
    const auto batch = set.batch<double>(one);
    std::span<const double> x(&batch.x.at(variate, 0), L);
    candidates.push_back({i, periodicity_score(x), trend_score(x)});
  }
  auto by_periodic = candidates, by_trend = candidates;
  std::stable_sort(by_periodic.begin(), by_periodic.end(),
                   [](const Candidate& a, const Candidate& b) { return a.periodic > b.periodic; });
  std::stable_sort(by_trend.begin(), by_trend.end(),
                   [](const Candidate& a, const Candidate& b) { return a.trend > b.trend; });

  std::vector<std::size_t> chosen;
  auto clear_of_chosen = [&](std::size_t i) {
    for (std::size_t c : chosen)
      if ((c > i ? c - i : i - c) < L) return false;
    return true;
  };
  std::size_t pi = 0, ti = 0;
  while (chosen.size() < count && (pi < by_periodic.size() || ti < by_trend.size())) {
    auto& list = chosen.size() % 2 == 0 ? by_periodic : by_trend;
    std::size_t& cursor = chosen.size() % 2 == 0 ? pi : ti;
    while (cursor < list.size() && !clear_of_chosen(list[cursor].index)) ++cursor;
    if (cursor < list.size()) {
      chosen.push_back(list[cursor++].index);
    } else if (pi >= by_periodic.size() && ti >= by_trend.size()) {
      break;
    } else {
      // This list is exhausted; let the other one fill the slot.
      auto& other = &list == &by_periodic ? by_trend : by_periodic;
      std::size_t& oc = &list == &by_periodic ? ti : pi;
      while (oc < other.size() && !clear_of_chosen(other[oc].index)) ++oc;
      if (oc >= other.size()) break;
      chosen.push_back(other[oc++].index);
    }
  }
  return chosen;
}

}  // namespace modex::sensitivity
