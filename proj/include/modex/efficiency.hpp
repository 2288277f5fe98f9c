#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "modex/data.hpp"
#include "modex/key_values.hpp"
#include "modex/memory.hpp"
#include "modex/model.hpp"

namespace modex::efficiency {

/// Closed-form parameter count; equals the enumeration of a constructed model.
inline std::uint64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t L = cfg.lookback, H = cfg.horizon, D = cfg.hidden_dim, E = cfg.num_experts;
  const std::uint64_t square = D * D + D;
  std::uint64_t total = L * D + D + D * H + H;
  if (cfg.translation) total += D;
  if (cfg.revin_affine) total += 2 * cfg.num_variates;
  std::uint64_t block = 0;
  switch (cfg.variant) {
    case Variant::plain_stack:
      block = square;
      break;
    case Variant::modex:
      for (std::size_t depth : cfg.expert_depths) block += depth * square;
      block += D * E + E;
      break;
    case Variant::dense:
      block = E * square + D * E + E;
      break;
  }
  return total + cfg.num_blocks * block;
}

template <class T>
std::uint64_t enumerate_params(const BasicModel<T>& model) {
  std::uint64_t total = 0;
  for (const auto& e : model.params()) total += e.value.size();
  return total;
}

/// Forward FLOPs for one variate of one window. A multiply-accumulate is 2
/// FLOPs with the bias add folded in; elementwise ops (translation, GELU,
/// gate products, residual, softmax) are 1 FLOP per element. RevIN statistics
/// and normalization cost L MACs; denormalization is folded into the head.
inline std::uint64_t flops_per_token(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t L = cfg.lookback, H = cfg.horizon, D = cfg.hidden_dim, E = cfg.num_experts;
  const std::uint64_t act = cfg.activation == Activation::gelu ? D : 0;
  std::uint64_t macs = L * D + D * H;
  std::uint64_t elementwise = 0;
  if (cfg.revin) macs += L;
  if (cfg.translation) elementwise += D;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    switch (cfg.variant) {
      case Variant::plain_stack:
        macs += D * D;
        elementwise += act;
        break;
      case Variant::modex:
        for (std::size_t depth : cfg.expert_depths) {
          macs += depth * D * D;
          elementwise += (depth - 1) * act;
        }
        break;
      case Variant::dense:
        macs += E * D * D;
        elementwise += (E - 1) * act;
        break;
    }
    if (cfg.variant != Variant::plain_stack) {
      macs += D * E + E * D;  // router, gate-weighted sum
      elementwise += 3 * E + D;  // softmax, residual
    }
  }
  return 2 * macs + elementwise;
}

inline std::uint64_t estimate_flops(const ModelConfig& cfg, std::uint64_t num_variates, std::uint64_t batch) {
  return flops_per_token(cfg) * num_variates * batch;
}

struct LineFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("fit_line needs at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LineFit fit;
  fit.slope = sxx > 0 ? sxy / sxx : 0;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (fit.slope * x[i] + fit.intercept);
    ss_res += r * r;
  }
  fit.r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

struct MemoryPoint {
  std::size_t num_variates = 0;
  std::size_t peak_bytes = 0;
};

/// Peak tensor bytes above the pre-call baseline during one forward (and
/// optionally backward) pass on random inputs of shape [batch, N, L].
template <class T>
std::size_t measure_peak(const BasicModel<T>& model, std::size_t num_variates, std::size_t batch,
                         bool with_backward, std::uint64_t seed = 0) {
  BasicModel<T> local = model;
  for (auto& e : local.params()) e.value.drop_grad();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  auto& counter = AllocationCounter::instance();
  const std::size_t baseline = counter.current();
  counter.reset_peak();
  {
    Tensor<T> x({batch, num_variates, local.config().lookback});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(g(rng));
    if (with_backward) {
      Tape<T> tape;
      const Var<T> out = *local.forward(tape.input(x)).output;
      tape.backward(ops::mean(out));
    } else {
      Tape<T> tape(false);
      local.forward(tape.input(x));
    }
  }
  return counter.peak() - baseline;
}

/// Forward+backward peak memory for each N, in order.
template <class T>
std::vector<MemoryPoint> memory_sweep(const ModelConfig& cfg, const std::vector<std::size_t>& n_list,
                                      std::size_t batch = 1) {
  if (n_list.empty()) throw ConfigError("memory sweep needs at least one N");
  if (!std::is_sorted(n_list.begin(), n_list.end())) throw ConfigError("memory sweep N list must be ascending");
  std::vector<MemoryPoint> points;
  for (std::size_t n : n_list) {
    ModelConfig c = cfg;
    c.num_variates = n;
    try {
      const BasicModel<T> model(c);
      points.push_back({n, measure_peak(model, n, batch, true)});
    } catch (const std::bad_alloc&) {
      throw NumericalError("allocation failed in memory sweep at N=" + std::to_string(n));
    }
  }
  return points;
}

struct Timing {
  std::vector<double> raw;
  double median = 0;
};

inline double median(std::vector<double> values) {
  if (values.empty()) throw UsageError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

/// Wall time of full passes over `windows`, batching as evaluation does.
template <class T>
Timing time_inference(const BasicModel<T>& model, const data::WindowSet& windows, std::size_t repeats,
                      std::size_t batch_size = 256) {
  if (repeats == 0) throw ConfigError("repeats must be positive");
  const auto batches = data::batch_indices(windows.size(), batch_size);
  Timing timing;
  double sink = 0;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto begin = std::chrono::steady_clock::now();
    for (const auto& idx : batches) sink += static_cast<double>(model.predict(windows.batch<T>(idx).x)[0]);
    timing.raw.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count());
  }
  timing.median = median(timing.raw);
  if (sink != sink) throw NumericalError("inference produced NaN");
  return timing;
}

inline KeyValues environment_metadata() {
  KeyValues kv;
#if defined(__clang__)
  kv.set("compiler", "clang " __clang_version__);
#elif defined(__GNUC__)
  kv.set("compiler", "gcc " __VERSION__);
#else
  kv.set("compiler", "unknown");
#endif
#ifdef NDEBUG
  kv.set("build", "release");
#else
  kv.set("build", "debug");
#endif
  kv.set("threads_used", "1");
  kv.set("hardware_threads", std::to_string(std::thread::hardware_concurrency()));
  return kv;
}

struct CostReport {
  std::uint64_t param_count = 0;
  std::uint64_t flops_per_token = 0;
  std::uint64_t flops_per_batch = 0;
  std::size_t peak_bytes = 0;
  double infer_seconds = 0;
};

template <class T>
CostReport cost_report(const BasicModel<T>& model, std::size_t num_variates, std::size_t batch) {
  CostReport r;
  r.param_count = count_params(model.config());
  r.flops_per_token = flops_per_token(model.config());
  r.flops_per_batch = estimate_flops(model.config(), num_variates, batch);
  r.peak_bytes = measure_peak(model, num_variates, batch, false);
  return r;
}

inline void write_memsweep_csv(const std::string& path, const std::vector<MemoryPoint>& points) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "N,peak_bytes\n";
  for (const auto& p : points) out << p.num_variates << ',' << p.peak_bytes << '\n';
  if (!out) throw IoError("failed writing " + path);
}

inline void write_timing_csv(const std::string& path, const Timing& timing, const KeyValues& env) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(9);
  out << "repeat,seconds\n";
  for (std::size_t i = 0; i < timing.raw.size(); ++i) out << i + 1 << ',' << timing.raw[i] << '\n';
  out << "median," << timing.median << '\n';
  for (const auto& [k, v] : env.pairs()) out << "# " << k << '=' << v << '\n';
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace modex::efficiency
