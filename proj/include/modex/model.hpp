#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "modex/config.hpp"
#include "modex/ops.hpp"
#include "modex/param_store.hpp"

namespace modex {

/// Per-token window statistics, kept on the tape so denormalization (and any
/// Jacobian through it) sees them as functions of the input.
template <class T>
struct RevinState {
  Var<T> mean;   // [..., 1]
  Var<T> stdev;  // [..., 1], clamped to >= revin_eps
};

// How normalization statistics enter the differentiated path.
enum class RevinGrad { through_stats, frozen_stats };

template <class T>
struct BlockTrace {
  Var<T> gates;                // [..., E]; absent for plain_stack
  std::vector<Var<T>> experts; // h_j(z), each [..., D]
};

template <class T>
struct ForwardTrace {
  Var<T> normalized;
  std::optional<RevinState<T>> revin;
  // features[l] = G_l(x): l = 0 is embedding (+ translation), l >= 1 block outputs.
  std::vector<Var<T>> features;
  std::vector<BlockTrace<T>> blocks;
  std::optional<Var<T>> output;
};

struct ForwardOptions {
  RevinGrad revin_grad = RevinGrad::through_stats;
  // Stop after producing G_l; the prediction head is skipped.
  std::optional<std::size_t> stop_after_layer;
};

/// Forecasting model: RevIN -> shared linear embedding (+ translation) ->
/// num_blocks backbone blocks -> shared linear head -> RevIN inverse.
///
/// Inputs are [B, N, L] windows; every variate is an independent token that
/// shares all weights, so the model maps [B, N, L] to [B, N, H].
template <class T>
class BasicModel {
 public:
  using Scalar = T;

  explicit BasicModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    build();
  }

  BasicModel(const BasicModel&) = default;
  BasicModel& operator=(const BasicModel&) = default;
  BasicModel(BasicModel&&) noexcept = default;
  BasicModel& operator=(BasicModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  std::size_t num_layers() const { return config_.num_blocks; }

  // ---- tape-level components -------------------------------------------

  std::pair<Var<T>, std::optional<RevinState<T>>> revin_normalize(
      Var<T> x, RevinGrad mode = RevinGrad::through_stats) const {
    if (!config_.revin) return {x, std::nullopt};
    if (x.value().cols() < 2) {
      throw DimensionError("RevIN needs at least 2 time steps, got shape " +
                           shape_string(x.shape()));
    }
    Tape<T>& tape = *x.tape;
    const T eps = static_cast<T>(config_.revin_eps);
    RevinState<T> state;
    if (mode == RevinGrad::through_stats) {
      state.mean = ops::row_mean(x);
      Var<T> centered = ops::sub_col(x, state.mean);
      state.stdev = ops::sqrt_clamped(ops::row_mean(ops::square(centered)), eps);
    } else {
      Tensor<T> mean, stdev;
      window_stats(x.value(), eps, mean, stdev);
      state.mean = tape.input(std::move(mean));
      state.stdev = tape.input(std::move(stdev));
    }
    Var<T> out = ops::div_col(ops::sub_col(x, state.mean), state.stdev);
    if (config_.revin_affine) {
      out = ops::variate_affine(out, bind(tape, "revin.scale"), bind(tape, "revin.shift"));
    }
    return {out, state};
  }

  Var<T> revin_denormalize(Var<T> y, const RevinState<T>& state) const {
    Tape<T>& tape = *y.tape;
    if (config_.revin_affine) {
      y = ops::variate_affine_inverse(y, bind(tape, "revin.scale"), bind(tape, "revin.shift"));
    }
    return ops::add_col(ops::mul_col(y, state.stdev, 0), state.mean);
  }

  Var<T> embed(Var<T> x_norm) const {
    if (x_norm.value().cols() != config_.lookback) {
      throw DimensionError("embed: expected last dim " + std::to_string(config_.lookback) +
                           ", got shape " + shape_string(x_norm.shape()));
    }
    Tape<T>& tape = *x_norm.tape;
    Var<T> z = ops::linear(x_norm, bind(tape, "embed.weight"), bind(tape, "embed.bias"));
    if (config_.translation) z = ops::add_row_vector(z, bind(tape, "translation"));
    return z;
  }

  // One backbone block. For modex/dense: z + sum_j p_j(z) h_j(z) with a
  // token-wise softmax router. For plain_stack: act(W z + b).
  Var<T> block(std::size_t index, Var<T> z, BlockTrace<T>* trace = nullptr) const {
    if (index >= config_.num_blocks) {
      throw UsageError("block index " + std::to_string(index) + " out of range");
    }
    if (z.value().cols() != config_.hidden_dim) {
      throw DimensionError("block: expected last dim " + std::to_string(config_.hidden_dim) +
                           ", got shape " + shape_string(z.shape()));
    }
    Tape<T>& tape = *z.tape;
    const std::string prefix = "block" + std::to_string(index) + ".";
    if (config_.variant == Variant::plain_stack) {
      return activate(ops::linear(z, bind(tape, prefix + "weight"), bind(tape, prefix + "bias")));
    }

    Var<T> gates = ops::softmax(
        ops::linear(z, bind(tape, prefix + "router.weight"), bind(tape, prefix + "router.bias")));
    std::vector<Var<T>> experts;
    experts.reserve(config_.num_experts);
    if (config_.variant == Variant::modex) {
      for (std::size_t j = 0; j < config_.num_experts; ++j) {
        const std::string ep = prefix + "expert" + std::to_string(j) + ".";
        Var<T> h = z;
        for (std::size_t d = 0; d < config_.expert_depths[j]; ++d) {
          if (d > 0) h = activate(h);
          const std::string lp = ep + "linear" + std::to_string(d) + ".";
          h = ops::linear(h, bind(tape, lp + "weight"), bind(tape, lp + "bias"));
        }
        experts.push_back(h);
      }
    } else {
      Var<T> h = z;
      for (std::size_t d = 0; d < config_.num_experts; ++d) {
        if (d > 0) h = activate(h);
        const std::string lp = prefix + "shared.linear" + std::to_string(d) + ".";
        h = ops::linear(h, bind(tape, lp + "weight"), bind(tape, lp + "bias"));
        experts.push_back(h);
      }
    }

    Var<T> mix = ops::mul_col(experts[0], gates, 0);
    for (std::size_t j = 1; j < experts.size(); ++j)
      mix = ops::add(mix, ops::mul_col(experts[j], gates, j));
    if (trace) {
      trace->gates = gates;
      trace->experts = experts;
    }
    return ops::add(z, mix);
  }

  Var<T> predict_head(Var<T> z, const std::optional<RevinState<T>>& state) const {
    if (z.value().cols() != config_.hidden_dim) {
      throw DimensionError("predict_head: expected last dim " +
                           std::to_string(config_.hidden_dim) + ", got shape " +
                           shape_string(z.shape()));
    }
    if (config_.revin && !state) {
      throw UsageError("predict_head: RevIN is enabled but no normalization state was given");
    }
    Tape<T>& tape = *z.tape;
    Var<T> y = ops::linear(z, bind(tape, "head.weight"), bind(tape, "head.bias"));
    if (config_.revin) y = revin_denormalize(y, *state);
    return y;
  }

  ForwardTrace<T> forward(Var<T> x, const ForwardOptions& opts = {}) const {
    const Tensor<T>& xv = x.value();
    if (xv.cols() != config_.lookback) {
      throw DimensionError("forward: expected input [B,N," + std::to_string(config_.lookback) +
                           "], got " + shape_string(xv.shape()));
    }
    if (opts.stop_after_layer && *opts.stop_after_layer > config_.num_blocks) {
      throw UsageError("layer index " + std::to_string(*opts.stop_after_layer) +
                       " out of range [0, " + std::to_string(config_.num_blocks) + "]");
    }
    ForwardTrace<T> trace;
    auto [normalized, state] = revin_normalize(x, opts.revin_grad);
    trace.normalized = normalized;
    trace.revin = state;
    Var<T> z = embed(normalized);
    trace.features.push_back(z);
    const std::size_t last = opts.stop_after_layer.value_or(config_.num_blocks);
    for (std::size_t b = 0; b < last; ++b) {
      BlockTrace<T> bt;
      z = block(b, z, &bt);
      trace.blocks.push_back(bt);
      trace.features.push_back(z);
    }
    if (!opts.stop_after_layer) trace.output = predict_head(z, state);
    return trace;
  }

  // ---- value-level conveniences (untracked) ----------------------------

  Tensor<T> predict(const Tensor<T>& x) const {
    Tape<T> tape(false);
    return forward(tape.input(x)).output->value();
  }

  // G_l(x) for 0 <= l <= num_blocks.
  Tensor<T> feature_probe(const Tensor<T>& x, std::size_t layer,
                          RevinGrad mode = RevinGrad::through_stats) const {
    Tape<T> tape(false);
    ForwardOptions opts;
    opts.revin_grad = mode;
    opts.stop_after_layer = layer;
    return forward(tape.input(x), opts).features.at(layer).value();
  }

  // Raw per-expert outputs h_j(z) of one block, for feature-diversity export.
  std::vector<Tensor<T>> expert_features(const Tensor<T>& x, std::size_t block_index) const {
    if (config_.variant == Variant::plain_stack) {
      throw UsageError("plain_stack blocks have no experts");
    }
    Tape<T> tape(false);
    ForwardOptions opts;
    opts.stop_after_layer = block_index + 1;
    ForwardTrace<T> trace = forward(tape.input(x), opts);
    std::vector<Tensor<T>> out;
    for (const Var<T>& h : trace.blocks.at(block_index).experts) out.push_back(h.value());
    return out;
  }

  Tensor<T> gates(const Tensor<T>& x, std::size_t block_index) const {
    if (config_.variant == Variant::plain_stack) throw UsageError("plain_stack has no router");
    Tape<T> tape(false);
    ForwardOptions opts;
    opts.stop_after_layer = block_index + 1;
    return forward(tape.input(x), opts).blocks.at(block_index).gates.value();
  }

  bool parameters_finite() const {
    for (const auto& e : params_)
      if (!e.value.all_finite()) return false;
    return true;
  }

  // Population mean/std per token, std clamped to eps.
  static void window_stats(const Tensor<T>& x, T eps, Tensor<T>& mean, Tensor<T>& stdev) {
    Shape s = x.shape();
    s.back() = 1;
    mean = Tensor<T>(s);
    stdev = Tensor<T>(s);
    const std::size_t cols = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
      T acc = T(0);
      for (std::size_t c = 0; c < cols; ++c) acc += x.at(r, c);
      const T mu = acc / T(cols);
      T sq = T(0);
      for (std::size_t c = 0; c < cols; ++c) {
        const T d = x.at(r, c) - mu;
        sq += d * d;
      }
      mean[r] = mu;
      stdev[r] = std::max(std::sqrt(sq / T(cols)), eps);
    }
  }

 private:
  Var<T> activate(Var<T> h) const {
    return config_.activation == Activation::gelu ? ops::gelu(h) : h;
  }

  // Parameters enter a tracking tape as differentiable leaves and any other
  // tape as in-place constants.
  Var<T> bind(Tape<T>& tape, const std::string& name) const {
    const Tensor<T>& p = params_.get(name);
    if (tape.track_params()) return tape.param(const_cast<Tensor<T>&>(p));
    return tape.constant_ref(p);
  }

  void build() {
    std::mt19937_64 rng(config_.seed);
    const std::size_t L = config_.lookback, H = config_.horizon, D = config_.hidden_dim;
    auto uniform = [&](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor<T> t(std::move(shape));
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
      return t;
    };
    auto add_linear = [&](const std::string& prefix, std::size_t din, std::size_t dout) {
      params_.add(prefix + "weight", uniform({din, dout}, din));
      params_.add(prefix + "bias", uniform({dout}, din));
    };

    if (config_.revin_affine) {
      params_.add("revin.scale", Tensor<T>({config_.num_variates}, T(1)));
      params_.add("revin.shift", Tensor<T>({config_.num_variates}, T(0)));
    }
    add_linear("embed.", L, D);
    if (config_.translation) params_.add("translation", Tensor<T>({D}, T(0)));
    for (std::size_t b = 0; b < config_.num_blocks; ++b) {
      const std::string prefix = "block" + std::to_string(b) + ".";
      switch (config_.variant) {
        case Variant::plain_stack:
          add_linear(prefix, D, D);
          break;
        case Variant::modex:
          for (std::size_t j = 0; j < config_.num_experts; ++j)
            for (std::size_t d = 0; d < config_.expert_depths[j]; ++d)
              add_linear(prefix + "expert" + std::to_string(j) + ".linear" + std::to_string(d) + ".",
                         D, D);
          break;
        case Variant::dense:
          for (std::size_t d = 0; d < config_.num_experts; ++d)
            add_linear(prefix + "shared.linear" + std::to_string(d) + ".", D, D);
          break;
      }
      if (config_.variant != Variant::plain_stack) {
        params_.add(prefix + "router.weight", Tensor<T>({D, config_.num_experts}, T(0)));
        params_.add(prefix + "router.bias", Tensor<T>({config_.num_experts}, T(0)));
      }
    }
    add_linear("head.", D, H);
  }

  ModelConfig config_;
  ParamStore<T> params_;
};

using Model = BasicModel<double>;
using ModelF32 = BasicModel<float>;

}  // namespace modex
