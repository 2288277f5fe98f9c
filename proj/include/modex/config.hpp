#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "modex/key_values.hpp"

namespace modex {

enum class Variant { modex, dense, plain_stack };
enum class Activation { gelu, identity };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::modex: return "modex";
    case Variant::dense: return "dense";
    case Variant::plain_stack: return "plain_stack";
  }
  return "?";
}

inline Variant parse_variant(const std::string& text) {
  if (text == "modex") return Variant::modex;
  if (text == "dense") return Variant::dense;
  if (text == "plain_stack" || text == "plain") return Variant::plain_stack;
  throw ConfigError("unknown variant '" + text + "' (expected modex, dense, plain_stack)");
}

inline std::string to_string(Activation a) {
  return a == Activation::gelu ? "gelu" : "identity";
}

inline Activation parse_activation(const std::string& text) {
  if (text == "gelu") return Activation::gelu;
  if (text == "identity" || text == "linear") return Activation::identity;
  throw ConfigError("unknown activation '" + text + "' (expected gelu, identity)");
}

/// Architecture of a forecasting model.
///
/// For `dense` the experts are the successive outputs of one shared
/// `num_experts`-layer MLP, so expert_depths must read 1..num_experts. For
/// `plain_stack` the router and experts are absent and `num_blocks` counts
/// plain D->D layers.
struct ModelConfig {
  std::size_t lookback = 96;
  std::size_t horizon = 96;
  std::size_t hidden_dim = 32;
  std::size_t num_experts = 3;
  std::vector<std::size_t> expert_depths{1, 2, 3};
  std::size_t num_blocks = 1;
  Variant variant = Variant::modex;
  bool revin = true;
  bool revin_affine = false;
  double revin_eps = 1e-5;
  bool translation = true;
  Activation activation = Activation::gelu;
  // Only needed when revin_affine is on: one scale/shift per variate.
  std::size_t num_variates = 0;
  std::uint64_t seed = 2024;

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (lookback == 0) fail("lookback must be positive");
    if (horizon == 0) fail("horizon must be positive");
    if (hidden_dim == 0) fail("hidden_dim must be positive");
    if (revin && lookback < 2) fail("RevIN needs lookback >= 2");
    if (!(revin_eps > 0)) fail("revin_eps must be positive");
    if (revin_affine && !revin) fail("revin_affine requires revin");
    if (revin_affine && num_variates == 0) fail("revin_affine requires num_variates");
    if (variant == Variant::plain_stack) return;
    if (num_experts == 0) fail("num_experts must be positive");
    if (expert_depths.size() != num_experts) {
      fail("expert_depths has " + std::to_string(expert_depths.size()) +
           " entries but num_experts is " + std::to_string(num_experts));
    }
    for (std::size_t d : expert_depths)
      if (d == 0) fail("expert depths must be positive");
    if (variant == Variant::dense) {
      for (std::size_t j = 0; j < num_experts; ++j) {
        if (expert_depths[j] != j + 1) fail("dense variant needs expert_depths = 1..num_experts");
      }
    }
  }

  std::size_t max_depth() const {
    return expert_depths.empty() ? 0 : *std::max_element(expert_depths.begin(), expert_depths.end());
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("lookback", std::to_string(lookback));
    kv.set("horizon", std::to_string(horizon));
    kv.set("hidden_dim", std::to_string(hidden_dim));
    kv.set("num_experts", std::to_string(num_experts));
    kv.set("expert_depths", join(expert_depths));
    kv.set("num_blocks", std::to_string(num_blocks));
    kv.set("variant", to_string(variant));
    kv.set("revin", revin ? "true" : "false");
    kv.set("revin_affine", revin_affine ? "true" : "false");
    kv.set("revin_eps", format_real(revin_eps));
    kv.set("translation", translation ? "true" : "false");
    kv.set("activation", to_string(activation));
    kv.set("num_variates", std::to_string(num_variates));
    kv.set("seed", std::to_string(seed));
    return kv;
  }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{
        "lookback",   "horizon",     "hidden_dim", "num_experts",  "expert_depths",
        "num_blocks", "variant",     "revin",      "revin_affine", "revin_eps",
        "translation", "activation", "num_variates", "seed"};
    return k;
  }

  // Applies every recognised model key present in `kv`; other keys are left
  // for the caller to judge.
  void apply(const KeyValues& kv) {
    for (const auto& [key, value] : kv.pairs()) {
      if (key == "lookback") lookback = parse::unsigned_int(key, value);
      else if (key == "horizon") horizon = parse::unsigned_int(key, value);
      else if (key == "hidden_dim") hidden_dim = parse::unsigned_int(key, value);
      else if (key == "num_experts") num_experts = parse::unsigned_int(key, value);
      else if (key == "expert_depths") expert_depths = parse::size_list(key, value);
      else if (key == "num_blocks") num_blocks = parse::unsigned_int(key, value);
      else if (key == "variant") variant = parse_variant(value);
      else if (key == "revin") revin = parse::boolean(key, value);
      else if (key == "revin_affine") revin_affine = parse::boolean(key, value);
      else if (key == "revin_eps") revin_eps = parse::real(key, value);
      else if (key == "translation") translation = parse::boolean(key, value);
      else if (key == "activation") activation = parse_activation(value);
      else if (key == "num_variates") num_variates = parse::unsigned_int(key, value);
      else if (key == "seed") seed = parse::unsigned_int(key, value);
    }
  }

  static ModelConfig from_key_values(const KeyValues& kv) {
    ModelConfig cfg;
    cfg.apply(kv);
    return cfg;
  }

  // Identifies the parameter layout; seed is excluded since it only affects
  // initial values.
  std::string hash() const {
    KeyValues kv = to_key_values();
    std::string text;
    for (const auto& [k, v] : kv.pairs())
      if (k != "seed") text += k + "=" + v + "\n";
    return hex64(fnv1a(text));
  }

  static std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
};

}  // namespace modex
