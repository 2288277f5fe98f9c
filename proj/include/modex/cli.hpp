#pragma once

#include <filesystem>
#include <iostream>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "modex/checkpoint.hpp"
#include "modex/data.hpp"
#include "modex/efficiency.hpp"
#include "modex/sensitivity.hpp"
#include "modex/training.hpp"

namespace modex::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitNumerical = 2;

/// Everything a subcommand needs: model and training settings plus dataset,
/// output and subcommand options.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  std::string dataset;
  std::string data_file;
  std::optional<data::SplitPreset> split_preset;
  double train_ratio = 0.7;
  double val_ratio = 0.1;
  double test_ratio = 0.2;
  bool standardize = true;
  std::string out;
  std::string checkpoint;

  std::string samples = "sine,ramp";
  std::vector<std::size_t> layers;  // empty: every block output 1..M
  std::string sens_mode = "abs_rowmean";
  std::string sens_variate = "mean";
  std::string revin_grad = "through_stats";
  bool oracle_check = false;

  std::vector<std::size_t> sweep_n{64, 128, 256, 512};
  std::size_t sweep_batch = 1;
  std::size_t bench_batch = 32;
  std::size_t bench_variates = 7;
  std::size_t repeats = 3;

  std::size_t synth_variates = 7;
  std::size_t synth_length = 17420;
  std::size_t synth_minutes = 60;
  std::uint64_t synth_seed = 7;

  static const std::vector<std::string>& run_keys() {
    static const std::vector<std::string> k{
        "dataset",      "data_file",    "split_preset",   "train_ratio",    "val_ratio",     "test_ratio",
        "standardize",  "out",          "checkpoint",     "samples",        "layers",        "sens_mode",
        "sens_variate", "revin_grad",   "oracle_check",   "sweep_n",        "sweep_batch",   "bench_batch",
        "bench_variates", "repeats",    "synth_variates", "synth_length",   "synth_minutes", "synth_seed"};
    return k;
  }

  // Keys that describe where the data came from; stored in checkpoints.
  static const std::vector<std::string>& data_keys() {
    static const std::vector<std::string> k{"dataset",   "data_file", "split_preset", "train_ratio",
                                            "val_ratio", "test_ratio", "standardize"};
    return k;
  }

  static bool known(const std::string& key) {
    auto in = [&](const std::vector<std::string>& v) { return std::find(v.begin(), v.end(), key) != v.end(); };
    return in(ModelConfig::keys()) || in(TrainConfig::keys()) || in(run_keys());
  }

  void apply(const KeyValues& kv) {
    for (const auto& [key, value] : kv.pairs()) {
      if (!known(key)) throw ConfigError("unknown key '" + key + "'");
    }
    model.apply(kv);
    train.apply(kv);
    for (const auto& [key, value] : kv.pairs()) {
      if (key == "dataset") dataset = value;
      else if (key == "data_file") data_file = value;
      else if (key == "split_preset") split_preset = value.empty() ? std::nullopt : std::optional(data::parse_preset(value));
      else if (key == "train_ratio") train_ratio = parse::real(key, value);
      else if (key == "val_ratio") val_ratio = parse::real(key, value);
      else if (key == "test_ratio") test_ratio = parse::real(key, value);
      else if (key == "standardize") standardize = parse::boolean(key, value);
      else if (key == "out") out = value;
      else if (key == "checkpoint") checkpoint = value;
      else if (key == "samples") samples = value;
      else if (key == "layers") layers = value.empty() ? std::vector<std::size_t>{} : parse::size_list(key, value);
      else if (key == "sens_mode") sens_mode = value;
      else if (key == "sens_variate") sens_variate = value;
      else if (key == "revin_grad") revin_grad = value;
      else if (key == "oracle_check") oracle_check = parse::boolean(key, value);
      else if (key == "sweep_n") sweep_n = parse::size_list(key, value);
      else if (key == "sweep_batch") sweep_batch = parse::unsigned_int(key, value);
      else if (key == "bench_batch") bench_batch = parse::unsigned_int(key, value);
      else if (key == "bench_variates") bench_variates = parse::unsigned_int(key, value);
      else if (key == "repeats") repeats = parse::unsigned_int(key, value);
      else if (key == "synth_variates") synth_variates = parse::unsigned_int(key, value);
      else if (key == "synth_length") synth_length = parse::unsigned_int(key, value);
      else if (key == "synth_minutes") synth_minutes = parse::unsigned_int(key, value);
      else if (key == "synth_seed") synth_seed = parse::unsigned_int(key, value);
    }
  }

  KeyValues data_key_values() const {
    KeyValues kv;
    kv.set("dataset", dataset);
    kv.set("data_file", data_file);
    kv.set("split_preset", split_preset ? data::to_string(*split_preset) : "");
    kv.set("train_ratio", ModelConfig::format_real(train_ratio));
    kv.set("val_ratio", ModelConfig::format_real(val_ratio));
    kv.set("test_ratio", ModelConfig::format_real(test_ratio));
    kv.set("standardize", standardize ? "true" : "false");
    return kv;
  }

  KeyValues to_key_values() const {
    KeyValues kv = model.to_key_values();
    kv.merge(train.to_key_values());
    kv.merge(data_key_values());
    kv.set("out", out);
    kv.set("checkpoint", checkpoint);
    kv.set("samples", samples);
    kv.set("layers", join(layers));
    kv.set("sens_mode", sens_mode);
    kv.set("sens_variate", sens_variate);
    kv.set("revin_grad", revin_grad);
    kv.set("oracle_check", oracle_check ? "true" : "false");
    kv.set("sweep_n", join(sweep_n));
    kv.set("sweep_batch", std::to_string(sweep_batch));
    kv.set("bench_batch", std::to_string(bench_batch));
    kv.set("bench_variates", std::to_string(bench_variates));
    kv.set("repeats", std::to_string(repeats));
    kv.set("synth_variates", std::to_string(synth_variates));
    kv.set("synth_length", std::to_string(synth_length));
    kv.set("synth_minutes", std::to_string(synth_minutes));
    kv.set("synth_seed", std::to_string(synth_seed));
    return kv;
  }
};

struct ParsedArgs {
  std::string command;
  KeyValues explicit_keys;  // config file entries overridden by --key value
};

/// `<command> [--config FILE] [--key value | --flag]...`; dashes in keys map to
/// underscores and a flag without a value means `true`.
inline ParsedArgs parse_args(const std::vector<std::string>& args) {
  if (args.empty()) throw ConfigError("missing subcommand");
  ParsedArgs parsed;
  parsed.command = args[0];
  KeyValues overrides;
  std::string config_file;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& arg = args[i];
    if (arg.rfind("--", 0) != 0 || arg.size() == 2) throw ConfigError("unexpected argument '" + arg + "'");
    std::string key = arg.substr(2), value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else if (i + 1 < args.size() && args[i + 1].rfind("--", 0) != 0) {
      value = args[++i];
    } else {
      value = "true";
    }
    std::replace(key.begin(), key.end(), '-', '_');
    if (key == "config") {
      config_file = value;
      continue;
    }
    if (!RunConfig::known(key)) throw ConfigError("unknown key '" + key + "'");
    overrides.set(key, value);
  }
  if (!config_file.empty()) {
    parsed.explicit_keys = KeyValues::load(config_file);
    for (const auto& [k, v] : parsed.explicit_keys.pairs())
      if (!RunConfig::known(k)) throw ConfigError(config_file + ": unknown key '" + k + "'");
  }
  parsed.explicit_keys.merge(overrides);
  return parsed;
}

inline std::string usage() {
  return "usage: modex <command> [--config FILE] [--key value]...\n"
         "commands:\n"
         "  train        fit a model; writes checkpoint.bin, history.csv, report.csv, resolved_config.txt\n"
         "  eval         score a checkpoint on its test split (--checkpoint PATH)\n"
         "  sensitivity  layer sensitivity heatmaps (--checkpoint PATH --samples sine,ramp,0,curated:8)\n"
         "  bench        params.csv, flops.csv, memsweep.csv, timing.csv\n"
         "  synth        write an ETT-shaped synthetic CSV to <out>/synthetic.csv\n"
         "datasets are resolved through MODEX_DATA_DIR (see registry.txt)\n";
}

namespace detail {

inline void require_out(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("--out DIR is required");
  std::error_code ec;
  std::filesystem::create_directories(rc.out, ec);
  if (ec) throw IoError("cannot create output directory " + rc.out + ": " + ec.message());
}

inline std::string out_path(const RunConfig& rc, const std::string& name) {
  return (std::filesystem::path(rc.out) / name).string();
}

inline void write_resolved(const RunConfig& rc) {
  const std::string path = out_path(rc, "resolved_config.txt");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# fully resolved run configuration\n" << rc.to_key_values().to_string();
  if (!out) throw IoError("failed writing " + path);
}

inline bool has_dataset(const RunConfig& rc) { return !rc.dataset.empty() || !rc.data_file.empty(); }

inline std::unique_ptr<data::Dataset> load_dataset(const RunConfig& rc, std::size_t lookback, std::size_t horizon) {
  std::string path;
  data::SplitPreset preset = data::SplitPreset::ratios;
  if (!rc.data_file.empty()) {
    path = rc.data_file;
  } else if (!rc.dataset.empty()) {
    const auto registry = data::Registry::from_environment();
    const auto& entry = registry.find(rc.dataset);
    path = registry.path_of(entry);
    preset = entry.preset;
    if (!std::filesystem::exists(path)) {
      throw ConfigError("dataset '" + rc.dataset + "' expects " + path + "; set MODEX_DATA_DIR to the directory holding " +
                        entry.file);
    }
  } else {
    throw ConfigError("no dataset given; pass --dataset NAME (registered: " +
                      data::Registry::from_environment().names() + ") or --data-file PATH");
  }
  data::SplitPlan plan{rc.split_preset.value_or(preset), rc.train_ratio, rc.val_ratio, rc.test_ratio};
  return std::make_unique<data::Dataset>(data::load_csv(path), plan, lookback, horizon, rc.standardize);
}

// Layers a checkpoint's data keys first, then the caller's explicit keys.
inline RunConfig resolve_with_checkpoint(const KeyValues& explicit_keys, const CheckpointHeader& header) {
  RunConfig rc;
  KeyValues stored;
  for (const std::string& k : RunConfig::data_keys())
    if (const std::string* v = header.lines.find(k)) stored.set(k, *v);
  rc.apply(stored);
  rc.apply(explicit_keys);

  ModelConfig requested = header.config;
  requested.apply(explicit_keys);
  if (requested.hash() != header.config.hash()) {
    std::string differing;
    const KeyValues a = requested.to_key_values(), b = header.config.to_key_values();
    for (const auto& [k, v] : a.pairs())
      if (k != "seed" && b.at(k) != v) differing += (differing.empty() ? "" : ", ") + k;
    throw ConfigError("requested config hash " + requested.hash() + " does not match checkpoint config hash " +
                      header.config.hash() + " (differs in: " + differing + ")");
  }
  rc.model = header.config;
  return rc;
}

inline Tensor<double> synthetic_window(const std::string& kind, std::size_t variates, std::size_t L) {
  Tensor<double> x({variates, L});
  for (std::size_t n = 0; n < variates; ++n) {
    for (std::size_t t = 0; t < L; ++t) {
      if (kind == "sine") x.at(n, t) = std::sin(2 * std::numbers::pi * static_cast<double>(t) / 24.0);
      else if (kind == "ramp") x.at(n, t) = -1.0 + 2.0 * static_cast<double>(t) / static_cast<double>(L - 1);
      else throw ConfigError("unknown synthetic sample '" + kind + "' (expected sine or ramp)");
    }
  }
  return x;
}

inline std::ostream& metric(std::ostream& os) {
  os.precision(17);
  return os;
}

}  // namespace detail

inline int cmd_train(const ParsedArgs& args, std::ostream& out) {
  RunConfig rc;
  rc.apply(args.explicit_keys);
  detail::require_out(rc);
  const auto ds = detail::load_dataset(rc, rc.model.lookback, rc.model.horizon);
  rc.model.num_variates = ds->num_variates();
  rc.model.validate();
  rc.train.validate();
  detail::write_resolved(rc);

  Model model(rc.model);
  out << "training " << to_string(rc.model.variant) << " on " << ds->num_variates() << " variates, "
      << ds->windows(data::Segment::train).size() << " train windows\n";
  const auto result = train(model, *ds, rc.train, [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << " train_mse " << r.train_mse << " val_mse " << r.val_mse << " lr " << r.lr << '\n';
  });
  write_history_csv(detail::out_path(rc, "history.csv"), result.history);

  KeyValues extra = rc.data_key_values();
  extra.set("best_epoch", std::to_string(result.best_epoch));
  extra.set("train_seed", std::to_string(rc.train.seed));
  save_checkpoint(detail::out_path(rc, "checkpoint.bin"), model, extra);

  EvalReport report = evaluate(model, ds->windows(data::Segment::test), rc.train.eval_batch_size);
  report.train_seconds = result.train_seconds;
  KeyValues columns;
  columns.set("param_count", std::to_string(efficiency::count_params(rc.model)));
  columns.set("flops_per_token", std::to_string(efficiency::flops_per_token(rc.model)));
  columns.set("best_epoch", std::to_string(result.best_epoch));
  write_report_csv(detail::out_path(rc, "report.csv"), report, columns);
  write_per_horizon_csv(detail::out_path(rc, "per_horizon.csv"), report);
  detail::metric(out) << "test mse=" << report.mse << " mae=" << report.mae << '\n';
  return kExitOk;
}

inline int cmd_eval(const ParsedArgs& args, std::ostream& out) {
  RunConfig probe;
  probe.apply(args.explicit_keys);
  if (probe.checkpoint.empty()) throw ConfigError("--checkpoint PATH is required");
  CheckpointHeader header;
  const Model model = load_checkpoint(probe.checkpoint, &header);
  RunConfig rc = detail::resolve_with_checkpoint(args.explicit_keys, header);
  const auto ds = detail::load_dataset(rc, rc.model.lookback, rc.model.horizon);
  if (ds->num_variates() != rc.model.num_variates && rc.model.num_variates != 0) {
    throw ConfigError("dataset has " + std::to_string(ds->num_variates()) + " variates, checkpoint was trained on " +
                      std::to_string(rc.model.num_variates));
  }
  const EvalReport report = evaluate(model, ds->windows(data::Segment::test), rc.train.eval_batch_size);
  detail::metric(out) << "mse=" << report.mse << " mae=" << report.mae << '\n';
  if (!rc.out.empty()) {
    detail::require_out(rc);
    detail::write_resolved(rc);
    KeyValues columns;
    columns.set("param_count", std::to_string(efficiency::count_params(rc.model)));
    write_report_csv(detail::out_path(rc, "report.csv"), report, columns);
    write_per_horizon_csv(detail::out_path(rc, "per_horizon.csv"), report);
  }
  return kExitOk;
}

inline int cmd_sensitivity(const ParsedArgs& args, std::ostream& out) {
  RunConfig probe;
  probe.apply(args.explicit_keys);
  if (probe.checkpoint.empty()) throw ConfigError("--checkpoint PATH is required");
  CheckpointHeader header;
  const Model model = load_checkpoint(probe.checkpoint, &header);
  RunConfig rc = detail::resolve_with_checkpoint(args.explicit_keys, header);
  detail::require_out(rc);
  const std::size_t L = rc.model.lookback;
  const std::size_t N = std::max<std::size_t>(1, rc.model.num_variates);

  std::vector<std::size_t> layers = rc.layers;
  if (layers.empty())
    for (std::size_t l = 1; l <= rc.model.num_blocks; ++l) layers.push_back(l);
  if (layers.empty()) layers.push_back(0);
  for (std::size_t l : layers) {
    if (l > rc.model.num_blocks) {
      throw ConfigError("layer " + std::to_string(l) + " exceeds the model's " + std::to_string(rc.model.num_blocks) +
                        " blocks");
    }
  }
  const sensitivity::Mode mode = sensitivity::parse_mode(rc.sens_mode);
  if (rc.revin_grad != "through_stats" && rc.revin_grad != "frozen_stats") {
    throw ConfigError("revin_grad must be through_stats or frozen_stats");
  }
  const RevinGrad revin = rc.revin_grad == "frozen_stats" ? RevinGrad::frozen_stats : RevinGrad::through_stats;
  std::optional<std::size_t> variate;
  if (rc.sens_variate != "mean") {
    variate = parse::unsigned_int("sens_variate", rc.sens_variate);
    if (*variate >= N) throw ConfigError("sens_variate " + rc.sens_variate + " out of range");
  }

  std::unique_ptr<data::Dataset> ds;
  auto test_windows = [&]() -> data::WindowSet {
    if (!ds) ds = detail::load_dataset(rc, L, rc.model.horizon);
    return ds->windows(data::Segment::test);
  };
  std::vector<sensitivity::SweepSample> samples;
  for (const std::string& item : parse::split(rc.samples)) {
    if (item == "sine" || item == "ramp") {
      samples.push_back({samples.size(), detail::synthetic_window(item, N, L), variate});
    } else if (item.rfind("curated:", 0) == 0) {
      const auto set = test_windows();
      const std::size_t count = parse::unsigned_int("samples", item.substr(8));
      for (std::size_t index : sensitivity::curate_windows(set, count, variate.value_or(N - 1))) {
        out << "sample " << samples.size() << " = test window " << index << '\n';
        samples.push_back({samples.size(), set.batch<double>(std::vector{index}).x.reshaped({N, L}), variate});
      }
    } else {
      const auto set = test_windows();
      const std::size_t index = parse::unsigned_int("samples", item);
      if (index >= set.size()) throw ConfigError("test window " + item + " out of range");
      samples.push_back({samples.size(), set.batch<double>(std::vector{index}).x.reshaped({N, L}), variate});
    }
  }
  if (samples.empty()) throw ConfigError("no samples requested");
  detail::write_resolved(rc);
  const auto result = sensitivity::sensitivity_sweep(model, samples, layers, rc.out, mode, revin);
  for (const auto& row : result.rows) out << "sample " << row.sample << " argmax_layer " << row.argmax_layer << '\n';

  if (rc.oracle_check) {
    double worst = 0;
    for (const auto& sample : samples) {
      for (std::size_t l : layers) {
        for (std::size_t n = 0; n < N; ++n) {
          if (variate && n != *variate) continue;
          const auto exact = sensitivity::aggregate(sensitivity::jacobian(model, sample.window, n, l, revin), mode);
          const auto fd =
              sensitivity::aggregate(sensitivity::finite_difference_jacobian(model, sample.window, n, l, revin), mode);
          for (std::size_t t = 0; t < L; ++t) worst = std::max(worst, std::abs(exact[t] - fd[t]));
        }
      }
    }
    out << "oracle max deviation " << worst << '\n';
    if (!(worst < 1e-6)) throw NumericalError("finite-difference oracle deviation " + std::to_string(worst) + " >= 1e-6");
  }
  return kExitOk;
}

inline int cmd_bench(const ParsedArgs& args, std::ostream& out) {
  RunConfig rc;
  rc.apply(args.explicit_keys);
  detail::require_out(rc);
  std::unique_ptr<data::Dataset> ds;
  std::optional<Model> loaded;
  if (!rc.checkpoint.empty()) {
    CheckpointHeader header;
    loaded = load_checkpoint(rc.checkpoint, &header);
    rc = detail::resolve_with_checkpoint(args.explicit_keys, header);
  }
  if (detail::has_dataset(rc)) {
    ds = detail::load_dataset(rc, rc.model.lookback, rc.model.horizon);
    rc.model.num_variates = ds->num_variates();
  }
  const std::size_t N = rc.model.num_variates ? rc.model.num_variates : rc.bench_variates;
  rc.model.validate();
  detail::write_resolved(rc);
  const Model model = loaded ? *loaded : Model(rc.model);

  const auto params = efficiency::count_params(rc.model);
  {
    std::ofstream f(detail::out_path(rc, "params.csv"));
    f << "variant,param_count,enumerated\n"
      << to_string(rc.model.variant) << ',' << params << ',' << efficiency::enumerate_params(model) << '\n';
    if (!f) throw IoError("failed writing params.csv");
  }
  {
    std::ofstream f(detail::out_path(rc, "flops.csv"));
    f << "N,batch,flops_per_token,flops_per_batch\n"
      << N << ',' << rc.bench_batch << ',' << efficiency::flops_per_token(rc.model) << ','
      << efficiency::estimate_flops(rc.model, N, rc.bench_batch) << '\n';
    if (!f) throw IoError("failed writing flops.csv");
  }
  const auto sweep = efficiency::memory_sweep<double>(rc.model, rc.sweep_n, rc.sweep_batch);
  efficiency::write_memsweep_csv(detail::out_path(rc, "memsweep.csv"), sweep);

  data::MultivariateSeries synthetic;
  std::optional<data::WindowSet> windows;
  if (ds) {
    windows = ds->windows(data::Segment::test);
  } else {
    synthetic = data::synthetic_series({.num_variates = N, .length = 2880 + rc.model.lookback + rc.model.horizon});
    windows.emplace(&synthetic, rc.model.lookback, rc.model.horizon, 0, synthetic.length, false);
  }
  const auto timing = efficiency::time_inference(model, *windows, rc.repeats, rc.train.eval_batch_size);
  efficiency::write_timing_csv(detail::out_path(rc, "timing.csv"), timing, efficiency::environment_metadata());
  out << "params " << params << " flops_per_token " << efficiency::flops_per_token(rc.model) << " infer_median_s "
      << timing.median << '\n';
  if (sweep.size() >= 2) {
    std::vector<double> n, peak;
    for (const auto& p : sweep) {
      n.push_back(static_cast<double>(p.num_variates));
      peak.push_back(static_cast<double>(p.peak_bytes));
    }
    out << "memory fit r2 " << efficiency::fit_line(n, peak).r2 << '\n';
  }
  return kExitOk;
}

inline int cmd_synth(const ParsedArgs& args, std::ostream& out) {
  RunConfig rc;
  rc.apply(args.explicit_keys);
  detail::require_out(rc);
  data::SyntheticSpec spec;
  spec.num_variates = rc.synth_variates;
  spec.length = rc.synth_length;
  spec.minutes_per_step = rc.synth_minutes;
  spec.seed = rc.synth_seed;
  if (spec.num_variates == 0 || spec.length == 0 || spec.minutes_per_step == 0) {
    throw ConfigError("synth_variates, synth_length and synth_minutes must be positive");
  }
  const std::string path = detail::out_path(rc, "synthetic.csv");
  data::write_csv(data::synthetic_series(spec), path);
  out << "wrote " << path << '\n';
  return kExitOk;
}

/// Runs one subcommand; returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    if (args.empty() || args[0] == "help" || args[0] == "--help" || args[0] == "-h") {
      (args.empty() ? err : out) << usage();
      return args.empty() ? kExitUser : kExitOk;
    }
    const ParsedArgs parsed = parse_args(args);
    if (parsed.command == "train") return cmd_train(parsed, out);
    if (parsed.command == "eval") return cmd_eval(parsed, out);
    if (parsed.command == "sensitivity") return cmd_sensitivity(parsed, out);
    if (parsed.command == "bench") return cmd_bench(parsed, out);
    if (parsed.command == "synth") return cmd_synth(parsed, out);
    err << "error: unknown command '" << parsed.command << "'\n" << usage();
    return kExitUser;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  }
}

}  // namespace modex::cli
