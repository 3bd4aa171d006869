#include "mlae/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "mlae/analysis.hpp"
#include "mlae/checkpoint.hpp"
#include "mlae/config.hpp"

namespace mlae {

namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitCorruption = 4;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run config JSON")->required();
  cmd->add_option("--set", opts.sets,
                  "override a config field by dotted path, e.g. --set train.lr=1e-3");
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "override the init/data/dropout seeds");
}

RunConfig load_config(const CommonOpts& opts) {
  std::ifstream in(opts.config_path);
  if (!in) throw FormatError("cannot open config: " + opts.config_path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config parse error in " + opts.config_path + ": " + e.what());
  }
  for (const std::string& s : opts.sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) throw FormatError("--set expects key=value, got '" + s + "'");
    apply_dotted_override(doc, s.substr(0, eq), s.substr(eq + 1));
  }
  RunConfig cfg = run_config_from_json(doc);
  if (!opts.out_dir.empty()) cfg.output_dir = opts.out_dir;
  if (opts.seed >= 0) {
    const auto s = static_cast<std::uint64_t>(opts.seed);
    cfg.train.seeds = Seeds{s, s, s};
  }
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create output directory " + dir + ": " + ec.message());
}

int run_train(const CommonOpts& opts) {
  const RunConfig cfg = load_config(opts);
  const MaskSchedule schedule = resolve_schedule(cfg);
  const SyntheticTaskData task = materialize_task(cfg);
  BackboneModel model = build_model(cfg);
  ensure_dir(cfg.output_dir);

  TrainResult result = train(model, task, cfg.train, schedule);
  write_metrics_csv(result.history, cfg.output_dir + "/metrics.csv");
  save_checkpoint(result.model, cfg, false, cfg.output_dir + "/checkpoint");
  if (cfg.task.type == TaskConfig::Type::synthetic && cfg.task.export_splits) {
    write_dataset_csv(task.train, cfg.output_dir + "/train.csv");
    if (task.val.size() > 0) write_dataset_csv(task.val, cfg.output_dir + "/val.csv");
    if (task.test.size() > 0) write_dataset_csv(task.test, cfg.output_dir + "/test.csv");
  }
  if (result.diverged) {
    std::fprintf(stderr, "training diverged after %ld steps; last good state saved\n",
                 result.steps_run);
    return kExitDivergence;
  }
  if (task.test.size() > 0) {
    const double acc = evaluate(result.model, task.test, schedule);
    std::printf("test accuracy: %.1f%%\n", 100.0 * acc);
  }
  std::printf("checkpoint: %s/checkpoint\n", cfg.output_dir.c_str());
  return kExitOk;
}

int run_eval(const std::string& stem, const std::string& dataset_path) {
  const LoadedCheckpoint loaded = load_checkpoint(stem);
  if (!fs::exists(dataset_path)) throw FormatError("dataset not found: " + dataset_path);
  const Dataset ds = read_dataset(dataset_path);
  const MaskSchedule schedule = resolve_schedule(loaded.config);
  const double acc = evaluate(loaded.model, ds, schedule);
  std::printf("%.1f\n", 100.0 * acc);
  return kExitOk;
}

int run_merge(const std::string& in_stem, const std::string& out_stem) {
  const LoadedCheckpoint loaded = load_checkpoint(in_stem);
  if (loaded.merged) throw StateError("checkpoint is already merged: " + in_stem);
  const BackboneModel merged = merge_model(loaded.model);
  const fs::path parent = fs::path(out_stem).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  save_checkpoint(merged, loaded.config, true, out_stem);
  std::printf("merged checkpoint: %s\n", out_stem.c_str());
  return kExitOk;
}

int run_analyze(const std::string& stem, std::string out_dir, bool svg) {
  const LoadedCheckpoint loaded = load_checkpoint(stem);
  if (loaded.merged || !loaded.model.has_adapters()) {
    throw StateError("no adapters present in " + stem);
  }
  if (out_dir.empty()) out_dir = stem + "_analysis";
  const SimilarityReport report = model_similarity(loaded.model);
  write_similarity_csvs(report, out_dir);
  if (svg) write_similarity_svgs(report, out_dir);
  std::printf("similarity report: %s\n", out_dir.c_str());
  return kExitOk;
}

std::vector<std::string> split_tokens(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<std::string> default_sweep_values(const std::string& axis) {
  if (axis == "p") return {"0", "0.1", "0.3", "0.5", "0.7", "0.9"};
  if (axis == "coeff_init") return {"0.125", "0.25", "0.5", "1", "2", "4"};
  if (axis == "sub_rank") return {"1", "2", "4"};
  if (axis == "budget") return {"2", "4", "8"};
  if (axis == "strategy") {
    std::vector<std::string> values;
    for (const char* s : {"fixed", "mixed"})
      for (const char* p : {"incremental", "decremental", "hourglass", "protruding", "random"})
        values.push_back(std::string(s) + ":" + p);
    for (const char* p : {"incremental", "decremental", "hourglass", "protruding", "uniform"})
      values.push_back(std::string("stochastic:") + p);
    return values;
  }
  throw ParameterError("unknown sweep axis: " + axis);
}

RunConfig apply_axis_value(RunConfig cfg, const std::string& axis, const std::string& value) {
  if (axis == "p") {
    cfg.masking.strategy = MaskStrategy::stochastic;
    cfg.masking.pattern = MaskPattern::uniform;
    cfg.masking.p = std::stod(value);
    cfg.masking.probs.reset();
  } else if (axis == "coeff_init") {
    cfg.adapter.coeff_init = std::stod(value);
  } else if (axis == "sub_rank") {
    cfg.adapter.sub_rank = std::stoi(value);
  } else if (axis == "budget") {
    cfg.adapter.r = std::stoi(value);
  } else if (axis == "strategy") {
    const std::size_t colon = value.find(':');
    if (colon == std::string::npos) {
      throw ParameterError("strategy values look like 'stochastic:uniform', got '" + value +
                           "'");
    }
    cfg.masking.strategy = mask_strategy_from_string(value.substr(0, colon));
    cfg.masking.pattern = mask_pattern_from_string(value.substr(colon + 1));
    cfg.masking.probs.reset();
    cfg.masking.counts.reset();
  } else {
    throw ParameterError("unknown sweep axis: " + axis);
  }
  return cfg;
}

int run_sweep(const CommonOpts& opts, const std::string& axis, const std::string& values_csv,
              int n_seeds) {
  if (n_seeds < 1) throw ParameterError("sweep: need at least one seed");
  const RunConfig base = load_config(opts);
  const std::vector<std::string> values =
      values_csv.empty() ? default_sweep_values(axis) : split_tokens(values_csv);
  if (values.empty()) throw ParameterError("sweep: no values given");
  ensure_dir(base.output_dir);
  const std::string results_path = base.output_dir + "/results.csv";

  // Resume: rows already present are not re-run.
  std::map<std::pair<std::string, std::uint64_t>, double> done;
  if (fs::exists(results_path)) {
    std::ifstream in(results_path);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string ax, value, seed, acc;
      if (std::getline(ss, ax, ',') && std::getline(ss, value, ',') &&
          std::getline(ss, seed, ',') && std::getline(ss, acc)) {
        done[{value, std::stoull(seed)}] = std::stod(acc);
      }
    }
  }

  std::FILE* results = std::fopen(results_path.c_str(), done.empty() ? "wb" : "ab");
  if (results == nullptr) throw FormatError("cannot open " + results_path);
  if (done.empty()) std::fputs("axis,value,seed,accuracy\n", results);

  std::map<std::string, std::vector<double>> by_value;
  for (const std::string& value : values) {
    for (int k = 0; k < n_seeds; ++k) {
      RunConfig cfg = apply_axis_value(base, axis, value);
      cfg.train.seeds.init = base.train.seeds.init + k;
      cfg.train.seeds.data = base.train.seeds.data + k;
      cfg.train.seeds.dropout = base.train.seeds.dropout + k;
      const std::uint64_t seed_id = cfg.train.seeds.init;
      auto it = done.find({value, seed_id});
      double acc;
      if (it != done.end()) {
        acc = it->second;
      } else {
        const MaskSchedule schedule = resolve_schedule(cfg);
        const SyntheticTaskData task = materialize_task(cfg);
        BackboneModel model = build_model(cfg);
        TrainResult result = train(model, task, cfg.train, schedule);
        if (result.diverged) {
          std::fclose(results);
          throw NumericError("sweep: run diverged at " + axis + "=" + value);
        }
        const Dataset& split = task.test.size() > 0 ? task.test : task.val;
        acc = evaluate(result.model, split, schedule);
        std::fprintf(results, "%s,%s,%llu,%.17g\n", axis.c_str(), value.c_str(),
                     static_cast<unsigned long long>(seed_id), acc);
        std::fflush(results);
      }
      by_value[value].push_back(acc);
      std::printf("%s=%s seed=%llu acc=%.4f\n", axis.c_str(), value.c_str(),
                  static_cast<unsigned long long>(seed_id), acc);
    }
  }
  std::fclose(results);

  const std::string summary_path = base.output_dir + "/summary.csv";
  std::FILE* summary = std::fopen(summary_path.c_str(), "wb");
  if (summary == nullptr) throw FormatError("cannot open " + summary_path);
  std::fputs("value,mean_accuracy\n", summary);
  for (const std::string& value : values) {
    const auto& accs = by_value[value];
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= accs.size();
    std::fprintf(summary, "%s,%.17g\n", value.c_str(), mean);
  }
  std::fclose(summary);
  std::printf("sweep results: %s\n", results_path.c_str());
  return kExitOk;
}

int run_init_config(const std::string& out_path) {
  const fs::path parent = fs::path(out_path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  write_run_config(RunConfig{}, out_path);
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"Masked LoRA experts: training, merging and analysis"};
  app.require_subcommand(1);

  CommonOpts train_opts;
  auto* train_cmd = app.add_subcommand("train", "train adapters on a task");
  add_common(train_cmd, train_opts);

  std::string eval_stem, eval_dataset;
  auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  eval_cmd->add_option("checkpoint", eval_stem, "checkpoint stem")->required();
  eval_cmd->add_option("dataset", eval_dataset, "dataset csv/bin path")->required();

  std::string merge_in, merge_out;
  auto* merge_cmd = app.add_subcommand("merge", "fold adapters into the base weights");
  merge_cmd->add_option("input", merge_in, "input checkpoint stem")->required();
  merge_cmd->add_option("output", merge_out, "output checkpoint stem")->required();

  std::string analyze_stem, analyze_out;
  bool analyze_svg = true;
  auto* analyze_cmd = app.add_subcommand("analyze", "expert similarity report");
  analyze_cmd->add_option("checkpoint", analyze_stem, "checkpoint stem")->required();
  analyze_cmd->add_option("--out", analyze_out, "report directory");
  analyze_cmd->add_flag("--svg,!--no-svg", analyze_svg, "emit SVG heatmaps");

  CommonOpts sweep_opts;
  std::string sweep_axis, sweep_values;
  int sweep_seeds = 3;
  auto* sweep_cmd = app.add_subcommand("sweep", "grid of runs along one axis");
  add_common(sweep_cmd, sweep_opts);
  sweep_cmd->add_option("--axis", sweep_axis, "p | coeff_init | strategy | sub_rank | budget")
      ->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values (default: standard grid)");
  sweep_cmd->add_option("--seeds", sweep_seeds, "seeds per value");

  std::string init_out = "mlae-config.json";
  auto* init_cmd = app.add_subcommand("init-config", "write the default config");
  init_cmd->add_option("--out", init_out, "where to write the config");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train_cmd) return run_train(train_opts);
    if (*eval_cmd) return run_eval(eval_stem, eval_dataset);
    if (*merge_cmd) return run_merge(merge_in, merge_out);
    if (*analyze_cmd) return run_analyze(analyze_stem, analyze_out, analyze_svg);
    if (*sweep_cmd) return run_sweep(sweep_opts, sweep_axis, sweep_values, sweep_seeds);
    if (*init_cmd) return run_init_config(init_out);
  } catch (const CorruptionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitCorruption;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace mlae
