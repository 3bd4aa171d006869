#include "mlae/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace mlae {

namespace {

using nlohmann::json;

// Reads one JSON object field-by-field and rejects keys it never saw.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw FormatError(path_ + ": expected a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw FormatError(path_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (seen_.find(key) == seen_.end()) {
        throw FormatError(path_ + ": unknown key '" + key + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json flags_to_json(const TrainFlags& f) {
  return json{{"decomposition", f.decomposition},
              {"masking", f.masking},
              {"adaptive", f.adaptive},
              {"freeze_coefficients", f.freeze_coefficients},
              {"delta_dropout", f.delta_dropout}};
}

TrainFlags flags_from_json(const json& j, const std::string& path) {
  TrainFlags f;
  StrictObject o(j, path);
  o.read("decomposition", f.decomposition);
  o.read("masking", f.masking);
  o.read("adaptive", f.adaptive);
  o.read("freeze_coefficients", f.freeze_coefficients);
  o.read("delta_dropout", f.delta_dropout);
  o.finish();
  return f;
}

}  // namespace

json to_json(const RunConfig& c) {
  json j;
  j["backbone"] = {{"blocks", c.backbone.blocks},   {"dim", c.backbone.dim},
                   {"heads", c.backbone.heads},     {"patch_tokens", c.backbone.patch_tokens},
                   {"n_classes", c.backbone.n_classes}, {"seed", c.backbone.seed}};
  j["adapter"] = {{"r", c.adapter.r},
                  {"sub_rank", c.adapter.sub_rank},
                  {"coeff_init", c.adapter.coeff_init},
                  {"init_std", c.adapter.init_std},
                  {"flags", flags_to_json(c.adapter.flags)}};
  json masking = {{"strategy", to_string(c.masking.strategy)},
                  {"pattern", to_string(c.masking.pattern)},
                  {"p", c.masking.p},
                  {"seed", c.masking.seed}};
  if (c.masking.probs.has_value()) masking["probs"] = *c.masking.probs;
  if (c.masking.counts.has_value()) masking["counts"] = *c.masking.counts;
  j["masking"] = std::move(masking);
  j["train"] = {{"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"epochs", c.train.epochs},
                {"seeds",
                 {{"init", c.train.seeds.init},
                  {"data", c.train.seeds.data},
                  {"dropout", c.train.seeds.dropout}}},
                {"head_weight_decay", c.train.head_weight_decay}};
  j["task"] = {{"type", c.task.type == TaskConfig::Type::synthetic ? "synthetic" : "csv"},
               {"n_classes", c.task.n_classes},
               {"n_train", c.task.n_train},
               {"n_val", c.task.n_val},
               {"n_test", c.task.n_test},
               {"difficulty", c.task.difficulty},
               {"seed", c.task.seed},
               {"export_splits", c.task.export_splits},
               {"train", c.task.train},
               {"val", c.task.val},
               {"test", c.task.test}};
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictObject root(j, "config");
  if (root.has("backbone")) {
    StrictObject o(root.at("backbone"), "backbone");
    o.read("blocks", c.backbone.blocks);
    o.read("dim", c.backbone.dim);
    o.read("heads", c.backbone.heads);
    o.read("patch_tokens", c.backbone.patch_tokens);
    o.read("n_classes", c.backbone.n_classes);
    o.read("seed", c.backbone.seed);
    o.finish();
  }
  if (root.has("adapter")) {
    StrictObject o(root.at("adapter"), "adapter");
    o.read("r", c.adapter.r);
    o.read("sub_rank", c.adapter.sub_rank);
    o.read("coeff_init", c.adapter.coeff_init);
    o.read("init_std", c.adapter.init_std);
    if (o.has("flags")) c.adapter.flags = flags_from_json(o.at("flags"), "adapter.flags");
    o.finish();
  }
  if (root.has("masking")) {
    StrictObject o(root.at("masking"), "masking");
    std::string strategy = to_string(c.masking.strategy);
    std::string pattern = to_string(c.masking.pattern);
    o.read("strategy", strategy);
    o.read("pattern", pattern);
    try {
      c.masking.strategy = mask_strategy_from_string(strategy);
      c.masking.pattern = mask_pattern_from_string(pattern);
    } catch (const ParameterError& e) {
      throw FormatError(std::string("masking: ") + e.what());
    }
    o.read("p", c.masking.p);
    o.read("seed", c.masking.seed);
    if (o.has("probs")) {
      c.masking.probs = o.at("probs").get<std::vector<double>>();
    }
    if (o.has("counts")) {
      c.masking.counts = o.at("counts").get<std::vector<int>>();
    }
    o.finish();
  }
  if (root.has("train")) {
    StrictObject o(root.at("train"), "train");
    o.read("batch_size", c.train.batch_size);
    o.read("lr", c.train.lr);
    o.read("weight_decay", c.train.weight_decay);
    o.read("epochs", c.train.epochs);
    if (o.has("seeds")) {
      StrictObject s(o.at("seeds"), "train.seeds");
      s.read("init", c.train.seeds.init);
      s.read("data", c.train.seeds.data);
      s.read("dropout", c.train.seeds.dropout);
      s.finish();
    }
    o.read("head_weight_decay", c.train.head_weight_decay);
    o.finish();
  }
  if (root.has("task")) {
    StrictObject o(root.at("task"), "task");
    std::string type = c.task.type == TaskConfig::Type::synthetic ? "synthetic" : "csv";
    o.read("type", type);
    if (type == "synthetic") {
      c.task.type = TaskConfig::Type::synthetic;
    } else if (type == "csv") {
      c.task.type = TaskConfig::Type::csv;
    } else {
      throw FormatError("task.type: expected 'synthetic' or 'csv', got '" + type + "'");
    }
    o.read("n_classes", c.task.n_classes);
    o.read("n_train", c.task.n_train);
    o.read("n_val", c.task.n_val);
    o.read("n_test", c.task.n_test);
    o.read("difficulty", c.task.difficulty);
    o.read("seed", c.task.seed);
    o.read("export_splits", c.task.export_splits);
    o.read("train", c.task.train);
    o.read("val", c.task.val);
    o.read("test", c.task.test);
    o.finish();
  }
  root.read("output_dir", c.output_dir);
  root.finish();
  return c;
}

RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("config parse error in " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

void write_run_config(const RunConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out << to_json(config).dump(2) << "\n";
}

void apply_dotted_override(json& doc, const std::string& key, const std::string& value) {
  if (key.empty()) throw FormatError("--set: empty key");
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw FormatError("--set: malformed key '" + key + "'");
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;  // plain string
      }
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

MaskSchedule resolve_schedule(const RunConfig& config) {
  const int layers = config.backbone.blocks;
  MaskSchedule s = make_schedule(config.masking.strategy, config.masking.pattern, layers,
                                 config.adapter.r, config.masking.p, config.masking.seed);
  if (config.masking.counts.has_value()) {
    if (static_cast<int>(config.masking.counts->size()) != layers) {
      throw ParameterError("masking.counts must have one entry per layer");
    }
    for (int v : *config.masking.counts) {
      if (v < 0) throw ParameterError("masking.counts entries must be >= 0");
    }
    s.counts = *config.masking.counts;
  }
  if (config.masking.probs.has_value()) {
    if (static_cast<int>(config.masking.probs->size()) != layers) {
      throw ParameterError("masking.probs must have one entry per layer");
    }
    for (double p : *config.masking.probs) {
      if (p < 0.0 || p >= 1.0) throw ParameterError("masking.probs entries must be in [0,1)");
    }
    s.probs = *config.masking.probs;
  }
  if (s.strategy == MaskStrategy::stochastic) {
    for (int v : s.counts) {
      if (v != config.adapter.r) {
        throw ParameterError("masking.counts must equal adapter.r under stochastic masking");
      }
    }
  } else {
    s.slots = *std::max_element(s.counts.begin(), s.counts.end());
    if (s.slots < 1) throw ParameterError("masking.counts must activate at least one expert");
  }
  if (s.strategy == MaskStrategy::mixed) {
    for (double p : s.probs) {
      if (p != s.probs[0]) {
        throw ParameterError("masking.probs must be uniform under mixed masking");
      }
    }
  }
  return s;
}

BackboneModel build_model(const RunConfig& config) {
  BackboneModel model = build_backbone(config.backbone);
  const MaskSchedule schedule = resolve_schedule(config);
  inject_adapters(model, config.adapter, bank_slots(schedule), config.train.seeds.init);
  return model;
}

SyntheticTaskData materialize_task(const RunConfig& config) {
  if (config.task.type == TaskConfig::Type::synthetic) {
    return make_synthetic_task(config.task.n_classes, config.task.n_train, config.task.n_val,
                               config.task.n_test, config.backbone.patch_tokens,
                               config.backbone.dim, config.task.difficulty,
                               config.task.seed);
  }
  SyntheticTaskData task;
  task.train = read_dataset(config.task.train);
  if (!config.task.val.empty()) task.val = read_dataset(config.task.val);
  if (!config.task.test.empty()) task.test = read_dataset(config.task.test);
  task.n_classes = config.backbone.n_classes;
  return task;
}

}  // namespace mlae
