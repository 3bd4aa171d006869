#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlae/backbone.hpp"
#include "mlae/masking.hpp"
#include "mlae/trainer.hpp"

namespace mlae {

struct MaskingConfig {
  MaskStrategy strategy = MaskStrategy::stochastic;
  MaskPattern pattern = MaskPattern::uniform;
  double p = 0.5;  // uniform dropout probability (uniform pattern / mixed)
  std::uint64_t seed = 0;
  // Explicit per-layer overrides; normally derived from the pattern.
  std::optional<std::vector<double>> probs;
  std::optional<std::vector<int>> counts;

  bool operator==(const MaskingConfig&) const = default;
};

struct TaskConfig {
  enum class Type { synthetic, csv };
  Type type = Type::synthetic;
  // synthetic
  int n_classes = 10;
  int n_train = 256;
  int n_val = 64;
  int n_test = 256;
  double difficulty = 0.8;
  std::uint64_t seed = 5;
  bool export_splits = false;
  // csv / bin paths
  std::string train, val, test;

  bool operator==(const TaskConfig&) const = default;
};

/// One fully serializable run description. The defaults reproduce the
/// headline recipe: 8 rank-1 experts per block, uniform stochastic
/// masking at p=0.5, coefficients initialized to 1, AdamW at
/// 5e-4 / 1e-4 / batch 64.
struct RunConfig {
  BackboneConfig backbone;
  AdapterSettings adapter;
  MaskingConfig masking;
  TrainConfig train;
  TaskConfig task;
  std::string output_dir = "out";

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);
/// Strict: unknown keys anywhere are a FormatError naming the field.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig read_run_config(const std::string& path);
void write_run_config(const RunConfig& config, const std::string& path);

/// Sets `dotted.key` to `value` (parsed as JSON when possible, else as a
/// string), creating intermediate objects as needed.
void apply_dotted_override(nlohmann::json& doc, const std::string& key,
                           const std::string& value);

/// Materialized schedule for this run, explicit overrides applied.
MaskSchedule resolve_schedule(const RunConfig& config);

/// Frozen backbone with adapters injected per the config.
BackboneModel build_model(const RunConfig& config);

/// Synthetic generation or dataset-file ingestion per the task section.
SyntheticTaskData materialize_task(const RunConfig& config);

}  // namespace mlae
