#include "mlae/masking.hpp"

#include <algorithm>
#include <numeric>

namespace mlae {

namespace {

constexpr int kPresetLayers = 12;
constexpr int kPresetBudget = 96;
constexpr int kRandomLow = 1;
constexpr int kRandomHigh = 14;

void require_preset_dims(const char* what, int layers, int budget) {
  if (layers != kPresetLayers || budget != kPresetBudget) {
    throw ParameterError(std::string(what) +
                         ": preset patterns are defined for 12 layers and budget 96, got " +
                         std::to_string(layers) + "/" + std::to_string(budget));
  }
}

void validate_prob(double p) {
  if (p < 0.0 || p >= 1.0) {
    throw ParameterError("dropout probability must lie in [0,1), got " + std::to_string(p));
  }
}

}  // namespace

std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::fixed: return "fixed";
    case MaskStrategy::stochastic: return "stochastic";
    case MaskStrategy::mixed: return "mixed";
  }
  return "?";
}

std::string to_string(MaskPattern p) {
  switch (p) {
    case MaskPattern::incremental: return "incremental";
    case MaskPattern::decremental: return "decremental";
    case MaskPattern::hourglass: return "hourglass";
    case MaskPattern::protruding: return "protruding";
    case MaskPattern::random: return "random";
    case MaskPattern::uniform: return "uniform";
  }
  return "?";
}

MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "fixed") return MaskStrategy::fixed;
  if (s == "stochastic") return MaskStrategy::stochastic;
  if (s == "mixed") return MaskStrategy::mixed;
  throw ParameterError("unknown masking strategy: " + s);
}

MaskPattern mask_pattern_from_string(const std::string& s) {
  if (s == "incremental") return MaskPattern::incremental;
  if (s == "decremental") return MaskPattern::decremental;
  if (s == "hourglass") return MaskPattern::hourglass;
  if (s == "protruding") return MaskPattern::protruding;
  if (s == "random") return MaskPattern::random;
  if (s == "uniform") return MaskPattern::uniform;
  throw ParameterError("unknown masking pattern: " + s);
}

int MaskSchedule::total_budget() const {
  return std::accumulate(counts.begin(), counts.end(), 0);
}

std::vector<int> fixed_pattern(MaskPattern pattern, int layers, int budget,
                               std::uint64_t seed) {
  if (layers < 1 || budget < layers) {
    throw ParameterError("fixed_pattern: need layers >= 1 and budget >= layers");
  }
  switch (pattern) {
    case MaskPattern::incremental:
      require_preset_dims("incremental", layers, budget);
      return {2, 2, 2, 6, 6, 6, 10, 10, 10, 14, 14, 14};
    case MaskPattern::decremental:
      require_preset_dims("decremental", layers, budget);
      return {14, 14, 14, 10, 10, 10, 6, 6, 6, 2, 2, 2};
    case MaskPattern::hourglass:
      require_preset_dims("hourglass", layers, budget);
      return {14, 14, 14, 2, 2, 2, 2, 2, 2, 14, 14, 14};
    case MaskPattern::protruding:
      require_preset_dims("protruding", layers, budget);
      return {2, 2, 2, 14, 14, 14, 14, 14, 14, 2, 2, 2};
    case MaskPattern::random: {
      require_preset_dims("random", layers, budget);
      // Layer counts in [1,14] whose mean is exactly 8 (sum = 96),
      // found by rejection sampling.
      Prng rng(seed);
      std::vector<int> counts(layers);
      for (int attempt = 0; attempt < 1000000; ++attempt) {
        int sum = 0;
        for (int& c : counts) {
          c = kRandomLow +
              static_cast<int>(rng.next_uniform() * (kRandomHigh - kRandomLow + 1));
          c = std::min(c, kRandomHigh);
          sum += c;
        }
        if (sum == budget) return counts;
      }
      throw ParameterError("fixed_pattern: random draw did not reach the budget");
    }
    case MaskPattern::uniform: {
      std::vector<int> counts(layers, budget / layers);
      for (int i = 0; i < budget % layers; ++i) ++counts[i];
      return counts;
    }
  }
  throw ParameterError("fixed_pattern: unknown pattern");
}

std::vector<double> stochastic_schedule(MaskPattern pattern, int layers, double uniform_p) {
  switch (pattern) {
    case MaskPattern::incremental:
      if (layers != kPresetLayers) require_preset_dims("incremental", layers, kPresetBudget);
      return {0.8, 0.8, 0.7, 0.7, 0.6, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0};
    case MaskPattern::decremental:
      if (layers != kPresetLayers) require_preset_dims("decremental", layers, kPresetBudget);
      return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.6, 0.7, 0.7, 0.8, 0.8};
    case MaskPattern::hourglass:
      if (layers != kPresetLayers) require_preset_dims("hourglass", layers, kPresetBudget);
      return {0.0, 0.1, 0.3, 0.5, 0.6, 0.8, 0.8, 0.6, 0.5, 0.3, 0.1, 0.0};
    case MaskPattern::protruding:
      if (layers != kPresetLayers) require_preset_dims("protruding", layers, kPresetBudget);
      return {0.8, 0.6, 0.5, 0.3, 0.1, 0.0, 0.0, 0.1, 0.3, 0.5, 0.6, 0.8};
    case MaskPattern::uniform: {
      validate_prob(uniform_p);
      return std::vector<double>(layers, uniform_p);
    }
    case MaskPattern::random:
      throw ParameterError("stochastic_schedule: no random probability preset");
  }
  throw ParameterError("stochastic_schedule: unknown pattern");
}

MaskSchedule make_schedule(MaskStrategy strategy, MaskPattern pattern, int layers,
                           int rank_per_layer, double uniform_p, std::uint64_t seed) {
  if (layers < 1) throw ParameterError("make_schedule: layers must be >= 1");
  if (rank_per_layer < 1) throw ParameterError("make_schedule: rank must be >= 1");
  MaskSchedule s;
  s.strategy = strategy;
  s.pattern = pattern;
  s.seed = seed;
  const int budget = layers * rank_per_layer;
  switch (strategy) {
    case MaskStrategy::stochastic:
      s.counts.assign(layers, rank_per_layer);
      s.probs = stochastic_schedule(pattern, layers, uniform_p);
      s.slots = rank_per_layer;
      break;
    case MaskStrategy::fixed:
      s.counts = fixed_pattern(pattern, layers, budget, seed);
      s.probs.assign(layers, 0.0);
      s.slots = *std::max_element(s.counts.begin(), s.counts.end());
      break;
    case MaskStrategy::mixed:
      // Permanent layer-wise allocation plus one uniform dropout rate.
      validate_prob(uniform_p);
      s.counts = fixed_pattern(pattern, layers, budget, seed);
      s.probs.assign(layers, uniform_p);
      s.slots = *std::max_element(s.counts.begin(), s.counts.end());
      break;
  }
  for (double p : s.probs) validate_prob(p);
  return s;
}

MaskSample sample_mask(const MaskSchedule& schedule, int layer, Prng& rng, bool inference) {
  return sample_mask_for(schedule, layer, schedule.slots, 1, rng, inference);
}

MaskSample sample_mask_for(const MaskSchedule& schedule, int layer, int n_experts,
                           int sub_rank, Prng& rng, bool inference) {
  if (layer < 0 || layer >= schedule.layers()) {
    throw ParameterError("sample_mask: layer " + std::to_string(layer) + " out of range");
  }
  if (n_experts < 1 || sub_rank < 1 || n_experts * sub_rank != schedule.slots) {
    throw ParameterError("sample_mask: bank shape does not match the schedule slots");
  }
  int active = n_experts;
  if (schedule.strategy != MaskStrategy::stochastic) {
    const int count = std::min(schedule.counts[layer], schedule.slots);
    if (count % sub_rank != 0) {
      throw ParameterError("sample_mask: layer count " + std::to_string(count) +
                           " is not a multiple of sub_rank " + std::to_string(sub_rank));
    }
    active = count / sub_rank;
  }
  MaskSample m;
  m.layer_id = layer;
  m.bits.assign(n_experts, 0);
  m.scale = 1.0;

  const double p = schedule.probs[layer];
  validate_prob(p);
  const bool drops = schedule.strategy != MaskStrategy::fixed && !inference && p > 0.0;
  for (int i = 0; i < active; ++i) {
    if (drops) {
      m.bits[i] = rng.next_uniform() >= p ? 1 : 0;
    } else {
      m.bits[i] = 1;
    }
  }
  if (drops) m.scale = 1.0 / (1.0 - p);
  return m;
}

}  // namespace mlae
