#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlae/experts.hpp"
#include "mlae/prng.hpp"

namespace mlae {

enum class MaskStrategy { fixed, stochastic, mixed };
enum class MaskPattern { incremental, decremental, hourglass, protruding, random, uniform };

std::string to_string(MaskStrategy s);
std::string to_string(MaskPattern p);
MaskStrategy mask_strategy_from_string(const std::string& s);
MaskPattern mask_pattern_from_string(const std::string& s);

/// Descriptor for one masking strategy over L layers.
///
/// counts holds the number of active expert slots per layer: the preset
/// allocation for fixed/mixed, and simply the layer rank for stochastic.
/// probs holds the per-layer dropout probability (all zero for fixed).
/// slots is the bank size each layer is built with (max count for
/// fixed/mixed so presets up to 14 fit, the rank itself for stochastic).
struct MaskSchedule {
  MaskStrategy strategy = MaskStrategy::stochastic;
  MaskPattern pattern = MaskPattern::uniform;
  std::vector<int> counts;
  std::vector<double> probs;
  std::uint64_t seed = 0;
  int slots = 0;

  int layers() const { return static_cast<int>(counts.size()); }
  // Total trainable expert slots across layers (the rank budget).
  int total_budget() const;

  bool operator==(const MaskSchedule&) const = default;
};

/// Per-layer expert counts for the fixed-masking presets (L=12, budget 96):
///   incremental [2,2,2,6,6,6,10,10,10,14,14,14]
///   decremental [14,14,14,10,10,10,6,6,6,2,2,2]
///   hourglass   [14,14,14,2,2,2,2,2,2,14,14,14]
///   protruding  [2,2,2,14,14,14,14,14,14,2,2,2]
/// `random` rejection-samples integers in [1,14] until the sum is exactly
/// the budget (layer mean 8), deterministically per seed. `uniform`
/// accepts any L/budget and spreads budget evenly.
std::vector<int> fixed_pattern(MaskPattern pattern, int layers, int budget,
                               std::uint64_t seed);

/// Per-layer dropout probabilities for the stochastic presets (L=12):
///   incremental [0.8,0.8,0.7,0.7,0.6,0.6,0.5,0.4,0.3,0.2,0.1,0.0]
///   decremental [0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.6,0.7,0.7,0.8,0.8]
///   hourglass   [0.0,0.1,0.3,0.5,0.6,0.8,0.8,0.6,0.5,0.3,0.1,0.0]
///   protruding  [0.8,0.6,0.5,0.3,0.1,0.0,0.0,0.1,0.3,0.5,0.6,0.8]
/// `uniform` repeats uniform_p for any L.
std::vector<double> stochastic_schedule(MaskPattern pattern, int layers, double uniform_p);

/// Builds a complete schedule. rank_per_layer is the per-layer expert
/// budget (the standard grid uses 8, for a total of 96 at L=12); uniform_p
/// feeds the uniform stochastic pattern and the mixed strategy.
MaskSchedule make_schedule(MaskStrategy strategy, MaskPattern pattern, int layers,
                           int rank_per_layer, double uniform_p, std::uint64_t seed);

/// Draws one layer's mask. Training mode consumes `rng`; inference mode
/// activates every non-permanently-masked expert with scale exactly 1.
MaskSample sample_mask(const MaskSchedule& schedule, int layer, Prng& rng, bool inference);

/// Mask for a bank of n_experts rank-`sub_rank` experts. Layer counts are
/// rank units, so a fixed/mixed layer keeps counts[layer]/sub_rank experts
/// (the division must be exact). sample_mask is the sub_rank=1 case.
MaskSample sample_mask_for(const MaskSchedule& schedule, int layer, int n_experts,
                           int sub_rank, Prng& rng, bool inference);

}  // namespace mlae
