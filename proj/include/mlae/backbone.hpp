#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mlae/experts.hpp"
#include "mlae/masking.hpp"
#include "mlae/matrix.hpp"
#include "mlae/tape.hpp"

namespace mlae {

struct BackboneConfig {
  int blocks = 12;       // encoder depth L
  int dim = 64;          // embedding width d
  int heads = 4;
  int patch_tokens = 16;
  int n_classes = 10;
  std::uint64_t seed = 0;

  bool operator==(const BackboneConfig&) const = default;
};

/// One pre-norm encoder block. All weights are frozen; the only learned
/// state is the optional expert bank attached to the fused QKV projection.
struct BlockWeights {
  Matrix ln1_gamma, ln1_beta;
  Matrix qkv_w, qkv_b;    // d x 3d fused projection
  Matrix proj_w, proj_b;  // d x d
  Matrix ln2_gamma, ln2_beta;
  Matrix mlp_w1, mlp_b1;  // d x 4d
  Matrix mlp_w2, mlp_b2;  // 4d x d
  std::optional<ExpertBank> adapter;
};

/// Frozen tiny transformer encoder with a trainable classifier head.
/// Inputs are token grids (patch_tokens x dim per sample), stacked
/// vertically into one (batch * patch_tokens) x dim matrix.
struct BackboneModel {
  BackboneConfig config;
  Matrix embed_w;    // dim x dim frozen token projection
  Matrix pos_embed;  // patch_tokens x dim frozen
  std::vector<BlockWeights> blocks;
  Matrix final_ln_gamma, final_ln_beta;
  Matrix head_w, head_b;  // trainable

  bool has_adapters() const;
};

struct AdapterSettings {
  int r = 8;  // per-layer expert budget (total rank)
  int sub_rank = 1;
  double coeff_init = 1.0;
  double init_std = 0.02;
  TrainFlags flags;

  bool operator==(const AdapterSettings&) const = default;
};

/// Deterministic Gaussian-initialized frozen weights; identical
/// config+seed gives bit-identical models. Only the classifier head is
/// trainable until adapters are injected.
BackboneModel build_backbone(const BackboneConfig& config);

/// Attaches one expert bank to every block's fused QKV projection.
/// `slots` experts are allocated per bank (the masking schedule's slot
/// count; equals r for stochastic masking). Throws StateError if any
/// block already has an adapter.
void inject_adapters(BackboneModel& model, const AdapterSettings& settings, int slots,
                     std::uint64_t seed);

/// Bank slot count implied by a schedule.
int bank_slots(const MaskSchedule& schedule);

/// Trainable-leaf handles for one forward/backward step.
struct ModelLeaves {
  Value head_w, head_b;
  std::vector<BankLeaves> banks;  // one per block, empty vectors when no adapter
  // (model tensor, tape leaf) pairs in stable order; the optimizer's view.
  std::vector<std::pair<Matrix*, Value>> pairs;
  // pairs[i] participates in decoupled weight decay?
  std::vector<bool> decay;
};

/// Registers head and adapter parameters as trainable tape leaves.
/// head_weight_decay controls whether the classifier head is flagged
/// for weight decay.
ModelLeaves register_trainable(Tape& tape, BackboneModel& model, bool head_weight_decay);

/// Masks for every block, drawn from per-layer substreams of step_rng.
std::vector<MaskSample> sample_step_masks(const BackboneModel& model,
                                          const MaskSchedule& schedule, Prng& step_rng,
                                          bool inference);

/// Differentiable forward pass to logits (batch x n_classes). masks must
/// hold one entry per block when the model has adapters.
Value forward_logits_on_tape(Tape& tape, const BackboneModel& model,
                             const ModelLeaves& leaves, const Matrix& tokens,
                             const std::vector<MaskSample>& masks);

/// Plain inference logits (full masks where applicable, no scaling).
Matrix forward_logits(const BackboneModel& model, const Matrix& tokens,
                      const MaskSchedule& schedule);
/// Plain forward with explicit masks (train-mode evaluation and checks).
Matrix forward_logits_with_masks(const BackboneModel& model, const Matrix& tokens,
                                 const std::vector<MaskSample>& masks);

/// Folds every bank into its frozen QKV weight (all experts, no scaling)
/// and removes the adapters. The result carries no extra tensors.
BackboneModel merge_model(const BackboneModel& model);

/// Stable name -> tensor walk used by checkpointing and hashing.
/// Adapter tensors come last; frozen tensors exclude head and adapters.
std::vector<std::pair<std::string, const Matrix*>> named_tensors(const BackboneModel& model);
std::vector<std::pair<std::string, Matrix*>> named_tensors_mut(BackboneModel& model);

/// FNV-1a over every frozen tensor; unchanged by any amount of training.
std::uint64_t frozen_weights_hash(const BackboneModel& model);

/// Closed-form trainable-parameter census. With a schedule, permanently
/// masked expert slots (fixed/mixed strategies) are excluded, matching
/// sum_l c_l * sub_rank * (d_in + d_out + adaptive) + head.
long long trainable_parameter_count(const BackboneModel& model,
                                    const MaskSchedule* schedule = nullptr);

}  // namespace mlae
