#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mlae/matrix.hpp"
#include "mlae/prng.hpp"
#include "mlae/tape.hpp"

namespace mlae {

/// Component switches for ablations: cellular decomposition into rank-1
/// experts, expert-level masking, and adaptive per-expert coefficients.
struct TrainFlags {
  bool decomposition = true;
  bool masking = true;
  bool adaptive = true;
  // With adaptive on, coefficients may still be held at their initial
  // value instead of being trained.
  bool freeze_coefficients = false;
  // LoRA+Dropout baseline: drop entries of the assembled delta instead of
  // whole experts. Supersedes expert-level masking when set.
  bool delta_dropout = false;

  bool operator==(const TrainFlags&) const = default;
};

/// One expert: a rank-`sub_rank` pair plus its coefficients.
///
/// In the default configuration sub_rank is 1, so b is a column vector,
/// a is a row vector and lambda is a single scalar; the expert's
/// contribution to the update is lambda * b * a. At construction b is
/// all-zero (the initial update is the zero matrix) and a is drawn from a
/// Gaussian, so every expert starts from a distinct state.
struct Expert {
  Matrix b;       // d_in x sub_rank, zero-initialized
  Matrix a;       // sub_rank x d_out, Gaussian-initialized
  Matrix lambda;  // 1 x sub_rank coefficients

  bool is_zero() const;
};

/// The experts adapting one layer's frozen weight matrix.
class ExpertBank {
 public:
  int layer_id = 0;
  int d_in = 0;
  int d_out = 0;
  int sub_rank = 1;
  TrainFlags flags;
  std::vector<Expert> experts;

  int n_experts() const { return static_cast<int>(experts.size()); }
  int total_rank() const { return n_experts() * sub_rank; }
  // Coefficients participate in gradient updates?
  bool lambda_trainable() const { return flags.adaptive && !flags.freeze_coefficients; }
  // Trainable scalar count: n_experts * sub_rank * (d_in + d_out + adaptive).
  long long parameter_count() const;
};

/// One sampled binary mask over a bank's experts. scale is the inverted
/// dropout factor 1/(1-p) during training and exactly 1 at inference.
struct MaskSample {
  MaskSample() = default;
  MaskSample(int layer, std::vector<std::uint8_t> bits_, double scale_)
      : layer_id(layer), bits(std::move(bits_)), scale(scale_) {}

  int layer_id = 0;
  std::vector<std::uint8_t> bits;
  double scale = 1.0;
  // Entrywise 0/1 mask over the assembled delta (LoRA+Dropout baseline);
  // empty in expert-level modes.
  Matrix element_mask;

  bool has_element_mask() const { return element_mask.size() > 0; }

  int popcount() const;
  static MaskSample full(int layer_id, int n_experts);
};

/// r rank-1 experts for a d_in x d_out update: each a-vector drawn from a
/// distinct PRNG substream, each b zero, each coefficient = coeff_init
/// (held at 1 when adaptive is off).
ExpertBank decompose(int d_in, int d_out, int r, double coeff_init, double init_std,
                     std::uint64_t seed, TrainFlags flags = {}, int layer_id = 0);

/// Rank-`sub_rank` experts under a fixed total budget;
/// sub_rank * n_experts must equal budget. sub_rank=1 recovers decompose,
/// n_experts=1 recovers a vanilla rank-`budget` pair.
ExpertBank submatrix_variant(int d_in, int d_out, int sub_rank, int n_experts, int budget,
                             double coeff_init, double init_std, std::uint64_t seed,
                             TrainFlags flags = {}, int layer_id = 0);

/// Stream-seeded variant used when banks are created per layer.
ExpertBank make_expert_bank(int layer_id, int d_in, int d_out, int n_experts, int sub_rank,
                            double coeff_init, double init_std, TrainFlags flags,
                            Prng stream);

/// Masked, coefficient-weighted update matrix:
///   delta = sum_i bits[i] * scale * b_i diag(lambda_i) a_i.
/// Masked experts contribute exactly zero.
Matrix assemble_delta(const ExpertBank& bank, const MaskSample& mask);

/// h = x W0 + x delta. Plain (non-differentiating) evaluation.
Matrix adapter_forward(const Matrix& x, const Matrix& w0, const ExpertBank& bank,
                       const MaskSample& mask);

/// W0 + sum over all experts of lambda_i b_i a_i (full mask, no scaling).
Matrix merge(const Matrix& w0, const ExpertBank& bank);

/// Upper bound on the numerical rank of assemble_delta's output:
/// popcount(bits) * sub_rank.
int delta_rank_bound(const ExpertBank& bank, const MaskSample& mask);

/// Tape handles for a bank's trainable leaves. lambda entries are only
/// valid when the bank trains its coefficients.
struct BankLeaves {
  std::vector<Value> b;
  std::vector<Value> a;
  std::vector<Value> lambda;
};

/// Registers b/a (and lambda when trainable) as tape leaves and returns
/// the handles, in expert order.
BankLeaves register_bank(Tape& tape, const ExpertBank& bank);

/// Differentiable delta assembly. Experts with bits[i]=0 are skipped
/// entirely, so their leaves receive exactly zero gradient.
Value assemble_delta_on_tape(Tape& tape, const ExpertBank& bank, const BankLeaves& leaves,
                             const MaskSample& mask);

/// Differentiable h = x (W0 + delta); W0 stays off the trainable set.
Value adapter_forward_on_tape(Tape& tape, Value x, const Matrix& w0, const ExpertBank& bank,
                              const BankLeaves& leaves, const MaskSample& mask);

}  // namespace mlae
