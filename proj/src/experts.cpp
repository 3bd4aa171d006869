#include "mlae/experts.hpp"

namespace mlae {

namespace {

void require_mask_matches(const ExpertBank& bank, const MaskSample& mask) {
  if (mask.layer_id != bank.layer_id) {
    throw ContractError("mask layer " + std::to_string(mask.layer_id) +
                        " does not match bank layer " + std::to_string(bank.layer_id));
  }
  if (static_cast<int>(mask.bits.size()) != bank.n_experts()) {
    throw ShapeError("mask has " + std::to_string(mask.bits.size()) + " bits for " +
                     std::to_string(bank.n_experts()) + " experts");
  }
}

}  // namespace

bool Expert::is_zero() const {
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b.data()[i] != 0.0) return false;
  return true;
}

long long ExpertBank::parameter_count() const {
  const long long per_cell = d_in + d_out + (flags.adaptive ? 1 : 0);
  return static_cast<long long>(n_experts()) * sub_rank * per_cell;
}

int MaskSample::popcount() const {
  int n = 0;
  for (auto b : bits) n += b ? 1 : 0;
  return n;
}

MaskSample MaskSample::full(int layer_id, int n_experts) {
  MaskSample m;
  m.layer_id = layer_id;
  m.bits.assign(n_experts, 1);
  m.scale = 1.0;
  return m;
}

ExpertBank make_expert_bank(int layer_id, int d_in, int d_out, int n_experts, int sub_rank,
                            double coeff_init, double init_std, TrainFlags flags,
                            Prng stream) {
  if (d_in < 1 || d_out < 1) throw ParameterError("expert bank: dims must be >= 1");
  if (n_experts < 1) throw ParameterError("expert bank: need at least one expert");
  if (sub_rank < 1) throw ParameterError("expert bank: sub_rank must be >= 1");
  if (coeff_init <= 0.0) throw ParameterError("expert bank: coeff_init must be positive");
  ExpertBank bank;
  bank.layer_id = layer_id;
  bank.d_in = d_in;
  bank.d_out = d_out;
  bank.sub_rank = sub_rank;
  bank.flags = flags;
  bank.experts.reserve(n_experts);
  // Coefficients are pinned at 1 when the adaptive component is off.
  const double lam = flags.adaptive ? coeff_init : 1.0;
  for (int j = 0; j < n_experts; ++j) {
    Prng sub = stream.split(j);
    Expert e;
    e.b = Matrix::zeros(d_in, sub_rank);
    e.a = gaussian_init(sub_rank, d_out, init_std, sub);
    e.lambda = Matrix::filled(1, sub_rank, lam);
    bank.experts.push_back(std::move(e));
  }
  return bank;
}

ExpertBank decompose(int d_in, int d_out, int r, double coeff_init, double init_std,
                     std::uint64_t seed, TrainFlags flags, int layer_id) {
  if (r < 1) throw ParameterError("decompose: r must be >= 1");
  return make_expert_bank(layer_id, d_in, d_out, r, 1, coeff_init, init_std, flags,
                          Prng(seed));
}

ExpertBank submatrix_variant(int d_in, int d_out, int sub_rank, int n_experts, int budget,
                             double coeff_init, double init_std, std::uint64_t seed,
                             TrainFlags flags, int layer_id) {
  if (sub_rank < 1 || n_experts < 1) {
    throw ParameterError("submatrix_variant: sub_rank and n_experts must be >= 1");
  }
  if (sub_rank * n_experts != budget) {
    throw ParameterError("submatrix_variant: sub_rank * n_experts = " +
                         std::to_string(sub_rank * n_experts) + " != budget " +
                         std::to_string(budget));
  }
  return make_expert_bank(layer_id, d_in, d_out, n_experts, sub_rank, coeff_init, init_std,
                          flags, Prng(seed));
}

Matrix assemble_delta(const ExpertBank& bank, const MaskSample& mask) {
  require_mask_matches(bank, mask);
  Matrix delta(bank.d_in, bank.d_out);
  for (int j = 0; j < bank.n_experts(); ++j) {
    if (!mask.bits[j]) continue;
    const Expert& e = bank.experts[j];
    for (int c = 0; c < bank.sub_rank; ++c) {
      const double coef = mask.scale * e.lambda(0, c);
      for (int p = 0; p < bank.d_in; ++p) {
        const double bpc = coef * e.b(p, c);
        if (bpc == 0.0) continue;
        double* drow = delta.row(p);
        const double* arow = e.a.row(c);
        for (int q = 0; q < bank.d_out; ++q) drow[q] += bpc * arow[q];
      }
    }
  }
  if (mask.has_element_mask()) delta = hadamard(delta, mask.element_mask);
  check_finite(delta, "assemble_delta");
  return delta;
}

Matrix adapter_forward(const Matrix& x, const Matrix& w0, const ExpertBank& bank,
                       const MaskSample& mask) {
  if (x.cols() != w0.rows()) {
    throw ShapeError("adapter_forward: x " + x.shape_str() + " vs w0 " + w0.shape_str());
  }
  if (w0.rows() != bank.d_in || w0.cols() != bank.d_out) {
    throw ShapeError("adapter_forward: w0 " + w0.shape_str() + " vs bank " +
                     std::to_string(bank.d_in) + "x" + std::to_string(bank.d_out));
  }
  return matmul(x, add(w0, assemble_delta(bank, mask)));
}

Matrix merge(const Matrix& w0, const ExpertBank& bank) {
  return add(w0, assemble_delta(bank, MaskSample::full(bank.layer_id, bank.n_experts())));
}

int delta_rank_bound(const ExpertBank& bank, const MaskSample& mask) {
  require_mask_matches(bank, mask);
  return mask.popcount() * bank.sub_rank;
}

BankLeaves register_bank(Tape& tape, const ExpertBank& bank) {
  BankLeaves leaves;
  const bool train_lambda = bank.lambda_trainable();
  for (const Expert& e : bank.experts) {
    leaves.b.push_back(tape.param(e.b));
    leaves.a.push_back(tape.param(e.a));
    leaves.lambda.push_back(train_lambda ? tape.param(e.lambda) : Value{});
  }
  return leaves;
}

Value assemble_delta_on_tape(Tape& tape, const ExpertBank& bank, const BankLeaves& leaves,
                             const MaskSample& mask) {
  require_mask_matches(bank, mask);
  const bool train_lambda = bank.lambda_trainable();
  Value delta{};
  for (int j = 0; j < bank.n_experts(); ++j) {
    if (!mask.bits[j]) continue;  // masked experts see no gradient at all
    const Expert& e = bank.experts[j];
    Value a = leaves.a[j];
    if (train_lambda) {
      a = tape.row_scale(a, leaves.lambda[j]);
    } else {
      bool unit = true;
      for (int c = 0; c < bank.sub_rank; ++c) unit = unit && e.lambda(0, c) == 1.0;
      if (!unit) a = tape.row_scale(a, tape.constant(e.lambda));
    }
    Value term = tape.matmul(leaves.b[j], a);
    if (mask.scale != 1.0) term = tape.scale(term, mask.scale);
    delta = delta.valid() ? tape.add(delta, term) : term;
  }
  if (!delta.valid()) {
    delta = tape.constant(Matrix::zeros(bank.d_in, bank.d_out));
  } else if (mask.has_element_mask()) {
    delta = tape.hadamard_const(delta, mask.element_mask);
  }
  return delta;
}

Value adapter_forward_on_tape(Tape& tape, Value x, const Matrix& w0, const ExpertBank& bank,
                              const BankLeaves& leaves, const MaskSample& mask) {
  Value w = tape.add(tape.constant(w0), assemble_delta_on_tape(tape, bank, leaves, mask));
  return tape.matmul(x, w);
}

}  // namespace mlae
