#pragma once

#include <string>
#include <vector>

#include "mlae/backbone.hpp"

namespace mlae {

/// Pairwise cosine similarity of a model's experts, per block and
/// aggregated. Undefined entries (zero experts) are NaN and are excluded
/// from every mean; a mean over an empty set is itself NaN.
struct SimilarityReport {
  std::vector<Matrix> per_block;  // r x r, symmetric, unit diagonal
  std::vector<double> block_mean_signed;
  std::vector<double> block_mean_abs;
  double model_mean_signed = 0.0;
  double model_mean_abs = 0.0;
};

/// Entry (i,j): cosine between the flattened coefficient-free update
/// matrices b_i a_i^T and b_j a_j^T. Computed through the factorization
/// <u v^T, p q^T>_F = (u.p)(v.q) rather than by materializing the
/// d_in x d_out matrices; for rank-1 experts the two routes agree
/// exactly. Zero experts yield NaN rows/columns.
Matrix expert_similarity(const ExpertBank& bank);

/// Same measurement for a vanilla low-rank pair: submatrix i is
/// (column i of B) x (row i of A). B is d_in x r, A is r x d_out.
Matrix lora_similarity(const Matrix& B, const Matrix& A);

/// Per-block similarity matrices plus block-mean and model-mean
/// summaries (signed and absolute, off-diagonal entries only). A bank
/// holding a single rank-r pair is split column/row-wise first, so
/// vanilla-LoRA checkpoints are measured on the same footing.
SimilarityReport model_similarity(const BackboneModel& model);

/// block{i}_similarity.csv (`i,j,cosine` rows) per block plus
/// summary.csv (`block,mean_signed,mean_abs`, one row per block and a
/// final `model` row). Deterministic output, NaN spelled "nan".
void write_similarity_csvs(const SimilarityReport& report, const std::string& dir);

/// block{i}_similarity.svg heatmaps (blue -1 .. white 0 .. red +1,
/// gray for undefined). Pure text emitter.
void write_similarity_svgs(const SimilarityReport& report, const std::string& dir);

}  // namespace mlae
