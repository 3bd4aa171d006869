#include "mlae/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

namespace mlae {

namespace {

const double kNaN = std::nan("");

// Frobenius inner product of B_i A_i and B_j A_j without materializing
// them: tr((B_i^T B_j)(A_j A_i^T)). For rank-1 this is exactly
// (b_i . b_j) * (a_i . a_j).
double pair_inner(const Matrix& bi, const Matrix& ai, const Matrix& bj, const Matrix& aj) {
  const Matrix g = matmul_tn(bi, bj);   // k x k
  const Matrix h = matmul_nt(aj, ai);   // k x k
  double s = 0.0;
  for (int r = 0; r < g.rows(); ++r)
    for (int c = 0; c < g.cols(); ++c) s += g(r, c) * h(c, r);
  return s;
}

Matrix similarity_from_pairs(const std::vector<const Matrix*>& bs,
                             const std::vector<const Matrix*>& as) {
  const int r = static_cast<int>(bs.size());
  std::vector<double> norm_sq(r);
  for (int i = 0; i < r; ++i) norm_sq[i] = pair_inner(*bs[i], *as[i], *bs[i], *as[i]);
  Matrix sim(r, r);
  for (int i = 0; i < r; ++i) {
    for (int j = i; j < r; ++j) {
      double v;
      if (norm_sq[i] <= 0.0 || norm_sq[j] <= 0.0) {
        v = kNaN;  // zero expert: similarity undefined
      } else if (i == j) {
        v = 1.0;
      } else {
        v = pair_inner(*bs[i], *as[i], *bs[j], *as[j]) /
            (std::sqrt(norm_sq[i]) * std::sqrt(norm_sq[j]));
        v = std::max(-1.0, std::min(1.0, v));
      }
      sim(i, j) = v;
      sim(j, i) = v;
    }
  }
  return sim;
}

struct MeanAcc {
  double sum = 0.0, sum_abs = 0.0;
  long n = 0;
  void add(double v) {
    if (std::isnan(v)) return;
    sum += v;
    sum_abs += std::fabs(v);
    ++n;
  }
  double mean() const { return n > 0 ? sum / n : kNaN; }
  double mean_abs() const { return n > 0 ? sum_abs / n : kNaN; }
};

void fprint_value(std::FILE* f, double v) {
  if (std::isnan(v)) {
    std::fputs("nan", f);
  } else {
    std::fprintf(f, "%.17g", v);
  }
}

}  // namespace

Matrix expert_similarity(const ExpertBank& bank) {
  std::vector<const Matrix*> bs, as;
  bs.reserve(bank.n_experts());
  as.reserve(bank.n_experts());
  for (const Expert& e : bank.experts) {
    bs.push_back(&e.b);
    as.push_back(&e.a);
  }
  return similarity_from_pairs(bs, as);
}

Matrix lora_similarity(const Matrix& B, const Matrix& A) {
  if (B.cols() != A.rows()) {
    throw ShapeError("lora_similarity: B " + B.shape_str() + " vs A " + A.shape_str());
  }
  const int r = B.cols();
  std::vector<Matrix> cols(r), rows(r);
  for (int i = 0; i < r; ++i) {
    cols[i] = Matrix(B.rows(), 1);
    for (int p = 0; p < B.rows(); ++p) cols[i](p, 0) = B(p, i);
    rows[i] = Matrix(1, A.cols());
    for (int q = 0; q < A.cols(); ++q) rows[i](0, q) = A(i, q);
  }
  std::vector<const Matrix*> bs(r), as(r);
  for (int i = 0; i < r; ++i) {
    bs[i] = &cols[i];
    as[i] = &rows[i];
  }
  return similarity_from_pairs(bs, as);
}

SimilarityReport model_similarity(const BackboneModel& model) {
  SimilarityReport report;
  MeanAcc model_acc_signed, model_acc_abs;
  bool any_adapter = false;
  for (const auto& blk : model.blocks) {
    if (!blk.adapter.has_value()) continue;
    any_adapter = true;
    const ExpertBank& bank = *blk.adapter;
    Matrix sim;
    if (bank.n_experts() == 1 && bank.sub_rank > 1) {
      // Vanilla checkpoint: split the single rank-r pair column/row-wise.
      sim = lora_similarity(bank.experts[0].b, bank.experts[0].a);
    } else {
      sim = expert_similarity(bank);
    }
    MeanAcc acc;
    for (int i = 0; i < sim.rows(); ++i)
      for (int j = 0; j < sim.cols(); ++j)
        if (i != j) acc.add(sim(i, j));
    report.per_block.push_back(std::move(sim));
    report.block_mean_signed.push_back(acc.mean());
    report.block_mean_abs.push_back(acc.mean_abs());
    if (acc.n > 0) {
      model_acc_signed.add(acc.mean());
      model_acc_abs.add(acc.mean_abs());
    }
  }
  if (!any_adapter) throw FormatError("model_similarity: no adapters present");
  report.model_mean_signed = model_acc_signed.mean();
  report.model_mean_abs = model_acc_abs.mean();
  return report;
}

void write_similarity_csvs(const SimilarityReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t b = 0; b < report.per_block.size(); ++b) {
    const std::string path = dir + "/block" + std::to_string(b) + "_similarity.csv";
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw FormatError("cannot open for writing: " + path);
    std::fputs("i,j,cosine\n", f);
    const Matrix& sim = report.per_block[b];
    for (int i = 0; i < sim.rows(); ++i) {
      for (int j = 0; j < sim.cols(); ++j) {
        std::fprintf(f, "%d,%d,", i, j);
        fprint_value(f, sim(i, j));
        std::fputc('\n', f);
      }
    }
    std::fclose(f);
  }
  const std::string path = dir + "/summary.csv";
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw FormatError("cannot open for writing: " + path);
  std::fputs("block,mean_signed,mean_abs\n", f);
  for (std::size_t b = 0; b < report.per_block.size(); ++b) {
    std::fprintf(f, "%zu,", b);
    fprint_value(f, report.block_mean_signed[b]);
    std::fputc(',', f);
    fprint_value(f, report.block_mean_abs[b]);
    std::fputc('\n', f);
  }
  std::fputs("model,", f);
  fprint_value(f, report.model_mean_signed);
  std::fputc(',', f);
  fprint_value(f, report.model_mean_abs);
  std::fputc('\n', f);
  std::fclose(f);
}

void write_similarity_svgs(const SimilarityReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const int cell = 24, margin = 28;
  for (std::size_t b = 0; b < report.per_block.size(); ++b) {
    const Matrix& sim = report.per_block[b];
    const int n = sim.rows();
    const int w = margin * 2 + cell * n;
    const std::string path = dir + "/block" + std::to_string(b) + "_similarity.svg";
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw FormatError("cannot open for writing: " + path);
    std::fprintf(f,
                 "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                 "viewBox=\"0 0 %d %d\">\n",
                 w, w, w, w);
    std::fprintf(f,
                 "<text x=\"%d\" y=\"18\" font-family=\"monospace\" font-size=\"12\">"
                 "block %zu expert cosine</text>\n",
                 margin, b);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double v = sim(i, j);
        int r, g, bl;
        if (std::isnan(v)) {
          r = g = bl = 180;  // undefined
        } else if (v >= 0.0) {
          // white at 0 to red at +1
          r = 255;
          g = bl = static_cast<int>(255.0 * (1.0 - v));
        } else {
          // white at 0 to blue at -1
          bl = 255;
          r = g = static_cast<int>(255.0 * (1.0 + v));
        }
        std::fprintf(f,
                     "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" "
                     "fill=\"rgb(%d,%d,%d)\" stroke=\"#ccc\"><title>(%d,%d) ",
                     margin + j * cell, margin + i * cell, cell, cell, r, g, bl, i, j);
        fprint_value(f, v);
        std::fputs("</title></rect>\n", f);
      }
    }
    std::fputs("</svg>\n", f);
    std::fclose(f);
  }
}

}  // namespace mlae
