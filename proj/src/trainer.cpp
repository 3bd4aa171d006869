#include "mlae/trainer.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mlae {

namespace {

constexpr char kDatasetMagic[4] = {'M', 'L', 'D', 'S'};

// Purpose tags for stream derivation (see backbone.cpp).
enum : std::uint64_t {
  kTagData = 1002,
  kTagDropout = 1003,
  kTagTask = 1004,
};

void require_nonempty(const Dataset& ds, const char* what) {
  if (ds.size() == 0) throw ParameterError(std::string(what) + ": empty split");
}

Matrix gather_rows(const Matrix& tokens, const std::vector<int>& sample_ids, int t) {
  Matrix out(static_cast<int>(sample_ids.size()) * t, tokens.cols());
  for (std::size_t s = 0; s < sample_ids.size(); ++s) {
    const int src = sample_ids[s] * t;
    for (int i = 0; i < t; ++i)
      std::memcpy(out.row(static_cast<int>(s) * t + i), tokens.row(src + i),
                  tokens.cols() * sizeof(double));
  }
  return out;
}

// Fisher-Yates with the given stream.
std::vector<int> permutation(int n, Prng rng) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_uniform() * (i + 1));
    std::swap(order[i], order[std::min(j, i)]);
  }
  return order;
}

std::vector<Matrix> snapshot_trainable(const BackboneModel& model) {
  std::vector<Matrix> snap;
  for (const auto& [name, mat] : named_tensors(model)) {
    if (name.rfind("head.", 0) == 0 || name.find(".adapter.") != std::string::npos) {
      snap.push_back(*mat);
    }
  }
  return snap;
}

void restore_trainable(BackboneModel& model, const std::vector<Matrix>& snap) {
  std::size_t k = 0;
  for (auto& [name, mat] : named_tensors_mut(model)) {
    if (name.rfind("head.", 0) == 0 || name.find(".adapter.") != std::string::npos) {
      *mat = snap.at(k++);
    }
  }
}

}  // namespace

SyntheticTaskData make_synthetic_task(int n_classes, int n_train, int n_val, int n_test,
                                      int tokens, int dim, double difficulty,
                                      std::uint64_t seed) {
  if (n_classes < 2) throw ParameterError("make_synthetic_task: need at least 2 classes");
  if (n_train < n_classes) {
    throw ParameterError("make_synthetic_task: n_train must be >= n_classes");
  }
  if (n_val < 0 || n_test < 0) throw ParameterError("make_synthetic_task: negative split");
  if (tokens < 1 || dim < 1) throw ParameterError("make_synthetic_task: bad grid shape");
  if (difficulty < 0.0) throw ParameterError("make_synthetic_task: difficulty must be >= 0");

  Prng root = Prng(seed).split(kTagTask);
  Prng template_root = root.split(0);
  Prng noise_root = root.split(1);

  // Rank-3 class templates, normalized so entries are O(1).
  const int template_rank = 3;
  std::vector<Matrix> templates;
  templates.reserve(n_classes);
  for (int c = 0; c < n_classes; ++c) {
    Prng ts = template_root.split(c);
    Prng us = ts.split(0);
    Prng vs = ts.split(1);
    Matrix u = gaussian_init(tokens, template_rank, 1.0, us);
    Matrix v = gaussian_init(template_rank, dim, 1.0, vs);
    templates.push_back(scale(matmul(u, v), 1.0 / std::sqrt(double(template_rank))));
  }

  SyntheticTaskData task;
  task.n_classes = n_classes;
  const int counts[3] = {n_train, n_val, n_test};
  Dataset* splits[3] = {&task.train, &task.val, &task.test};
  for (int s = 0; s < 3; ++s) {
    Dataset& ds = *splits[s];
    const int n = counts[s];
    ds.tokens_per_sample = tokens;
    ds.tokens = Matrix(n * tokens, dim);
    ds.labels.resize(n);
    Prng split_noise = noise_root.split(s);
    for (int i = 0; i < n; ++i) {
      const int label = i % n_classes;  // balanced by construction
      ds.labels[i] = label;
      const Matrix& tmpl = templates[label];
      if (difficulty > 0.0) {
        Prng ns = split_noise.split(i);
        for (int r = 0; r < tokens; ++r)
          for (int j = 0; j < dim; ++j)
            ds.tokens(i * tokens + r, j) = tmpl(r, j) + difficulty * ns.next_gaussian();
      } else {
        for (int r = 0; r < tokens; ++r)
          for (int j = 0; j < dim; ++j) ds.tokens(i * tokens + r, j) = tmpl(r, j);
      }
    }
  }
  return task;
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw FormatError("cannot open for writing: " + path);
  const int t = ds.tokens_per_sample, d = ds.dim();
  std::fputs("label", f);
  for (int r = 0; r < t; ++r)
    for (int j = 0; j < d; ++j) std::fprintf(f, ",t%d_%d", r, j);
  std::fputc('\n', f);
  for (int i = 0; i < ds.size(); ++i) {
    std::fprintf(f, "%d", ds.labels[i]);
    for (int r = 0; r < t; ++r)
      for (int j = 0; j < d; ++j) std::fprintf(f, ",%.17g", ds.tokens(i * t + r, j));
    std::fputc('\n', f);
  }
  std::fclose(f);
}

Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset: " + path);
  std::string header;
  if (!std::getline(in, header)) throw FormatError("empty dataset file: " + path);
  // header: label,t0_0,...,t{T-1}_{d-1}
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  if (cols.empty() || cols[0] != "label") {
    throw FormatError("dataset header must start with 'label': " + path);
  }
  int t = 0, d = 0;
  if (cols.size() > 1) {
    const std::string& last = cols.back();
    int tr, tc;
    if (std::sscanf(last.c_str(), "t%d_%d", &tr, &tc) != 2) {
      throw FormatError("bad token column name '" + last + "' in " + path);
    }
    t = tr + 1;
    d = tc + 1;
    if (static_cast<std::size_t>(t) * d + 1 != cols.size()) {
      throw FormatError("token column count mismatch in " + path);
    }
  }
  std::vector<double> values;
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    if (!std::getline(ss, tok, ',')) throw FormatError("bad row in " + path);
    labels.push_back(std::stoi(tok));
    int got = 0;
    while (std::getline(ss, tok, ',')) {
      values.push_back(std::stod(tok));
      ++got;
    }
    if (got != t * d) throw FormatError("row width mismatch in " + path);
  }
  Dataset ds;
  ds.tokens_per_sample = t;
  ds.labels = std::move(labels);
  ds.tokens = Matrix(static_cast<int>(ds.labels.size()) * t, d);
  std::memcpy(ds.tokens.data(), values.data(), values.size() * sizeof(double));
  check_finite(ds.tokens, "read_dataset_csv");
  return ds;
}

void write_dataset_bin(const Dataset& ds, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw FormatError("cannot open for writing: " + path);
  const std::uint32_t version = 1;
  const std::uint64_t n = ds.size();
  const std::uint32_t t = ds.tokens_per_sample, d = ds.dim();
  std::fwrite(kDatasetMagic, 1, 4, f);
  std::fwrite(&version, sizeof(version), 1, f);
  std::fwrite(&n, sizeof(n), 1, f);
  std::fwrite(&t, sizeof(t), 1, f);
  std::fwrite(&d, sizeof(d), 1, f);
  for (int i = 0; i < ds.size(); ++i) {
    const std::int32_t label = ds.labels[i];
    std::fwrite(&label, sizeof(label), 1, f);
    std::fwrite(ds.tokens.row(i * ds.tokens_per_sample), sizeof(double),
                static_cast<std::size_t>(t) * d, f);
  }
  std::fclose(f);
}

Dataset read_dataset_bin(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) throw FormatError("cannot open dataset: " + path);
  char magic[4];
  std::uint32_t version = 0, t = 0, d = 0;
  std::uint64_t n = 0;
  bool ok = std::fread(magic, 1, 4, f) == 4 && std::memcmp(magic, kDatasetMagic, 4) == 0 &&
            std::fread(&version, sizeof(version), 1, f) == 1 && version == 1 &&
            std::fread(&n, sizeof(n), 1, f) == 1 &&
            std::fread(&t, sizeof(t), 1, f) == 1 && std::fread(&d, sizeof(d), 1, f) == 1;
  if (!ok) {
    std::fclose(f);
    throw FormatError("bad dataset header: " + path);
  }
  Dataset ds;
  ds.tokens_per_sample = static_cast<int>(t);
  ds.labels.resize(n);
  ds.tokens = Matrix(static_cast<int>(n * t), static_cast<int>(d));
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int32_t label;
    ok = std::fread(&label, sizeof(label), 1, f) == 1 &&
         std::fread(ds.tokens.row(static_cast<int>(i * t)), sizeof(double),
                    static_cast<std::size_t>(t) * d, f) == static_cast<std::size_t>(t) * d;
    if (!ok) {
      std::fclose(f);
      throw FormatError("truncated dataset: " + path);
    }
    ds.labels[i] = label;
  }
  std::fclose(f);
  check_finite(ds.tokens, "read_dataset_bin");
  return ds;
}

Dataset read_dataset(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".bin") {
    return read_dataset_bin(path);
  }
  return read_dataset_csv(path);
}

double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

AdamW::AdamW(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step_raw(std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
                     const std::vector<bool>& decay, double lr, double weight_decay) {
  if (params.size() != grads.size() || params.size() != decay.size()) {
    throw ShapeError("AdamW: params/grads/decay size mismatch");
  }
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.push_back(Matrix::zeros(p->rows(), p->cols()));
      v_.push_back(Matrix::zeros(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) {
    throw StateError("AdamW: parameter set changed between steps");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    const Matrix& g = *grads[k];
    if (!p.same_shape(g)) throw ShapeError("AdamW: gradient shape mismatch");
    const double decay_factor = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.data()[i];
      double& m = m_[k].data()[i];
      double& v = v_[k].data()[i];
      m = beta1_ * m + (1.0 - beta1_) * gi;
      v = beta2_ * v + (1.0 - beta2_) * gi * gi;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      if (decay[k]) p.data()[i] *= decay_factor;
      p.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    check_finite(p, "AdamW::step");
  }
}

void AdamW::step(const std::vector<std::pair<Matrix*, Value>>& pairs,
                 const std::vector<bool>& decay, const Gradients& grads, double lr,
                 double weight_decay) {
  std::vector<Matrix*> params;
  std::vector<const Matrix*> gptrs;
  params.reserve(pairs.size());
  gptrs.reserve(pairs.size());
  for (const auto& [mat, leaf] : pairs) {
    params.push_back(mat);
    gptrs.push_back(&grads.get(leaf));
  }
  step_raw(params, gptrs, decay, lr, weight_decay);
}

TrainResult train(const BackboneModel& initial, const SyntheticTaskData& task,
                  const TrainConfig& config, const MaskSchedule& schedule) {
  if (config.batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
  if (config.epochs < 0) throw ParameterError("train: epochs must be >= 0");
  if (config.lr <= 0.0) throw ParameterError("train: lr must be positive");
  require_nonempty(task.train, "train");

  TrainResult result;
  result.model = initial;
  BackboneModel& model = result.model;
  const int t = model.config.patch_tokens;
  if (task.train.tokens_per_sample != t || task.train.dim() != model.config.dim) {
    throw ShapeError("train: dataset grid does not match backbone config");
  }

  const int n = task.train.size();
  const long steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const long total_steps = steps_per_epoch * config.epochs;

  Prng data_root = Prng(config.seeds.data).split(kTagData);
  Prng dropout_root = Prng(config.seeds.dropout).split(kTagDropout);
  AdamW optimizer;
  long gstep = 0;

  std::vector<Matrix> last_good = snapshot_trainable(model);
  for (int epoch = 0; epoch < config.epochs && !result.diverged; ++epoch) {
    const std::vector<int> order = permutation(n, data_root.split(epoch));
    double loss_sum = 0.0;
    long loss_count = 0;
    double last_lr = config.lr;
    for (long b = 0; b < steps_per_epoch; ++b) {
      const int begin = static_cast<int>(b) * config.batch_size;
      const int end = std::min(n, begin + config.batch_size);
      std::vector<int> ids(order.begin() + begin, order.begin() + end);
      std::vector<int> labels(ids.size());
      for (std::size_t k = 0; k < ids.size(); ++k) labels[k] = task.train.labels[ids[k]];
      const Matrix batch = gather_rows(task.train.tokens, ids, t);

      const double lr_t = cosine_lr(config.lr, gstep, total_steps);
      last_lr = lr_t;
      Prng step_rng = dropout_root.split(gstep);
      try {
        Tape tape;
        ModelLeaves leaves = register_trainable(tape, model, config.head_weight_decay);
        auto masks = sample_step_masks(model, schedule, step_rng, false);
        Value logits = forward_logits_on_tape(tape, model, leaves, batch, masks);
        Value loss = tape.cross_entropy_mean(logits, labels);
        const double loss_val = tape.value(loss)(0, 0);
        if (!std::isfinite(loss_val)) throw NumericError("train: non-finite loss");
        Gradients grads = tape.backward(loss);
        optimizer.step(leaves.pairs, leaves.decay, grads, lr_t, config.weight_decay);
        loss_sum += loss_val;
        ++loss_count;
        ++gstep;
        last_good = snapshot_trainable(model);
      } catch (const NumericError&) {
        restore_trainable(model, last_good);
        result.diverged = true;
        break;
      }
    }
    if (loss_count == 0 && result.diverged) break;
    MetricsRow row;
    row.epoch = epoch + 1;
    row.step = gstep;
    row.train_loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
    row.val_acc = task.val.size() > 0 ? evaluate(model, task.val, schedule) : 0.0;
    row.lr = last_lr;
    result.history.push_back(row);
    if (result.diverged) break;
  }
  result.steps_run = gstep;
  return result;
}

double evaluate(const BackboneModel& model, const Dataset& split,
                const MaskSchedule& schedule) {
  require_nonempty(split, "evaluate");
  const int t = model.config.patch_tokens;
  if (split.tokens_per_sample != t || split.dim() != model.config.dim) {
    throw ShapeError("evaluate: dataset grid does not match backbone config");
  }
  const int n = split.size();
  const int chunk = 256;
  long correct = 0;
  for (int begin = 0; begin < n; begin += chunk) {
    const int end = std::min(n, begin + chunk);
    std::vector<int> ids(end - begin);
    std::iota(ids.begin(), ids.end(), begin);
    const Matrix batch = gather_rows(split.tokens, ids, t);
    const Matrix logits = forward_logits(model, batch, schedule);
    for (int i = 0; i < logits.rows(); ++i) {
      int arg = 0;
      double best = logits(i, 0);
      for (int j = 1; j < logits.cols(); ++j) {
        // strict >: ties resolve to the lowest class index
        if (logits(i, j) > best) {
          best = logits(i, j);
          arg = j;
        }
      }
      if (arg == split.labels[begin + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

void write_metrics_csv(const std::vector<MetricsRow>& history, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw FormatError("cannot open for writing: " + path);
  std::fputs("epoch,step,train_loss,val_acc,lr\n", f);
  for (const MetricsRow& r : history) {
    std::fprintf(f, "%d,%ld,%.17g,%.17g,%.17g\n", r.epoch, r.step, r.train_loss, r.val_acc,
                 r.lr);
  }
  std::fclose(f);
}

}  // namespace mlae
