#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlae/backbone.hpp"
#include "mlae/masking.hpp"

namespace mlae {

struct Seeds {
  std::uint64_t init = 1;     // adapter initialization
  std::uint64_t data = 2;     // epoch shuffling
  std::uint64_t dropout = 3;  // per-step mask sampling

  bool operator==(const Seeds&) const = default;
};

struct TrainConfig {
  int batch_size = 64;
  double lr = 5e-4;
  double weight_decay = 1e-4;
  int epochs = 100;
  Seeds seeds;
  // The classifier head's participation in weight decay is configurable;
  // adapters always decay.
  bool head_weight_decay = true;

  bool operator==(const TrainConfig&) const = default;
};

/// One labeled split: samples stacked vertically, tokens_per_sample rows
/// of `dim` features per sample.
struct Dataset {
  Matrix tokens;
  std::vector<int> labels;
  int tokens_per_sample = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int dim() const { return tokens.cols(); }
};

struct SyntheticTaskData {
  Dataset train, val, test;
  int n_classes = 0;
};

/// Class-conditional token grids: per-class low-rank templates plus
/// entrywise Gaussian noise scaled by `difficulty` (0 = noiseless).
/// Labels are balanced round-robin; identical seeds give identical data.
SyntheticTaskData make_synthetic_task(int n_classes, int n_train, int n_val, int n_test,
                                      int tokens, int dim, double difficulty,
                                      std::uint64_t seed);

// Dataset files. CSV: header `label,t0_0,...`, one row per sample.
// Binary: MLDS header + per-sample label and little-endian f64 tokens.
void write_dataset_csv(const Dataset& ds, const std::string& path);
Dataset read_dataset_csv(const std::string& path);
void write_dataset_bin(const Dataset& ds, const std::string& path);
Dataset read_dataset_bin(const std::string& path);
Dataset read_dataset(const std::string& path);  // dispatch on extension

/// Cosine decay from base_lr at step 0 toward 0 at step == total_steps:
/// lr(t) = base_lr * (1 + cos(pi * t / total)) / 2.
double cosine_lr(double base_lr, long step, long total_steps);

/// Decoupled-weight-decay Adam (beta1=0.9, beta2=0.999, eps=1e-8).
/// A pure-decay step multiplies decayed parameters by exactly
/// (1 - lr * wd).
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(const std::vector<std::pair<Matrix*, Value>>& pairs,
            const std::vector<bool>& decay, const Gradients& grads, double lr,
            double weight_decay);
  // Raw variant for tests and simple uses.
  void step_raw(std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
                const std::vector<bool>& decay, double lr, double weight_decay);

  long steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

struct MetricsRow {
  int epoch = 0;       // 1-based
  long step = 0;       // optimizer steps completed
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  BackboneModel model;  // final state, or last good state on divergence
  std::vector<MetricsRow> history;
  bool diverged = false;
  long steps_run = 0;
};

/// AdamW + cosine decay over the task's train split. Per step: fresh
/// masks, forward, mean cross-entropy, backward, update of adapter and
/// head leaves only. On a non-finite loss or numeric failure the run
/// aborts and returns the last good state with diverged = true.
TrainResult train(const BackboneModel& initial, const SyntheticTaskData& task,
                  const TrainConfig& config, const MaskSchedule& schedule);

/// Top-1 accuracy at inference (full mask, no scaling). Ties resolve to
/// the lowest class index. Empty split is a parameter error.
double evaluate(const BackboneModel& model, const Dataset& split,
                const MaskSchedule& schedule);

void write_metrics_csv(const std::vector<MetricsRow>& history, const std::string& path);

}  // namespace mlae
