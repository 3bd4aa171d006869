#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "mlae/backbone.hpp"
#include "mlae/trainer.hpp"
#include "testutil.hpp"

using namespace mlae;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.blocks = 2;
  c.dim = 16;
  c.heads = 2;
  c.patch_tokens = 4;
  c.n_classes = 3;
  c.seed = 7;
  return c;
}

MaskSchedule uniform_schedule(int layers, int r, double p) {
  return make_schedule(MaskStrategy::stochastic, MaskPattern::uniform, layers, r, p, 0);
}

bool models_equal(const BackboneModel& a, const BackboneModel& b) {
  const auto ta = named_tensors(a);
  const auto tb = named_tensors(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].first != tb[i].first) return false;
    if (*ta[i].second != *tb[i].second) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("same config and seed build bit-identical models") {
  const BackboneModel a = build_backbone(small_config());
  const BackboneModel b = build_backbone(small_config());
  CHECK(models_equal(a, b));
  BackboneConfig other = small_config();
  other.seed = 8;
  CHECK_FALSE(models_equal(a, build_backbone(other)));
}

TEST_CASE("twelve adapter slots of fused shape d x 3d") {
  BackboneConfig c;
  c.blocks = 12;
  c.dim = 64;
  c.n_classes = 10;
  BackboneModel model = build_backbone(c);
  CHECK(model.blocks.size() == 12);
  AdapterSettings settings;
  inject_adapters(model, settings, 8, 1);
  int experts = 0;
  for (const auto& blk : model.blocks) {
    REQUIRE(blk.adapter.has_value());
    CHECK(blk.adapter->d_in == 64);
    CHECK(blk.adapter->d_out == 192);
    experts += blk.adapter->n_experts();
  }
  CHECK(experts == 96);
}

TEST_CASE("trainable census matches the closed form and the parameter walk") {
  BackboneConfig c = small_config();
  c.blocks = 12;
  c.dim = 64;
  c.heads = 4;
  c.n_classes = 10;
  BackboneModel model = build_backbone(c);
  AdapterSettings settings;  // r=8, adaptive on
  inject_adapters(model, settings, 8, 1);

  const long long closed_form = 12LL * 8 * (64 + 192 + 1) + 64 * 10 + 10;
  CHECK(trainable_parameter_count(model, nullptr) == closed_form);

  // parameter walk over the actual trainable leaves
  Tape tape;
  ModelLeaves leaves = register_trainable(tape, model, true);
  long long walked = 0;
  for (const auto& [mat, leaf] : leaves.pairs) walked += static_cast<long long>(mat->size());
  CHECK(walked == closed_form);
}

TEST_CASE("injection is invisible at initialization and rejected twice") {
  BackboneModel model = build_backbone(small_config());
  const MaskSchedule schedule = uniform_schedule(2, 4, 0.0);
  Prng rng(3);
  const Matrix tokens = testutil::random_matrix(2 * 4, 16, rng);
  const Matrix before = forward_logits(model, tokens, schedule);

  AdapterSettings settings;
  settings.r = 4;
  inject_adapters(model, settings, 4, 11);
  const Matrix after = forward_logits(model, tokens, schedule);
  CHECK(before == after);

  CHECK_THROWS_AS(inject_adapters(model, settings, 4, 11), StateError);
}

TEST_CASE("decomposition off degenerates to a single rank-r pair per block") {
  BackboneModel model = build_backbone(small_config());
  AdapterSettings settings;
  settings.r = 8;
  settings.flags.decomposition = false;
  settings.flags.masking = false;
  settings.flags.adaptive = false;
  inject_adapters(model, settings, 8, 11);
  for (const auto& blk : model.blocks) {
    CHECK(blk.adapter->n_experts() == 1);
    CHECK(blk.adapter->sub_rank == 8);
  }
}

TEST_CASE("inference is deterministic; train mode with p=0 equals inference") {
  BackboneModel model = build_backbone(small_config());
  AdapterSettings settings;
  settings.r = 4;
  inject_adapters(model, settings, 4, 13);
  // give the adapters nonzero state so masking would matter
  for (auto& blk : model.blocks) {
    for (auto& e : blk.adapter->experts) {
      Prng s(blk.adapter->layer_id * 100 + 1);
      e.b = gaussian_init(e.b.rows(), e.b.cols(), 0.1, s);
    }
  }
  const MaskSchedule p0 = uniform_schedule(2, 4, 0.0);
  Prng rng(5);
  const Matrix tokens = testutil::random_matrix(3 * 4, 16, rng);

  const Matrix inf1 = forward_logits(model, tokens, p0);
  const Matrix inf2 = forward_logits(model, tokens, p0);
  CHECK(inf1 == inf2);

  Prng step_rng(9);
  const auto train_masks = sample_step_masks(model, p0, step_rng, false);
  const Matrix train_logits = forward_logits_with_masks(model, tokens, train_masks);
  CHECK(train_logits == inf1);
}

TEST_CASE("logit softmax rows sum to one") {
  BackboneModel model = build_backbone(small_config());
  Prng rng(15);
  const Matrix tokens = testutil::random_matrix(4 * 4, 16, rng);
  const MaskSchedule schedule = uniform_schedule(2, 4, 0.0);
  const Matrix logits = forward_logits(model, tokens, schedule);
  Tape tape;
  const Matrix probs = tape.value(tape.softmax_rows(tape.constant(logits)));
  for (int i = 0; i < probs.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < probs.cols(); ++j) s += probs(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("frozen weights never change during training") {
  BackboneConfig c = small_config();
  BackboneModel model = build_backbone(c);
  AdapterSettings settings;
  settings.r = 4;
  inject_adapters(model, settings, 4, 17);
  const std::uint64_t before = frozen_weights_hash(model);

  const SyntheticTaskData task = make_synthetic_task(3, 24, 6, 6, 4, 16, 0.5, 21);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 3;
  const MaskSchedule schedule = uniform_schedule(2, 4, 0.5);
  const TrainResult result = train(model, task, tc, schedule);
  CHECK_FALSE(result.diverged);
  CHECK(frozen_weights_hash(result.model) == before);
  CHECK(frozen_weights_hash(model) == before);
}

TEST_CASE("trainable leaf set is exactly adapters plus head") {
  BackboneModel model = build_backbone(small_config());
  AdapterSettings settings;
  settings.r = 4;
  inject_adapters(model, settings, 4, 19);
  Tape tape;
  ModelLeaves leaves = register_trainable(tape, model, true);
  // head_w, head_b + per block r * (b, a, lambda)
  CHECK(leaves.pairs.size() == 2 + 2u * 4 * 3);
  AdapterSettings frozen_lambda = settings;
  frozen_lambda.flags.freeze_coefficients = true;
  BackboneModel model2 = build_backbone(small_config());
  inject_adapters(model2, frozen_lambda, 4, 19);
  Tape tape2;
  ModelLeaves leaves2 = register_trainable(tape2, model2, true);
  CHECK(leaves2.pairs.size() == 2 + 2u * 4 * 2);
}

TEST_CASE("merged model: logits equivalence, zero overhead, no extra tensors") {
  BackboneModel model = build_backbone(small_config());
  AdapterSettings settings;
  settings.r = 4;
  inject_adapters(model, settings, 4, 23);
  // train a little so the merge is nontrivial
  const SyntheticTaskData task = make_synthetic_task(3, 24, 0, 0, 4, 16, 0.5, 25);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 5;
  const MaskSchedule schedule = uniform_schedule(2, 4, 0.5);
  const BackboneModel trained = train(model, task, tc, schedule).model;

  Prng rng(27);
  const Matrix tokens = testutil::random_matrix(5 * 4, 16, rng);
  const Matrix adapter_logits = forward_logits(trained, tokens, schedule);

  const BackboneModel merged = merge_model(trained);
  CHECK_FALSE(merged.has_adapters());
  const Matrix merged_logits = forward_logits(merged, tokens, schedule);
  CHECK(max_abs_diff(adapter_logits, merged_logits) < 1e-10);

  // operation-count probe: merged inference == never-adapted inference
  const BackboneModel base = build_backbone(small_config());
  reset_matmul_count();
  (void)forward_logits(base, tokens, schedule);
  const std::uint64_t base_count = matmul_count();
  reset_matmul_count();
  (void)forward_logits(merged, tokens, schedule);
  const std::uint64_t merged_count = matmul_count();
  CHECK(base_count == merged_count);

  // merge adds no tensors
  CHECK(named_tensors(merged).size() == named_tensors(base).size());
}

TEST_CASE("sub-rank injection preserves the per-layer rank budget") {
  BackboneModel model = build_backbone(small_config());
  AdapterSettings settings;
  settings.r = 8;
  settings.sub_rank = 2;
  inject_adapters(model, settings, 8, 31);
  for (const auto& blk : model.blocks) {
    CHECK(blk.adapter->n_experts() == 4);
    CHECK(blk.adapter->sub_rank == 2);
    CHECK(blk.adapter->total_rank() == 8);
  }
  // same trainable budget as the rank-1 configuration
  BackboneModel rank1 = build_backbone(small_config());
  AdapterSettings r1;
  r1.r = 8;
  inject_adapters(rank1, r1, 8, 31);
  CHECK(trainable_parameter_count(model, nullptr) ==
        trainable_parameter_count(rank1, nullptr));

  BackboneModel bad = build_backbone(small_config());
  AdapterSettings odd;
  odd.r = 8;
  odd.sub_rank = 3;
  CHECK_THROWS_AS(inject_adapters(bad, odd, 8, 31), ParameterError);
}

TEST_CASE("sub-rank masks drop whole experts under every strategy") {
  const MaskSchedule fixed_schedule =
      make_schedule(MaskStrategy::fixed, MaskPattern::incremental, 12, 8, 0.0, 0);
  Prng rng(33);
  // layer 3 keeps 6 rank units = 3 rank-2 experts out of 7
  const MaskSample m = sample_mask_for(fixed_schedule, 3, 7, 2, rng, false);
  CHECK(m.bits == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0});

  // rank-unit counts that do not divide by the sub rank are rejected
  Prng rng2(35);
  const MaskSchedule random_schedule =
      make_schedule(MaskStrategy::fixed, MaskPattern::random, 12, 8, 0.0, 12);
  bool any_odd = false;
  for (int c : random_schedule.counts) any_odd = any_odd || c % 2 == 1;
  if (any_odd) {
    bool threw = false;
    for (int layer = 0; layer < 12; ++layer) {
      try {
        (void)sample_mask_for(random_schedule, layer, random_schedule.slots / 2, 2, rng2,
                              false);
      } catch (const ParameterError&) {
        threw = true;
      }
    }
    CHECK(threw);
  }
}
