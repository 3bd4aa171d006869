#include "mlae/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "mlae/hash.hpp"

namespace mlae {

namespace {

// Purpose tags keep streams independent even when the same numeric seed
// is used for several purposes.
enum : std::uint64_t {
  kTagBackbone = 1000,
  kTagAdapterInit = 1001,
};

// Fixed substream indices under the backbone seed.
enum : std::uint64_t {
  kStreamEmbed = 0,
  kStreamPos = 1,
  kStreamHead = 2,
  kStreamBlockBase = 16,
};

Matrix tile_rows(const Matrix& block, int copies) {
  Matrix out(block.rows() * copies, block.cols());
  for (int c = 0; c < copies; ++c)
    for (int i = 0; i < block.rows(); ++i)
      for (int j = 0; j < block.cols(); ++j) out(c * block.rows() + i, j) = block(i, j);
  return out;
}

void require_token_shape(const BackboneModel& model, const Matrix& tokens) {
  const int t = model.config.patch_tokens;
  if (tokens.cols() != model.config.dim || tokens.rows() % t != 0 || tokens.rows() == 0) {
    throw ShapeError("tokens " + tokens.shape_str() + " do not form batches of " +
                     std::to_string(t) + "x" + std::to_string(model.config.dim));
  }
}

}  // namespace

bool BackboneModel::has_adapters() const {
  for (const auto& b : blocks)
    if (b.adapter.has_value()) return true;
  return false;
}

BackboneModel build_backbone(const BackboneConfig& config) {
  if (config.blocks < 1 || config.dim < 1 || config.heads < 1 || config.patch_tokens < 1 ||
      config.n_classes < 1) {
    throw ParameterError("build_backbone: all dimensions must be >= 1");
  }
  if (config.dim % config.heads != 0) {
    throw ParameterError("build_backbone: dim must be divisible by heads");
  }
  const int d = config.dim;
  BackboneModel m;
  m.config = config;
  Prng root = Prng(config.seed).split(kTagBackbone);

  Prng embed_stream = root.split(kStreamEmbed);
  m.embed_w = gaussian_init(d, d, 1.0 / std::sqrt(static_cast<double>(d)), embed_stream);
  Prng pos_stream = root.split(kStreamPos);
  m.pos_embed = gaussian_init(config.patch_tokens, d, 0.02, pos_stream);

  m.blocks.resize(config.blocks);
  for (int b = 0; b < config.blocks; ++b) {
    Prng bs = root.split(kStreamBlockBase + b);
    BlockWeights& blk = m.blocks[b];
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    Prng s0 = bs.split(0), s1 = bs.split(1), s2 = bs.split(2), s3 = bs.split(3);
    blk.qkv_w = gaussian_init(d, 3 * d, ws, s0);
    blk.qkv_b = Matrix::zeros(1, 3 * d);
    blk.proj_w = gaussian_init(d, d, ws, s1);
    blk.proj_b = Matrix::zeros(1, d);
    blk.mlp_w1 = gaussian_init(d, 4 * d, ws, s2);
    blk.mlp_b1 = Matrix::zeros(1, 4 * d);
    blk.mlp_w2 = gaussian_init(4 * d, d, 1.0 / std::sqrt(4.0 * d), s3);
    blk.mlp_b2 = Matrix::zeros(1, d);
    blk.ln1_gamma = Matrix::filled(1, d, 1.0);
    blk.ln1_beta = Matrix::zeros(1, d);
    blk.ln2_gamma = Matrix::filled(1, d, 1.0);
    blk.ln2_beta = Matrix::zeros(1, d);
  }
  m.final_ln_gamma = Matrix::filled(1, d, 1.0);
  m.final_ln_beta = Matrix::zeros(1, d);
  Prng head_stream = root.split(kStreamHead);
  m.head_w = gaussian_init(d, config.n_classes, 0.02, head_stream);
  m.head_b = Matrix::zeros(1, config.n_classes);
  return m;
}

void inject_adapters(BackboneModel& model, const AdapterSettings& settings, int slots,
                     std::uint64_t seed) {
  if (settings.r < 1 || settings.sub_rank < 1) {
    throw ParameterError("inject_adapters: r and sub_rank must be >= 1");
  }
  if (settings.r % settings.sub_rank != 0) {
    throw ParameterError("inject_adapters: sub_rank must divide the per-layer budget");
  }
  if (slots < 1) throw ParameterError("inject_adapters: slots must be >= 1");
  for (const auto& blk : model.blocks) {
    if (blk.adapter.has_value()) {
      throw StateError("inject_adapters: model already has adapters");
    }
  }
  if (slots % settings.sub_rank != 0) {
    throw ParameterError("inject_adapters: sub_rank must divide the slot count");
  }
  const int d = model.config.dim;
  Prng root = Prng(seed).split(kTagAdapterInit);
  for (int b = 0; b < model.config.blocks; ++b) {
    int n_experts, sub_rank;
    if (settings.flags.decomposition) {
      // slots counts rank units; a rank-k expert occupies k of them.
      n_experts = slots / settings.sub_rank;
      sub_rank = settings.sub_rank;
    } else {
      // Degenerate baseline: one rank-r pair per layer (vanilla LoRA).
      n_experts = 1;
      sub_rank = slots;
    }
    model.blocks[b].adapter =
        make_expert_bank(b, d, 3 * d, n_experts, sub_rank, settings.coeff_init,
                         settings.init_std, settings.flags, root.split(b));
  }
}

int bank_slots(const MaskSchedule& schedule) { return schedule.slots; }

ModelLeaves register_trainable(Tape& tape, BackboneModel& model, bool head_weight_decay) {
  ModelLeaves leaves;
  leaves.head_w = tape.param(model.head_w);
  leaves.head_b = tape.param(model.head_b);
  leaves.pairs.emplace_back(&model.head_w, leaves.head_w);
  leaves.decay.push_back(head_weight_decay);
  leaves.pairs.emplace_back(&model.head_b, leaves.head_b);
  leaves.decay.push_back(head_weight_decay);
  leaves.banks.resize(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (!model.blocks[b].adapter.has_value()) continue;
    ExpertBank& bank = *model.blocks[b].adapter;
    leaves.banks[b] = register_bank(tape, bank);
    for (int j = 0; j < bank.n_experts(); ++j) {
      leaves.pairs.emplace_back(&bank.experts[j].b, leaves.banks[b].b[j]);
      leaves.decay.push_back(true);
      leaves.pairs.emplace_back(&bank.experts[j].a, leaves.banks[b].a[j]);
      leaves.decay.push_back(true);
      if (bank.lambda_trainable()) {
        leaves.pairs.emplace_back(&bank.experts[j].lambda, leaves.banks[b].lambda[j]);
        leaves.decay.push_back(true);
      }
    }
  }
  return leaves;
}

std::vector<MaskSample> sample_step_masks(const BackboneModel& model,
                                          const MaskSchedule& schedule, Prng& step_rng,
                                          bool inference) {
  std::vector<MaskSample> masks;
  masks.reserve(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (!model.blocks[b].adapter.has_value()) {
      masks.push_back(MaskSample{});
      continue;
    }
    const ExpertBank& bank = *model.blocks[b].adapter;
    if (bank.flags.delta_dropout) {
      // LoRA+Dropout baseline: entrywise mask over the assembled delta.
      MaskSample m = MaskSample::full(static_cast<int>(b), bank.n_experts());
      const double p =
          static_cast<int>(b) < schedule.layers() ? schedule.probs[b] : 0.0;
      if (!inference && p > 0.0) {
        Prng layer_rng = step_rng.split(b);
        m.element_mask = Matrix(bank.d_in, bank.d_out);
        for (std::size_t i = 0; i < m.element_mask.size(); ++i) {
          m.element_mask.data()[i] = layer_rng.next_uniform() >= p ? 1.0 : 0.0;
        }
        m.scale = 1.0 / (1.0 - p);
      }
      masks.push_back(std::move(m));
      continue;
    }
    if (!bank.flags.masking) {
      masks.push_back(MaskSample::full(static_cast<int>(b), bank.n_experts()));
      continue;
    }
    if (!bank.flags.decomposition) {
      // Single-expert bank: the mask degenerates to keep/drop-all.
      masks.push_back(MaskSample::full(static_cast<int>(b), 1));
      continue;
    }
    Prng layer_rng = step_rng.split(b);
    masks.push_back(sample_mask_for(schedule, static_cast<int>(b), bank.n_experts(),
                                    bank.sub_rank, layer_rng, inference));
  }
  return masks;
}

Value forward_logits_on_tape(Tape& tape, const BackboneModel& model,
                             const ModelLeaves& leaves, const Matrix& tokens,
                             const std::vector<MaskSample>& masks) {
  require_token_shape(model, tokens);
  const int t = model.config.patch_tokens;
  const int batch = tokens.rows() / t;

  Value x = tape.matmul(tape.constant(tokens), tape.constant(model.embed_w));
  x = tape.add(x, tape.constant(tile_rows(model.pos_embed, batch)));

  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const BlockWeights& blk = model.blocks[b];
    Value u = tape.layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    Value qkv;
    if (blk.adapter.has_value()) {
      if (masks.size() != model.blocks.size()) {
        throw ShapeError("forward: need one mask per block");
      }
      qkv = adapter_forward_on_tape(tape, u, blk.qkv_w, *blk.adapter, leaves.banks[b],
                                    masks[b]);
    } else {
      qkv = tape.matmul(u, tape.constant(blk.qkv_w));
    }
    qkv = tape.add_row(qkv, tape.constant(blk.qkv_b));
    Value att = tape.attention(qkv, model.config.heads, t);
    Value proj = tape.add_row(tape.matmul(att, tape.constant(blk.proj_w)),
                              tape.constant(blk.proj_b));
    x = tape.add(x, proj);
    Value v = tape.layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    Value h = tape.add_row(tape.matmul(v, tape.constant(blk.mlp_w1)),
                           tape.constant(blk.mlp_b1));
    h = tape.gelu(h);
    h = tape.add_row(tape.matmul(h, tape.constant(blk.mlp_w2)),
                     tape.constant(blk.mlp_b2));
    x = tape.add(x, h);
  }
  x = tape.layer_norm(x, model.final_ln_gamma, model.final_ln_beta);
  Value pooled = tape.mean_pool(x, t);
  return tape.add_row(tape.matmul(pooled, leaves.head_w), leaves.head_b);
}

namespace {
Matrix forward_plain(const BackboneModel& model, const Matrix& tokens,
                     const std::vector<MaskSample>& masks) {
  Tape tape;
  // Head registered as constant: no gradients wanted on the plain path.
  ModelLeaves leaves;
  leaves.head_w = tape.constant(model.head_w);
  leaves.head_b = tape.constant(model.head_b);
  leaves.banks.resize(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (!model.blocks[b].adapter.has_value()) continue;
    const ExpertBank& bank = *model.blocks[b].adapter;
    BankLeaves& bl = leaves.banks[b];
    for (const Expert& e : bank.experts) {
      bl.b.push_back(tape.constant(e.b));
      bl.a.push_back(tape.constant(e.a));
      bl.lambda.push_back(bank.lambda_trainable() ? tape.constant(e.lambda) : Value{});
    }
  }
  Value logits = forward_logits_on_tape(tape, model, leaves, tokens, masks);
  return tape.value(logits);
}
}  // namespace

Matrix forward_logits(const BackboneModel& model, const Matrix& tokens,
                      const MaskSchedule& schedule) {
  Prng unused(0);
  return forward_plain(model, tokens, sample_step_masks(model, schedule, unused, true));
}

Matrix forward_logits_with_masks(const BackboneModel& model, const Matrix& tokens,
                                 const std::vector<MaskSample>& masks) {
  return forward_plain(model, tokens, masks);
}

BackboneModel merge_model(const BackboneModel& model) {
  BackboneModel merged = model;
  for (auto& blk : merged.blocks) {
    if (!blk.adapter.has_value()) continue;
    blk.qkv_w = merge(blk.qkv_w, *blk.adapter);
    blk.adapter.reset();
  }
  return merged;
}

namespace {

template <typename ModelT, typename MatT>
std::vector<std::pair<std::string, MatT*>> walk_tensors(ModelT& m) {
  std::vector<std::pair<std::string, MatT*>> out;
  out.emplace_back("embed.w", &m.embed_w);
  out.emplace_back("embed.pos", &m.pos_embed);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    out.emplace_back(p + "ln1.gamma", &blk.ln1_gamma);
    out.emplace_back(p + "ln1.beta", &blk.ln1_beta);
    out.emplace_back(p + "qkv.w", &blk.qkv_w);
    out.emplace_back(p + "qkv.b", &blk.qkv_b);
    out.emplace_back(p + "proj.w", &blk.proj_w);
    out.emplace_back(p + "proj.b", &blk.proj_b);
    out.emplace_back(p + "ln2.gamma", &blk.ln2_gamma);
    out.emplace_back(p + "ln2.beta", &blk.ln2_beta);
    out.emplace_back(p + "mlp.w1", &blk.mlp_w1);
    out.emplace_back(p + "mlp.b1", &blk.mlp_b1);
    out.emplace_back(p + "mlp.w2", &blk.mlp_w2);
    out.emplace_back(p + "mlp.b2", &blk.mlp_b2);
  }
  out.emplace_back("final_ln.gamma", &m.final_ln_gamma);
  out.emplace_back("final_ln.beta", &m.final_ln_beta);
  out.emplace_back("head.w", &m.head_w);
  out.emplace_back("head.b", &m.head_b);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    if (!blk.adapter.has_value()) continue;
    const std::string p = "block" + std::to_string(b) + ".adapter.expert";
    for (int j = 0; j < blk.adapter->n_experts(); ++j) {
      auto& e = blk.adapter->experts[j];
      out.emplace_back(p + std::to_string(j) + ".b", &e.b);
      out.emplace_back(p + std::to_string(j) + ".a", &e.a);
      out.emplace_back(p + std::to_string(j) + ".lambda", &e.lambda);
    }
  }
  return out;
}

bool is_trainable_tensor(const std::string& name) {
  return name.rfind("head.", 0) == 0 || name.find(".adapter.") != std::string::npos;
}

}  // namespace

std::vector<std::pair<std::string, const Matrix*>> named_tensors(const BackboneModel& m) {
  return walk_tensors<const BackboneModel, const Matrix>(m);
}

std::vector<std::pair<std::string, Matrix*>> named_tensors_mut(BackboneModel& m) {
  return walk_tensors<BackboneModel, Matrix>(m);
}

std::uint64_t frozen_weights_hash(const BackboneModel& model) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& [name, mat] : named_tensors(model)) {
    if (is_trainable_tensor(name)) continue;
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(mat->data(), mat->size() * sizeof(double), h);
  }
  return h;
}

long long trainable_parameter_count(const BackboneModel& model,
                                    const MaskSchedule* schedule) {
  long long count = model.head_w.size() + model.head_b.size();
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (!model.blocks[b].adapter.has_value()) continue;
    const ExpertBank& bank = *model.blocks[b].adapter;
    int active = bank.n_experts();
    if (schedule != nullptr && schedule->strategy != MaskStrategy::stochastic &&
        bank.flags.decomposition && bank.flags.masking &&
        static_cast<int>(b) < schedule->layers()) {
      // Permanently masked slots never train.
      active = std::min(active, schedule->counts[b] / bank.sub_rank);
    }
    const long long per_cell = bank.d_in + bank.d_out + (bank.flags.adaptive ? 1 : 0);
    count += static_cast<long long>(active) * bank.sub_rank * per_cell;
  }
  return count;
}

}  // namespace mlae
