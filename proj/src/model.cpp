// SPDX-License-Identifier: Apache-2.0
#include "smoe/model.hpp"

#include <cmath>
#include <sstream>

#include "smoe/errors.hpp"
#include "smoe/hash.hpp"
#include "smoe/random.hpp"

namespace smoe {

std::string_view kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::kQ: return "Q";
    case BlockKind::kK: return "K";
    case BlockKind::kV: return "V";
    case BlockKind::kO: return "O";
    case BlockKind::kUp: return "Up";
    case BlockKind::kDown: return "Down";
    case BlockKind::kGate: return "Gate";
  }
  return "?";
}

std::optional<BlockKind> parse_kind(std::string_view name) {
  for (BlockKind kind : kAllKinds) {
    if (kind_name(kind) == name) return kind;
  }
  return std::nullopt;
}

bool is_attention(BlockKind kind) {
  return kind == BlockKind::kQ || kind == BlockKind::kK || kind == BlockKind::kV || kind == BlockKind::kO;
}

std::string BlockId::name() const { return "layer." + std::to_string(layer) + "." + std::string(kind_name(kind)); }

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw ContractError("model config extents must be positive: " + describe());
  }
  if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads: " + describe());
}

std::pair<std::size_t, std::size_t> ModelConfig::block_dims(BlockKind kind) const {
  switch (kind) {
    case BlockKind::kUp:
    case BlockKind::kGate: return {d_ff, d_model};
    case BlockKind::kDown: return {d_model, d_ff};
    default: return {d_model, d_model};
  }
}

std::string ModelConfig::describe() const {
  std::ostringstream out;
  out << "n_layers=" << n_layers << " d_model=" << d_model << " n_heads=" << n_heads << " d_ff=" << d_ff
      << " vocab_size=" << vocab_size << " max_seq_len=" << max_seq_len << " seed=" << seed;
  return out.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a(describe()); }

std::vector<std::pair<std::string, const Tensor*>> BaseModel::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) out.emplace_back(BlockId::from_index(i).name(), &blocks[i]);
  out.emplace_back("token_embedding", &token_embedding);
  out.emplace_back("position_embedding", &position_embedding);
  for (std::size_t l = 0; l < attn_norm.size(); ++l) {
    out.emplace_back("layer." + std::to_string(l) + ".attn_norm", &attn_norm[l]);
    out.emplace_back("layer." + std::to_string(l) + ".mlp_norm", &mlp_norm[l]);
  }
  out.emplace_back("final_norm", &final_norm);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> BaseModel::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, ptr] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Tensor*>(ptr));
  return out;
}

std::size_t BaseModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t->size();
  return n;
}

std::size_t BaseModel::block_parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : blocks) n += t.size();
  return n;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

BaseModel init_model(const ModelConfig& config) {
  config.validate();
  BaseModel model;
  model.config = config;
  std::uint64_t stream = 0;
  for (const auto& [id, shape] : list_blocks(config)) {
    // Variance 1/d_in.
    const double bound = std::sqrt(3.0 / static_cast<double>(shape[1]));
    model.blocks.push_back(uniform_tensor(shape, bound, mix_seed(config.seed, stream++)));
  }
  const double emb_bound = std::sqrt(3.0 / static_cast<double>(config.d_model));
  model.token_embedding = uniform_tensor({config.vocab_size, config.d_model}, emb_bound, mix_seed(config.seed, stream++));
  model.position_embedding =
      uniform_tensor({config.max_seq_len, config.d_model}, emb_bound, mix_seed(config.seed, stream++));
  model.attn_norm.assign(config.n_layers, Tensor({config.d_model}, 1.0));
  model.mlp_norm.assign(config.n_layers, Tensor({config.d_model}, 1.0));
  model.final_norm = Tensor({config.d_model}, 1.0);
  return model;
}

std::vector<std::pair<BlockId, Shape>> list_blocks(const ModelConfig& config) {
  std::vector<std::pair<BlockId, Shape>> out;
  out.reserve(config.block_count());
  for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
    for (BlockKind kind : kAllKinds) {
      const auto [d_out, d_in] = config.block_dims(kind);
      out.emplace_back(BlockId{layer, kind}, Shape{d_out, d_in});
    }
  }
  return out;
}

ModelBinding bind_model(const BaseModel& model, Tape& tape, const TrainableMask& mask) {
  const ModelConfig& c = model.config;
  ModelBinding b;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const bool train = mask.block && mask.block(BlockId::from_index(i));
    b.block_leaf.push_back(tape.leaf(model.blocks[i], train));
    b.block_transpose.push_back(tape.transpose(b.block_leaf.back()));
  }
  b.token_embedding = tape.leaf(model.token_embedding, mask.non_block);
  b.token_embedding_t = tape.transpose(b.token_embedding);
  b.position_embedding = tape.leaf(model.position_embedding, mask.non_block);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    b.attn_norm.push_back(tape.leaf(model.attn_norm[l], mask.non_block));
    b.mlp_norm.push_back(tape.leaf(model.mlp_norm[l], mask.non_block));
  }
  b.final_norm = tape.leaf(model.final_norm, mask.non_block);

  const std::size_t dh = c.head_dim();
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    Tensor select({c.d_model, dh}, 0.0);
    for (std::size_t j = 0; j < dh; ++j) select.at(h * dh + j, j) = 1.0;
    b.head_select.push_back(tape.constant(select));
    b.head_select_t.push_back(tape.transpose(b.head_select.back()));
  }
  b.attn_scale = tape.constant(Tensor::scalar(1.0 / std::sqrt(static_cast<double>(dh))));
  return b;
}

namespace {

NodeId linear(Tape& tape, const ModelBinding& b, BlockId id, NodeId x, const LinearHook* hook) {
  const NodeId out = tape.matmul(x, b.block_transpose[id.canonical_index()]);
  return hook ? hook->on_linear(tape, id, x, out) : out;
}

}  // namespace

NodeId forward_logits(const BaseModel& model, const ModelBinding& b, std::span<const TokenId> tokens, Tape& tape,
                      const LinearHook* hook) {
  const ModelConfig& c = model.config;
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > c.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= c.vocab_size) {
      throw InputError("forward: token " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  std::vector<TokenId> positions(tokens.size());
  for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = static_cast<TokenId>(t);

  NodeId x = tape.add(tape.embed(b.token_embedding, tokens), tape.embed(b.position_embedding, positions));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const NodeId h = tape.rmsnorm(x, b.attn_norm[l]);
    const NodeId q = linear(tape, b, {l, BlockKind::kQ}, h, hook);
    const NodeId k = linear(tape, b, {l, BlockKind::kK}, h, hook);
    const NodeId v = linear(tape, b, {l, BlockKind::kV}, h, hook);
    std::optional<NodeId> merged;
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      const NodeId qh = tape.matmul(q, b.head_select[head]);
      const NodeId kh = tape.matmul(k, b.head_select[head]);
      const NodeId vh = tape.matmul(v, b.head_select[head]);
      const NodeId scores = tape.mul(tape.matmul(qh, tape.transpose(kh)), b.attn_scale);
      const NodeId probs = tape.softmax(tape.causal_mask(scores));
      const NodeId spread = tape.matmul(tape.matmul(probs, vh), b.head_select_t[head]);
      merged = merged ? tape.add(*merged, spread) : spread;
    }
    x = tape.add(x, linear(tape, b, {l, BlockKind::kO}, *merged, hook));

    const NodeId h2 = tape.rmsnorm(x, b.mlp_norm[l]);
    const NodeId gate = linear(tape, b, {l, BlockKind::kGate}, h2, hook);
    const NodeId up = linear(tape, b, {l, BlockKind::kUp}, h2, hook);
    const NodeId act = tape.mul(tape.silu(gate), up);
    x = tape.add(x, linear(tape, b, {l, BlockKind::kDown}, act, hook));
  }
  const NodeId final_h = tape.rmsnorm(x, b.final_norm);
  return tape.matmul(final_h, b.token_embedding_t);
}

Tensor forward_logits(const BaseModel& model, std::span<const TokenId> tokens, const LinearHook* hook) {
  Tape tape;
  const ModelBinding binding = bind_model(model, tape, TrainableMask::none());
  return tape.value(forward_logits(model, binding, tokens, tape, hook));
}

NodeId lm_loss(Tape& tape, NodeId logits, std::span<const TokenId> targets) {
  if (tape.value(logits).dim(0) != targets.size()) {
    throw ContractError("lm_loss: " + std::to_string(tape.value(logits).dim(0)) + " logit rows for " +
                        std::to_string(targets.size()) + " targets");
  }
  return tape.cross_entropy(logits, targets);
}

double lm_loss(const Tensor& logits, std::span<const TokenId> targets) {
  Tape tape;
  const NodeId l = tape.constant(logits);
  return tape.value(lm_loss(tape, l, targets)).item();
}

}  // namespace smoe
