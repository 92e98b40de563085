// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smoe/tape.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

using TokenId = std::int64_t;

/// The seven profiled matrix kinds, in canonical order.
enum class BlockKind : std::uint8_t { kQ, kK, kV, kO, kUp, kDown, kGate };

inline constexpr std::size_t kKindsPerLayer = 7;
inline constexpr std::array<BlockKind, kKindsPerLayer> kAllKinds = {
    BlockKind::kQ, BlockKind::kK, BlockKind::kV, BlockKind::kO, BlockKind::kUp, BlockKind::kDown, BlockKind::kGate};

std::string_view kind_name(BlockKind kind);
/// Inverse of kind_name; nullopt for unknown names.
std::optional<BlockKind> parse_kind(std::string_view name);
bool is_attention(BlockKind kind);

/// One tunable matrix of the base model. Ordered by layer, then kind.
struct BlockId {
  std::size_t layer = 0;
  BlockKind kind = BlockKind::kQ;

  std::size_t canonical_index() const { return layer * kKindsPerLayer + static_cast<std::size_t>(kind); }
  static BlockId from_index(std::size_t index) {
    return {index / kKindsPerLayer, static_cast<BlockKind>(index % kKindsPerLayer)};
  }
  /// "layer.{i}.{kind}"
  std::string name() const;

  friend auto operator<=>(const BlockId& a, const BlockId& b) {
    return a.canonical_index() <=> b.canonical_index();
  }
  friend bool operator==(const BlockId& a, const BlockId& b) = default;
};

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  std::uint64_t seed = 0;

  /// Throws ContractError on zero extents or d_model not divisible by n_heads.
  void validate() const;
  std::size_t block_count() const { return n_layers * kKindsPerLayer; }
  std::size_t head_dim() const { return d_model / n_heads; }
  /// {d_out, d_in} of a block.
  std::pair<std::size_t, std::size_t> block_dims(BlockKind kind) const;
  /// Stable identity of the architecture and seed, written into profile and plan files.
  std::uint64_t hash() const;
  std::string describe() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The frozen base model W_0: seven block matrices per layer plus embeddings and norms.
/// Block weights are stored d_out x d_in.
struct BaseModel {
  ModelConfig config;
  std::vector<Tensor> blocks;  // canonical block order
  Tensor token_embedding;      // vocab x d_model; also the tied output head
  Tensor position_embedding;   // max_seq_len x d_model
  std::vector<Tensor> attn_norm;
  std::vector<Tensor> mlp_norm;
  Tensor final_norm;

  Tensor& block(BlockId id) { return blocks.at(id.canonical_index()); }
  const Tensor& block(BlockId id) const { return blocks.at(id.canonical_index()); }

  /// Every tensor with its checkpoint name, blocks first in canonical order.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::size_t parameter_count() const;
  std::size_t block_parameter_count() const;
};

BaseModel init_model(const ModelConfig& config);

/// Canonical (block, shape) listing: (0,Q),(0,K),...,(0,Gate),(1,Q),...
std::vector<std::pair<BlockId, Shape>> list_blocks(const ModelConfig& config);
inline std::vector<std::pair<BlockId, Shape>> list_blocks(const BaseModel& model) { return list_blocks(model.config); }

/// Which model tensors become trainable leaves when a model is bound to a tape.
struct TrainableMask {
  std::function<bool(BlockId)> block;  // empty: no block trainable
  bool non_block = false;

  static TrainableMask none() { return {}; }
  static TrainableMask all() { return {[](BlockId) { return true; }, true}; }
};

/// Leaves for one model on one tape. Created once per tape and shared by all
/// sequences in a batch so gradients sum over the batch.
struct ModelBinding {
  std::vector<NodeId> block_leaf;       // canonical order
  std::vector<NodeId> block_transpose;  // W^T, d_in x d_out
  NodeId token_embedding;
  NodeId token_embedding_t;
  NodeId position_embedding;
  std::vector<NodeId> attn_norm;
  std::vector<NodeId> mlp_norm;
  NodeId final_norm;
  std::vector<NodeId> head_select;    // d_model x head_dim one-hot column selectors
  std::vector<NodeId> head_select_t;  // head_dim x d_model
  NodeId attn_scale;
};

ModelBinding bind_model(const BaseModel& model, Tape& tape, const TrainableMask& mask);

/// Hook invoked after every block linear. Returns the node to use as the block output.
class LinearHook {
 public:
  virtual ~LinearHook() = default;
  virtual NodeId on_linear(Tape& tape, BlockId block, NodeId input, NodeId base_out) const = 0;
};

/// seq x vocab logits for one token sequence.
NodeId forward_logits(const BaseModel& model, const ModelBinding& binding, std::span<const TokenId> tokens, Tape& tape,
                      const LinearHook* hook = nullptr);

/// Untracked convenience forward.
Tensor forward_logits(const BaseModel& model, std::span<const TokenId> tokens, const LinearHook* hook = nullptr);

/// Mean token cross-entropy on the tape. Targets equal to kIgnoreTarget are skipped.
NodeId lm_loss(Tape& tape, NodeId logits, std::span<const TokenId> targets);
double lm_loss(const Tensor& logits, std::span<const TokenId> targets);

}  // namespace smoe
