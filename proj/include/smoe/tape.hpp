// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "smoe/tensor.hpp"

namespace smoe {

/// Handle to a value recorded on a Tape.
struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

/// The closed set of differentiable ops.
enum class OpKind {
  kMatmul,
  kAdd,
  kMul,
  kSoftmax,
  kSilu,
  kRmsNorm,
  kEmbedLookup,
  kCrossEntropy,
  kReshape,
  kTranspose,
  kCausalMask,
};

inline constexpr std::size_t kOpKindCount = 11;

std::string_view op_name(OpKind kind);

/// Non-tensor operands: row ids for embed-lookup, class ids for
/// cross-entropy (kIgnoreTarget entries are skipped), target shape for reshape.
struct OpArgs {
  std::vector<std::int64_t> indices;
  Shape shape;
};

inline constexpr std::int64_t kIgnoreTarget = -1;
inline constexpr double kRmsNormEps = 1e-6;
/// Finite fill for masked attention scores; exp() of it underflows to 0.
inline constexpr double kMaskedScore = -1e30;

/// Define-by-run record of ops. A tape is rebuilt for every forward pass;
/// which leaves are trainable is fixed when the leaf is created.
class Tape {
 public:
  struct Record {
    OpKind kind;
    std::vector<NodeId> inputs;
    NodeId output;
    OpArgs args;
    std::vector<double> saved;  // op-specific activations kept for backward
  };

  NodeId leaf(Tensor value, bool trainable = false);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  /// Generic entry point; the named helpers below forward here.
  NodeId apply(OpKind kind, std::span<const NodeId> inputs, OpArgs args = {});

  /// a: m x k, b: k x n.
  NodeId matmul(NodeId a, NodeId b);
  /// Same shapes, or b a single element, or a: m x n with b: m x 1.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId softmax(NodeId x);
  NodeId silu(NodeId x);
  /// x: rows x d, gain: d.
  NodeId rmsnorm(NodeId x, NodeId gain);
  NodeId embed(NodeId table, std::span<const std::int64_t> ids);
  /// Mean cross-entropy over non-ignored rows; returns a 1-element node.
  NodeId cross_entropy(NodeId logits, std::span<const std::int64_t> targets);
  NodeId reshape(NodeId x, Shape shape);
  NodeId transpose(NodeId x);
  /// x: T x T; entries above the diagonal become kMaskedScore.
  NodeId causal_mask(NodeId x);

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  bool trainable(NodeId id) const { return nodes_.at(id.index).trainable; }
  /// True when the node is trainable or depends on a trainable node.
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Record>& records() const { return records_; }

 private:
  struct Node {
    Tensor value;
    bool trainable = false;
    bool requires_grad = false;
  };

  NodeId push(Tensor value, bool trainable, bool requires_grad);

  std::vector<Node> nodes_;
  std::vector<Record> records_;
};

using Gradients = std::map<NodeId, Tensor>;

/// Reverse-mode gradients of a 1-element loss node with respect to every
/// trainable leaf. Frozen leaves get no entry.
Gradients backward(const Tape& tape, NodeId loss);

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every element of params.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& params, double h = 1e-5);

}  // namespace smoe
