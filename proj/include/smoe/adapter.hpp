// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smoe/allocator.hpp"
#include "smoe/model.hpp"
#include "smoe/tape.hpp"

namespace smoe {

/// Shared-A / multi-B adapter on one block:
///   y = W0 x + scale * sum_i w_i B_i A x,   w = softmax(R x)
/// A: rank x d_in, B_i: d_out x rank, R: experts x d_in.
struct ExpertAdapter {
  BlockId block;
  std::size_t rank = 0;
  Tensor a;
  std::vector<Tensor> b;
  Tensor router;

  std::size_t experts() const { return b.size(); }
  std::size_t d_in() const { return a.dim(1); }
  std::size_t d_out() const { return b.front().dim(0); }
  std::size_t parameter_count() const;
};

/// Zero B, zero router, Kaiming-uniform A with bound sqrt(6 / d_in).
ExpertAdapter make_adapter(BlockId block, std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t experts,
                           std::uint64_t seed);

/// Token-wise routing weights softmax(R x).
std::vector<double> routing_weights(std::span<const double> x, const ExpertAdapter& adapter);

/// Reference single-token adapter output without a tape.
std::vector<double> adapter_forward(std::span<const double> x, std::span<const double> base_out,
                                    const ExpertAdapter& adapter, double scale = 1.0);

/// Frozen base model plus adapters on the plan-selected blocks.
struct AdaptedModel {
  std::shared_ptr<const BaseModel> base;
  std::map<BlockId, ExpertAdapter> adapters;
  std::size_t rank = 0;
  double scale = 1.0;
  std::uint64_t plan_hash = 0;
};

AdaptedModel attach_adapters(std::shared_ptr<const BaseModel> base, const AllocationPlan& plan, std::size_t rank,
                             double scale = 1.0);

/// A, B.0..B.(E-1), R of every adapter in canonical block order, named
/// "adapter.layer.{i}.{kind}.{A|B.j|R}". Never includes a base tensor.
std::vector<std::pair<std::string, Tensor*>> trainable_parameters(AdaptedModel& model);
std::vector<std::pair<std::string, const Tensor*>> trainable_parameters(const AdaptedModel& model);
std::size_t trainable_parameter_count(const AdaptedModel& model);

/// Adapter leaves on one tape, shared across a batch.
class AdapterHook : public LinearHook {
 public:
  AdapterHook(const AdaptedModel& model, Tape& tape, bool trainable);

  NodeId on_linear(Tape& tape, BlockId block, NodeId input, NodeId base_out) const override;

  /// Leaf nodes in trainable_parameters order.
  const std::vector<NodeId>& parameter_nodes() const { return parameter_nodes_; }

 private:
  struct Bound {
    NodeId a_t;
    NodeId router_t;
    std::vector<NodeId> b_t;
    std::vector<NodeId> select;  // E x 1 one-hot columns picking w_i
  };
  std::map<BlockId, Bound> bound_;
  std::vector<NodeId> parameter_nodes_;
  NodeId scale_;
  bool scaled_ = false;
};

Tensor forward_logits(const AdaptedModel& model, std::span<const TokenId> tokens);

inline constexpr std::string_view kAdapterMagic = "SMOE-ADPT-v1";

void save_adapters(const std::filesystem::path& path, const AdaptedModel& model);
/// Rebuilds adapters on `base`; rejects checkpoints written for a different model config.
AdaptedModel load_adapters(const std::filesystem::path& path, std::shared_ptr<const BaseModel> base);

}  // namespace smoe
