// SPDX-License-Identifier: Apache-2.0
// Independent reference computations used by the unit and acceptance suites.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "smoe/adapter.hpp"
#include "smoe/allocator.hpp"
#include "smoe/model.hpp"
#include "smoe/random.hpp"
#include "smoe/sensitivity.hpp"
#include "smoe/tape.hpp"
#include "smoe/tasks.hpp"

namespace smoe::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients, where
/// central differences only carry ~1e-10 absolute accuracy, from dominating.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i], floor));
  return worst;
}

/// Scalar 1ᵀ (y ⊙ weights) 1 built from matmuls, so any op output can feed backward.
inline NodeId weighted_sum(Tape& tape, NodeId y, const Tensor& weights) {
  const Tensor& v = tape.value(y);
  const std::size_t rows = v.rank() == 2 ? v.dim(0) : 1;
  const std::size_t cols = v.size() / rows;
  NodeId flat = v.rank() == 2 ? y : tape.reshape(y, {rows, cols});
  const NodeId w = tape.constant(Tensor({rows, cols}, weights.values()));
  const NodeId prod = tape.mul(flat, w);
  const NodeId left = tape.constant(Tensor({1, rows}, 1.0));
  const NodeId right = tape.constant(Tensor({cols, 1}, 1.0));
  return tape.matmul(tape.matmul(left, prod), right);
}

/// Plain-loop sum of squares.
inline double sum_squares_oracle(const Tensor& g) {
  double total = 0.0;
  const std::size_t rows = g.rank() == 2 ? g.dim(0) : 1;
  const std::size_t cols = g.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c] * g[r * cols + c];
  }
  return total;
}

/// Full-model gradients for every (sample, group) pair with everything
/// trainable, out-of-group entries discarded afterwards.
inline std::vector<double> naive_profile(const BaseModel& model, std::span<const Sample> samples,
                                         const GroupSchedule& schedule) {
  std::vector<double> s(model.config.block_count(), 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t g : schedule.groups_for(i)) {
      Tape tape;
      const ModelBinding b = bind_model(model, tape, TrainableMask::all());
      const NodeId loss = lm_loss(tape, forward_logits(model, b, samples[i].tokens, tape), samples[i].targets);
      const Gradients grads = backward(tape, loss);
      for (std::size_t n = 0; n < model.config.block_count(); ++n) {
        const BlockId id = BlockId::from_index(n);
        const auto& group = schedule.groups()[g];
        if (std::find(group.begin(), group.end(), id) == group.end()) continue;
        s[n] += sum_squares_oracle(grads.at(b.block_leaf[n]));
      }
    }
  }
  return s;
}

/// Counts parameters by walking the adapters' tensors directly.
inline std::size_t enumerate_adapter_parameters(const AdaptedModel& model) {
  std::size_t n = 0;
  for (const auto& [id, adapter] : model.adapters) {
    n += adapter.a.size() + adapter.router.size();
    for (const Tensor& b : adapter.b) n += b.size();
  }
  return n;
}

/// Random task-shaped samples for a model config.
inline std::vector<Sample> random_samples(const ModelConfig& config, std::size_t count, std::uint64_t seed,
                                          std::size_t length = 8) {
  Rng rng(seed);
  std::vector<Sample> out(count);
  for (Sample& s : out) {
    s.tokens.resize(length);
    s.targets.resize(length);
    for (std::size_t t = 0; t < length; ++t) {
      s.tokens[t] = static_cast<TokenId>(rng.below(config.vocab_size));
      s.targets[t] = static_cast<TokenId>(rng.below(config.vocab_size));
    }
  }
  return out;
}

/// Random profile; with `ties`, values come from a small integer set so equal
/// sensitivities are common.
inline SensitivityProfile random_profile(std::size_t n_layers, Rng& rng, bool ties = false) {
  SensitivityProfile p;
  p.n_layers = n_layers;
  p.values.resize(n_layers * kKindsPerLayer);
  for (double& v : p.values) v = ties ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 10.0);
  return p;
}

/// Pool member i is in the top k when fewer than k members outrank it, where a
/// member outranks i if it is larger, or equal and earlier.
inline bool in_top_k_oracle(std::span<const double> scores, std::size_t i, std::size_t k) {
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++ahead;
  }
  return ahead < k;
}

/// Checks a sensitivity-driven plan against the budget rule pool by pool.
/// Returns an empty string when every check holds.
inline std::string check_budget_rule(const SensitivityProfile& profile, const AllocationPlan& plan) {
  for (const Pool& pool : pool_partition(plan.strategy, profile.n_layers)) {
    std::vector<double> scores;
    for (BlockId id : pool.blocks) scores.push_back(profile.value(id));
    const double exact = plan.budget * static_cast<double>(pool.blocks.size());
    // Half-away-from-zero rounding, written without std::round.
    const auto k = static_cast<std::size_t>(std::floor(exact + 0.5));
    std::size_t selected = 0;
    double min_selected = std::numeric_limits<double>::infinity();
    double max_unselected = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.blocks.size(); ++i) {
      const std::size_t count = plan.count(pool.blocks[i]);
      const bool chosen = count > 0;
      if (chosen && count != plan.experts) return pool.name + ": selected block has " + std::to_string(count) + " experts";
      if (chosen != in_top_k_oracle(scores, i, k)) return pool.name + ": " + pool.blocks[i].name() + " misallocated";
      selected += chosen;
      if (chosen) min_selected = std::min(min_selected, scores[i]);
      else max_unselected = std::max(max_unselected, scores[i]);
    }
    if (selected != k) return pool.name + ": selected " + std::to_string(selected) + ", budget " + std::to_string(k);
    if (min_selected < max_unselected) return pool.name + ": a less sensitive block was preferred";
  }
  return "";
}

/// L=2, d=16 instance used by the gradient oracles.
inline ModelConfig small_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  c.seed = seed;
  return c;
}

/// The toy reference configuration.
inline ModelConfig reference_config(std::uint64_t seed = 11) {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_ff = 128;
  c.vocab_size = 64;
  c.max_seq_len = 32;
  c.seed = seed;
  return c;
}

}  // namespace smoe::testing
