// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smoe/model.hpp"
#include "smoe/sensitivity.hpp"

namespace smoe {

enum class Strategy { kUnified, kSeparate, kIndependent, kHydraLora, kMolaTiered };

std::string_view to_string(Strategy strategy);
/// Accepts "unified", "separate", "independent", "hydralora", "mola" / "mola-tiered".
std::optional<Strategy> parse_strategy(std::string_view text);

inline constexpr std::size_t kDefaultExperts = 8;
inline constexpr std::size_t kDefaultRank = 8;
inline const std::vector<std::size_t> kDefaultMolaTiers = {8, 6, 4, 2};

/// Expert count per block. Unselected blocks have count 0 and get no adapter.
struct AllocationPlan {
  Strategy strategy = Strategy::kUnified;
  double budget = 1.0;
  std::size_t experts = kDefaultExperts;
  std::size_t rank = kDefaultRank;
  std::string provenance = "none";  // profile hash, or "none" for baselines
  std::size_t n_layers = 0;
  std::vector<std::size_t> tiers;   // mola-tiered only
  std::vector<std::size_t> counts;  // canonical block order

  std::size_t count(BlockId id) const { return counts.at(id.canonical_index()); }
  std::size_t block_count() const { return counts.size(); }
  /// Hash of the serialized plan; recorded in adapter checkpoints.
  std::uint64_t hash() const;
};

struct Pool {
  std::string name;
  std::vector<BlockId> blocks;  // canonical order
};

/// Pools over which top-k selection runs: one (unified), attention and MLP
/// (separate), or one per matrix kind (independent).
std::vector<Pool> pool_partition(Strategy strategy, std::size_t n_layers);

/// round(rho * pool_size), rounding halves away from zero.
std::size_t budget_count(double rho, std::size_t pool_size);

/// Indices of the k largest scores, highest first; equal scores keep index order.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

/// Top-k allocation: in each pool the round(rho*|pool|) most sensitive blocks get
/// `experts` experts, ties going to the block earlier in canonical order.
/// hydralora / mola-tiered strategies dispatch to the baselines.
AllocationPlan allocate(const SensitivityProfile& profile, Strategy strategy, double rho,
                        std::size_t experts = kDefaultExperts,
                        std::optional<std::uint64_t> expected_config_hash = std::nullopt);

/// Every block gets `experts` experts.
AllocationPlan baseline_hydralora(const ModelConfig& config, std::size_t experts = kDefaultExperts);

/// Layers split into |tiers| equal contiguous bands; the top band gets tiers[0].
AllocationPlan baseline_mola_tiered(const ModelConfig& config, const std::vector<std::size_t>& tiers = kDefaultMolaTiers);

/// Blocks with a non-zero expert count.
std::set<BlockId> selected_set(const AllocationPlan& plan);
std::set<BlockId> all_blocks(std::size_t n_layers);

struct ParameterAccounting {
  std::size_t adapter_parameters = 0;
  std::size_t base_parameters = 0;
  double fraction = 0.0;  // adapter / base
};

/// Adapter parameters for one block with `experts` experts: shared A (r*d_in),
/// B experts (e*d_out*r) and router (e*d_in).
std::size_t adapter_parameter_count(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t experts);
/// Base-model parameter count: blocks, embeddings and norms.
std::size_t base_parameter_count(const ModelConfig& config);

/// Analytic Tuned/Total for a plan applied to a model of the given config.
ParameterAccounting trainable_fraction(const AllocationPlan& plan, const ModelConfig& config, std::size_t rank);

inline constexpr std::string_view kPlanMagic = "SMOE-PLAN-v1";

void save_plan(std::ostream& out, const AllocationPlan& plan);
void save_plan(const std::filesystem::path& path, const AllocationPlan& plan);
AllocationPlan load_plan(std::istream& in);
AllocationPlan load_plan(const std::filesystem::path& path);

}  // namespace smoe
