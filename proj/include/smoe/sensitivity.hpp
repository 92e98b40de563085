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

namespace smoe {

enum class GroupMode { kPerLayer, kSingleGroup };
enum class ScheduleMode { kRoundRobin, kExhaustive };
enum class Aggregate { kSum, kMean };

std::string_view to_string(GroupMode mode);
std::string_view to_string(ScheduleMode mode);
std::string_view to_string(Aggregate mode);
std::optional<GroupMode> parse_group_mode(std::string_view text);
std::optional<ScheduleMode> parse_schedule_mode(std::string_view text);
std::optional<Aggregate> parse_aggregate(std::string_view text);

/// One profiling example: model input and next-token targets (kIgnoreTarget skips a position).
struct Sample {
  std::vector<TokenId> tokens;
  std::vector<TokenId> targets;
};

/// Partition of the model's blocks into groups P_1..P_M and the rule that
/// decides which groups each sample is run against.
class GroupSchedule {
 public:
  GroupSchedule(std::vector<std::vector<BlockId>> groups, GroupMode group_mode, ScheduleMode schedule_mode);

  /// M = n_layers, group i holds the seven blocks of layer i.
  static GroupSchedule per_layer(const ModelConfig& config, ScheduleMode mode = ScheduleMode::kRoundRobin);
  /// M = 1, every block unfrozen for every sample.
  static GroupSchedule single_group(const ModelConfig& config, ScheduleMode mode = ScheduleMode::kRoundRobin);

  const std::vector<std::vector<BlockId>>& groups() const { return groups_; }
  std::size_t group_count() const { return groups_.size(); }
  GroupMode group_mode() const { return group_mode_; }
  ScheduleMode schedule_mode() const { return schedule_mode_; }

  /// Group indices processed for a sample: {i mod M} for round-robin, all groups for exhaustive.
  std::vector<std::size_t> groups_for(std::size_t sample_index) const;

  /// Checks that groups are disjoint and cover all blocks, and that round-robin
  /// sample counts are a multiple of M.
  void validate(const ModelConfig& config, std::size_t sample_count) const;

 private:
  std::vector<std::vector<BlockId>> groups_;
  GroupMode group_mode_;
  ScheduleMode schedule_mode_;
};

/// Accumulated squared-gradient sensitivity s_n for every block of one model.
struct SensitivityProfile {
  std::string task_id;
  std::size_t sample_count = 0;
  GroupMode group_mode = GroupMode::kPerLayer;
  ScheduleMode schedule_mode = ScheduleMode::kRoundRobin;
  Aggregate aggregate = Aggregate::kSum;
  std::uint64_t config_hash = 0;
  std::size_t n_layers = 0;
  std::vector<double> values;  // canonical block order

  double value(BlockId id) const { return values.at(id.canonical_index()); }
  std::size_t block_count() const { return values.size(); }
  /// Hash of the serialized profile; recorded as plan provenance.
  std::uint64_t hash() const;
};

struct ProfileOptions {
  std::string task_id = "task";
  Aggregate aggregate = Aggregate::kSum;
  /// Multiplies the loss before differentiation.
  double loss_scale = 1.0;
  /// Process the (sample, group) pairs with OpenMP and reduce each block's
  /// contributions with a fixed pairwise tree. Deterministic, but not
  /// bit-identical to the sequential left fold.
  bool parallel = false;
};

/// Sum over elements of g^2.
double aggregate_block(const Tensor& grad);

SensitivityProfile profile_sensitivity(const BaseModel& model, std::span<const Sample> samples,
                                       const GroupSchedule& schedule, const ProfileOptions& options = {});

/// 100 * (blocks whose membership agrees in a and b) / |universe|.
double selection_consistency(const std::set<BlockId>& a, const std::set<BlockId>& b, const std::set<BlockId>& universe);
/// One-decimal rendering used in reports, e.g. "89.6".
std::string format_percent(double value);

inline constexpr std::string_view kProfileMagic = "SMOE-PROF-v1";

void save_profile(std::ostream& out, const SensitivityProfile& profile);
void save_profile(const std::filesystem::path& path, const SensitivityProfile& profile);
/// When expected_config_hash is given, a profile from a different model configuration is rejected.
SensitivityProfile load_profile(std::istream& in, std::optional<std::uint64_t> expected_config_hash = std::nullopt);
SensitivityProfile load_profile(const std::filesystem::path& path,
                                std::optional<std::uint64_t> expected_config_hash = std::nullopt);

/// CSV heatmap: one row per layer, one column per block kind.
void write_heatmap_csv(std::ostream& out, const SensitivityProfile& profile);

}  // namespace smoe
