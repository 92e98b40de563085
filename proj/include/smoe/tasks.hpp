// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smoe/model.hpp"
#include "smoe/sensitivity.hpp"

namespace smoe {

enum class TaskKind { kCopy, kReverse, kModSum, kParity };
enum class Split { kTrain, kTest };

inline constexpr std::array<TaskKind, 4> kAllTasks = {TaskKind::kCopy, TaskKind::kReverse, TaskKind::kModSum,
                                                      TaskKind::kParity};

std::string_view to_string(TaskKind task);
std::optional<TaskKind> parse_task(std::string_view text);

// Token layout: 0 pad, 1 separator, 2..5 task markers, then the symbol alphabet.
inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kSepToken = 1;
inline constexpr TokenId kFirstMarker = 2;
inline constexpr TokenId kFirstSymbol = 6;
inline constexpr std::size_t kAlphabetSize = 10;
inline constexpr std::size_t kMaxInputLen = 6;

/// Input symbols and expected output symbols, both as token ids.
struct TaskItem {
  std::vector<TokenId> input;
  std::vector<TokenId> target;
};

/// copy: x -> x; reverse: x -> reversed x; mod-sum: x -> running sums mod
/// alphabet; parity: x -> one symbol, (sum of x) mod 2.
struct TaskDataset {
  TaskKind task = TaskKind::kCopy;
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
  std::vector<TaskItem> items;
};

struct TaskOptions {
  /// Symbols per input; 0 picks min(kMaxInputLen, (seq_len - 1) / 2).
  std::size_t input_len = 0;
};

/// Expected output for an input under a task.
std::vector<TokenId> task_target(TaskKind task, std::span<const TokenId> input);

/// Train and test splits for each requested task, in request order (train first).
/// An input lands in the test split iff a seeded hash of (task, input) says so,
/// so the splits never share an input.
std::vector<TaskDataset> generate_tasks(std::size_t vocab, std::size_t seq_len, std::size_t n_train,
                                        std::size_t n_test, std::uint64_t seed,
                                        std::span<const TaskKind> tasks = kAllTasks, TaskOptions options = {});

const TaskDataset& find_dataset(std::span<const TaskDataset> datasets, TaskKind task, Split split);

/// [marker, x..., SEP, y...] as model input (last token dropped) with next-token
/// targets on the positions that predict y; other positions are kIgnoreTarget.
Sample make_sample(TaskKind task, const TaskItem& item);
std::vector<Sample> make_samples(const TaskDataset& dataset);

}  // namespace smoe
