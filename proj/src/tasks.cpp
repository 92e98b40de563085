// SPDX-License-Identifier: Apache-2.0
#include "smoe/tasks.hpp"

#include <algorithm>
#include <set>

#include "smoe/errors.hpp"
#include "smoe/hash.hpp"
#include "smoe/random.hpp"

namespace smoe {

std::string_view to_string(TaskKind task) {
  switch (task) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kModSum: return "mod-sum";
    case TaskKind::kParity: return "parity";
  }
  return "?";
}

std::optional<TaskKind> parse_task(std::string_view text) {
  for (TaskKind task : kAllTasks) {
    if (to_string(task) == text) return task;
  }
  return std::nullopt;
}

std::vector<TokenId> task_target(TaskKind task, std::span<const TokenId> input) {
  std::vector<TokenId> out;
  switch (task) {
    case TaskKind::kCopy: out.assign(input.begin(), input.end()); break;
    case TaskKind::kReverse: out.assign(input.rbegin(), input.rend()); break;
    case TaskKind::kModSum: {
      TokenId running = 0;
      for (TokenId x : input) {
        running = (running + (x - kFirstSymbol)) % static_cast<TokenId>(kAlphabetSize);
        out.push_back(kFirstSymbol + running);
      }
      break;
    }
    case TaskKind::kParity: {
      TokenId total = 0;
      for (TokenId x : input) total += x - kFirstSymbol;
      out.push_back(kFirstSymbol + total % 2);
      break;
    }
  }
  return out;
}

namespace {

bool in_test_split(TaskKind task, std::span<const TokenId> input, std::uint64_t seed) {
  std::string key(to_string(task));
  for (TokenId x : input) key += static_cast<char>('a' + x);
  return mix_seed(fnv1a(key), seed) % 5 == 0;
}

}  // namespace

std::vector<TaskDataset> generate_tasks(std::size_t vocab, std::size_t seq_len, std::size_t n_train,
                                        std::size_t n_test, std::uint64_t seed, std::span<const TaskKind> tasks,
                                        TaskOptions options) {
  if (vocab < static_cast<std::size_t>(kFirstSymbol) + kAlphabetSize) {
    throw ContractError("vocabulary of " + std::to_string(vocab) + " is too small for the task alphabet (needs " +
                        std::to_string(kFirstSymbol + kAlphabetSize) + ")");
  }
  const std::size_t max_len = seq_len >= 1 ? (seq_len - 1) / 2 : 0;
  const std::size_t n = options.input_len ? options.input_len : std::min(kMaxInputLen, max_len);
  if (n < 2 || n > max_len) {
    throw ContractError("input length " + std::to_string(n) + " does not fit sequence length " + std::to_string(seq_len));
  }

  std::vector<TaskDataset> out;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const TaskKind task = tasks[t];
    TaskDataset train{task, Split::kTrain, seed, {}};
    TaskDataset test{task, Split::kTest, seed, {}};
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(task)));
    std::set<std::vector<TokenId>> seen_test;
    // The input space is kAlphabetSize^n; the attempt cap only guards tiny n.
    const std::size_t max_attempts = 1000 * (n_train + n_test) + 1000;
    for (std::size_t attempt = 0; attempt < max_attempts && (train.items.size() < n_train || test.items.size() < n_test);
         ++attempt) {
      std::vector<TokenId> input(n);
      for (TokenId& x : input) x = kFirstSymbol + static_cast<TokenId>(rng.below(kAlphabetSize));
      if (in_test_split(task, input, seed)) {
        if (test.items.size() < n_test && seen_test.insert(input).second) {
          test.items.push_back({input, task_target(task, input)});
        }
      } else if (train.items.size() < n_train) {
        train.items.push_back({input, task_target(task, input)});
      }
    }
    if (train.items.size() < n_train || test.items.size() < n_test) {
      throw ContractError("cannot draw enough distinct items for task " + std::string(to_string(task)));
    }
    out.push_back(std::move(train));
    out.push_back(std::move(test));
  }
  return out;
}

const TaskDataset& find_dataset(std::span<const TaskDataset> datasets, TaskKind task, Split split) {
  for (const TaskDataset& d : datasets) {
    if (d.task == task && d.split == split) return d;
  }
  throw ContractError("no dataset for task " + std::string(to_string(task)));
}

Sample make_sample(TaskKind task, const TaskItem& item) {
  std::vector<TokenId> full;
  full.push_back(kFirstMarker + static_cast<TokenId>(task));
  full.insert(full.end(), item.input.begin(), item.input.end());
  full.push_back(kSepToken);
  full.insert(full.end(), item.target.begin(), item.target.end());

  Sample s;
  s.tokens.assign(full.begin(), full.end() - 1);
  s.targets.assign(s.tokens.size(), kIgnoreTarget);
  const std::size_t first_answer = item.input.size() + 2;
  for (std::size_t t = first_answer - 1; t < s.tokens.size(); ++t) s.targets[t] = full[t + 1];
  return s;
}

std::vector<Sample> make_samples(const TaskDataset& dataset) {
  std::vector<Sample> out;
  out.reserve(dataset.items.size());
  for (const TaskItem& item : dataset.items) out.push_back(make_sample(dataset.task, item));
  return out;
}

}  // namespace smoe
