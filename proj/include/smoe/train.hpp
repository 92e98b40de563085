// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "smoe/adapter.hpp"
#include "smoe/model.hpp"
#include "smoe/sensitivity.hpp"
#include "smoe/tasks.hpp"

namespace smoe {

struct TrainConfig {
  double learning_rate = 5e-5;
  double lr_floor = 1e-5;  // cosine schedule end point
  std::size_t batch_size = 8;
  std::size_t cutoff_len = 32;
  std::size_t rank = 8;
  std::size_t steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Cosine decay from learning_rate at step 0 to lr_floor at step == steps.
double lr_at(std::size_t step, const TrainConfig& config);

/// AdamW with decoupled weight decay and bias correction.
class AdamW {
 public:
  AdamW(std::size_t parameter_count, const TrainConfig& config);

  /// Updates params[i] in place from grads[i]. Shapes must stay fixed across calls.
  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, epsilon_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct MetricsReport {
  std::vector<double> loss_history;
  std::vector<double> lr_history;
  double trainable_fraction = 0.0;
  double wall_seconds = 0.0;
  std::vector<std::pair<std::string, double>> test_accuracy;
};

/// Called after every optimizer step with (step, loss).
using StepCallback = std::function<void(std::size_t, double)>;

/// AdamW over the adapter tensors only, on a seeded shuffle of `data`.
/// Throws ContractError when steps > 0 and nothing is trainable, and
/// NumericError naming the step when the loss goes non-finite.
MetricsReport train(AdaptedModel& model, std::span<const Sample> data, const TrainConfig& config,
                    const StepCallback& on_step = {});

/// Full-parameter training of a base model; gives the profiler a non-degenerate starting point.
MetricsReport pretrain(BaseModel& model, std::span<const Sample> data, const TrainConfig& config,
                       const StepCallback& on_step = {});

struct EvalResult {
  double exact_match = 0.0;     // fraction of items with every target token right
  double token_accuracy = 0.0;  // fraction of target tokens right
  std::size_t items = 0;
};

using LogitsFn = std::function<Tensor(std::span<const TokenId>)>;

/// Teacher-forced greedy argmax at every target position of the test items.
EvalResult evaluate(const LogitsFn& logits, std::span<const Sample> samples);
EvalResult evaluate(const BaseModel& model, const TaskDataset& dataset);
EvalResult evaluate(const AdaptedModel& model, const TaskDataset& dataset);

/// "step,lr,loss" rows.
void write_metrics_csv(std::ostream& out, const MetricsReport& report);

/// Samples of several datasets concatenated then shuffled with `seed`.
std::vector<Sample> mixture(std::span<const TaskDataset> datasets, std::uint64_t seed);

}  // namespace smoe
