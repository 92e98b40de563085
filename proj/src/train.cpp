// SPDX-License-Identifier: Apache-2.0
#include "smoe/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>

#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/random.hpp"

namespace smoe {

void TrainConfig::validate() const {
  if (!(learning_rate > lr_floor && lr_floor >= 0.0)) {
    throw ContractError("need learning_rate > lr_floor >= 0, got " + format_double(learning_rate) + " and " +
                        format_double(lr_floor));
  }
  if (batch_size == 0 || cutoff_len == 0 || rank == 0) throw ContractError("batch size, cutoff and rank must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0 && weight_decay >= 0.0)) {
    throw ContractError("invalid AdamW hyperparameters");
  }
}

double lr_at(std::size_t step, const TrainConfig& config) {
  if (config.steps == 0 || step > config.steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(config.steps) + "]");
  }
  const double progress = static_cast<double>(step) / static_cast<double>(config.steps);
  const double c = (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
  // Same as floor + (lr - floor) c, but exact at both ends.
  return config.learning_rate * c + config.lr_floor * (1.0 - c);
}

AdamW::AdamW(std::size_t parameter_count, const TrainConfig& config)
    : beta1_(config.beta1), beta2_(config.beta2), epsilon_(config.epsilon), weight_decay_(config.weight_decay) {
  m_.reserve(parameter_count);
  v_.reserve(parameter_count);
}

void AdamW::step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
  if (params.size() != grads.size()) throw ContractError("AdamW: parameter and gradient counts differ");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("AdamW: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (g.shape() != p.shape()) throw DimensionError("AdamW: gradient shape differs from parameter");
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + epsilon_);
      p[j] -= lr * (update + weight_decay_ * p[j]);
    }
  }
}

std::vector<Sample> mixture(std::span<const TaskDataset> datasets, std::uint64_t seed) {
  std::vector<Sample> out;
  for (const TaskDataset& d : datasets) {
    for (Sample& s : make_samples(d)) out.push_back(std::move(s));
  }
  Rng rng(mix_seed(seed, 0x3117));
  // Fisher-Yates with the platform-stable generator.
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

namespace {

Sample truncated(const Sample& s, std::size_t cutoff) {
  if (s.tokens.size() <= cutoff) return s;
  return {{s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(cutoff)},
          {s.targets.begin(), s.targets.begin() + static_cast<std::ptrdiff_t>(cutoff)}};
}

/// Cycles through `data` in seeded epoch permutations.
class BatchStream {
 public:
  BatchStream(std::span<const Sample> data, std::uint64_t seed) : data_(data), rng_(mix_seed(seed, 0xba7c)) {
    order_.resize(data.size());
    reshuffle();
  }

  const Sample& next() {
    if (cursor_ == order_.size()) reshuffle();
    return data_[order_[cursor_++]];
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

  std::span<const Sample> data_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// One training loop for both adapter fine-tuning and base pretraining. `bind`
// builds the trainable leaves on a fresh tape and returns a forward function
// plus the leaf nodes matching `params`.
struct StepGraph {
  std::function<NodeId(std::span<const TokenId>)> forward;
  std::vector<NodeId> leaves;
};

MetricsReport run_training(std::span<Tensor* const> params, std::span<const Sample> data, const TrainConfig& config,
                           const std::function<StepGraph(Tape&)>& bind, const StepCallback& on_step) {
  config.validate();
  MetricsReport report;
  const auto start = std::chrono::steady_clock::now();
  if (config.steps == 0) return report;
  if (params.empty()) throw ContractError("train: no trainable parameters (the plan selects no blocks)");
  if (data.empty()) throw ContractError("train: empty training data");

  AdamW optimizer(params.size(), config);
  BatchStream stream(data, config.seed);
  const Tensor inv_batch = Tensor::scalar(1.0 / static_cast<double>(config.batch_size));
  for (std::size_t step = 0; step < config.steps; ++step) {
    double loss_value = 0.0;
    Gradients grads;
    std::vector<NodeId> leaves;
    try {
      Tape tape;
      StepGraph graph = bind(tape);
      std::optional<NodeId> total;
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const Sample s = truncated(stream.next(), config.cutoff_len);
        const NodeId loss = lm_loss(tape, graph.forward(s.tokens), s.targets);
        total = total ? tape.add(*total, loss) : loss;
      }
      const NodeId mean = tape.mul(*total, tape.constant(inv_batch));
      loss_value = tape.value(mean).item();
      grads = backward(tape, mean);
      leaves = std::move(graph.leaves);
    } catch (const NumericError& e) {
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
    std::vector<const Tensor*> grad_ptrs;
    grad_ptrs.reserve(leaves.size());
    for (NodeId id : leaves) grad_ptrs.push_back(&grads.at(id));
    const double lr = lr_at(step, config);
    optimizer.step(params, grad_ptrs, lr);
    report.loss_history.push_back(loss_value);
    report.lr_history.push_back(lr);
    if (on_step) on_step(step, loss_value);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

MetricsReport train(AdaptedModel& model, std::span<const Sample> data, const TrainConfig& config,
                    const StepCallback& on_step) {
  std::vector<Tensor*> params;
  for (auto& [name, t] : trainable_parameters(model)) params.push_back(t);
  const BaseModel& base = *model.base;
  MetricsReport report = run_training(
      params, data, config,
      [&](Tape& tape) {
        auto binding = std::make_shared<ModelBinding>(bind_model(base, tape, TrainableMask::none()));
        auto hook = std::make_shared<AdapterHook>(model, tape, true);
        StepGraph graph;
        graph.leaves = hook->parameter_nodes();
        graph.forward = [&base, &tape, binding, hook](std::span<const TokenId> tokens) {
          return forward_logits(base, *binding, tokens, tape, hook.get());
        };
        return graph;
      },
      on_step);
  report.trainable_fraction =
      static_cast<double>(trainable_parameter_count(model)) / static_cast<double>(base.parameter_count());
  return report;
}

MetricsReport pretrain(BaseModel& model, std::span<const Sample> data, const TrainConfig& config,
                       const StepCallback& on_step) {
  std::vector<Tensor*> params;
  for (auto& [name, t] : model.named_tensors()) params.push_back(t);
  MetricsReport report = run_training(
      params, data, config,
      [&](Tape& tape) {
        auto binding = std::make_shared<ModelBinding>(bind_model(model, tape, TrainableMask::all()));
        StepGraph graph;
        // Same order as named_tensors().
        graph.leaves = binding->block_leaf;
        graph.leaves.push_back(binding->token_embedding);
        graph.leaves.push_back(binding->position_embedding);
        for (std::size_t l = 0; l < model.config.n_layers; ++l) {
          graph.leaves.push_back(binding->attn_norm[l]);
          graph.leaves.push_back(binding->mlp_norm[l]);
        }
        graph.leaves.push_back(binding->final_norm);
        graph.forward = [&model, &tape, binding](std::span<const TokenId> tokens) {
          return forward_logits(model, *binding, tokens, tape);
        };
        return graph;
      },
      on_step);
  report.trainable_fraction = 1.0;
  return report;
}

EvalResult evaluate(const LogitsFn& logits_fn, std::span<const Sample> samples) {
  EvalResult result;
  result.items = samples.size();
  if (samples.empty()) return result;
  std::vector<char> exact(samples.size(), 0);
  std::vector<std::size_t> right(samples.size(), 0), total(samples.size(), 0);
  const auto n = static_cast<std::ptrdiff_t>(samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const Sample& s = samples[i];
    const Tensor logits = logits_fn(s.tokens);
    const std::size_t vocab = logits.dim(1);
    bool all_right = true;
    for (std::size_t t = 0; t < s.targets.size(); ++t) {
      if (s.targets[t] == kIgnoreTarget) continue;
      std::size_t best = 0;
      for (std::size_t v = 1; v < vocab; ++v) {
        if (logits.at(t, v) > logits.at(t, best)) best = v;
      }
      ++total[i];
      if (static_cast<TokenId>(best) == s.targets[t]) {
        ++right[i];
      } else {
        all_right = false;
      }
    }
    exact[i] = all_right;
  }
  std::size_t n_exact = 0, n_right = 0, n_total = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    n_exact += exact[i];
    n_right += right[i];
    n_total += total[i];
  }
  result.exact_match = static_cast<double>(n_exact) / static_cast<double>(samples.size());
  result.token_accuracy = n_total ? static_cast<double>(n_right) / static_cast<double>(n_total) : 0.0;
  return result;
}

EvalResult evaluate(const BaseModel& model, const TaskDataset& dataset) {
  const std::vector<Sample> samples = make_samples(dataset);
  return evaluate([&](std::span<const TokenId> tokens) { return forward_logits(model, tokens); }, samples);
}

EvalResult evaluate(const AdaptedModel& model, const TaskDataset& dataset) {
  const std::vector<Sample> samples = make_samples(dataset);
  return evaluate([&](std::span<const TokenId> tokens) { return forward_logits(model, tokens); }, samples);
}

void write_metrics_csv(std::ostream& out, const MetricsReport& report) {
  out << "step,lr,loss\n";
  for (std::size_t i = 0; i < report.loss_history.size(); ++i) {
    out << i << ',' << format_double(report.lr_history[i]) << ',' << format_double(report.loss_history[i]) << '\n';
  }
}

}  // namespace smoe
