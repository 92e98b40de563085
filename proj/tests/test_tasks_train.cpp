// SPDX-License-Identifier: Apache-2.0
#include <map>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "smoe/allocator.hpp"
#include "smoe/errors.hpp"
#include "smoe/tasks.hpp"
#include "smoe/train.hpp"

using namespace smoe;
using smoe::testing::random_profile;
using smoe::testing::small_config;

namespace {

std::vector<TokenId> sym(std::initializer_list<int> values) {
  std::vector<TokenId> out;
  for (int v : values) out.push_back(kFirstSymbol + v);
  return out;
}

std::vector<Sample> toy_mixture(const ModelConfig& c, std::size_t n_train, std::uint64_t seed) {
  const std::vector<TaskKind> tasks = {TaskKind::kCopy, TaskKind::kReverse};
  const auto data = generate_tasks(c.vocab_size, c.max_seq_len, n_train, 8, seed, tasks);
  const std::vector<TaskDataset> train_sets = {find_dataset(data, TaskKind::kCopy, Split::kTrain),
                                               find_dataset(data, TaskKind::kReverse, Split::kTrain)};
  return mixture(train_sets, seed);
}

TrainConfig quick(std::size_t steps) {
  TrainConfig t;
  t.learning_rate = 1e-2;
  t.lr_floor = 1e-3;
  t.steps = steps;
  t.batch_size = 4;
  t.seed = 3;
  return t;
}

}  // namespace

TEST_CASE("task definitions") {
  const auto x = sym({1, 2, 3});
  CHECK(task_target(TaskKind::kCopy, x) == sym({1, 2, 3}));
  CHECK(task_target(TaskKind::kReverse, x) == sym({3, 2, 1}));
  CHECK(task_target(TaskKind::kModSum, sym({4, 7, 9})) == sym({4, 1, 0}));
  CHECK(task_target(TaskKind::kParity, sym({1, 2, 4})) == sym({1}));
  CHECK(task_target(TaskKind::kParity, sym({1, 1})) == sym({0}));
  for (TaskKind t : kAllTasks) CHECK(parse_task(to_string(t)) == t);
  CHECK_FALSE(parse_task("sort").has_value());
}

TEST_CASE("generate_tasks") {
  const auto a = generate_tasks(32, 16, 64, 16, 7);
  const auto b = generate_tasks(32, 16, 64, 16, 7);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].task == b[i].task);
    CHECK(a[i].split == b[i].split);
    REQUIRE(a[i].items.size() == b[i].items.size());
    for (std::size_t j = 0; j < a[i].items.size(); ++j) {
      CHECK(a[i].items[j].input == b[i].items[j].input);
      CHECK(a[i].items[j].target == b[i].items[j].target);
    }
  }
  for (TaskKind task : kAllTasks) {
    const TaskDataset& train = find_dataset(a, task, Split::kTrain);
    const TaskDataset& test = find_dataset(a, task, Split::kTest);
    CHECK(train.items.size() == 64);
    CHECK(test.items.size() == 16);
    std::set<std::vector<TokenId>> train_inputs;
    for (const TaskItem& item : train.items) {
      train_inputs.insert(item.input);
      CHECK(item.target == task_target(task, item.input));
      for (TokenId t : item.input) CHECK((t >= kFirstSymbol && t < 32));
    }
    for (const TaskItem& item : test.items) CHECK(train_inputs.count(item.input) == 0);
  }
  const auto other = generate_tasks(32, 16, 64, 16, 8);
  CHECK(other[0].items[0].input != a[0].items[0].input);
  CHECK_THROWS_AS(generate_tasks(15, 16, 4, 4, 1), ContractError);
  CHECK_THROWS_AS(generate_tasks(32, 2, 4, 4, 1), ContractError);
}

TEST_CASE("make_sample layout") {
  TaskItem item{sym({1, 2}), sym({2, 1})};
  const Sample s = make_sample(TaskKind::kReverse, item);
  // [marker, 7, 8, SEP, 8, 7] with the final token dropped.
  const std::vector<TokenId> tokens = {kFirstMarker + 1, 7, 8, kSepToken, 8};
  CHECK(s.tokens == tokens);
  const std::vector<TokenId> targets = {kIgnoreTarget, kIgnoreTarget, kIgnoreTarget, 8, 7};
  CHECK(s.targets == targets);
}

TEST_CASE("cosine learning-rate schedule") {
  TrainConfig c;
  c.steps = 100;
  CHECK(lr_at(0, c) == 5e-5);
  CHECK(lr_at(100, c) == 1e-5);
  CHECK(lr_at(50, c) == doctest::Approx(3e-5).epsilon(1e-12));
  for (std::size_t s = 1; s <= 100; ++s) CHECK(lr_at(s, c) <= lr_at(s - 1, c));
  CHECK_THROWS_AS(lr_at(101, c), ContractError);
  c.steps = 0;
  CHECK_THROWS_AS(lr_at(0, c), ContractError);
  TrainConfig bad;
  bad.lr_floor = bad.learning_rate;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("AdamW matches the closed-form first two steps") {
  TrainConfig c;
  c.weight_decay = 0.1;
  AdamW opt(1, c);
  Tensor p({2}, {1.0, -2.0});
  const Tensor g1({2}, {0.5, -4.0}), g2({2}, {1.0, 1.0});
  Tensor* params[] = {&p};
  const Tensor* grads1[] = {&g1};
  const Tensor* grads2[] = {&g2};
  const double lr = 0.01;
  // Written out from the update equations.
  std::vector<double> expected = {1.0, -2.0}, m(2, 0.0), v(2, 0.0);
  for (int t = 1; t <= 2; ++t) {
    const Tensor& g = t == 1 ? g1 : g2;
    for (std::size_t j = 0; j < 2; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * g[j];
      v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
      const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
      expected[j] -= lr * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * expected[j]);
    }
    opt.step(params, t == 1 ? grads1 : grads2, lr);
    for (std::size_t j = 0; j < 2; ++j) CHECK(p[j] == doctest::Approx(expected[j]).epsilon(1e-14));
  }
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("training contracts") {
  const ModelConfig c = small_config();
  auto base = std::make_shared<const BaseModel>(init_model(c));
  const BaseModel snapshot = *base;
  const auto data = toy_mixture(c, 32, 1);

  SUBCASE("0 steps leaves everything unchanged") {
    AdaptedModel m = attach_adapters(base, baseline_hydralora(c, 2), 4);
    const AdaptedModel before = m;
    const MetricsReport r = train(m, data, quick(0));
    CHECK(r.loss_history.empty());
    const auto a = trainable_parameters(m);
    const auto b = trainable_parameters(before);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  }
  SUBCASE("base bytes are unchanged after 100 steps") {
    AdaptedModel m = attach_adapters(base, baseline_hydralora(c, 2), 4);
    const MetricsReport r = train(m, data, quick(100));
    CHECK(r.loss_history.size() == 100);
    CHECK(r.lr_history.size() == 100);
    const auto now = base->named_tensors();
    const auto then = snapshot.named_tensors();
    REQUIRE(now.size() == then.size());
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(*now[i].second == *then[i].second);
    CHECK(r.loss_history.back() < r.loss_history.front());
    CHECK(r.trainable_fraction == doctest::Approx(trainable_fraction(baseline_hydralora(c, 2), c, 4).fraction));
  }
  SUBCASE("training is deterministic") {
    Rng rng(2);
    const AllocationPlan plan = allocate(random_profile(c.n_layers, rng), Strategy::kSeparate, 0.6, 3);
    AdaptedModel m1 = attach_adapters(base, plan, 4);
    AdaptedModel m2 = attach_adapters(base, plan, 4);
    const MetricsReport r1 = train(m1, data, quick(20));
    const MetricsReport r2 = train(m2, data, quick(20));
    CHECK(r1.loss_history == r2.loss_history);
    const auto a = trainable_parameters(m1);
    const auto b = trainable_parameters(m2);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  }
  SUBCASE("nothing trainable is an error") {
    AllocationPlan empty;
    empty.n_layers = c.n_layers;
    empty.counts.assign(c.block_count(), 0);
    AdaptedModel m = attach_adapters(base, empty, 4);
    CHECK_THROWS_AS(train(m, data, quick(5)), ContractError);
  }
  SUBCASE("a diverging run reports the step") {
    AdaptedModel m = attach_adapters(base, baseline_hydralora(c, 2), 4);
    TrainConfig t = quick(10);
    t.learning_rate = 1e200;
    t.lr_floor = 1e199;
    CHECK_THROWS_WITH_AS(train(m, data, t), doctest::Contains("training step"), NumericError);
  }
}

TEST_CASE("pretraining updates every base tensor") {
  ModelConfig c = small_config();
  BaseModel m = init_model(c);
  const BaseModel before = m;
  const MetricsReport r = pretrain(m, toy_mixture(c, 32, 2), quick(5));
  CHECK(r.loss_history.size() == 5);
  const auto now = m.named_tensors();
  const auto then = before.named_tensors();
  for (std::size_t i = 0; i < now.size(); ++i) CHECK_FALSE(*now[i].second == *then[i].second);
}

TEST_CASE("evaluate") {
  const ModelConfig c = small_config();
  const auto data = generate_tasks(c.vocab_size, c.max_seq_len, 4, 32, 5);
  const auto samples = make_samples(find_dataset(data, TaskKind::kReverse, Split::kTest));

  SUBCASE("a model that reproduces the targets scores 100%") {
    std::map<std::vector<TokenId>, std::vector<TokenId>> answers;
    for (const Sample& s : samples) answers[s.tokens] = s.targets;
    const LogitsFn oracle = [&](std::span<const TokenId> tokens) {
      const auto& targets = answers.at({tokens.begin(), tokens.end()});
      Tensor logits({tokens.size(), c.vocab_size}, 0.0);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (targets[t] != kIgnoreTarget) logits[t * c.vocab_size + static_cast<std::size_t>(targets[t])] = 1.0;
      }
      return logits;
    };
    const EvalResult r = evaluate(oracle, samples);
    CHECK(r.exact_match == 1.0);
    CHECK(r.token_accuracy == 1.0);
    CHECK(r.items == samples.size());
  }
  SUBCASE("uninformative logits score chance on single-token targets") {
    const std::size_t vocab = 32, n = 4000;
    std::vector<Sample> single(n);
    Rng rng(7);
    for (Sample& s : single) {
      s.tokens = {kFirstMarker, static_cast<TokenId>(kFirstSymbol + rng.below(kAlphabetSize))};
      s.targets = {kIgnoreTarget, static_cast<TokenId>(rng.below(vocab))};
    }
    std::size_t call = 0;
    const LogitsFn noise = [&](std::span<const TokenId> tokens) {
      Rng local(mix_seed(99, call++));
      Tensor logits({tokens.size(), vocab});
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = local.uniform();
      return logits;
    };
    const EvalResult r = evaluate(noise, single);
    const double p = 1.0 / 32.0;
    CHECK(std::abs(r.exact_match - p) < 3.0 * std::sqrt(p * (1 - p) / n));
    CHECK(r.exact_match == r.token_accuracy);
  }
  SUBCASE("constant logits break ties toward the lowest token id") {
    const LogitsFn flat = [&](std::span<const TokenId> tokens) { return Tensor({tokens.size(), c.vocab_size}, 0.0); };
    CHECK(evaluate(flat, samples).token_accuracy == 0.0);
  }
}

TEST_CASE("metrics CSV and mixture") {
  MetricsReport r;
  r.loss_history = {2.5, 1.25};
  r.lr_history = {0.001, 0.0005};
  std::ostringstream out;
  write_metrics_csv(out, r);
  CHECK(out.str() == "step,lr,loss\n0,0.001,2.5\n1,0.00050000000000000001,1.25\n");

  const auto data = generate_tasks(32, 16, 10, 4, 1);
  const std::vector<TaskDataset> sets = {data[0], data[2]};
  const auto a = mixture(sets, 4);
  const auto b = mixture(sets, 4);
  CHECK(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tokens == b[i].tokens);
  const auto other = mixture(sets, 5);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a[i].tokens != other[i].tokens;
  CHECK(differs);
}

TEST_CASE("profiles: nested sample counts agree, tasks differ") {
  ModelConfig c = small_config(41);
  c.d_model = 32;
  c.d_ff = 64;
  const BaseModel model = init_model(c);
  const auto data = generate_tasks(c.vocab_size, c.max_seq_len, 64, 4, 2);
  const GroupSchedule schedule = GroupSchedule::per_layer(c);

  std::vector<std::set<BlockId>> chosen;
  for (TaskKind task : kAllTasks) {
    const auto samples = make_samples(find_dataset(data, task, Split::kTrain));
    const SensitivityProfile p = profile_sensitivity(model, std::span(samples).first(6), schedule);
    chosen.push_back(selected_set(allocate(p, Strategy::kSeparate, 0.6)));

    const SensitivityProfile p2 = profile_sensitivity(model, std::span(samples).first(12), schedule);
    const double nested = selection_consistency(chosen.back(), selected_set(allocate(p2, Strategy::kSeparate, 0.6)),
                                                all_blocks(c.n_layers));
    // Mean agreement of two random selections with the same per-pool sizes.
    Rng rng(mix_seed(7, static_cast<std::uint64_t>(task)));
    double random_mean = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
      const auto a = selected_set(allocate(random_profile(c.n_layers, rng), Strategy::kSeparate, 0.6));
      const auto b = selected_set(allocate(random_profile(c.n_layers, rng), Strategy::kSeparate, 0.6));
      random_mean += selection_consistency(a, b, all_blocks(c.n_layers)) / 500.0;
    }
    CAPTURE(to_string(task));
    CHECK(nested >= random_mean);
  }
  bool any_pair_differs = false;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    for (std::size_t j = i + 1; j < chosen.size(); ++j) any_pair_differs = any_pair_differs || chosen[i] != chosen[j];
  }
  CHECK(any_pair_differs);
}
