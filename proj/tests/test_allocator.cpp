// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "smoe/allocator.hpp"
#include "smoe/errors.hpp"
#include "smoe/hash.hpp"

using namespace smoe;
using smoe::testing::check_budget_rule;
using smoe::testing::random_profile;
using smoe::testing::reference_config;
using smoe::testing::small_config;

namespace {

ModelConfig layers(std::size_t n) {
  ModelConfig c = small_config();
  c.n_layers = n;
  return c;
}

std::set<std::size_t> layers_with(const AllocationPlan& plan, std::size_t count) {
  std::set<std::size_t> out;
  for (std::size_t l = 0; l < plan.n_layers; ++l) {
    bool all = true;
    for (BlockKind kind : kAllKinds) all = all && plan.count({l, kind}) == count;
    if (all) out.insert(l);
  }
  return out;
}

std::set<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::set<std::size_t> out;
  for (std::size_t i = lo; i <= hi; ++i) out.insert(i);
  return out;
}

}  // namespace

TEST_CASE("top_k examples") {
  const std::vector<double> s = {9, 4, 4, 1};
  CHECK(smoe::top_k(s, 2) == std::vector<std::size_t>{0, 1});
  CHECK(smoe::top_k(std::vector<double>{5, 1}, 1) == std::vector<std::size_t>{0});
  CHECK(smoe::top_k(std::vector<double>{2, 9}, 1) == std::vector<std::size_t>{1});
  CHECK(smoe::top_k(s, 0).empty());
  CHECK_THROWS_AS(smoe::top_k(s, 5), ContractError);
}

TEST_CASE("budget_count rounds halves away from zero") {
  CHECK(budget_count(0.5, 4) == 2);
  CHECK(budget_count(0.5, 7) == 4);
  CHECK(budget_count(0.5, 5) == 3);
  CHECK(budget_count(0.2, 14) == 3);  // 2.8
  CHECK(budget_count(0.25, 2) == 1);  // 0.5
  CHECK(budget_count(0.1, 4) == 0);
  CHECK(budget_count(1.0, 252) == 252);
}

TEST_CASE("pool partitions") {
  CHECK(pool_partition(Strategy::kUnified, 2).size() == 1);
  const auto sep = pool_partition(Strategy::kSeparate, 2);
  REQUIRE(sep.size() == 2);
  CHECK(sep[0].blocks.size() == 8);
  CHECK(sep[1].blocks.size() == 6);
  for (BlockId id : sep[0].blocks) CHECK(is_attention(id.kind));
  const auto ind = pool_partition(Strategy::kIndependent, 3);
  REQUIRE(ind.size() == 7);
  for (std::size_t k = 0; k < 7; ++k) {
    CHECK(ind[k].blocks.size() == 3);
    for (BlockId id : ind[k].blocks) CHECK(id.kind == kAllKinds[k]);
  }
}

TEST_CASE("unified tie example on a one-layer profile") {
  SensitivityProfile p;
  p.n_layers = 1;
  p.values = {9, 4, 4, 1, 0, 0, 0};
  const AllocationPlan plan = allocate(p, Strategy::kUnified, 2.0 / 7.0, 8);
  CHECK(plan.counts == std::vector<std::size_t>{8, 8, 0, 0, 0, 0, 0});
}

TEST_CASE("separate selects inside each pool") {
  // Attention s = {Q 5, K 1, V 0, O 0}, MLP s = {Up 2, Down 9, Gate 0}.
  SensitivityProfile p;
  p.n_layers = 1;
  p.values = {5, 1, 0, 0, 2, 9, 0};
  const AllocationPlan plan = allocate(p, Strategy::kSeparate, 0.25, 8);
  // round(0.25 * 4) = 1 attention block, round(0.25 * 3) = 1 MLP block.
  CHECK(plan.counts == std::vector<std::size_t>{8, 0, 0, 0, 0, 8, 0});
  const AllocationPlan unified = allocate(p, Strategy::kUnified, 2.0 / 7.0, 8);
  CHECK(unified.counts == std::vector<std::size_t>{8, 0, 0, 0, 0, 8, 0});
}

TEST_CASE("allocate error paths") {
  Rng rng(1);
  const SensitivityProfile p = random_profile(2, rng);
  CHECK_THROWS_AS(allocate(p, Strategy::kUnified, 0.0), ContractError);
  CHECK_THROWS_AS(allocate(p, Strategy::kUnified, -0.1), ContractError);
  CHECK_THROWS_AS(allocate(p, Strategy::kUnified, 1.01), ContractError);
  CHECK_THROWS_AS(allocate(p, Strategy::kUnified, 0.5, 0), ContractError);
  SensitivityProfile short_profile = p;
  short_profile.values.pop_back();
  CHECK_THROWS_AS(allocate(short_profile, Strategy::kUnified, 0.5), ContractError);
  CHECK_THROWS_AS(allocate(p, Strategy::kUnified, 0.5, 8, p.config_hash + 1), ContractError);
  CHECK_NOTHROW(allocate(p, Strategy::kUnified, 0.5, 8, p.config_hash));
}

TEST_CASE("hydralora baseline and rho = 1 equivalence") {
  const AllocationPlan toy = baseline_hydralora(layers(2), 8);
  CHECK(toy.counts == std::vector<std::size_t>(14, 8));
  const AllocationPlan big = baseline_hydralora(layers(36), 8);
  CHECK(big.counts.size() == 252);
  CHECK(selected_set(big) == all_blocks(36));
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const SensitivityProfile p = random_profile(2, rng, trial % 2 == 0);
    CHECK(allocate(p, Strategy::kUnified, 1.0, 8).counts == toy.counts);
  }
  CHECK(allocate(random_profile(2, rng), Strategy::kHydraLora, 0.3).counts == toy.counts);
}

TEST_CASE("mola-tiered baseline") {
  const AllocationPlan mola = baseline_mola_tiered(layers(36), {8, 6, 4, 2});
  CHECK(layers_with(mola, 8) == range(27, 35));
  CHECK(layers_with(mola, 6) == range(18, 26));
  CHECK(layers_with(mola, 4) == range(9, 17));
  CHECK(layers_with(mola, 2) == range(0, 8));
  for (std::size_t l = 1; l < 36; ++l) CHECK(mola.count({l, BlockKind::kQ}) >= mola.count({l - 1, BlockKind::kQ}));

  const AllocationPlan four = baseline_mola_tiered(layers(4), {8, 6, 4, 2});
  CHECK(layers_with(four, 8) == std::set<std::size_t>{3});
  CHECK(layers_with(four, 6) == std::set<std::size_t>{2});
  CHECK(layers_with(four, 4) == std::set<std::size_t>{1});
  CHECK(layers_with(four, 2) == std::set<std::size_t>{0});

  CHECK_THROWS_AS(baseline_mola_tiered(layers(6), {8, 6, 4, 2}), ContractError);
  CHECK_THROWS_AS(baseline_mola_tiered(layers(4), {}), ContractError);
}

TEST_CASE("selected_set examples") {
  AllocationPlan empty;
  empty.n_layers = 2;
  empty.counts.assign(14, 0);
  CHECK(selected_set(empty).empty());
  CHECK(selected_set(baseline_hydralora(layers(2))) == all_blocks(2));
  SensitivityProfile p;
  p.n_layers = 1;
  p.values = {9, 4, 4, 1, 0, 0, 0};
  CHECK(selected_set(allocate(p, Strategy::kUnified, 2.0 / 7.0)).size() == 2);
}

TEST_CASE("allocation properties on randomized profiles") {
  Rng rng(2024);
  const std::vector<double> budgets = {0.1, 0.2, 0.25, 0.4, 0.5, 0.6, 0.75, 0.8, 1.0};
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n_layers = 1 + rng.below(6);
    const SensitivityProfile p = random_profile(n_layers, rng, trial % 3 == 0);
    SensitivityProfile scaled = p;
    const double c = std::exp(rng.uniform(-20.0, 20.0));
    for (double& v : scaled.values) v *= c;
    for (Strategy s : {Strategy::kUnified, Strategy::kSeparate, Strategy::kIndependent}) {
      std::set<BlockId> previous;
      for (double rho : budgets) {
        const AllocationPlan plan = allocate(p, s, rho);
        CAPTURE(trial);
        CAPTURE(rho);
        CHECK(check_budget_rule(p, plan) == "");
        const std::set<BlockId> chosen = selected_set(plan);
        CHECK(std::includes(chosen.begin(), chosen.end(), previous.begin(), previous.end()));
        previous = chosen;
        CHECK(allocate(scaled, s, rho).counts == plan.counts);
      }
    }
  }
}

TEST_CASE("parameter accounting") {
  CHECK(adapter_parameter_count(4, 4, 2, 3) == 44);
  CHECK(adapter_parameter_count(4, 4, 2, 0) == 0);

  const ModelConfig c = reference_config();
  // Independent count: blocks 4 d^2 + 3 d d_ff per layer, embeddings, 2L + 1 gains.
  const std::size_t expected_base = c.n_layers * (4 * c.d_model * c.d_model + 3 * c.d_model * c.d_ff) +
                                    (c.vocab_size + c.max_seq_len) * c.d_model +
                                    (2 * c.n_layers + 1) * c.d_model;
  CHECK(base_parameter_count(c) == expected_base);
  CHECK(base_parameter_count(c) == init_model(c).parameter_count());

  AllocationPlan empty;
  empty.n_layers = c.n_layers;
  empty.counts.assign(c.block_count(), 0);
  CHECK(trainable_fraction(empty, c, 8).fraction == 0.0);

  AllocationPlan one = empty;
  one.counts[BlockId{1, BlockKind::kDown}.canonical_index()] = 3;
  // Down maps d_ff -> d_model.
  CHECK(trainable_fraction(one, c, 2).adapter_parameters == 2 * 128 + 3 * 64 * 2 + 3 * 128);

  AllocationPlan wrong = empty;
  wrong.counts.pop_back();
  CHECK_THROWS_AS(trainable_fraction(wrong, c, 8), ContractError);
}

TEST_CASE("Tuned/Total increases with the budget") {
  const ModelConfig c = reference_config();
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const SensitivityProfile p = random_profile(c.n_layers, rng, trial % 2 == 0);
    for (Strategy s : {Strategy::kUnified, Strategy::kSeparate, Strategy::kIndependent}) {
      double previous = 0.0;
      for (double rho : {0.2, 0.4, 0.6, 0.8, 1.0}) {
        const double f = trainable_fraction(allocate(p, s, rho), c, 8).fraction;
        // Independent pools hold L = 4 blocks, so 0.4 and 0.6 both round to 2.
        if (s == Strategy::kIndependent) CHECK(f >= previous);
        else CHECK(f > previous);
        previous = f;
      }
      CHECK(previous == trainable_fraction(baseline_hydralora(c), c, 8).fraction);
    }
  }
}

TEST_CASE("plan file round trip and parse errors") {
  Rng rng(9);
  SensitivityProfile p = random_profile(4, rng);
  AllocationPlan plan = allocate(p, Strategy::kSeparate, 0.6, 4);
  plan.rank = 6;
  for (const AllocationPlan& original : {plan, baseline_mola_tiered(layers(4)), baseline_hydralora(layers(4))}) {
    std::stringstream text;
    save_plan(text, original);
    const AllocationPlan back = load_plan(text);
    CHECK(back.strategy == original.strategy);
    CHECK(back.budget == original.budget);
    CHECK(back.experts == original.experts);
    CHECK(back.rank == original.rank);
    CHECK(back.provenance == original.provenance);
    CHECK(back.tiers == original.tiers);
    CHECK(back.counts == original.counts);
    CHECK(back.hash() == original.hash());
  }
  CHECK(plan.provenance == hex64(p.hash()));
  CHECK(baseline_hydralora(layers(4)).provenance == "none");

  std::ostringstream out;
  save_plan(out, plan);
  const std::string text = out.str();
  std::string missing = text;
  const auto pos = missing.find("block 2 V");
  missing.erase(pos, missing.find('\n', pos) - pos + 1);
  std::istringstream in_missing(missing);
  CHECK_THROWS_WITH_AS(load_plan(in_missing), doctest::Contains("layer.2.V"), ParseError);
  std::istringstream bad_magic("SMOE-PLAN-v0\n");
  CHECK_THROWS_AS(load_plan(bad_magic), ParseError);
  std::string bad_kind = text;
  bad_kind.replace(bad_kind.find("block 0 Q"), 9, "block 0 X");
  std::istringstream in_bad(bad_kind);
  CHECK_THROWS_WITH_AS(load_plan(in_bad), doctest::Contains("line "), ParseError);
  CHECK_THROWS_AS(load_plan(std::filesystem::path("/nonexistent/plan.txt")), IoError);
}
