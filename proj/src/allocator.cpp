// SPDX-License-Identifier: Apache-2.0
#include "smoe/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/hash.hpp"

namespace smoe {

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::kUnified: return "unified";
    case Strategy::kSeparate: return "separate";
    case Strategy::kIndependent: return "independent";
    case Strategy::kHydraLora: return "hydralora";
    case Strategy::kMolaTiered: return "mola-tiered";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(std::string_view text) {
  if (text == "unified") return Strategy::kUnified;
  if (text == "separate") return Strategy::kSeparate;
  if (text == "independent") return Strategy::kIndependent;
  if (text == "hydralora") return Strategy::kHydraLora;
  if (text == "mola" || text == "mola-tiered") return Strategy::kMolaTiered;
  return std::nullopt;
}

std::vector<Pool> pool_partition(Strategy strategy, std::size_t n_layers) {
  const std::size_t n_blocks = n_layers * kKindsPerLayer;
  std::vector<Pool> pools;
  switch (strategy) {
    case Strategy::kSeparate: {
      pools = {{"attention", {}}, {"mlp", {}}};
      for (std::size_t i = 0; i < n_blocks; ++i) {
        const BlockId id = BlockId::from_index(i);
        pools[is_attention(id.kind) ? 0 : 1].blocks.push_back(id);
      }
      break;
    }
    case Strategy::kIndependent: {
      for (BlockKind kind : kAllKinds) {
        Pool pool{std::string(kind_name(kind)), {}};
        for (std::size_t l = 0; l < n_layers; ++l) pool.blocks.push_back({l, kind});
        pools.push_back(std::move(pool));
      }
      break;
    }
    default: {
      Pool pool{"all", {}};
      for (std::size_t i = 0; i < n_blocks; ++i) pool.blocks.push_back(BlockId::from_index(i));
      pools.push_back(std::move(pool));
    }
  }
  return pools;
}

std::size_t budget_count(double rho, std::size_t pool_size) {
  // std::round rounds halves away from zero.
  return static_cast<std::size_t>(std::round(rho * static_cast<double>(pool_size)));
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) throw ContractError("cannot select " + std::to_string(k) + " of " + std::to_string(scores.size()));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

AllocationPlan baseline_hydralora(const ModelConfig& config, std::size_t experts) {
  if (experts == 0) throw ContractError("experts per block must be at least 1");
  AllocationPlan plan;
  plan.strategy = Strategy::kHydraLora;
  plan.budget = 1.0;
  plan.experts = experts;
  plan.n_layers = config.n_layers;
  plan.counts.assign(config.block_count(), experts);
  return plan;
}

AllocationPlan baseline_mola_tiered(const ModelConfig& config, const std::vector<std::size_t>& tiers) {
  if (tiers.empty()) throw ContractError("mola tiers must not be empty");
  if (config.n_layers % tiers.size() != 0) {
    throw ContractError(std::to_string(config.n_layers) + " layers cannot be split into " +
                        std::to_string(tiers.size()) + " equal tiers");
  }
  if (std::any_of(tiers.begin(), tiers.end(), [](std::size_t t) { return t == 0; })) {
    throw ContractError("mola tier counts must be positive");
  }
  AllocationPlan plan;
  plan.strategy = Strategy::kMolaTiered;
  plan.budget = 1.0;
  plan.experts = *std::max_element(tiers.begin(), tiers.end());
  plan.n_layers = config.n_layers;
  plan.tiers = tiers;
  plan.counts.assign(config.block_count(), 0);
  const std::size_t band = config.n_layers / tiers.size();
  for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
    // Band 0 is the top of the stack.
    const std::size_t from_top = (config.n_layers - 1 - layer) / band;
    for (BlockKind kind : kAllKinds) plan.counts[BlockId{layer, kind}.canonical_index()] = tiers[from_top];
  }
  return plan;
}

AllocationPlan allocate(const SensitivityProfile& profile, Strategy strategy, double rho, std::size_t experts,
                        std::optional<std::uint64_t> expected_config_hash) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractError("budget must lie in (0, 1], got " + format_double(rho));
  if (experts == 0) throw ContractError("experts per block must be at least 1");
  if (profile.n_layers == 0 || profile.values.size() != profile.n_layers * kKindsPerLayer) {
    throw ContractError("profile does not cover every block of its model");
  }
  if (expected_config_hash && *expected_config_hash != profile.config_hash) {
    throw ContractError("profile belongs to model config " + hex64(profile.config_hash) + ", expected " +
                        hex64(*expected_config_hash));
  }
  if (strategy == Strategy::kHydraLora || strategy == Strategy::kMolaTiered) {
    // Baselines ignore sensitivities; only the layer count matters.
    ModelConfig shape_only;
    shape_only.n_layers = profile.n_layers;
    return strategy == Strategy::kHydraLora ? baseline_hydralora(shape_only, experts)
                                            : baseline_mola_tiered(shape_only, kDefaultMolaTiers);
  }

  AllocationPlan plan;
  plan.strategy = strategy;
  plan.budget = rho;
  plan.experts = experts;
  plan.provenance = hex64(profile.hash());
  plan.n_layers = profile.n_layers;
  plan.counts.assign(profile.values.size(), 0);

  for (const Pool& pool : pool_partition(strategy, profile.n_layers)) {
    std::vector<double> scores;
    for (BlockId id : pool.blocks) scores.push_back(profile.value(id));
    for (std::size_t i : top_k(scores, budget_count(rho, pool.blocks.size()))) {
      plan.counts[pool.blocks[i].canonical_index()] = experts;
    }
  }
  return plan;
}

std::set<BlockId> selected_set(const AllocationPlan& plan) {
  std::set<BlockId> out;
  for (std::size_t i = 0; i < plan.counts.size(); ++i) {
    if (plan.counts[i] > 0) out.insert(BlockId::from_index(i));
  }
  return out;
}

std::set<BlockId> all_blocks(std::size_t n_layers) {
  std::set<BlockId> out;
  for (std::size_t i = 0; i < n_layers * kKindsPerLayer; ++i) out.insert(BlockId::from_index(i));
  return out;
}

std::size_t adapter_parameter_count(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t experts) {
  if (experts == 0) return 0;
  return rank * d_in + experts * d_out * rank + experts * d_in;
}

std::size_t base_parameter_count(const ModelConfig& c) {
  std::size_t n = 0;
  for (const auto& [id, shape] : list_blocks(c)) n += shape_size(shape);
  n += c.vocab_size * c.d_model + c.max_seq_len * c.d_model;
  n += (2 * c.n_layers + 1) * c.d_model;
  return n;
}

ParameterAccounting trainable_fraction(const AllocationPlan& plan, const ModelConfig& config, std::size_t rank) {
  if (plan.counts.size() != config.block_count()) {
    throw ContractError("plan covers " + std::to_string(plan.counts.size()) + " blocks, model has " +
                        std::to_string(config.block_count()));
  }
  ParameterAccounting acc;
  for (std::size_t i = 0; i < plan.counts.size(); ++i) {
    const auto [d_out, d_in] = config.block_dims(BlockId::from_index(i).kind);
    acc.adapter_parameters += adapter_parameter_count(d_in, d_out, rank, plan.counts[i]);
  }
  acc.base_parameters = base_parameter_count(config);
  acc.fraction = static_cast<double>(acc.adapter_parameters) / static_cast<double>(acc.base_parameters);
  return acc;
}

std::uint64_t AllocationPlan::hash() const {
  std::ostringstream out;
  save_plan(out, *this);
  return fnv1a(out.str());
}

void save_plan(std::ostream& out, const AllocationPlan& plan) {
  out << kPlanMagic << '\n'
      << "strategy " << to_string(plan.strategy) << '\n'
      << "budget " << format_double(plan.budget) << '\n'
      << "experts " << plan.experts << '\n'
      << "rank " << plan.rank << '\n'
      << "profile_hash " << plan.provenance << '\n'
      << "n_layers " << plan.n_layers << '\n';
  if (!plan.tiers.empty()) {
    out << "tiers ";
    for (std::size_t i = 0; i < plan.tiers.size(); ++i) out << (i ? "," : "") << plan.tiers[i];
    out << '\n';
  }
  for (std::size_t i = 0; i < plan.counts.size(); ++i) {
    const BlockId id = BlockId::from_index(i);
    out << "block " << id.layer << ' ' << kind_name(id.kind) << ' ' << plan.counts[i] << '\n';
  }
  out << "end\n";
}

void save_plan(const std::filesystem::path& path, const AllocationPlan& plan) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_plan(out, plan);
  if (!out) throw IoError("write failed for " + path.string());
}

AllocationPlan load_plan(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) { return ParseError("line " + std::to_string(line_no) + ": " + msg); };
  if (!std::getline(in, line)) throw ParseError("line 1: empty plan");
  ++line_no;
  if (line != kPlanMagic) throw fail("expected '" + std::string(kPlanMagic) + "', got '" + line + "'");

  std::map<std::string, std::string> header;
  std::map<std::size_t, std::size_t> blocks;
  bool ended = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key.empty()) continue;
    if (key == "end") {
      ended = true;
      break;
    }
    if (key == "block") {
      std::string layer_text, kind_text, count_text, extra;
      fields >> layer_text >> kind_text >> count_text >> extra;
      if (count_text.empty() || !extra.empty()) throw fail("block record needs: layer kind count");
      try {
        const auto kind = parse_kind(kind_text);
        if (!kind) throw ParseError("unknown block kind '" + kind_text + "'");
        const BlockId id{parse_count(layer_text, "layer"), *kind};
        if (!blocks.emplace(id.canonical_index(), parse_count(count_text, "expert count")).second) {
          throw ParseError("duplicate record for " + id.name());
        }
      } catch (const ParseError& e) {
        throw fail(e.what());
      }
      continue;
    }
    std::string value;
    std::getline(fields >> std::ws, value);
    header[key] = value;
  }
  if (!ended) throw fail("missing 'end' record");

  auto field = [&](const std::string& key) -> const std::string& {
    auto it = header.find(key);
    if (it == header.end()) throw ParseError("plan header missing field '" + key + "'");
    return it->second;
  };
  AllocationPlan plan;
  const auto strategy = parse_strategy(field("strategy"));
  if (!strategy) throw ParseError("field strategy: unknown value '" + field("strategy") + "'");
  plan.strategy = *strategy;
  plan.budget = parse_double(field("budget"), "budget");
  plan.experts = parse_count(field("experts"), "experts");
  plan.rank = parse_count(field("rank"), "rank");
  plan.provenance = field("profile_hash");
  plan.n_layers = parse_count(field("n_layers"), "n_layers");
  if (plan.n_layers == 0) throw ParseError("field n_layers: must be positive");
  if (auto it = header.find("tiers"); it != header.end()) {
    std::istringstream tiers(it->second);
    std::string tier;
    while (std::getline(tiers, tier, ',')) plan.tiers.push_back(parse_count(tier, "tier"));
  }
  plan.counts.assign(plan.n_layers * kKindsPerLayer, 0);
  for (std::size_t i = 0; i < plan.counts.size(); ++i) {
    auto it = blocks.find(i);
    if (it == blocks.end()) throw ParseError("missing record for block " + BlockId::from_index(i).name());
    plan.counts[i] = it->second;
  }
  if (blocks.size() != plan.counts.size()) throw ParseError("plan has records for blocks outside n_layers");
  return plan;
}

AllocationPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return load_plan(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace smoe
