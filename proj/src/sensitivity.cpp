// SPDX-License-Identifier: Apache-2.0
#include "smoe/sensitivity.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>

#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/hash.hpp"

namespace smoe {

std::string_view to_string(GroupMode mode) { return mode == GroupMode::kPerLayer ? "per-layer" : "single-group"; }
std::string_view to_string(ScheduleMode mode) {
  return mode == ScheduleMode::kRoundRobin ? "round-robin" : "exhaustive";
}
std::string_view to_string(Aggregate mode) { return mode == Aggregate::kSum ? "sum" : "mean"; }

std::optional<GroupMode> parse_group_mode(std::string_view text) {
  if (text == "per-layer") return GroupMode::kPerLayer;
  if (text == "single-group") return GroupMode::kSingleGroup;
  return std::nullopt;
}
std::optional<ScheduleMode> parse_schedule_mode(std::string_view text) {
  if (text == "round-robin") return ScheduleMode::kRoundRobin;
  if (text == "exhaustive") return ScheduleMode::kExhaustive;
  return std::nullopt;
}
std::optional<Aggregate> parse_aggregate(std::string_view text) {
  if (text == "sum") return Aggregate::kSum;
  if (text == "mean") return Aggregate::kMean;
  return std::nullopt;
}

GroupSchedule::GroupSchedule(std::vector<std::vector<BlockId>> groups, GroupMode group_mode,
                             ScheduleMode schedule_mode)
    : groups_(std::move(groups)), group_mode_(group_mode), schedule_mode_(schedule_mode) {
  if (groups_.empty()) throw ContractError("group schedule needs at least one group");
}

GroupSchedule GroupSchedule::per_layer(const ModelConfig& config, ScheduleMode mode) {
  std::vector<std::vector<BlockId>> groups(config.n_layers);
  for (const auto& [id, shape] : list_blocks(config)) groups[id.layer].push_back(id);
  return GroupSchedule(std::move(groups), GroupMode::kPerLayer, mode);
}

GroupSchedule GroupSchedule::single_group(const ModelConfig& config, ScheduleMode mode) {
  std::vector<BlockId> all;
  for (const auto& [id, shape] : list_blocks(config)) all.push_back(id);
  return GroupSchedule({std::move(all)}, GroupMode::kSingleGroup, mode);
}

std::vector<std::size_t> GroupSchedule::groups_for(std::size_t sample_index) const {
  if (schedule_mode_ == ScheduleMode::kRoundRobin) return {sample_index % groups_.size()};
  std::vector<std::size_t> all(groups_.size());
  for (std::size_t g = 0; g < all.size(); ++g) all[g] = g;
  return all;
}

void GroupSchedule::validate(const ModelConfig& config, std::size_t sample_count) const {
  std::vector<int> seen(config.block_count(), 0);
  for (const auto& group : groups_) {
    if (group.empty()) throw ContractError("group schedule contains an empty group");
    for (BlockId id : group) {
      if (id.layer >= config.n_layers) throw ContractError("group schedule names " + id.name() + " outside the model");
      if (seen[id.canonical_index()]++) throw ContractError("block " + id.name() + " appears in more than one group");
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw ContractError("block " + BlockId::from_index(i).name() + " is not covered by any group");
  }
  if (schedule_mode_ == ScheduleMode::kRoundRobin && sample_count % groups_.size() != 0) {
    throw ContractError("round-robin profiling needs a sample count that is a multiple of " +
                        std::to_string(groups_.size()) + " groups, got " + std::to_string(sample_count));
  }
}

double aggregate_block(const Tensor& grad) {
  double total = 0.0;
  for (double g : grad.values()) total += g * g;
  return total;
}

namespace {

struct Contribution {
  std::size_t sample = 0;
  std::size_t group = 0;
  std::vector<double> values;  // one per block of the group, group order
};

Contribution profile_pair(const BaseModel& model, const Sample& sample, std::size_t sample_index,
                          const std::vector<BlockId>& group, std::size_t group_index, const ProfileOptions& options) {
  std::vector<char> in_group(model.config.block_count(), 0);
  for (BlockId id : group) in_group[id.canonical_index()] = 1;

  Contribution out{sample_index, group_index, {}};
  try {
    Tape tape;
    // Non-block tensors get gradients too, but they are never accumulated.
    const ModelBinding binding = bind_model(
        model, tape, TrainableMask{[&](BlockId id) { return in_group[id.canonical_index()] != 0; }, true});
    const NodeId logits = forward_logits(model, binding, sample.tokens, tape);
    NodeId loss = lm_loss(tape, logits, sample.targets);
    if (options.loss_scale != 1.0) loss = tape.mul(loss, tape.constant(Tensor::scalar(options.loss_scale)));
    const Gradients grads = backward(tape, loss);
    out.values.reserve(group.size());
    for (BlockId id : group) {
      const Tensor& g = grads.at(binding.block_leaf[id.canonical_index()]);
      double s = aggregate_block(g);
      if (options.aggregate == Aggregate::kMean) s /= static_cast<double>(g.size());
      out.values.push_back(s);
    }
  } catch (const NumericError& e) {
    throw NumericError("sample " + std::to_string(sample_index) + ": " + e.what());
  }
  return out;
}

double pairwise_sum(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  if (xs.size() == 1) return xs[0];
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

}  // namespace

SensitivityProfile profile_sensitivity(const BaseModel& model, std::span<const Sample> samples,
                                       const GroupSchedule& schedule, const ProfileOptions& options) {
  if (samples.empty()) throw ContractError("profile_sensitivity: no samples");
  schedule.validate(model.config, samples.size());

  // Processing order follows the literal algorithm: exhaustive runs group by
  // group, round-robin runs sample by sample. Per block, contributions always
  // arrive in sample order either way.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (schedule.schedule_mode() == ScheduleMode::kExhaustive) {
    for (std::size_t g = 0; g < schedule.group_count(); ++g) {
      for (std::size_t i = 0; i < samples.size(); ++i) pairs.emplace_back(i, g);
    }
  } else {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (std::size_t g : schedule.groups_for(i)) pairs.emplace_back(i, g);
    }
  }

  std::vector<Contribution> contributions(pairs.size());
  const auto n_pairs = static_cast<std::ptrdiff_t>(pairs.size());
  if (options.parallel) {
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t p = 0; p < n_pairs; ++p) {
      try {
        const auto [i, g] = pairs[static_cast<std::size_t>(p)];
        contributions[static_cast<std::size_t>(p)] = profile_pair(model, samples[i], i, schedule.groups()[g], g, options);
      } catch (...) {
#pragma omp critical
        if (!error) error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
  } else {
    for (std::ptrdiff_t p = 0; p < n_pairs; ++p) {
      const auto [i, g] = pairs[static_cast<std::size_t>(p)];
      contributions[static_cast<std::size_t>(p)] = profile_pair(model, samples[i], i, schedule.groups()[g], g, options);
    }
  }

  // Gather each block's terms in sample order.
  std::vector<std::vector<double>> terms(model.config.block_count());
  std::vector<const Contribution*> ordered;
  for (const Contribution& c : contributions) ordered.push_back(&c);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const Contribution* a, const Contribution* b) { return a->sample < b->sample; });
  for (const Contribution* c : ordered) {
    const auto& group = schedule.groups()[c->group];
    for (std::size_t j = 0; j < group.size(); ++j) terms[group[j].canonical_index()].push_back(c->values[j]);
  }

  SensitivityProfile profile;
  profile.task_id = options.task_id;
  profile.sample_count = samples.size();
  profile.group_mode = schedule.group_mode();
  profile.schedule_mode = schedule.schedule_mode();
  profile.aggregate = options.aggregate;
  profile.config_hash = model.config.hash();
  profile.n_layers = model.config.n_layers;
  profile.values.assign(model.config.block_count(), 0.0);
  for (std::size_t n = 0; n < terms.size(); ++n) {
    if (options.parallel) {
      profile.values[n] = pairwise_sum(terms[n]);
    } else {
      double s = 0.0;
      for (double t : terms[n]) s = s + t;
      profile.values[n] = s;
    }
  }
  return profile;
}

double selection_consistency(const std::set<BlockId>& a, const std::set<BlockId>& b,
                             const std::set<BlockId>& universe) {
  if (universe.empty()) throw ContractError("selection_consistency: empty universe");
  for (const auto* sel : {&a, &b}) {
    for (BlockId id : *sel) {
      if (!universe.contains(id)) throw ContractError("selection_consistency: " + id.name() + " not in universe");
    }
  }
  std::size_t agree = 0;
  for (BlockId id : universe) agree += a.contains(id) == b.contains(id);
  return 100.0 * static_cast<double>(agree) / static_cast<double>(universe.size());
}

std::string format_percent(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", value);
  return buf;
}

std::uint64_t SensitivityProfile::hash() const {
  std::ostringstream out;
  save_profile(out, *this);
  return fnv1a(out.str());
}

void save_profile(std::ostream& out, const SensitivityProfile& p) {
  out << kProfileMagic << '\n'
      << "task_id " << p.task_id << '\n'
      << "sample_count " << p.sample_count << '\n'
      << "group_mode " << to_string(p.group_mode) << '\n'
      << "schedule_mode " << to_string(p.schedule_mode) << '\n'
      << "aggregate " << to_string(p.aggregate) << '\n'
      << "config_hash " << hex64(p.config_hash) << '\n'
      << "n_layers " << p.n_layers << '\n';
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const BlockId id = BlockId::from_index(i);
    out << "block " << id.layer << ' ' << kind_name(id.kind) << ' ' << format_double(p.values[i]) << '\n';
  }
  out << "end\n";
}

void save_profile(const std::filesystem::path& path, const SensitivityProfile& profile) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_profile(out, profile);
  if (!out) throw IoError("write failed for " + path.string());
}

SensitivityProfile load_profile(std::istream& in, std::optional<std::uint64_t> expected_config_hash) {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) { return ParseError("line " + std::to_string(line_no) + ": " + msg); };

  if (!std::getline(in, line)) throw ParseError("line 1: empty profile");
  ++line_no;
  if (line != kProfileMagic) throw fail("expected '" + std::string(kProfileMagic) + "', got '" + line + "'");

  std::map<std::string, std::string> header;
  std::map<std::size_t, double> blocks;
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
      if (!header.contains("n_layers")) throw fail("block record before n_layers");
      std::string layer_text, kind_text, value_text, extra;
      fields >> layer_text >> kind_text >> value_text >> extra;
      if (value_text.empty() || !extra.empty()) throw fail("block record needs: layer kind value");
      try {
        const std::size_t layer = parse_count(layer_text, "layer");
        const auto kind = parse_kind(kind_text);
        if (!kind) throw ParseError("unknown block kind '" + kind_text + "'");
        const BlockId id{layer, *kind};
        const double v = parse_double(value_text, "sensitivity of " + id.name());
        if (v < 0.0) throw ParseError("negative sensitivity for " + id.name());
        if (!blocks.emplace(id.canonical_index(), v).second) throw ParseError("duplicate record for " + id.name());
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
    if (it == header.end()) throw ParseError("profile header missing field '" + key + "'");
    return it->second;
  };

  SensitivityProfile p;
  p.task_id = field("task_id");
  p.sample_count = parse_count(field("sample_count"), "sample_count");
  const auto gm = parse_group_mode(field("group_mode"));
  const auto sm = parse_schedule_mode(field("schedule_mode"));
  const auto ag = parse_aggregate(field("aggregate"));
  if (!gm) throw ParseError("field group_mode: unknown value '" + field("group_mode") + "'");
  if (!sm) throw ParseError("field schedule_mode: unknown value '" + field("schedule_mode") + "'");
  if (!ag) throw ParseError("field aggregate: unknown value '" + field("aggregate") + "'");
  p.group_mode = *gm;
  p.schedule_mode = *sm;
  p.aggregate = *ag;
  const std::string& hash_text = field("config_hash");
  try {
    std::size_t used = 0;
    p.config_hash = std::stoull(hash_text, &used, 16);
    if (used != hash_text.size()) throw std::invalid_argument("trailing");
  } catch (const std::logic_error&) {
    throw ParseError("field config_hash: invalid value '" + hash_text + "'");
  }
  p.n_layers = parse_count(field("n_layers"), "n_layers");
  if (p.n_layers == 0) throw ParseError("field n_layers: must be positive");

  p.values.assign(p.n_layers * kKindsPerLayer, 0.0);
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    auto it = blocks.find(i);
    if (it == blocks.end()) throw ParseError("missing record for block " + BlockId::from_index(i).name());
    p.values[i] = it->second;
  }
  if (blocks.size() != p.values.size()) throw ParseError("profile has records for blocks outside n_layers");

  if (expected_config_hash && *expected_config_hash != p.config_hash) {
    throw ContractError("profile was computed for model config " + hex64(p.config_hash) +
                        ", current model is " + hex64(*expected_config_hash));
  }
  return p;
}

SensitivityProfile load_profile(const std::filesystem::path& path, std::optional<std::uint64_t> expected_config_hash) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return load_profile(in, expected_config_hash);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_heatmap_csv(std::ostream& out, const SensitivityProfile& profile) {
  out << "layer";
  for (BlockKind kind : kAllKinds) out << ',' << kind_name(kind);
  out << '\n';
  for (std::size_t layer = 0; layer < profile.n_layers; ++layer) {
    out << layer;
    for (BlockKind kind : kAllKinds) out << ',' << format_double(profile.value({layer, kind}));
    out << '\n';
  }
}

}  // namespace smoe
