// SPDX-License-Identifier: Apache-2.0
#include "smoe/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/hash.hpp"
#include "smoe/kernels.hpp"
#include "smoe/random.hpp"

namespace smoe {

namespace {

constexpr std::uint64_t kAdapterSeedStream = 0x5e1ec7ed;

std::string adapter_prefix(BlockId id) { return "adapter." + id.name() + "."; }

}  // namespace

std::size_t ExpertAdapter::parameter_count() const {
  std::size_t n = a.size() + router.size();
  for (const Tensor& bi : b) n += bi.size();
  return n;
}

ExpertAdapter make_adapter(BlockId block, std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t experts,
                           std::uint64_t seed) {
  if (rank == 0 || experts == 0) throw ContractError("adapter for " + block.name() + " needs rank and experts >= 1");
  if (rank > std::min(d_in, d_out)) {
    throw ContractError("rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                        std::to_string(std::min(d_in, d_out)) + " for block " + block.name());
  }
  ExpertAdapter adapter;
  adapter.block = block;
  adapter.rank = rank;
  adapter.a = Tensor({rank, d_in});
  const double bound = std::sqrt(6.0 / static_cast<double>(d_in));
  Rng rng(seed);
  for (double& v : adapter.a.values()) v = rng.uniform(-bound, bound);
  adapter.b.assign(experts, Tensor({d_out, rank}, 0.0));
  adapter.router = Tensor({experts, d_in}, 0.0);
  return adapter;
}

std::vector<double> routing_weights(std::span<const double> x, const ExpertAdapter& adapter) {
  if (x.size() != adapter.d_in()) throw ContractError("routing: input width does not match " + adapter.block.name());
  const std::size_t e = adapter.experts();
  std::vector<double> logits(e, 0.0), w(e);
  for (std::size_t i = 0; i < e; ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) logits[i] += adapter.router.at(i, j) * x[j];
  }
  kernels::reference::softmax_rows(logits, w, 1, e);
  return w;
}

std::vector<double> adapter_forward(std::span<const double> x, std::span<const double> base_out,
                                    const ExpertAdapter& adapter, double scale) {
  if (x.size() != adapter.d_in() || base_out.size() != adapter.d_out()) {
    throw ContractError("adapter_forward: dimensions do not match " + adapter.block.name());
  }
  const std::vector<double> w = routing_weights(x, adapter);
  std::vector<double> ax(adapter.rank, 0.0);
  for (std::size_t p = 0; p < adapter.rank; ++p) {
    for (std::size_t j = 0; j < x.size(); ++j) ax[p] += adapter.a.at(p, j) * x[j];
  }
  std::vector<double> out(base_out.begin(), base_out.end());
  for (std::size_t o = 0; o < out.size(); ++o) {
    double delta = 0.0;
    for (std::size_t i = 0; i < adapter.experts(); ++i) {
      double bax = 0.0;
      for (std::size_t p = 0; p < adapter.rank; ++p) bax += adapter.b[i].at(o, p) * ax[p];
      delta += w[i] * bax;
    }
    out[o] += scale * delta;
  }
  return out;
}

AdaptedModel attach_adapters(std::shared_ptr<const BaseModel> base, const AllocationPlan& plan, std::size_t rank,
                             double scale) {
  if (!base) throw ContractError("attach_adapters: no base model");
  const ModelConfig& c = base->config;
  if (plan.counts.size() != c.block_count()) {
    throw ContractError("plan covers " + std::to_string(plan.counts.size()) + " blocks, model has " +
                        std::to_string(c.block_count()));
  }
  AdaptedModel model;
  model.rank = rank;
  model.scale = scale;
  model.plan_hash = plan.hash();
  for (std::size_t i = 0; i < plan.counts.size(); ++i) {
    if (plan.counts[i] == 0) continue;
    const BlockId id = BlockId::from_index(i);
    const auto [d_out, d_in] = c.block_dims(id.kind);
    model.adapters.emplace(
        id, make_adapter(id, d_in, d_out, rank, plan.counts[i], mix_seed(c.seed ^ kAdapterSeedStream, i)));
  }
  model.base = std::move(base);
  return model;
}

std::vector<std::pair<std::string, const Tensor*>> trainable_parameters(const AdaptedModel& model) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& [id, adapter] : model.adapters) {
    const std::string prefix = adapter_prefix(id);
    out.emplace_back(prefix + "A", &adapter.a);
    for (std::size_t j = 0; j < adapter.b.size(); ++j) out.emplace_back(prefix + "B." + std::to_string(j), &adapter.b[j]);
    out.emplace_back(prefix + "R", &adapter.router);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> trainable_parameters(AdaptedModel& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : trainable_parameters(std::as_const(model))) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

std::size_t trainable_parameter_count(const AdaptedModel& model) {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable_parameters(model)) n += t->size();
  return n;
}

AdapterHook::AdapterHook(const AdaptedModel& model, Tape& tape, bool trainable) {
  for (const auto& [id, adapter] : model.adapters) {
    Bound bound;
    const NodeId a = tape.leaf(adapter.a, trainable);
    parameter_nodes_.push_back(a);
    bound.a_t = tape.transpose(a);
    for (std::size_t i = 0; i < adapter.experts(); ++i) {
      const NodeId b = tape.leaf(adapter.b[i], trainable);
      parameter_nodes_.push_back(b);
      bound.b_t.push_back(tape.transpose(b));
      Tensor select({adapter.experts(), 1}, 0.0);
      select[i] = 1.0;
      bound.select.push_back(tape.constant(std::move(select)));
    }
    const NodeId r = tape.leaf(adapter.router, trainable);
    parameter_nodes_.push_back(r);
    bound.router_t = tape.transpose(r);
    bound_.emplace(id, std::move(bound));
  }
  scaled_ = model.scale != 1.0;
  if (scaled_) scale_ = tape.constant(Tensor::scalar(model.scale));
}

NodeId AdapterHook::on_linear(Tape& tape, BlockId block, NodeId input, NodeId base_out) const {
  const auto it = bound_.find(block);
  if (it == bound_.end()) return base_out;
  const Bound& b = it->second;
  const NodeId shared = tape.matmul(input, b.a_t);                       // T x r
  const NodeId weights = tape.softmax(tape.matmul(input, b.router_t));  // T x E
  std::optional<NodeId> delta;
  for (std::size_t i = 0; i < b.b_t.size(); ++i) {
    const NodeId expert = tape.matmul(shared, b.b_t[i]);           // T x d_out
    const NodeId w_i = tape.matmul(weights, b.select[i]);          // T x 1
    const NodeId term = tape.mul(expert, w_i);
    delta = delta ? tape.add(*delta, term) : term;
  }
  if (scaled_) delta = tape.mul(*delta, scale_);
  return tape.add(base_out, *delta);
}

Tensor forward_logits(const AdaptedModel& model, std::span<const TokenId> tokens) {
  Tape tape;
  const ModelBinding binding = bind_model(*model.base, tape, TrainableMask::none());
  const AdapterHook hook(model, tape, false);
  return tape.value(forward_logits(*model.base, binding, tokens, tape, &hook));
}

void save_adapters(const std::filesystem::path& path, const AdaptedModel& model) {
  TensorFile file;
  file.magic = kAdapterMagic;
  file.meta = {{"plan_hash", hex64(model.plan_hash)},
               {"rank", std::to_string(model.rank)},
               {"scale", format_double(model.scale)},
               {"config_hash", hex64(model.base->config.hash())}};
  for (const auto& [name, t] : trainable_parameters(model)) file.tensors.emplace_back(name, *t);
  write_tensor_file(path, file);
}

AdaptedModel load_adapters(const std::filesystem::path& path, std::shared_ptr<const BaseModel> base) {
  const TensorFile file = read_tensor_file(path, kAdapterMagic);
  if (file.meta_value("config_hash") != hex64(base->config.hash())) {
    throw ContractError(path.string() + ": adapters were trained for model config " + file.meta_value("config_hash") +
                        ", current model is " + hex64(base->config.hash()));
  }
  AdaptedModel model;
  model.rank = parse_count(file.meta_value("rank"), "rank");
  model.scale = parse_double(file.meta_value("scale"), "scale");
  model.plan_hash = std::stoull(file.meta_value("plan_hash"), nullptr, 16);
  for (std::size_t i = 0; i < base->config.block_count(); ++i) {
    const BlockId id = BlockId::from_index(i);
    const std::string prefix = adapter_prefix(id);
    const Tensor* a = file.find(prefix + "A");
    if (!a) continue;
    const Tensor* r = file.find(prefix + "R");
    if (!r) throw ParseError(path.string() + ": missing tensor '" + prefix + "R'");
    const auto [d_out, d_in] = base->config.block_dims(id.kind);
    ExpertAdapter adapter;
    adapter.block = id;
    adapter.rank = model.rank;
    adapter.a = *a;
    adapter.router = *r;
    for (std::size_t j = 0; const Tensor* b = file.find(prefix + "B." + std::to_string(j)); ++j) adapter.b.push_back(*b);
    if (adapter.b.empty()) throw ParseError(path.string() + ": adapter " + id.name() + " has no B experts");
    const bool shapes_ok = adapter.a.shape() == Shape{model.rank, d_in} &&
                           adapter.router.shape() == Shape{adapter.b.size(), d_in} &&
                           std::all_of(adapter.b.begin(), adapter.b.end(),
                                       [&](const Tensor& b) { return b.shape() == Shape{d_out, model.rank}; });
    if (!shapes_ok) throw ParseError(path.string() + ": adapter " + id.name() + " has inconsistent tensor shapes");
    model.adapters.emplace(id, std::move(adapter));
  }
  model.base = std::move(base);
  return model;
}

}  // namespace smoe
