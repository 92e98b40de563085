// SPDX-License-Identifier: Apache-2.0
#include "smoe/tape.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"

namespace smoe {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kSoftmax: return "softmax-lastdim";
    case OpKind::kSilu: return "silu";
    case OpKind::kRmsNorm: return "rmsnorm";
    case OpKind::kEmbedLookup: return "embed-lookup";
    case OpKind::kCrossEntropy: return "cross-entropy";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kCausalMask: return "causal-mask";
  }
  return "?";
}

namespace {

using kernels::GemmDims;
using kernels::Transpose;

enum class Broadcast { kSame, kScalar, kColumn };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, OpKind kind) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (a.rank() == 2 && b.rank() == 2 && b.dim(0) == a.dim(0) && b.dim(1) == 1) return Broadcast::kColumn;
  throw DimensionError(std::string(op_name(kind)) + ": cannot combine " + shape_string(a.shape()) + " with " +
                       shape_string(b.shape()));
}

// Index into b for element i of a.
inline std::size_t bcast_index(Broadcast mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Broadcast::kSame: return i;
    case Broadcast::kScalar: return 0;
    case Broadcast::kColumn: return i / cols;
  }
  return i;
}

void require_rank(const Tensor& t, std::size_t rank, OpKind kind) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op_name(kind)) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

void require_arity(std::span<const NodeId> inputs, std::size_t n, OpKind kind) {
  if (inputs.size() != n) {
    throw DimensionError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                         std::to_string(inputs.size()));
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void add_into(Tensor& dst, std::span<const double> src) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

}  // namespace

NodeId Tape::push(Tensor value, bool trainable, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), trainable, requires_grad});
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Tape::leaf(Tensor value, bool trainable) {
  if (!value.all_finite()) throw NumericError("leaf tensor contains non-finite values");
  return push(std::move(value), trainable, trainable);
}

NodeId Tape::apply(OpKind kind, std::span<const NodeId> inputs, OpArgs args) {
  for (NodeId id : inputs) {
    if (id.index >= nodes_.size()) throw ContractError("node id not on this tape");
  }
  std::vector<double> saved;
  std::optional<Tensor> out;

  switch (kind) {
    case OpKind::kMatmul: {
      require_arity(inputs, 2, kind);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      require_rank(a, 2, kind);
      require_rank(b, 2, kind);
      if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " * " +
                             shape_string(b.shape()));
      }
      out.emplace(Shape{a.dim(0), b.dim(1)});
      kernels::gemm({a.dim(0), a.dim(1), b.dim(1)}, a.data(), b.data(), out->data());
      break;
    }
    case OpKind::kAdd:
    case OpKind::kMul: {
      require_arity(inputs, 2, kind);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      const Broadcast mode = broadcast_mode(a, b, kind);
      const std::size_t cols = a.shape().back();
      out.emplace(a.shape());
      auto o = out->data();
      if (kind == OpKind::kAdd) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[bcast_index(mode, i, cols)];
      } else {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[bcast_index(mode, i, cols)];
      }
      break;
    }
    case OpKind::kSoftmax: {
      require_arity(inputs, 1, kind);
      const Tensor& x = value(inputs[0]);
      const std::size_t cols = x.shape().back();
      out.emplace(x.shape());
      kernels::softmax_rows(x.data(), out->data(), x.size() / cols, cols);
      break;
    }
    case OpKind::kSilu: {
      require_arity(inputs, 1, kind);
      const Tensor& x = value(inputs[0]);
      out.emplace(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) (*out)[i] = x[i] * sigmoid(x[i]);
      break;
    }
    case OpKind::kRmsNorm: {
      require_arity(inputs, 2, kind);
      const Tensor& x = value(inputs[0]);
      const Tensor& gain = value(inputs[1]);
      require_rank(x, 2, kind);
      const std::size_t rows = x.dim(0);
      const std::size_t d = x.dim(1);
      if (gain.size() != d) {
        throw DimensionError("rmsnorm: gain has " + std::to_string(gain.size()) + " elements for width " +
                             std::to_string(d));
      }
      out.emplace(x.shape());
      saved.resize(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += x.at(r, j) * x.at(r, j);
        const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) + kRmsNormEps);
        saved[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out->at(r, j) = x.at(r, j) * inv * gain[j];
      }
      break;
    }
    case OpKind::kEmbedLookup: {
      require_arity(inputs, 1, kind);
      const Tensor& table = value(inputs[0]);
      require_rank(table, 2, kind);
      if (args.indices.empty()) throw DimensionError("embed-lookup: no ids");
      const std::size_t d = table.dim(1);
      out.emplace(Shape{args.indices.size(), d});
      for (std::size_t t = 0; t < args.indices.size(); ++t) {
        const std::int64_t id = args.indices[t];
        if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
          throw InputError("embed-lookup: id " + std::to_string(id) + " at position " + std::to_string(t) +
                           " outside table of " + std::to_string(table.dim(0)) + " rows");
        }
        for (std::size_t j = 0; j < d; ++j) out->at(t, j) = table.at(static_cast<std::size_t>(id), j);
      }
      break;
    }
    case OpKind::kCrossEntropy: {
      require_arity(inputs, 1, kind);
      const Tensor& logits = value(inputs[0]);
      require_rank(logits, 2, kind);
      const std::size_t rows = logits.dim(0);
      const std::size_t v = logits.dim(1);
      if (args.indices.size() != rows) {
        throw ContractError("cross-entropy: " + std::to_string(args.indices.size()) + " targets for " +
                            std::to_string(rows) + " rows");
      }
      saved.resize(rows * v);
      kernels::softmax_rows(logits.data(), saved, rows, v);
      double total = 0.0;
      std::size_t counted = 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::int64_t t = args.indices[r];
        if (t == kIgnoreTarget) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
          throw InputError("cross-entropy: target " + std::to_string(t) + " outside " + std::to_string(v) +
                           " classes");
        }
        const double* row = logits.data().data() + r * v;
        double max_v = row[0];
        for (std::size_t j = 1; j < v; ++j) max_v = std::max(max_v, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - max_v);
        total += std::log(z) + max_v - row[t];
        ++counted;
      }
      if (counted == 0) throw ContractError("cross-entropy: every target is ignored");
      out.emplace(Tensor::scalar(total / static_cast<double>(counted)));
      break;
    }
    case OpKind::kReshape: {
      require_arity(inputs, 1, kind);
      const Tensor& x = value(inputs[0]);
      if (shape_size(args.shape) != x.size()) {
        throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(args.shape));
      }
      out.emplace(args.shape, x.values());
      break;
    }
    case OpKind::kTranspose: {
      require_arity(inputs, 1, kind);
      const Tensor& x = value(inputs[0]);
      require_rank(x, 2, kind);
      out.emplace(Shape{x.dim(1), x.dim(0)});
      for (std::size_t r = 0; r < x.dim(0); ++r) {
        for (std::size_t c = 0; c < x.dim(1); ++c) out->at(c, r) = x.at(r, c);
      }
      break;
    }
    case OpKind::kCausalMask: {
      require_arity(inputs, 1, kind);
      const Tensor& x = value(inputs[0]);
      require_rank(x, 2, kind);
      if (x.dim(0) != x.dim(1)) throw DimensionError("causal-mask: scores must be square, got " + shape_string(x.shape()));
      out.emplace(x);
      for (std::size_t r = 0; r < x.dim(0); ++r) {
        for (std::size_t c = r + 1; c < x.dim(1); ++c) out->at(r, c) = kMaskedScore;
      }
      break;
    }
  }

  if (!out->all_finite()) throw NumericError(std::string(op_name(kind)) + " produced a non-finite value");
  bool needs_grad = false;
  for (NodeId id : inputs) needs_grad = needs_grad || requires_grad(id);
  const NodeId result = push(std::move(*out), false, needs_grad);
  records_.push_back(Record{kind, {inputs.begin(), inputs.end()}, result, std::move(args), std::move(saved)});
  return result;
}

NodeId Tape::matmul(NodeId a, NodeId b) { return apply(OpKind::kMatmul, std::array{a, b}); }
NodeId Tape::add(NodeId a, NodeId b) { return apply(OpKind::kAdd, std::array{a, b}); }
NodeId Tape::mul(NodeId a, NodeId b) { return apply(OpKind::kMul, std::array{a, b}); }
NodeId Tape::softmax(NodeId x) { return apply(OpKind::kSoftmax, std::array{x}); }
NodeId Tape::silu(NodeId x) { return apply(OpKind::kSilu, std::array{x}); }
NodeId Tape::rmsnorm(NodeId x, NodeId gain) { return apply(OpKind::kRmsNorm, std::array{x, gain}); }
NodeId Tape::embed(NodeId table, std::span<const std::int64_t> ids) {
  return apply(OpKind::kEmbedLookup, std::array{table}, OpArgs{{ids.begin(), ids.end()}, {}});
}
NodeId Tape::cross_entropy(NodeId logits, std::span<const std::int64_t> targets) {
  return apply(OpKind::kCrossEntropy, std::array{logits}, OpArgs{{targets.begin(), targets.end()}, {}});
}
NodeId Tape::reshape(NodeId x, Shape shape) { return apply(OpKind::kReshape, std::array{x}, OpArgs{{}, std::move(shape)}); }
NodeId Tape::transpose(NodeId x) { return apply(OpKind::kTranspose, std::array{x}); }
NodeId Tape::causal_mask(NodeId x) { return apply(OpKind::kCausalMask, std::array{x}); }

Gradients backward(const Tape& tape, NodeId loss) {
  if (loss.index >= tape.node_count()) throw ContractError("backward: loss node not on this tape");
  if (tape.value(loss).size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_string(tape.value(loss).shape()));
  }
  std::vector<std::optional<Tensor>> grads(tape.node_count());
  grads[loss.index].emplace(Shape{1}, 1.0);

  auto grad_for = [&](NodeId id) -> Tensor& {
    auto& slot = grads[id.index];
    if (!slot) slot.emplace(tape.value(id).shape(), 0.0);
    return *slot;
  };

  const auto& records = tape.records();
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    const Tape::Record& rec = *it;
    if (!tape.requires_grad(rec.output) || !grads[rec.output.index]) continue;
    const Tensor& g = *grads[rec.output.index];
    const Tensor& y = tape.value(rec.output);

    switch (rec.kind) {
      case OpKind::kMatmul: {
        const Tensor& a = tape.value(rec.inputs[0]);
        const Tensor& b = tape.value(rec.inputs[1]);
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        if (tape.requires_grad(rec.inputs[0])) {
          kernels::gemm({m, n, k, Transpose::kNo, Transpose::kYes}, g.data(), b.data(), grad_for(rec.inputs[0]).data(),
                        true);
        }
        if (tape.requires_grad(rec.inputs[1])) {
          kernels::gemm({k, m, n, Transpose::kYes, Transpose::kNo}, a.data(), g.data(), grad_for(rec.inputs[1]).data(),
                        true);
        }
        break;
      }
      case OpKind::kAdd:
      case OpKind::kMul: {
        const Tensor& a = tape.value(rec.inputs[0]);
        const Tensor& b = tape.value(rec.inputs[1]);
        const Broadcast mode = broadcast_mode(a, b, rec.kind);
        const std::size_t cols = a.shape().back();
        const bool is_mul = rec.kind == OpKind::kMul;
        if (tape.requires_grad(rec.inputs[0])) {
          Tensor& ga = grad_for(rec.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += is_mul ? g[i] * b[bcast_index(mode, i, cols)] : g[i];
        }
        if (tape.requires_grad(rec.inputs[1])) {
          Tensor& gb = grad_for(rec.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gb[bcast_index(mode, i, cols)] += is_mul ? g[i] * a[i] : g[i];
        }
        break;
      }
      case OpKind::kSoftmax: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        Tensor& gx = grad_for(rec.inputs[0]);
        const std::size_t cols = y.shape().back();
        for (std::size_t r = 0; r < y.size() / cols; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
          for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
        }
        break;
      }
      case OpKind::kSilu: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        const Tensor& x = tape.value(rec.inputs[0]);
        Tensor& gx = grad_for(rec.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double s = sigmoid(x[i]);
          gx[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
        break;
      }
      case OpKind::kRmsNorm: {
        const Tensor& x = tape.value(rec.inputs[0]);
        const Tensor& gain = tape.value(rec.inputs[1]);
        const std::size_t rows = x.dim(0), d = x.dim(1);
        const bool want_x = tape.requires_grad(rec.inputs[0]);
        const bool want_gain = tape.requires_grad(rec.inputs[1]);
        Tensor* gx = want_x ? &grad_for(rec.inputs[0]) : nullptr;
        Tensor* gg = want_gain ? &grad_for(rec.inputs[1]) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double inv = rec.saved[r];
          if (gx) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g.at(r, j) * gain[j] * x.at(r, j);
            const double coef = inv * inv * inv * dot / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) gx->at(r, j) += inv * gain[j] * g.at(r, j) - coef * x.at(r, j);
          }
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g.at(r, j) * x.at(r, j) * inv;
          }
        }
        break;
      }
      case OpKind::kEmbedLookup: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        Tensor& gt = grad_for(rec.inputs[0]);
        const std::size_t d = gt.dim(1);
        for (std::size_t t = 0; t < rec.args.indices.size(); ++t) {
          const auto row = static_cast<std::size_t>(rec.args.indices[t]);
          for (std::size_t j = 0; j < d; ++j) gt.at(row, j) += g.at(t, j);
        }
        break;
      }
      case OpKind::kCrossEntropy: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        Tensor& gl = grad_for(rec.inputs[0]);
        const std::size_t rows = gl.dim(0), v = gl.dim(1);
        std::size_t counted = 0;
        for (std::int64_t t : rec.args.indices) counted += t != kIgnoreTarget;
        const double scale = g[0] / static_cast<double>(counted);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::int64_t t = rec.args.indices[r];
          if (t == kIgnoreTarget) continue;
          for (std::size_t j = 0; j < v; ++j) gl.at(r, j) += scale * rec.saved[r * v + j];
          gl.at(r, static_cast<std::size_t>(t)) -= scale;
        }
        break;
      }
      case OpKind::kReshape: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        add_into(grad_for(rec.inputs[0]), g.data());
        break;
      }
      case OpKind::kTranspose: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        Tensor& gx = grad_for(rec.inputs[0]);
        for (std::size_t r = 0; r < gx.dim(0); ++r) {
          for (std::size_t c = 0; c < gx.dim(1); ++c) gx.at(r, c) += g.at(c, r);
        }
        break;
      }
      case OpKind::kCausalMask: {
        if (!tape.requires_grad(rec.inputs[0])) break;
        Tensor& gx = grad_for(rec.inputs[0]);
        for (std::size_t r = 0; r < gx.dim(0); ++r) {
          for (std::size_t c = 0; c <= r; ++c) gx.at(r, c) += g.at(r, c);
        }
        break;
      }
    }
  }

  Gradients result;
  bool any_trainable = false;
  for (std::uint32_t i = 0; i < tape.node_count(); ++i) {
    const NodeId id{i};
    if (!tape.trainable(id)) continue;
    any_trainable = true;
    result.emplace(id, grads[i] ? std::move(*grads[i]) : Tensor(tape.value(id).shape(), 0.0));
  }
  if (!any_trainable) throw ContractError("backward: no trainable node on the tape");
  for (const auto& [id, grad] : result) {
    if (!grad.all_finite()) throw NumericError("backward: non-finite gradient for node " + std::to_string(id.index));
  }
  return result;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& params, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_gradient: step must be positive");
  Tensor grad(params.shape(), 0.0);
  Tensor probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace smoe
