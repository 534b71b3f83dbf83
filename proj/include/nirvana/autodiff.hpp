// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over the numerics kernels.
//
// Nodes are appended in evaluation order, so the tape is topologically
// sorted by construction and backward() is a single reverse sweep. The
// forward value of every node is produced by the same kernel the plain
// (tape-free) code path calls, which keeps taped and untaped forwards
// bitwise identical.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nirvana/errors.hpp"
#include "nirvana/numerics.hpp"

namespace nirvana {

enum class Primitive : std::uint8_t {
  Input,  // leaf; created through Tape::parameter / Tape::constant only
  Matmul,
  Add,
  Sub,
  Mul,
  LayerNorm,
  RmsNorm,
  Sigmoid,
  Swish,
  Softmax,
  Concat,
  Slice,
  Sum,
  SquaredError,
  Reshape,
  Rsqrt,
  CrossEntropy,
  DeltaUpdate,  // (M, k, v, alpha, beta) -> alpha (M - beta M k k^T) + beta v k^T
};

inline const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Input: return "input";
    case Primitive::Matmul: return "matmul";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Mul: return "mul";
    case Primitive::LayerNorm: return "layer_norm";
    case Primitive::RmsNorm: return "rms_norm";
    case Primitive::Sigmoid: return "sigmoid";
    case Primitive::Swish: return "swish";
    case Primitive::Softmax: return "softmax";
    case Primitive::Concat: return "concat";
    case Primitive::Slice: return "slice";
    case Primitive::Sum: return "sum";
    case Primitive::SquaredError: return "squared_error";
    case Primitive::Reshape: return "reshape";
    case Primitive::Rsqrt: return "rsqrt";
    case Primitive::CrossEntropy: return "cross_entropy";
    case Primitive::DeltaUpdate: return "delta_update";
  }
  return "unknown";
}

/// Non-tensor arguments of a primitive.
struct OpAttrs {
  double eps = 0.0;         // layer_norm, rms_norm
  std::size_t offset = 0;   // slice
  std::size_t length = 0;   // slice
  Shape shape{};            // reshape
  std::size_t target = 0;   // cross_entropy
};

struct Var {
  std::uint32_t id = 0;
  friend bool operator==(Var a, Var b) { return a.id == b.id; }
};

template <typename Real>
class Grads {
 public:
  const Tensor<Real>& operator[](Var v) const { return at(v); }
  const Tensor<Real>& at(Var v) const {
    auto it = index_.find(v.id);
    if (it == index_.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id));
    return entries_[it->second].second;
  }
  bool contains(Var v) const { return index_.count(v.id) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<Var, Tensor<Real>>>& entries() const { return entries_; }

  void insert(Var v, Tensor<Real> g) {
    index_[v.id] = entries_.size();
    entries_.emplace_back(v, std::move(g));
  }

 private:
  std::vector<std::pair<Var, Tensor<Real>>> entries_;
  std::unordered_map<std::uint32_t, std::size_t> index_;
};

template <typename Real = double>
class Tape {
 public:
  using TensorT = Tensor<Real>;

  Var parameter(TensorT value, std::string name = {}) {
    Var v = push(Primitive::Input, {}, std::move(value), {}, true);
    params_.push_back(v);
    names_.emplace(v.id, std::move(name));
    return v;
  }

  Var constant(TensorT value) { return push(Primitive::Input, {}, std::move(value), {}, false); }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  Primitive op(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Var>& parameters() const { return params_; }
  const std::string& name(Var v) const { return names_.at(v.id); }

  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Record one primitive application and compute its forward value.
  Var record(Primitive op, std::span<const Var> inputs, const OpAttrs& attrs = {}) {
    auto in = [&](std::size_t i) -> const TensorT& {
      if (i >= inputs.size())
        throw std::invalid_argument(std::string(primitive_name(op)) + ": missing operand");
      return nodes_.at(inputs[i].id).value;
    };
    const Real eps = static_cast<Real>(attrs.eps);
    TensorT out;
    Real aux = 0;
    switch (op) {
      case Primitive::Matmul: out = matmul(in(0), in(1)); break;
      case Primitive::Add: out = add(in(0), in(1)); break;
      case Primitive::Sub: out = sub(in(0), in(1)); break;
      case Primitive::Mul: out = mul(in(0), in(1)); break;
      case Primitive::LayerNorm: {
        out = layer_norm(in(0), eps);
        // 1/sigma, recovered the same way the kernel computes it
        const auto& x = in(0);
        const Real inv_n = Real(1) / Real(x.numel());
        const Real mean = sum(x) * inv_n;
        Real var = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) var += (x[i] - mean) * (x[i] - mean);
        aux = Real(1) / std::sqrt(var * inv_n + eps);
        break;
      }
      case Primitive::RmsNorm: {
        out = rms_norm(in(0), in(1), eps);
        const auto& x = in(0);
        Real ms = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) ms += x[i] * x[i];
        aux = Real(1) / std::sqrt(ms * (Real(1) / Real(x.numel())) + eps);
        break;
      }
      case Primitive::Sigmoid: out = sigmoid(in(0)); break;
      case Primitive::Swish: out = swish(in(0)); break;
      case Primitive::Softmax: out = softmax(in(0)); break;
      case Primitive::Concat: {
        std::vector<const TensorT*> parts;
        parts.reserve(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i) parts.push_back(&in(i));
        out = concat<Real>(std::span<const TensorT* const>(parts));
        break;
      }
      case Primitive::Slice: out = slice(in(0), attrs.offset, attrs.length); break;
      case Primitive::Sum: out = TensorT::scalar(sum(in(0))); break;
      case Primitive::SquaredError: out = TensorT::scalar(squared_error(in(0), in(1))); break;
      case Primitive::Reshape: out = in(0).reshaped(attrs.shape); break;
      case Primitive::Rsqrt: out = rsqrt(in(0)); break;
      case Primitive::CrossEntropy:
        out = TensorT::scalar(cross_entropy(in(0), attrs.target));
        break;
      case Primitive::DeltaUpdate: out = delta_update(in(0), in(1), in(2), in(3), in(4)); break;
      default:
        throw UnsupportedOpError(std::string("cannot record primitive '") + primitive_name(op) +
                                 "' (id " + std::to_string(static_cast<int>(op)) + ")");
    }
    bool rg = false;
    for (auto v : inputs) rg = rg || nodes_.at(v.id).requires_grad;
    Var v = push(op, std::vector<std::uint32_t>(), std::move(out), attrs, rg);
    auto& node = nodes_.back();
    node.inputs.reserve(inputs.size());
    for (auto i : inputs) node.inputs.push_back(i.id);
    node.aux = aux;
    return v;
  }

  Var record(Primitive op, std::initializer_list<Var> inputs, const OpAttrs& attrs = {}) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()), attrs);
  }

  /// Reverse sweep from a scalar node. Every parameter gets an entry, zero
  /// if the loss does not depend on it.
  Grads<Real> backward(Var loss) const {
    const auto& ln = nodes_.at(loss.id);
    if (ln.value.numel() != 1)
      throw ShapeError("backward from non-scalar node of shape " + shape_str(ln.value.shape()));
    std::vector<TensorT> g(loss.id + 1);
    g[loss.id] = TensorT::filled(ln.value.shape(), Real(1));
    for (std::size_t idx = loss.id + 1; idx-- > 0;) {
      const auto& node = nodes_[idx];
      if (g[idx].empty() || !node.requires_grad || node.op == Primitive::Input) continue;
      propagate(node, g[idx], g);  // may consume g[idx]
      if (idx != loss.id) g[idx] = TensorT();  // release
    }
    Grads<Real> out;
    for (auto p : params_) {
      if (p.id < g.size() && !g[p.id].empty())
        out.insert(p, std::move(g[p.id]));
      else
        out.insert(p, TensorT(nodes_[p.id].value.shape()));
    }
    return out;
  }

 private:
  struct Node {
    Primitive op = Primitive::Input;
    std::vector<std::uint32_t> inputs;
    TensorT value;
    OpAttrs attrs;
    bool requires_grad = false;
    Real aux = 0;
  };

  Var push(Primitive op, std::vector<std::uint32_t> inputs, TensorT value, OpAttrs attrs,
           bool requires_grad) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (op != Primitive::Input) n.attrs = std::move(attrs);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  TensorT& grad_slot(std::vector<TensorT>& g, std::uint32_t id) const {
    if (g[id].empty()) g[id] = TensorT(nodes_[id].value.shape());
    return g[id];
  }

  bool wants(std::uint32_t id) const { return nodes_[id].requires_grad; }

  // Accumulate `src` into the gradient of input `id`, summing it down when
  // the input was broadcast as a single-element operand.
  void accumulate(std::vector<TensorT>& g, std::uint32_t id, TensorT&& src) const {
    if (!wants(id)) return;
    if (g[id].empty() && src.shape() == nodes_[id].value.shape()) {
      g[id] = std::move(src);
      return;
    }
    accumulate(g, id, static_cast<const TensorT&>(src));
  }

  void accumulate(std::vector<TensorT>& g, std::uint32_t id, const TensorT& src, Real sign = 1) const {
    if (!wants(id)) return;
    if (g[id].empty() && src.numel() == nodes_[id].value.numel()) {
      g[id] = src.reshaped(nodes_[id].value.shape());
      if (sign != Real(1))
        for (std::size_t i = 0; i < src.numel(); ++i) g[id][i] = sign * g[id][i];
      return;
    }
    auto& dst = grad_slot(g, id);
    if (dst.numel() == src.numel()) {
      for (std::size_t i = 0; i < src.numel(); ++i) dst[i] += sign * src[i];
    } else {
      Real s = 0;
      for (std::size_t i = 0; i < src.numel(); ++i) s += src[i];
      dst[0] += sign * s;
    }
  }

  void propagate(const Node& node, TensorT& gout, std::vector<TensorT>& g) const {
    const auto& ins = node.inputs;
    auto val = [&](std::size_t i) -> const TensorT& { return nodes_[ins[i]].value; };
    switch (node.op) {
      case Primitive::Matmul: {
        const auto& a = val(0);
        const auto& b = val(1);
        if (a.rank() == 2 && b.rank() == 1) {
          const std::size_t m = a.dim(0), k = a.dim(1);
          if (wants(ins[0])) {
            auto& da = grad_slot(g, ins[0]);
            for (std::size_t i = 0; i < m; ++i) {
              const Real gi = gout[i];
              Real* row = da.data() + i * k;
              for (std::size_t p = 0; p < k; ++p) row[p] += gi * b[p];
            }
          }
          if (wants(ins[1])) {
            auto& db = grad_slot(g, ins[1]);
            for (std::size_t i = 0; i < m; ++i) {
              const Real gi = gout[i];
              const Real* row = a.data() + i * k;
              for (std::size_t p = 0; p < k; ++p) db[p] += row[p] * gi;
            }
          }
        } else if (a.rank() == 1) {
          const std::size_t k = b.dim(0), n = b.dim(1);
          if (wants(ins[0])) {
            auto& da = grad_slot(g, ins[0]);
            detail::matvec(b.data(), k, n, gout.data(), da.data(), true);
          }
          if (wants(ins[1])) {
            auto& db = grad_slot(g, ins[1]);
            for (std::size_t p = 0; p < k; ++p) {
              Real* row = db.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) row[j] += a[p] * gout[j];
            }
          }
        } else {
          const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
          if (wants(ins[0])) {  // dA = G B^T
            auto& da = grad_slot(g, ins[0]);
            for (std::size_t i = 0; i < m; ++i)
              detail::matvec(b.data(), k, n, gout.data() + i * n, da.data() + i * k, true);
          }
          if (wants(ins[1])) {  // dB = A^T G
            auto& db = grad_slot(g, ins[1]);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const Real av = a[i * k + p];
                for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * gout[i * n + j];
              }
          }
        }
        break;
      }
      case Primitive::Add:
        accumulate(g, ins[0], gout);
        accumulate(g, ins[1], std::move(gout));
        break;
      case Primitive::Sub:
        accumulate(g, ins[1], gout, Real(-1));
        accumulate(g, ins[0], std::move(gout));
        break;
      case Primitive::Mul: {
        const auto& a = val(0);
        const auto& b = val(1);
        if (wants(ins[0])) accumulate(g, ins[0], mul(gout, b));
        if (wants(ins[1])) accumulate(g, ins[1], mul(gout, a));
        break;
      }
      case Primitive::LayerNorm: {
        const auto& y = node.value;
        const std::size_t n = y.numel();
        const Real inv_n = Real(1) / Real(n);
        const Real mg = sum(gout) * inv_n;
        Real mgy = 0;
        for (std::size_t i = 0; i < n; ++i) mgy += gout[i] * y[i];
        mgy = mgy * inv_n;
        if (wants(ins[0])) {
          auto& dx = grad_slot(g, ins[0]);
          for (std::size_t i = 0; i < n; ++i) dx[i] += node.aux * (gout[i] - mg - y[i] * mgy);
        }
        break;
      }
      case Primitive::RmsNorm: {
        const auto& x = val(0);
        const auto& gain = val(1);
        const std::size_t n = x.numel();
        const Real inv = node.aux;
        if (wants(ins[1])) {
          auto& dgain = grad_slot(g, ins[1]);
          for (std::size_t i = 0; i < n; ++i) dgain[i] += gout[i] * x[i] * inv;
        }
        if (wants(ins[0])) {
          Real ux = 0;
          for (std::size_t i = 0; i < n; ++i) ux += gout[i] * gain[i] * x[i];
          const Real c = inv * inv * inv * ux / Real(n);
          auto& dx = grad_slot(g, ins[0]);
          for (std::size_t i = 0; i < n; ++i) dx[i] += inv * gout[i] * gain[i] - x[i] * c;
        }
        break;
      }
      case Primitive::Sigmoid: {
        if (!wants(ins[0])) break;
        auto& dx = grad_slot(g, ins[0]);
        const auto& s = node.value;
        for (std::size_t i = 0; i < s.numel(); ++i) dx[i] += gout[i] * s[i] * (Real(1) - s[i]);
        break;
      }
      case Primitive::Swish: {
        if (!wants(ins[0])) break;
        auto& dx = grad_slot(g, ins[0]);
        const auto& x = val(0);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          const Real s = sigmoid(x[i]);
          dx[i] += gout[i] * (s + x[i] * s * (Real(1) - s));
        }
        break;
      }
      case Primitive::Softmax: {
        if (!wants(ins[0])) break;
        const auto& y = node.value;
        Real gy = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) gy += gout[i] * y[i];
        auto& dx = grad_slot(g, ins[0]);
        for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += y[i] * (gout[i] - gy);
        break;
      }
      case Primitive::Concat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
          const std::size_t n = nodes_[ins[k]].value.numel();
          if (wants(ins[k])) {
            auto& d = grad_slot(g, ins[k]);
            for (std::size_t i = 0; i < n; ++i) d[i] += gout[off + i];
          }
          off += n;
        }
        break;
      }
      case Primitive::Slice: {
        if (!wants(ins[0])) break;
        const auto& x = val(0);
        const std::size_t stride = x.numel() / x.dim(0);
        auto& d = grad_slot(g, ins[0]);
        const std::size_t base = node.attrs.offset * stride;
        for (std::size_t i = 0; i < gout.numel(); ++i) d[base + i] += gout[i];
        break;
      }
      case Primitive::Sum: {
        if (!wants(ins[0])) break;
        auto& d = grad_slot(g, ins[0]);
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] += gout[0];
        break;
      }
      case Primitive::SquaredError: {
        const auto& a = val(0);
        const auto& b = val(1);
        TensorT d(a.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) d[i] = Real(2) * (a[i] - b[i]) * gout[0];
        accumulate(g, ins[0], d);
        accumulate(g, ins[1], d, Real(-1));
        break;
      }
      case Primitive::Reshape: {
        if (!wants(ins[0])) break;
        gout.reshape(nodes_[ins[0]].value.shape());
        accumulate(g, ins[0], std::move(gout));
        break;
      }
      case Primitive::Rsqrt: {
        if (!wants(ins[0])) break;
        auto& d = grad_slot(g, ins[0]);
        const auto& y = node.value;
        for (std::size_t i = 0; i < y.numel(); ++i) d[i] += gout[i] * Real(-0.5) * y[i] * y[i] * y[i];
        break;
      }
      case Primitive::CrossEntropy: {
        if (!wants(ins[0])) break;
        auto p = softmax(val(0));
        p[node.attrs.target] -= Real(1);
        auto& d = grad_slot(g, ins[0]);
        for (std::size_t i = 0; i < p.numel(); ++i) d[i] += gout[0] * p[i];
        break;
      }
      case Primitive::DeltaUpdate: {
        const auto& m = val(0);
        const auto& k = val(1);
        const auto& v = val(2);
        const Real a = val(3)[0], b = val(4)[0];
        const std::size_t dv = m.dim(0), dk = m.dim(1);
        TensorT mk({dv}), gk({dv});
        detail::matvec(m.data(), dv, dk, k.data(), mk.data(), false);
        detail::matvec(gout.data(), dv, dk, k.data(), gk.data(), false);
        // u = -a b (G k) is the gradient reaching M k through the erase term
        TensorT u({dv});
        for (std::size_t i = 0; i < dv; ++i) u[i] = -(a * b) * gk[i];
        if (wants(ins[0])) {
          auto& dm = grad_slot(g, ins[0]);
          for (std::size_t i = 0; i < dv; ++i)
            for (std::size_t j = 0; j < dk; ++j) dm[i * dk + j] += a * gout[i * dk + j] + u[i] * k[j];
        }
        if (wants(ins[1])) {
          auto& dkk = grad_slot(g, ins[1]);
          for (std::size_t i = 0; i < dv; ++i) {
            const Real c = b * v[i] - (a * b) * mk[i];
            for (std::size_t j = 0; j < dk; ++j)
              dkk[j] += c * gout[i * dk + j] + u[i] * m[i * dk + j];
          }
        }
        if (wants(ins[2])) {
          auto& dvv = grad_slot(g, ins[2]);
          for (std::size_t i = 0; i < dv; ++i) dvv[i] += b * gk[i];
        }
        if (wants(ins[3])) {
          Real s = 0;
          for (std::size_t i = 0; i < dv; ++i)
            for (std::size_t j = 0; j < dk; ++j)
              s += gout[i * dk + j] * (m[i * dk + j] - b * (mk[i] * k[j]));
          grad_slot(g, ins[3])[0] += s;
        }
        if (wants(ins[4])) {
          Real s = 0;
          for (std::size_t i = 0; i < dv; ++i) s += gk[i] * (v[i] - a * mk[i]);
          grad_slot(g, ins[4])[0] += s;
        }
        break;
      }
      case Primitive::Input: break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<Var> params_;
  std::unordered_map<std::uint32_t, std::string> names_;
};

// ---------------------------------------------------------------------------

/// Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h for every element.
template <typename Real, typename Fn>
Tensor<Real> finite_diff(Fn&& fn, const Tensor<Real>& at, Real h) {
  if (!(h > Real(0))) throw std::invalid_argument("finite_diff step must be positive");
  Tensor<Real> out(at.shape());
  Tensor<Real> x = at;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const Real orig = x[i];
    x[i] = orig + h;
    const Real fp = fn(static_cast<const Tensor<Real>&>(x));
    x[i] = orig - h;
    const Real fm = fn(static_cast<const Tensor<Real>&>(x));
    x[i] = orig;
    out[i] = (fp - fm) / (Real(2) * h);
  }
  return out;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
template <typename Real>
Real relative_error(const Tensor<Real>& a, const Tensor<Real>& b) {
  Real diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const Real den = std::sqrt(std::max(na, nb));
  return den == Real(0) ? Real(0) : std::sqrt(diff) / den;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename Real>
struct AdamWState {
  std::vector<Tensor<Real>> m;
  std::vector<Tensor<Real>> v;
  std::uint64_t step = 0;
};

/// One update of every parameter in place. `decay_mask`, when non-empty,
/// selects which tensors receive weight decay.
template <typename Real>
void adamw_step(std::span<Tensor<Real>* const> params, std::span<const Tensor<Real>> grads,
                AdamWState<Real>& state, const AdamWConfig& cfg,
                std::span<const bool> decay_mask = {}) {
  if (params.size() != grads.size()) throw DimensionError("adamw: params/grads count mismatch");
  if (!(cfg.lr >= 0)) throw std::invalid_argument("adamw: negative learning rate");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw: state/params count mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const auto& gr = grads[k];
    if (gr.numel() != p.numel()) throw DimensionError("adamw: gradient shape mismatch");
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool decay = decay_mask.empty() || decay_mask[k];
    const Real shrink = decay ? static_cast<Real>(1.0 - cfg.lr * cfg.weight_decay) : Real(1);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = static_cast<Real>(cfg.beta1) * m[i] + static_cast<Real>(1.0 - cfg.beta1) * gr[i];
      v[i] = static_cast<Real>(cfg.beta2) * v[i] + static_cast<Real>(1.0 - cfg.beta2) * gr[i] * gr[i];
      const Real mhat = m[i] / static_cast<Real>(bc1);
      const Real vhat = v[i] / static_cast<Real>(bc2);
      p[i] = p[i] * shrink - static_cast<Real>(cfg.lr) * mhat / (std::sqrt(vhat) + static_cast<Real>(cfg.eps));
    }
  }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Real>
double clip_grad_norm(std::span<Tensor<Real>> grads, double max_norm) {
  double total = 0;
  for (const auto& g : grads)
    for (std::size_t i = 0; i < g.numel(); ++i) total += static_cast<double>(g[i]) * g[i];
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0) {
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto& g : grads)
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= s;
  }
  return norm;
}

/// Linear warmup over the first `warmup_frac` of training, constant after.
inline double warmup_lr(double peak, std::size_t step, std::size_t total_steps,
                        double warmup_frac = 0.05) {
  const double warm = std::max(1.0, warmup_frac * static_cast<double>(total_steps));
  const double s = static_cast<double>(step + 1);
  return s >= warm ? peak : peak * s / warm;
}

}  // namespace nirvana
