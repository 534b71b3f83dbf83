// SPDX-License-Identifier: Apache-2.0
//
// Recurrent memory update rules of the linear-attention family, plus the
// two set-valued rules (full and sliding-window softmax attention).
//
// Matrix memories are stored as M in R^{d_v x d_k} and read as M q. Every
// erase or decay operator acts on the key side, i.e. it right-multiplies
// M:  M (I - beta k k^T),  M Diag(alpha).  Writes are v k^T.
#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nirvana/errors.hpp"
#include "nirvana/numerics.hpp"

namespace nirvana {

enum class RuleId {
  Attention,
  SWA,
  NaiveLinear,
  DeltaNet,
  Longhorn,
  RetNet,
  GLA,
  HGRN2,
  Mamba2,
  PolySketch,
  TTT,
  RWKV7,
  GatedDeltaNet,
  Titans,
};

inline constexpr std::array<RuleId, 14> kAllRules = {
    RuleId::Attention, RuleId::SWA,        RuleId::NaiveLinear, RuleId::DeltaNet, RuleId::Longhorn,
    RuleId::RetNet,    RuleId::GLA,        RuleId::HGRN2,       RuleId::Mamba2,   RuleId::PolySketch,
    RuleId::TTT,       RuleId::RWKV7,      RuleId::GatedDeltaNet, RuleId::Titans};

inline const char* rule_name(RuleId r) {
  switch (r) {
    case RuleId::Attention: return "attention";
    case RuleId::SWA: return "swa";
    case RuleId::NaiveLinear: return "naive_linear";
    case RuleId::DeltaNet: return "deltanet";
    case RuleId::Longhorn: return "longhorn";
    case RuleId::RetNet: return "retnet";
    case RuleId::GLA: return "gla";
    case RuleId::HGRN2: return "hgrn2";
    case RuleId::Mamba2: return "mamba2";
    case RuleId::PolySketch: return "polysketch";
    case RuleId::TTT: return "ttt";
    case RuleId::RWKV7: return "rwkv7";
    case RuleId::GatedDeltaNet: return "gated_deltanet";
    case RuleId::Titans: return "titans";
  }
  return "?";
}

/// Case-insensitive; underscores and dashes are ignored ("Gated-DeltaNet",
/// "gated_deltanet" and "gateddeltanet" all parse).
inline std::optional<RuleId> parse_rule(std::string_view s) {
  auto canon = [](std::string_view in) {
    std::string out;
    for (char c : in)
      if (c != '_' && c != '-') out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  const std::string want = canon(s);
  for (auto r : kAllRules)
    if (canon(rule_name(r)) == want) return r;
  if (want == "naivelinearattention" || want == "linear") return RuleId::NaiveLinear;
  if (want == "lightning") return RuleId::RetNet;
  return std::nullopt;
}

inline bool is_set_rule(RuleId r) { return r == RuleId::Attention || r == RuleId::SWA; }

/// Rules whose erase term is - beta k k^T (eligible for key normalization).
inline bool is_delta_family(RuleId r) {
  return r == RuleId::DeltaNet || r == RuleId::Longhorn || r == RuleId::GatedDeltaNet ||
         r == RuleId::RWKV7;
}

enum class DecaySide { Key, Value };

struct StepOptions {
  bool normalize_keys = false;
  DecaySide gla_decay_side = DecaySide::Key;
};

/// Per-token gate inputs. Only the gates a rule reads need to be set.
template <typename Real = double>
struct GateValues {
  std::optional<Real> alpha;                  // scalar decay (RetNet, Mamba2, GatedDeltaNet, Titans)
  std::optional<Tensor<Real>> alpha_vec;      // diagonal decay (GLA, RWKV7)
  std::optional<Real> beta;                   // write strength
  std::optional<Real> delta;                  // Longhorn step
  std::optional<Real> eta;                    // TTT / Titans step size
  std::optional<Tensor<Real>> a_vec;          // HGRN2 forget gate
  std::optional<int> p_degree;                // PolySketch power
};

template <typename Real = double>
struct MemoryState {
  RuleId rule = RuleId::NaiveLinear;
  std::size_t d_k = 0;
  std::size_t d_v = 0;
  Tensor<Real> matrix;    // matrix rules
  Tensor<Real> momentum;  // Titans only
  std::deque<std::pair<Tensor<Real>, Tensor<Real>>> buffer;  // set rules
  std::size_t capacity = 0;  // SWA only; 0 means unbounded
  int poly_degree = 2;

  /// Number of stored scalars.
  std::size_t footprint() const {
    std::size_t n = matrix.numel() + momentum.numel();
    for (const auto& [k, v] : buffer) n += k.numel() + v.numel();
    return n;
  }
};

template <typename Real = double>
MemoryState<Real> init_state(RuleId rule, std::size_t d_k, std::size_t d_v, std::size_t capacity = 0) {
  if (d_k == 0 || d_v == 0) throw DimensionError("memory dimensions must be positive");
  MemoryState<Real> s;
  s.rule = rule;
  s.d_k = d_k;
  s.d_v = d_v;
  if (rule == RuleId::SWA) {
    if (capacity == 0) throw DimensionError("SWA needs a window capacity >= 1");
    s.capacity = capacity;
  } else if (rule == RuleId::Attention) {
    s.capacity = 0;
  } else {
    s.matrix = Tensor<Real>({d_v, d_k});
    if (rule == RuleId::Titans) s.momentum = Tensor<Real>({d_v, d_k});
  }
  return s;
}

namespace rules_detail {

template <typename Real>
Real need(const std::optional<Real>& g, const char* gate, RuleId r) {
  if (!g) throw GateError(std::string(rule_name(r)) + " needs gate '" + gate + "'");
  return *g;
}

template <typename Real>
void check_unit_interval(Real x, const char* gate) {
  if (!(x >= Real(0) && x <= Real(1)))
    throw GateError(std::string("gate '") + gate + "' must lie in [0, 1]");
}

template <typename Real>
Tensor<Real> decay_vector(const GateValues<Real>& g, RuleId r, std::size_t n) {
  Tensor<Real> a;
  if (g.alpha_vec) {
    a = *g.alpha_vec;
  } else if (g.alpha) {
    a = Tensor<Real>::filled({n}, *g.alpha);
  } else {
    throw GateError(std::string(rule_name(r)) + " needs gate 'alpha' (vector)");
  }
  if (a.numel() != n)
    throw DimensionError(std::string(rule_name(r)) + " decay vector has length " +
                         std::to_string(a.numel()) + ", expected " + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) check_unit_interval(a[i], "alpha");
  return a;
}

template <typename Real>
Tensor<Real> l2_normalized(const Tensor<Real>& k) {
  const Real n = frobenius_norm(k);
  return n > Real(0) ? scale(k, Real(1) / n) : k;
}

// M <- M - c (M k) k^T      (key-side rank-one erase)
template <typename Real>
void erase_along(Tensor<Real>& m, const Tensor<Real>& k, Real c) {
  const std::size_t dv = m.dim(0), dk = m.dim(1);
  for (std::size_t i = 0; i < dv; ++i) {
    Real* row = m.data() + i * dk;
    Real mk = 0;
    for (std::size_t j = 0; j < dk; ++j) mk += row[j] * k[j];
    const Real s = c * mk;
    for (std::size_t j = 0; j < dk; ++j) row[j] -= s * k[j];
  }
}

// M <- M + c v k^T
template <typename Real>
void write_outer(Tensor<Real>& m, const Tensor<Real>& v, const Tensor<Real>& k, Real c) {
  const std::size_t dv = m.dim(0), dk = m.dim(1);
  for (std::size_t i = 0; i < dv; ++i) {
    Real* row = m.data() + i * dk;
    const Real s = c * v[i];
    for (std::size_t j = 0; j < dk; ++j) row[j] += s * k[j];
  }
}

template <typename Real>
void scale_inplace(Tensor<Real>& m, Real a) {
  for (auto& x : m.values()) x *= a;
}

// M <- M Diag(a)
template <typename Real>
void scale_columns(Tensor<Real>& m, const Tensor<Real>& a) {
  const std::size_t dv = m.dim(0), dk = m.dim(1);
  for (std::size_t i = 0; i < dv; ++i)
    for (std::size_t j = 0; j < dk; ++j) m[i * dk + j] *= a[j];
}

// M <- Diag(a) M
template <typename Real>
void scale_rows(Tensor<Real>& m, const Tensor<Real>& a) {
  const std::size_t dv = m.dim(0), dk = m.dim(1);
  for (std::size_t i = 0; i < dv; ++i)
    for (std::size_t j = 0; j < dk; ++j) m[i * dk + j] *= a[i];
}

// gradient of ||M k - v||^2 with respect to M: 2 (M k - v) k^T
template <typename Real>
Tensor<Real> squared_loss_grad(const Tensor<Real>& m, const Tensor<Real>& k, const Tensor<Real>& v) {
  Tensor<Real> r = matmul(m, k);
  for (std::size_t i = 0; i < r.numel(); ++i) r[i] = Real(2) * (r[i] - v[i]);
  return outer(r, k);
}

template <typename Real>
Tensor<Real> elementwise_power(const Tensor<Real>& x, int p) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Real acc = 1;
    for (int e = 0; e < p; ++e) acc *= x[i];
    out[i] = acc;
  }
  return out;
}

}  // namespace rules_detail

/// One token's state transition for `rule`.
template <typename Real>
MemoryState<Real> step(MemoryState<Real> state, RuleId rule, const Tensor<Real>& k_in,
                       const Tensor<Real>& v, const GateValues<Real>& g,
                       const StepOptions& opts = {}) {
  using namespace rules_detail;
  if (state.rule != rule)
    throw std::invalid_argument(std::string("state was initialized for ") + rule_name(state.rule) +
                                ", stepped as " + rule_name(rule));
  if (k_in.numel() != state.d_k || v.numel() != state.d_v)
    throw DimensionError(std::string(rule_name(rule)) + ": key/value lengths " +
                         std::to_string(k_in.numel()) + "/" + std::to_string(v.numel()) +
                         " do not match state " + std::to_string(state.d_k) + "/" +
                         std::to_string(state.d_v));
  const Tensor<Real> k = (opts.normalize_keys && is_delta_family(rule)) ? l2_normalized(k_in) : k_in;
  auto& m = state.matrix;

  auto beta_gate = [&] {
    const Real b = need(g.beta, "beta", rule);
    if (!(b >= Real(0))) throw GateError("gate 'beta' must be non-negative");
    return b;
  };
  auto scalar_decay = [&] {
    const Real a = need(g.alpha, "alpha", rule);
    check_unit_interval(a, "alpha");
    return a;
  };

  switch (rule) {
    case RuleId::Attention:
      state.buffer.emplace_back(k, v);
      break;
    case RuleId::SWA:
      state.buffer.emplace_back(k, v);
      while (state.buffer.size() > state.capacity) state.buffer.pop_front();
      break;
    case RuleId::NaiveLinear:
      write_outer(m, v, k, Real(1));
      break;
    case RuleId::DeltaNet: {
      const Real b = beta_gate();
      erase_along(m, k, b);
      write_outer(m, v, k, b);
      break;
    }
    case RuleId::Longhorn: {
      const Real d = need(g.delta, "delta", rule);
      check_unit_interval(d, "delta");
      erase_along(m, k, d);
      write_outer(m, v, k, d);
      break;
    }
    case RuleId::RetNet:
      scale_inplace(m, scalar_decay());
      write_outer(m, v, k, Real(1));
      break;
    case RuleId::GLA: {
      if (opts.gla_decay_side == DecaySide::Key) {
        scale_columns(m, decay_vector(g, rule, state.d_k));
      } else {
        if (state.d_k != state.d_v)
          throw DimensionError("value-side GLA decay requires d_k == d_v");
        scale_rows(m, decay_vector(g, rule, state.d_v));
      }
      write_outer(m, v, k, Real(1));
      break;
    }
    case RuleId::HGRN2: {
      if (state.d_k != state.d_v) throw DimensionError("HGRN2 requires d_k == d_v");
      if (!g.a_vec) throw GateError("hgrn2 needs gate 'a_vec'");
      const auto& a = *g.a_vec;
      if (a.numel() != state.d_k) throw DimensionError("hgrn2 gate length mismatch");
      Tensor<Real> one_minus(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) {
        check_unit_interval(a[i], "a_vec");
        one_minus[i] = Real(1) - a[i];
      }
      scale_columns(m, a);
      write_outer(m, v, one_minus, Real(1));
      break;
    }
    case RuleId::Mamba2: {
      const Real a = scalar_decay();
      const Real b = beta_gate();
      scale_inplace(m, a);
      write_outer(m, v, k, b);
      break;
    }
    case RuleId::PolySketch: {
      const int p = g.p_degree.value_or(state.poly_degree);
      if (p < 1) throw GateError("gate 'p_degree' must be >= 1");
      state.poly_degree = p;
      write_outer(m, v, elementwise_power(k, p), Real(1));
      break;
    }
    case RuleId::TTT: {
      const Real eta = need(g.eta, "eta", rule);
      const auto grad = squared_loss_grad(m, k, v);
      for (std::size_t i = 0; i < m.numel(); ++i) m[i] -= eta * grad[i];
      break;
    }
    case RuleId::RWKV7: {
      const auto a = decay_vector(g, rule, state.d_k);
      const Real b = beta_gate();
      // M (Diag(a) - b k k^T) = M Diag(a) - b (M k) k^T, both terms from the old M
      Tensor<Real> mk = matmul(m, k);
      scale_columns(m, a);
      write_outer(m, mk, k, -b);
      write_outer(m, v, k, b);
      break;
    }
    case RuleId::GatedDeltaNet: {
      const Real a = scalar_decay();
      const Real b = beta_gate();
      erase_along(m, k, b);
      scale_inplace(m, a);
      write_outer(m, v, k, b);
      break;
    }
    case RuleId::Titans: {
      const Real a = scalar_decay();
      const Real eta = need(g.eta, "eta", rule);
      const auto grad = squared_loss_grad(m, k, v);  // at M_{t-1}
      auto& s = state.momentum;
      for (std::size_t i = 0; i < s.numel(); ++i) s[i] = eta * s[i] - eta * grad[i];
      for (std::size_t i = 0; i < m.numel(); ++i) m[i] = a * m[i] + s[i];
      break;
    }
  }
  return state;
}

/// Query the memory. Set rules answer with scaled dot-product softmax over
/// the buffer (an empty buffer reads as zero); PolySketch raises the query
/// to the same elementwise power used on keys.
template <typename Real>
Tensor<Real> read(const MemoryState<Real>& state, RuleId rule, const Tensor<Real>& q) {
  if (q.numel() != state.d_k) throw DimensionError(std::string(rule_name(rule)) + ": query length mismatch");
  if (is_set_rule(rule)) {
    Tensor<Real> out({state.d_v});
    if (state.buffer.empty()) return out;
    Tensor<Real> scores({state.buffer.size()});
    const Real inv = Real(1) / std::sqrt(Real(state.d_k));
    for (std::size_t i = 0; i < state.buffer.size(); ++i) scores[i] = dot(q, state.buffer[i].first) * inv;
    const auto w = softmax(scores);
    for (std::size_t i = 0; i < state.buffer.size(); ++i) {
      const auto& v = state.buffer[i].second;
      for (std::size_t j = 0; j < state.d_v; ++j) out[j] += w[i] * v[j];
    }
    return out;
  }
  if (rule == RuleId::PolySketch)
    return matmul(state.matrix, rules_detail::elementwise_power(q, state.poly_degree));
  return matmul(state.matrix, q);
}

/// Token-by-token fold: output t = read(state after writing token t, q_t).
template <typename Real>
std::vector<Tensor<Real>> scan(RuleId rule, const std::vector<Tensor<Real>>& keys,
                               const std::vector<Tensor<Real>>& values,
                               const std::vector<GateValues<Real>>& gates,
                               const std::vector<Tensor<Real>>& queries, std::size_t capacity = 0,
                               const StepOptions& opts = {}) {
  const std::size_t T = keys.size();
  if (values.size() != T || gates.size() != T || queries.size() != T)
    throw DimensionError("scan: sequences differ in length");
  std::vector<Tensor<Real>> out;
  out.reserve(T);
  if (T == 0) return out;
  auto state = init_state<Real>(rule, keys[0].numel(), values[0].numel(), capacity);
  for (std::size_t t = 0; t < T; ++t) {
    state = step(std::move(state), rule, keys[t], values[t], gates[t], opts);
    out.push_back(read(state, rule, queries[t]));
  }
  return out;
}

/// Chunked evaluation of the gated delta rule
///   S_t = alpha_t S_{t-1} (I - beta_t k_t k_t^T) + beta_t v_t k_t^T,  o_t = S_t q_t.
/// Inside a chunk the recurrence is unrolled as S_t = g_t S_0 + sum_j (g_t/g_j) u_j k_j^T
/// where g is the running product of alphas; the pseudo-values u solve a unit
/// lower-triangular system by forward substitution. Only chunk boundaries
/// materialize S.
template <typename Real>
std::vector<Tensor<Real>> chunkwise_gated_delta(const std::vector<Tensor<Real>>& keys,
                                                const std::vector<Tensor<Real>>& values,
                                                const std::vector<GateValues<Real>>& gates,
                                                const std::vector<Tensor<Real>>& queries,
                                                std::size_t chunk, const StepOptions& opts = {}) {
  if (chunk == 0) throw std::invalid_argument("chunk size must be >= 1");
  const std::size_t T = keys.size();
  if (values.size() != T || gates.size() != T || queries.size() != T)
    throw DimensionError("chunkwise_gated_delta: sequences differ in length");
  std::vector<Tensor<Real>> out;
  out.reserve(T);
  if (T == 0) return out;
  const std::size_t dk = keys[0].numel(), dv = values[0].numel();
  Tensor<Real> S({dv, dk});

  std::vector<Tensor<Real>> K, U;
  std::vector<Real> alpha, beta;
  // decay(t, j) = prod_{j < i <= t} alpha_i within the chunk
  std::vector<Real> decay;
  for (std::size_t start = 0; start < T; start += chunk) {
    const std::size_t C = std::min(chunk, T - start);
    K.clear();
    U.clear();
    alpha.assign(C, Real(0));
    beta.assign(C, Real(0));
    for (std::size_t i = 0; i < C; ++i) {
      const auto& g = gates[start + i];
      const Real a = rules_detail::need(g.alpha, "alpha", RuleId::GatedDeltaNet);
      const Real b = rules_detail::need(g.beta, "beta", RuleId::GatedDeltaNet);
      rules_detail::check_unit_interval(a, "alpha");
      if (!(b >= Real(0))) throw GateError("gate 'beta' must be non-negative");
      alpha[i] = a;
      beta[i] = b;
      K.push_back(opts.normalize_keys ? rules_detail::l2_normalized(keys[start + i]) : keys[start + i]);
    }
    decay.assign(C * C, Real(0));
    for (std::size_t t = 0; t < C; ++t) {
      Real acc = 1;
      decay[t * C + t] = 1;
      for (std::size_t j = t; j-- > 0;) {
        acc *= alpha[j + 1];
        decay[t * C + j] = acc;
      }
    }
    // g_t = prod_{i <= t} alpha_i  (relative to S_0)
    std::vector<Real> cum(C);
    {
      Real acc = 1;
      for (std::size_t t = 0; t < C; ++t) {
        acc *= alpha[t];
        cum[t] = acc;
      }
    }
    // u_t = beta_t (v_t - g_t S_0 k_t - sum_{j<t} (g_t/g_j) (k_j . k_t) u_j)
    for (std::size_t t = 0; t < C; ++t) {
      const auto& v = values[start + t];
      Tensor<Real> u = matmul(S, K[t]);
      for (std::size_t r = 0; r < dv; ++r) u[r] = v[r] - cum[t] * u[r];
      for (std::size_t j = 0; j < t; ++j) {
        const Real c = decay[t * C + j] * dot(K[j], K[t]);
        for (std::size_t r = 0; r < dv; ++r) u[r] -= c * U[j][r];
      }
      for (std::size_t r = 0; r < dv; ++r) u[r] *= beta[t];
      U.push_back(std::move(u));
    }
    // o_t = g_t S_0 q_t + sum_{j<=t} (g_t/g_j) (k_j . q_t) u_j
    for (std::size_t t = 0; t < C; ++t) {
      const auto& q = queries[start + t];
      Tensor<Real> o = matmul(S, q);
      for (std::size_t r = 0; r < dv; ++r) o[r] *= cum[t];
      for (std::size_t j = 0; j <= t; ++j) {
        const Real c = decay[t * C + j] * dot(K[j], q);
        for (std::size_t r = 0; r < dv; ++r) o[r] += c * U[j][r];
      }
      out.push_back(std::move(o));
    }
    // S_C = g_C S_0 + sum_j (g_C/g_j) u_j k_j^T
    rules_detail::scale_inplace(S, cum[C - 1]);
    for (std::size_t j = 0; j < C; ++j) rules_detail::write_outer(S, U[j], K[j], decay[(C - 1) * C + j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL trace: one record per token.

template <typename Real>
nlohmann::json gates_to_json(const GateValues<Real>& g) {
  nlohmann::json j = nlohmann::json::object();
  if (g.alpha) j["alpha"] = *g.alpha;
  if (g.alpha_vec) j["alpha_vec"] = g.alpha_vec->values();
  if (g.beta) j["beta"] = *g.beta;
  if (g.delta) j["delta"] = *g.delta;
  if (g.eta) j["eta"] = *g.eta;
  if (g.a_vec) j["a_vec"] = g.a_vec->values();
  if (g.p_degree) j["p_degree"] = *g.p_degree;
  return j;
}

template <typename Real>
void write_rule_trace(std::ostream& os, RuleId rule, const std::vector<Tensor<Real>>& keys,
                      const std::vector<Tensor<Real>>& values,
                      const std::vector<GateValues<Real>>& gates,
                      const std::vector<Tensor<Real>>& reads) {
  for (std::size_t t = 0; t < keys.size(); ++t) {
    nlohmann::json rec;
    rec["t"] = t;
    rec["rule"] = rule_name(rule);
    rec["k"] = keys[t].values();
    rec["v"] = values[t].values();
    rec["gates"] = gates_to_json(gates[t]);
    rec["read"] = reads[t].values();
    os << rec.dump() << '\n';
  }
}

}  // namespace nirvana
