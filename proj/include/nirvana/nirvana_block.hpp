// SPDX-License-Identifier: Apache-2.0
//
// One post-prelude layer: the memory updater (sliding-window attention and
// gated-delta linear attention over shared projections, blended by a
// task-conditioned interpolation) and the trigger (a weight bank steered by
// per-token fast parameters p, updated by one gradient step per layer).
//
// Layer arithmetic is written once against the op-backend surface in
// ops.hpp. The plain Tensor functions at the bottom of the file are the
// standalone forms of each operation; model.hpp composes the generic ones.
#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nirvana/errors.hpp"
#include "nirvana/numerics.hpp"
#include "nirvana/ops.hpp"

namespace nirvana {

inline constexpr double kReferenceEta = 1e-2;

struct BlockConfig {
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t d_trig = 16;
  std::size_t bank_size = 4;
  std::size_t rank = 4;
  std::size_t window = 16;
  bool rope_enabled = false;
  double eta_ref = kReferenceEta;
  double rope_base = 10000.0;

  std::size_t d_head() const { return d_model / heads; }
  std::size_t zeta_hidden() const { return d_model / 8; }

  void validate() const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw ConfigError("d_model must be a positive multiple of heads");
    if (window == 0) throw ConfigError("window must be >= 1");
    if (bank_size == 0) throw ConfigError("bank size K must be >= 1");
    if (d_trig == 0) throw ConfigError("d_trig must be >= 1");
    if (rank == 0 || rank >= d_model) throw ConfigError("rank must satisfy 1 <= r < d_model");
    if (zeta_hidden() == 0) throw ConfigError("d_model / 8 must be >= 1");
  }
};

/// Stacked bank: block j occupies rows [j*d_trig, (j+1)*d_trig) of `w` and
/// row j of `b`.
template <class V>
struct BankWeights {
  V w;  // [K*d_trig x d_trig]
  V b;  // [K x d_trig]
};

template <typename Real>
using WeightBank = BankWeights<Tensor<Real>>;

template <typename Real>
using FastParams = Tensor<Real>;

/// Mixer parameters of one layer. Prelude layers populate only the shared
/// projections and the linear-attention gates.
template <class V>
struct MixerWeights {
  V wq, wk, wv;        // [d x d] shared by SWA and linear attention
  V w_alpha;           // [H x d]
  V c_alpha;           // [H]
  V w_beta;            // [H x d]
  V uq, vq, uk, vk, uv, vv;  // low-rank SWA deltas: U [d x r], V [r x d]
  V tq, tk, tv;        // trigger projections [d_trig x d]
  V theta;             // [d], online learning-rate projection
  V u;                 // [d_trig], interpolation logit projection
  V zeta1;             // [d/8 x (2d + d_trig)]
  V zeta2;             // [d x d/8]
};

template <typename Real>
using BlockParams = MixerWeights<Tensor<Real>>;

/// Visits every tensor of a post-prelude mixer with its field name.
template <class W, class F>
void for_each_mixer_param(W& m, F&& f) {
  f(std::string("wq"), m.wq);
  f(std::string("wk"), m.wk);
  f(std::string("wv"), m.wv);
  f(std::string("w_alpha"), m.w_alpha);
  f(std::string("c_alpha"), m.c_alpha);
  f(std::string("w_beta"), m.w_beta);
  f(std::string("uq"), m.uq);
  f(std::string("vq"), m.vq);
  f(std::string("uk"), m.uk);
  f(std::string("vk"), m.vk);
  f(std::string("uv"), m.uv);
  f(std::string("vv"), m.vv);
  f(std::string("tq"), m.tq);
  f(std::string("tk"), m.tk);
  f(std::string("tv"), m.tv);
  f(std::string("theta"), m.theta);
  f(std::string("u"), m.u);
  f(std::string("zeta1"), m.zeta1);
  f(std::string("zeta2"), m.zeta2);
}

/// Recurrent state of one layer for one sequence, per head.
template <class V>
struct LayerState {
  std::vector<std::deque<std::pair<V, V>>> swa;  // keys stored as [1 x d_head] rows
  std::vector<V> linear;                        // [d_head x d_head]
};

template <typename Real>
LayerState<Tensor<Real>> init_layer_state(const BlockConfig& cfg, bool with_swa = true) {
  LayerState<Tensor<Real>> s;
  if (with_swa) s.swa.resize(cfg.heads);
  s.linear.assign(cfg.heads, Tensor<Real>({cfg.d_head(), cfg.d_head()}));
  return s;
}

/// Activations of one layer for one token.
template <typename Real>
struct LayerTrace {
  std::size_t layer = 0;
  std::size_t position = 0;
  Tensor<Real> q, k, v;           // shared projections
  Tensor<Real> q_swa, k_swa, v_swa;
  Tensor<Real> tq, tk, tv;        // trigger projections
  Tensor<Real> alpha, beta;       // linear-attention gates per head
  Tensor<Real> a, b, c;           // SWA read, linear read, task condition
  Real t = 0;
  Real eta = 0;
  Tensor<Real> delta_p, p_in, p_out;
  Tensor<Real> output;

  nlohmann::json to_json() const {
    auto vec = [](const Tensor<Real>& x) { return x.values(); };
    nlohmann::json j;
    j["layer"] = layer;
    j["position"] = position;
    j["q"] = vec(q);
    j["k"] = vec(k);
    j["v"] = vec(v);
    j["q_swa"] = vec(q_swa);
    j["k_swa"] = vec(k_swa);
    j["v_swa"] = vec(v_swa);
    j["tq"] = vec(tq);
    j["tk"] = vec(tk);
    j["tv"] = vec(tv);
    j["alpha"] = vec(alpha);
    j["beta"] = vec(beta);
    j["a"] = vec(a);
    j["b"] = vec(b);
    j["c"] = vec(c);
    j["t"] = t;
    j["eta"] = eta;
    j["delta_p"] = vec(delta_p);
    j["p_in"] = vec(p_in);
    j["p_out"] = vec(p_out);
    j["output"] = vec(output);
    return j;
  }
};

/// Rotation by absolute position over consecutive pairs (2i, 2i+1) as a
/// dense d x d matrix; a trailing odd coordinate is left alone.
template <typename Real>
Tensor<Real> rope_matrix(std::size_t d, std::size_t position, double base = 10000.0) {
  Tensor<Real> r = Tensor<Real>::identity(d);
  for (std::size_t i = 0; i + 1 < d; i += 2) {
    const double freq = std::pow(base, -static_cast<double>(i) / static_cast<double>(d));
    const double ang = static_cast<double>(position) * freq;
    const Real c = static_cast<Real>(std::cos(ang));
    const Real s = static_cast<Real>(std::sin(ang));
    r(i, i) = c;
    r(i, i + 1) = -s;
    r(i + 1, i) = s;
    r(i + 1, i + 1) = c;
  }
  return r;
}

// ===========================================================================
// Generic layer pieces (any op backend)

namespace block {

/// Empty state as op-backend values (tape constants on a tape).
template <class Ops>
LayerState<typename Ops::V> init_state(const Ops& ops, const BlockConfig& cfg, bool with_swa = true) {
  using Real = typename Ops::RealT;
  LayerState<typename Ops::V> s;
  if (with_swa) s.swa.resize(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h)
    s.linear.push_back(ops.constant(Tensor<Real>({cfg.d_head(), cfg.d_head()})));
  return s;
}

/// x / ||x|| up to the rms_norm epsilon.
template <class Ops>
typename Ops::V l2_normalize(const Ops& ops, const typename Ops::V& x, const typename Ops::V& ones) {
  using Real = typename Ops::RealT;
  const std::size_t n = ops.value(x).numel();
  return ops.mul(ops.rms_norm(x, ones, Real(kRmsNormEps)), ops.scalar(Real(1) / std::sqrt(Real(n))));
}

template <class V>
struct Projections {
  V q, k, v;     // shared
  V dq, dk, dv;  // low-rank deltas (empty handles when not requested)
};

template <class Ops>
Projections<typename Ops::V> updater_qkv(const Ops& ops, const typename Ops::V& h,
                                         const MixerWeights<typename Ops::V>& w, bool with_deltas) {
  Projections<typename Ops::V> p;
  p.q = ops.matmul(w.wq, h);
  p.k = ops.matmul(w.wk, h);
  p.v = ops.matmul(w.wv, h);
  if (with_deltas) {
    p.dq = ops.matmul(w.uq, ops.matmul(w.vq, h));
    p.dk = ops.matmul(w.uk, ops.matmul(w.vk, h));
    p.dv = ops.matmul(w.uv, ops.matmul(w.vv, h));
  }
  return p;
}

/// Gated delta rule, one head: write then read.
///   M <- alpha (M - beta (M k) k^T) + beta v k^T,  out = M q
template <class Ops>
typename Ops::V gated_delta_step(const Ops& ops, typename Ops::V& memory, const typename Ops::V& k,
                                 const typename Ops::V& v, const typename Ops::V& q,
                                 const typename Ops::V& alpha, const typename Ops::V& beta) {
  memory = ops.delta_update(memory, k, v, alpha, beta);
  return ops.matmul(memory, q);
}

/// Append (k, v) to one head's window, evict beyond `window`, and attend.
template <class Ops>
typename Ops::V swa_attend_head(const Ops& ops, std::deque<std::pair<typename Ops::V, typename Ops::V>>& buf,
                                std::size_t window, typename Ops::V q, typename Ops::V k,
                                const typename Ops::V& v, const std::optional<std::size_t>& rope_position,
                                double rope_base = 10000.0) {
  using Real = typename Ops::RealT;
  const std::size_t dh = ops.value(q).numel();
  if (rope_position) {
    const auto rot = ops.constant(rope_matrix<Real>(dh, *rope_position, rope_base));
    q = ops.matmul(rot, q);
    k = ops.matmul(rot, k);
  }
  buf.emplace_back(ops.reshape(k, {1, dh}), ops.reshape(v, {1, ops.value(v).numel()}));
  while (buf.size() > window) buf.pop_front();
  std::vector<typename Ops::V> ks, vs;
  ks.reserve(buf.size());
  vs.reserve(buf.size());
  for (const auto& [kk, vv] : buf) {
    ks.push_back(kk);
    vs.push_back(vv);
  }
  const auto keys = ks.size() == 1 ? ks[0] : ops.concat(ks);
  const auto vals = vs.size() == 1 ? vs[0] : ops.concat(vs);
  const auto scores = ops.mul(ops.matmul(keys, q), ops.scalar(Real(1) / std::sqrt(Real(dh))));
  return ops.matmul(ops.softmax(scores), vals);
}

template <class V>
struct TriggerOut {
  V delta_p, eta, p_out, c;
};

/// z = W(p) x + b(p) evaluated through the stacked bank as p^T Z with
/// row j of Z equal to W_j x + b_j.
template <class Ops>
typename Ops::V bank_rows(const Ops& ops, const BankWeights<typename Ops::V>& bank,
                          const typename Ops::V& x, std::size_t K) {
  const std::size_t dt = ops.value(x).numel();
  return ops.add(ops.reshape(ops.matmul(bank.w, x), {K, dt}), bank.b);
}

/// Fast-parameter step and task condition:
///   L(p) = || x_k + LN(W(p) x_k + b(p)) - x_v ||^2
///   dp_j = <dL/dW, W_j>_F + <dL/db, b_j> = (W_j x_k + b_j) . dL/dz
///   p_out = p_in - eta * dp,  eta = eta_ref * sigmoid(theta . h)
///   c = x_q + LN(W(p_out) x_q + b(p_out))
/// dL/dz is the layer-norm vector-Jacobian product, spelled out in primitive
/// ops so the whole step stays differentiable on a tape.
template <class Ops>
TriggerOut<typename Ops::V> trigger_step(const Ops& ops, const typename Ops::V& h,
                                         const typename Ops::V& p_in, const typename Ops::V& tq,
                                         const typename Ops::V& tk, const typename Ops::V& tv,
                                         const MixerWeights<typename Ops::V>& w,
                                         const BankWeights<typename Ops::V>& bank, double eta_ref) {
  using Real = typename Ops::RealT;
  const std::size_t K = ops.value(p_in).numel();
  const std::size_t dt = ops.value(tk).numel();
  const auto inv_n = ops.scalar(Real(1) / Real(dt));

  const auto zk_rows = bank_rows(ops, bank, tk, K);
  const auto z = ops.matmul(p_in, zk_rows);
  const auto centered = ops.sub(z, ops.mul(ops.sum(z), inv_n));
  const auto inv_sigma = ops.rsqrt(
      ops.add(ops.mul(ops.sum(ops.mul(centered, centered)), inv_n), ops.scalar(Real(kLayerNormEps))));
  const auto y = ops.mul(centered, inv_sigma);
  const auto gy = ops.mul(ops.sub(ops.add(tk, y), tv), ops.scalar(Real(2)));
  const auto mean_g = ops.mul(ops.sum(gy), inv_n);
  const auto mean_gy = ops.mul(ops.sum(ops.mul(gy, y)), inv_n);
  const auto gz = ops.mul(inv_sigma, ops.sub(ops.sub(gy, mean_g), ops.mul(y, mean_gy)));

  TriggerOut<typename Ops::V> out;
  out.delta_p = ops.matmul(zk_rows, gz);
  const std::size_t d = ops.value(h).numel();
  out.eta = ops.mul(ops.sigmoid(ops.matmul(ops.reshape(w.theta, {1, d}), h)),
                    ops.scalar(static_cast<Real>(eta_ref)));
  out.p_out = ops.sub(p_in, ops.mul(out.eta, out.delta_p));
  const auto zq = ops.matmul(out.p_out, bank_rows(ops, bank, tq, K));
  out.c = ops.add(tq, ops.layer_norm(zq, Real(kLayerNormEps)));
  return out;
}

template <class V>
struct InterpOut {
  V v_out, t;
};

/// v = t a + (1 - t) b + zeta([a; b; c]),  t = sigmoid(u . c),
/// zeta(x) = W2 swish(W1 x).
template <class Ops>
InterpOut<typename Ops::V> interpolate(const Ops& ops, const typename Ops::V& a, const typename Ops::V& b,
                                       const typename Ops::V& c, const typename Ops::V& u,
                                       const typename Ops::V& zeta1, const typename Ops::V& zeta2) {
  using Real = typename Ops::RealT;
  if (ops.value(a).numel() != ops.value(b).numel())
    throw DimensionError("interpolate: a and b differ in length");
  if (ops.value(u).numel() != ops.value(c).numel())
    throw DimensionError("interpolate: u and c differ in length");
  InterpOut<typename Ops::V> out;
  const std::size_t dc = ops.value(c).numel();
  out.t = ops.sigmoid(ops.matmul(ops.reshape(u, {1, dc}), c));
  const auto blend = ops.add(ops.mul(out.t, a), ops.mul(ops.sub(ops.scalar(Real(1)), out.t), b));
  const auto hidden = ops.swish(ops.matmul(zeta1, ops.concat({a, b, c})));
  out.v_out = ops.add(blend, ops.matmul(zeta2, hidden));
  return out;
}

/// Per-layer constants shared by every token of a forward pass.
template <class V>
struct Consts {
  V ones_head;  // [d_head] all-ones rms_norm gain used for L2 normalization
};

template <class Ops>
Consts<typename Ops::V> make_consts(const Ops& ops, std::size_t d_head) {
  using Real = typename Ops::RealT;
  return {ops.constant(Tensor<Real>::filled({d_head}, Real(1)))};
}

/// Gated-delta linear attention over all heads of the shared projections.
/// Queries and keys are L2-normalized per head.
template <class Ops>
typename Ops::V linear_attention(const Ops& ops, LayerState<typename Ops::V>& st,
                                 const Projections<typename Ops::V>& p, const typename Ops::V& h,
                                 const MixerWeights<typename Ops::V>& w, std::size_t heads,
                                 const Consts<typename Ops::V>& consts,
                                 typename Ops::V* alpha_out = nullptr, typename Ops::V* beta_out = nullptr) {
  const std::size_t d = ops.value(p.q).numel();
  const std::size_t dh = d / heads;
  const auto alpha = ops.sigmoid(ops.add(ops.matmul(w.w_alpha, h), w.c_alpha));
  const auto beta = ops.sigmoid(ops.matmul(w.w_beta, h));
  if (alpha_out) *alpha_out = alpha;
  if (beta_out) *beta_out = beta;
  std::vector<typename Ops::V> outs;
  outs.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const auto qh = l2_normalize(ops, ops.slice(p.q, hd * dh, dh), consts.ones_head);
    const auto kh = l2_normalize(ops, ops.slice(p.k, hd * dh, dh), consts.ones_head);
    const auto vh = ops.slice(p.v, hd * dh, dh);
    outs.push_back(gated_delta_step(ops, st.linear[hd], kh, vh, qh, ops.slice(alpha, hd, 1),
                                    ops.slice(beta, hd, 1)));
  }
  return heads == 1 ? outs[0] : ops.concat(outs);
}

template <class V>
struct BlockOut {
  V v_out;
  V p_out;
};

/// Full post-prelude mixer for one token. `h` is the normalized hidden
/// state that feeds the projections.
template <class Ops>
BlockOut<typename Ops::V> block_forward(const Ops& ops, const typename Ops::V& h, const typename Ops::V& p_in,
                                        LayerState<typename Ops::V>& st, const MixerWeights<typename Ops::V>& w,
                                        const BankWeights<typename Ops::V>& bank, const BlockConfig& cfg,
                                        const Consts<typename Ops::V>& consts, std::size_t position,
                                        LayerTrace<typename Ops::RealT>* trace = nullptr) {
  const std::size_t dh = cfg.d_head();
  // trigger
  const auto tq = ops.matmul(w.tq, h);
  const auto tk = ops.matmul(w.tk, h);
  const auto tv = ops.matmul(w.tv, h);
  const auto trig = trigger_step(ops, h, p_in, tq, tk, tv, w, bank, cfg.eta_ref);
  // updater
  const auto p = updater_qkv(ops, h, w, true);
  const auto q_s = ops.add(p.q, p.dq);
  const auto k_s = ops.add(p.k, p.dk);
  const auto v_s = ops.add(p.v, p.dv);
  typename Ops::V alpha{}, beta{};
  const auto b = linear_attention(ops, st, p, h, w, cfg.heads, consts, &alpha, &beta);
  std::vector<typename Ops::V> heads_out;
  heads_out.reserve(cfg.heads);
  std::optional<std::size_t> rope(std::in_place, position);
  if (!cfg.rope_enabled) rope.reset();
  for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
    heads_out.push_back(swa_attend_head(ops, st.swa[hd], cfg.window, ops.slice(q_s, hd * dh, dh),
                                        ops.slice(k_s, hd * dh, dh), ops.slice(v_s, hd * dh, dh), rope,
                                        cfg.rope_base));
  }
  const auto a = cfg.heads == 1 ? heads_out[0] : ops.concat(heads_out);
  const auto mix = interpolate(ops, a, b, trig.c, w.u, w.zeta1, w.zeta2);
  if (trace) {
    trace->position = position;
    trace->q = ops.value(p.q);
    trace->k = ops.value(p.k);
    trace->v = ops.value(p.v);
    trace->q_swa = ops.value(q_s);
    trace->k_swa = ops.value(k_s);
    trace->v_swa = ops.value(v_s);
    trace->tq = ops.value(tq);
    trace->tk = ops.value(tk);
    trace->tv = ops.value(tv);
    trace->alpha = ops.value(alpha);
    trace->beta = ops.value(beta);
    trace->a = ops.value(a);
    trace->b = ops.value(b);
    trace->c = ops.value(trig.c);
    trace->t = ops.value(mix.t).item();
    trace->eta = ops.value(trig.eta).item();
    trace->delta_p = ops.value(trig.delta_p);
    trace->p_in = ops.value(p_in);
    trace->p_out = ops.value(trig.p_out);
    trace->output = ops.value(mix.v_out);
  }
  return {mix.v_out, trig.p_out};
}

}  // namespace block

// ===========================================================================
// Standalone Tensor forms

/// W = sum_j p(j) W_j,  b = sum_j p(j) b_j.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> materialize_fast_weights(const FastParams<Real>& p,
                                                               const WeightBank<Real>& bank) {
  const std::size_t K = bank.b.dim(0);
  const std::size_t dt = bank.b.dim(1);
  if (p.numel() != K)
    throw DimensionError("fast params have length " + std::to_string(p.numel()) + ", bank has " +
                         std::to_string(K) + " blocks");
  Tensor<Real> W({dt, dt}), b({dt});
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t i = 0; i < dt * dt; ++i) W[i] += p[j] * bank.w[j * dt * dt + i];
    for (std::size_t i = 0; i < dt; ++i) b[i] += p[j] * bank.b[j * dt + i];
  }
  return {std::move(W), std::move(b)};
}

template <typename Real>
Tensor<Real> bank_block_w(const WeightBank<Real>& bank, std::size_t j) {
  const std::size_t dt = bank.b.dim(1);
  return slice(bank.w, j * dt, dt);
}

template <typename Real>
Tensor<Real> bank_block_b(const WeightBank<Real>& bank, std::size_t j) {
  return slice(bank.b, j, 1).reshaped({bank.b.dim(1)});
}

/// f(x; W) = x + LN(W x + b)
template <typename Real>
Tensor<Real> meta_apply(const Tensor<Real>& x, const Tensor<Real>& W, const Tensor<Real>& b,
                        Real eps = Real(kLayerNormEps)) {
  if (W.rank() != 2 || W.dim(1) != x.numel() || W.dim(0) != b.numel() || b.numel() != x.numel())
    throw DimensionError("meta_apply: shapes of x, W, b disagree");
  return add(x, layer_norm(add(matmul(W, x), b), eps));
}

/// || f(k; W(p)) - v ||^2
template <typename Real>
Real meta_loss(const FastParams<Real>& p, const WeightBank<Real>& bank, const Tensor<Real>& k,
               const Tensor<Real>& v) {
  const auto [W, b] = materialize_fast_weights(p, bank);
  return squared_error(meta_apply(k, W, b), v);
}

/// Gradient of the key-to-value regression loss with respect to p at
/// p_prev: dL/dW and dL/db through the layer-norm Jacobian, contracted
/// against every bank block.
template <typename Real>
Tensor<Real> clogd_grad(const FastParams<Real>& p_prev, const WeightBank<Real>& bank,
                        const Tensor<Real>& k, const Tensor<Real>& v, Real eps = Real(kLayerNormEps)) {
  const auto [W, b] = materialize_fast_weights(p_prev, bank);
  const std::size_t n = k.numel();
  if (v.numel() != n || W.dim(1) != n) throw DimensionError("clogd_grad: trigger key/value lengths");
  const auto z = add(matmul(W, k), b);
  // sigma and y = LN(z)
  Real mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += z[i];
  mean /= Real(n);
  Real var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (z[i] - mean) * (z[i] - mean);
  var /= Real(n);
  const Real inv_sigma = Real(1) / std::sqrt(var + eps);
  Tensor<Real> y({n});
  for (std::size_t i = 0; i < n; ++i) y[i] = (z[i] - mean) * inv_sigma;
  // dL/dy = 2 (k + y - v)
  Tensor<Real> gy({n});
  for (std::size_t i = 0; i < n; ++i) gy[i] = Real(2) * (k[i] + y[i] - v[i]);
  // dL/dz = J_LN^T gy,  J_LN = (1/sigma) (I - 11^T/n - y y^T/n)
  Real sg = 0, sgy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sg += gy[i];
    sgy += gy[i] * y[i];
  }
  Tensor<Real> gz({n});
  for (std::size_t i = 0; i < n; ++i) gz[i] = inv_sigma * (gy[i] - sg / Real(n) - y[i] * sgy / Real(n));
  const Tensor<Real> dW = outer(gz, k);
  const std::size_t K = p_prev.numel();
  Tensor<Real> dp({K});
  for (std::size_t j = 0; j < K; ++j) {
    const auto Wj = bank_block_w(bank, j);
    const auto bj = bank_block_b(bank, j);
    dp[j] = dot(dW, Wj) + dot(gz, bj);
  }
  return dp;
}

template <typename Real>
struct ClogdUpdate {
  FastParams<Real> p;
  Real eta;
};

/// p_new = p_prev - eta dp,  eta = eta_ref * sigmoid(theta . h)
template <typename Real>
ClogdUpdate<Real> clogd_update(const FastParams<Real>& p_prev, const Tensor<Real>& delta_p,
                               const Tensor<Real>& h, const Tensor<Real>& theta,
                               double eta_ref = kReferenceEta) {
  if (p_prev.numel() != delta_p.numel() || h.numel() != theta.numel())
    throw DimensionError("clogd_update: shapes disagree");
  const Real eta = static_cast<Real>(eta_ref) * sigmoid(dot(theta, h));
  Tensor<Real> p(p_prev.shape());
  for (std::size_t i = 0; i < p.numel(); ++i) p[i] = p_prev[i] - eta * delta_p[i];
  return {std::move(p), eta};
}

/// c = f(q; W, b) with W, b materialized from the already-updated p.
template <typename Real>
Tensor<Real> extract_condition(const Tensor<Real>& q, const Tensor<Real>& W, const Tensor<Real>& b) {
  return meta_apply(q, W, b);
}

/// Single-head SWA with its own buffer and absolute position counter.
template <typename Real>
struct SwaHeadState {
  std::deque<std::pair<Tensor<Real>, Tensor<Real>>> buffer;
  std::size_t window = 1;
  std::size_t position = 0;
};

template <typename Real>
Tensor<Real> swa_attend(SwaHeadState<Real>& st, const Tensor<Real>& q, const Tensor<Real>& k,
                        const Tensor<Real>& v, bool rope_enabled, double rope_base = 10000.0) {
  if (st.window == 0) throw DimensionError("SWA window must be >= 1");
  ValueOps<Real> ops;
  auto out = block::swa_attend_head(ops, st.buffer, st.window, q, k, v,
                                    rope_enabled ? std::optional<std::size_t>(st.position) : std::nullopt,
                                    rope_base);
  ++st.position;
  return out;
}

template <typename Real>
block::Projections<Tensor<Real>> updater_qkv(const Tensor<Real>& h, const BlockParams<Real>& w) {
  return block::updater_qkv(ValueOps<Real>{}, h, w, true);
}

template <typename Real>
struct Interpolation {
  Tensor<Real> v_out;
  Real t;
};

template <typename Real>
Interpolation<Real> interpolate(const Tensor<Real>& a, const Tensor<Real>& b, const Tensor<Real>& c,
                                const Tensor<Real>& u, const Tensor<Real>& zeta1, const Tensor<Real>& zeta2) {
  auto r = block::interpolate(ValueOps<Real>{}, a, b, c, u, zeta1, zeta2);
  return {std::move(r.v_out), r.t.item()};
}

template <typename Real>
struct BlockResult {
  Tensor<Real> v_out;
  FastParams<Real> p_out;
  LayerTrace<Real> trace;
};

/// Plain evaluation of one post-prelude mixer step; `state` advances.
template <typename Real>
BlockResult<Real> block_forward(const Tensor<Real>& h, const FastParams<Real>& p_in,
                                LayerState<Tensor<Real>>& state, const BlockParams<Real>& w,
                                const WeightBank<Real>& bank, const BlockConfig& cfg, std::size_t position) {
  ValueOps<Real> ops;
  const auto consts = block::make_consts(ops, cfg.d_head());
  BlockResult<Real> r;
  auto out = block::block_forward(ops, h, p_in, state, w, bank, cfg, consts, position, &r.trace);
  r.v_out = std::move(out.v_out);
  r.p_out = std::move(out.p_out);
  return r;
}

/// Random parameters for a standalone block (used by tests and gradcheck).
template <typename Real>
BlockParams<Real> random_block_params(const BlockConfig& cfg, Rng& rng, double scale = 1.0) {
  const std::size_t d = cfg.d_model, r = cfg.rank, dt = cfg.d_trig, H = cfg.heads;
  const std::size_t hid = cfg.zeta_hidden();
  auto mat = [&](std::size_t m, std::size_t n) {
    return rng.randn<Real>({m, n}, scale / std::sqrt(static_cast<double>(n)));
  };
  BlockParams<Real> w;
  w.wq = mat(d, d);
  w.wk = mat(d, d);
  w.wv = mat(d, d);
  w.w_alpha = mat(H, d);
  w.c_alpha = rng.randn<Real>({H}, scale);
  w.w_beta = mat(H, d);
  w.uq = mat(d, r);
  w.vq = mat(r, d);
  w.uk = mat(d, r);
  w.vk = mat(r, d);
  w.uv = mat(d, r);
  w.vv = mat(r, d);
  w.tq = mat(dt, d);
  w.tk = mat(dt, d);
  w.tv = mat(dt, d);
  w.theta = rng.randn<Real>({d}, scale / std::sqrt(static_cast<double>(d)));
  w.u = rng.randn<Real>({dt}, scale / std::sqrt(static_cast<double>(dt)));
  w.zeta1 = mat(hid, 2 * d + dt);
  w.zeta2 = mat(d, hid);
  return w;
}

template <typename Real>
WeightBank<Real> random_bank(std::size_t K, std::size_t d_trig, Rng& rng, double scale = 1.0) {
  WeightBank<Real> bank;
  bank.w = rng.randn<Real>({K * d_trig, d_trig}, scale / std::sqrt(static_cast<double>(d_trig)));
  bank.b = rng.randn<Real>({K, d_trig}, scale);
  return bank;
}

}  // namespace nirvana
