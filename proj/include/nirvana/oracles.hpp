// SPDX-License-Identifier: Apache-2.0
//
// Brute-force references for the memory rules. Nothing here calls into
// memory_rules.hpp's step/read; each oracle evaluates its rule from the
// written-out formula with explicit operator matrices or quadratic sums.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "nirvana/memory_rules.hpp"
#include "nirvana/nirvana_block.hpp"
#include "nirvana/numerics.hpp"

namespace nirvana::oracle {

/// o_t = sum_{s<=t} (k_s . q_t) v_s
template <typename Real>
std::vector<Tensor<Real>> quadratic_linear_attention(const std::vector<Tensor<Real>>& keys,
                                                     const std::vector<Tensor<Real>>& values,
                                                     const std::vector<Tensor<Real>>& queries) {
  std::vector<Tensor<Real>> out;
  for (std::size_t t = 0; t < keys.size(); ++t) {
    Tensor<Real> o({values[t].numel()});
    for (std::size_t s = 0; s <= t; ++s) {
      Real w = 0;
      for (std::size_t i = 0; i < keys[s].numel(); ++i) w += keys[s][i] * queries[t][i];
      for (std::size_t i = 0; i < o.numel(); ++i) o[i] += w * values[s][i];
    }
    out.push_back(std::move(o));
  }
  return out;
}

/// Causal softmax attention over positions max(0, t-window+1)..t; window 0
/// means the full prefix.
template <typename Real>
std::vector<Tensor<Real>> causal_softmax_attention(const std::vector<Tensor<Real>>& keys,
                                                   const std::vector<Tensor<Real>>& values,
                                                   const std::vector<Tensor<Real>>& queries,
                                                   std::size_t window = 0) {
  std::vector<Tensor<Real>> out;
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const std::size_t lo = (window == 0 || t + 1 <= window) ? 0 : t + 1 - window;
    const Real inv = Real(1) / std::sqrt(Real(keys[t].numel()));
    std::vector<Real> s;
    for (std::size_t j = lo; j <= t; ++j) {
      Real d = 0;
      for (std::size_t i = 0; i < keys[j].numel(); ++i) d += queries[t][i] * keys[j][i];
      s.push_back(d * inv);
    }
    Real mx = s[0];
    for (auto x : s) mx = std::max(mx, x);
    Real z = 0;
    for (auto& x : s) {
      x = std::exp(x - mx);
      z += x;
    }
    Tensor<Real> o({values[t].numel()});
    for (std::size_t j = lo; j <= t; ++j)
      for (std::size_t i = 0; i < o.numel(); ++i) o[i] += (s[j - lo] / z) * values[j][i];
    out.push_back(std::move(o));
  }
  return out;
}

/// Matrix rules evaluated as M_t = M_{t-1} A_t + B_t with the key-side
/// transition A_t built as an explicit d_k x d_k matrix.
template <typename Real>
std::vector<Tensor<Real>> explicit_operator_scan(RuleId rule, const std::vector<Tensor<Real>>& keys,
                                                 const std::vector<Tensor<Real>>& values,
                                                 const std::vector<GateValues<Real>>& gates,
                                                 const std::vector<Tensor<Real>>& queries) {
  std::vector<Tensor<Real>> out;
  if (keys.empty()) return out;
  const std::size_t dk = keys[0].numel(), dv = values[0].numel();
  Tensor<Real> M({dv, dk});
  Tensor<Real> S({dv, dk});
  int p = 2;
  auto kkT = [&](const Tensor<Real>& k) {
    Tensor<Real> r({dk, dk});
    for (std::size_t i = 0; i < dk; ++i)
      for (std::size_t j = 0; j < dk; ++j) r(i, j) = k[i] * k[j];
    return r;
  };
  auto vkT = [&](const Tensor<Real>& v, const Tensor<Real>& k) {
    Tensor<Real> r({dv, dk});
    for (std::size_t i = 0; i < dv; ++i)
      for (std::size_t j = 0; j < dk; ++j) r(i, j) = v[i] * k[j];
    return r;
  };
  auto diag = [&](const Tensor<Real>& a) {
    Tensor<Real> r({dk, dk});
    for (std::size_t i = 0; i < dk; ++i) r(i, i) = a[i];
    return r;
  };
  auto lincomb = [](const Tensor<Real>& a, Real ca, const Tensor<Real>& b, Real cb) {
    Tensor<Real> r(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) r[i] = ca * a[i] + cb * b[i];
    return r;
  };
  const Tensor<Real> I = Tensor<Real>::identity(dk);
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const auto& k = keys[t];
    const auto& v = values[t];
    const auto& g = gates[t];
    Tensor<Real> A = I;
    Tensor<Real> B({dv, dk});
    switch (rule) {
      case RuleId::NaiveLinear: B = vkT(v, k); break;
      case RuleId::DeltaNet:
        A = lincomb(I, 1, kkT(k), -*g.beta);
        B = lincomb(vkT(v, k), *g.beta, B, 0);
        break;
      case RuleId::Longhorn:
        A = lincomb(I, 1, kkT(k), -*g.delta);
        B = lincomb(vkT(v, k), *g.delta, B, 0);
        break;
      case RuleId::RetNet: A = lincomb(I, *g.alpha, I, 0); B = vkT(v, k); break;
      case RuleId::GLA: A = diag(*g.alpha_vec); B = vkT(v, k); break;
      case RuleId::HGRN2: {
        Tensor<Real> om(g.a_vec->shape());
        for (std::size_t i = 0; i < om.numel(); ++i) om[i] = 1 - (*g.a_vec)[i];
        A = diag(*g.a_vec);
        B = vkT(v, om);
        break;
      }
      case RuleId::Mamba2: A = lincomb(I, *g.alpha, I, 0); B = lincomb(vkT(v, k), *g.beta, B, 0); break;
      case RuleId::PolySketch: {
        p = g.p_degree.value_or(p);
        Tensor<Real> kp(k.shape());
        for (std::size_t i = 0; i < dk; ++i) kp[i] = std::pow(k[i], p);
        B = vkT(v, kp);
        break;
      }
      case RuleId::TTT: {
        // M - eta * 2 (M k - v) k^T  ==  M (I - 2 eta k k^T) + 2 eta v k^T
        A = lincomb(I, 1, kkT(k), -2 * *g.eta);
        B = lincomb(vkT(v, k), 2 * *g.eta, B, 0);
        break;
      }
      case RuleId::RWKV7:
        A = lincomb(diag(*g.alpha_vec), 1, kkT(k), -*g.beta);
        B = lincomb(vkT(v, k), *g.beta, B, 0);
        break;
      case RuleId::GatedDeltaNet:
        A = lincomb(I, *g.alpha, kkT(k), -*g.alpha * *g.beta);
        B = lincomb(vkT(v, k), *g.beta, B, 0);
        break;
      case RuleId::Titans: {
        // S_t = eta S_{t-1} - eta * 2 (M_{t-1} k - v) k^T ; M_t = alpha M_{t-1} + S_t
        const Real eta = *g.eta;
        Tensor<Real> grad = lincomb(matmul(M, kkT(k)), 2, vkT(v, k), -2);
        S = lincomb(S, eta, grad, -eta);
        M = lincomb(M, *g.alpha, S, 1);
        Tensor<Real> q = queries[t];
        out.push_back(matmul(M, q));
        continue;
      }
      default:
        throw std::invalid_argument("explicit_operator_scan: not a matrix rule");
    }
    M = add(matmul(M, A), B);
    Tensor<Real> q = queries[t];
    if (rule == RuleId::PolySketch)
      for (std::size_t i = 0; i < dk; ++i) q[i] = std::pow(q[i], p);
    out.push_back(matmul(M, q));
  }
  return out;
}

/// || k + LN(W(p) k + b(p)) - v ||^2 evaluated from scratch in extended
/// precision: W and b are never materialized, z is summed block by block.
template <typename Ext = long double>
Ext meta_loss_ext(const std::vector<Ext>& p, const WeightBank<double>& bank, const Tensor<double>& k,
                  const Tensor<double>& v, Ext eps = Ext(kLayerNormEps)) {
  const std::size_t dt = k.numel(), K = p.size();
  std::vector<Ext> z(dt, Ext(0));
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t r = 0; r < dt; ++r) {
      Ext acc = bank.b[j * dt + r];
      for (std::size_t c = 0; c < dt; ++c) acc += Ext(bank.w[(j * dt + r) * dt + c]) * Ext(k[c]);
      z[r] += p[j] * acc;
    }
  Ext mu = 0, var = 0;
  for (Ext x : z) mu += x;
  mu /= Ext(dt);
  for (Ext x : z) var += (x - mu) * (x - mu);
  var /= Ext(dt);
  const Ext inv = Ext(1) / std::sqrt(var + eps);
  Ext l = 0;
  for (std::size_t r = 0; r < dt; ++r) {
    const Ext f = Ext(k[r]) + (z[r] - mu) * inv - Ext(v[r]);
    l += f * f;
  }
  return l;
}

/// Fourth-order central differences of the loss above in p. With d_trig = 2
/// the layer norm saturates to +-1 and the true gradient is O(eps); extended
/// precision keeps the difference quotient meaningful there. Near the
/// other end, where the normalized vector is almost constant, the gradient
/// reaches 1e3 and higher derivatives blow up, so the step stays small.
inline Tensor<double> meta_loss_grad_fd(const Tensor<double>& p, const WeightBank<double>& bank,
                                        const Tensor<double>& k, const Tensor<double>& v,
                                        long double h = 1e-5L) {
  using Ext = long double;
  std::vector<Ext> x(p.values().begin(), p.values().end());
  Tensor<double> g(p.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Ext x0 = x[i];
    auto at = [&](Ext off) {
      x[i] = x0 + off;
      return meta_loss_ext<Ext>(x, bank, k, v);
    };
    const Ext d = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
    x[i] = x0;
    g[i] = static_cast<double>(d);
  }
  return g;
}

/// L(p_to) - L(p_from) in difference form, accurate relative to the change
/// itself rather than to L. Needed where a step of size eta*|dp|^2 ~ 1e-16
/// would vanish against L ~ 10 if the two losses were subtracted.
inline double meta_loss_change(const Tensor<double>& p_from, const Tensor<double>& p_to,
                               const WeightBank<double>& bank, const Tensor<double>& k,
                               const Tensor<double>& v, double eps = kLayerNormEps) {
  using Ext = long double;
  const std::size_t dt = k.numel(), K = p_from.numel();
  std::vector<Ext> z(dt, 0), dz(dt, 0);
  for (std::size_t j = 0; j < K; ++j) {
    const Ext dp = Ext(p_to[j]) - Ext(p_from[j]);
    for (std::size_t r = 0; r < dt; ++r) {
      Ext acc = bank.b[j * dt + r];
      for (std::size_t c = 0; c < dt; ++c) acc += Ext(bank.w[(j * dt + r) * dt + c]) * Ext(k[c]);
      z[r] += Ext(p_from[j]) * acc;
      dz[r] += dp * acc;
    }
  }
  Ext mu = 0, dmu = 0;
  for (std::size_t r = 0; r < dt; ++r) {
    mu += z[r];
    dmu += dz[r];
  }
  mu /= Ext(dt);
  dmu /= Ext(dt);
  std::vector<Ext> c(dt), dc(dt);
  Ext var = 0, dvar = 0;
  for (std::size_t r = 0; r < dt; ++r) {
    c[r] = z[r] - mu;
    dc[r] = dz[r] - dmu;
    var += c[r] * c[r];
    dvar += dc[r] * (2 * c[r] + dc[r]);
  }
  var /= Ext(dt);
  dvar /= Ext(dt);
  const Ext a = var + Ext(eps), b = a + dvar;
  const Ext sa = std::sqrt(a), sb = std::sqrt(b);
  const Ext s_from = 1 / sa, s_to = 1 / sb;
  const Ext ds = -dvar / (sa * sb * (sa + sb));
  Ext change = 0;
  for (std::size_t r = 0; r < dt; ++r) {
    const Ext f = Ext(k[r]) + c[r] * s_from - Ext(v[r]);
    const Ext df = dc[r] * s_to + c[r] * ds;
    change += df * (2 * f + df);
  }
  return static_cast<double>(change);
}

}  // namespace nirvana::oracle
