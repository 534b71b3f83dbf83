// SPDX-License-Identifier: Apache-2.0
//
// Random token sequences with in-range gates for every rule in the zoo.
#pragma once

#include <cstddef>
#include <vector>

#include "nirvana/memory_rules.hpp"
#include "nirvana/numerics.hpp"

namespace nirvana {

template <typename Real = double>
struct RuleSequence {
  std::vector<Tensor<Real>> keys, values, queries;
  std::vector<GateValues<Real>> gates;
  std::size_t size() const { return keys.size(); }
};

/// Gates drawn so every rule in the zoo is well-defined: decays in
/// [0.5, 1), write strengths in [0, 1), step sizes in [0, 0.25).
template <typename Real = double>
GateValues<Real> sample_gates(RuleId rule, std::size_t d_k, Rng& rng) {
  GateValues<Real> g;
  switch (rule) {
    case RuleId::RetNet:
      g.alpha = static_cast<Real>(rng.uniform(0.5, 1.0));
      break;
    case RuleId::GLA:
      g.alpha_vec = rng.rand<Real>({d_k}, 0.5, 1.0);
      break;
    case RuleId::HGRN2:
      g.a_vec = rng.rand<Real>({d_k}, 0.5, 1.0);
      break;
    case RuleId::Mamba2:
    case RuleId::GatedDeltaNet:
      g.alpha = static_cast<Real>(rng.uniform(0.5, 1.0));
      g.beta = static_cast<Real>(rng.uniform());
      break;
    case RuleId::DeltaNet:
      g.beta = static_cast<Real>(rng.uniform());
      break;
    case RuleId::Longhorn:
      g.delta = static_cast<Real>(rng.uniform());
      break;
    case RuleId::TTT:
      g.eta = static_cast<Real>(rng.uniform(0.0, 0.25));
      break;
    case RuleId::Titans:
      g.alpha = static_cast<Real>(rng.uniform(0.5, 1.0));
      g.eta = static_cast<Real>(rng.uniform(0.0, 0.25));
      break;
    case RuleId::RWKV7:
      g.alpha_vec = rng.rand<Real>({d_k}, 0.5, 1.0);
      g.beta = static_cast<Real>(rng.uniform());
      break;
    case RuleId::PolySketch:
      g.p_degree = 2;
      break;
    default:
      break;
  }
  return g;
}

/// Keys are scaled to unit norm on average so delta-family rules stay
/// contractive without normalization.
template <typename Real = double>
RuleSequence<Real> random_rule_sequence(RuleId rule, std::size_t T, std::size_t d_k, std::size_t d_v,
                                        Rng& rng) {
  RuleSequence<Real> s;
  const double ks = 1.0 / std::sqrt(static_cast<double>(d_k));
  for (std::size_t t = 0; t < T; ++t) {
    s.keys.push_back(rng.randn<Real>({d_k}, ks));
    s.values.push_back(rng.randn<Real>({d_v}));
    s.queries.push_back(rng.randn<Real>({d_k}, ks));
    s.gates.push_back(sample_gates<Real>(rule, d_k, rng));
  }
  return s;
}

}  // namespace nirvana
