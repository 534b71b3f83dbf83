// SPDX-License-Identifier: Apache-2.0
//
// Two interchangeable op backends with the same surface:
//
//   ValueOps<Real>  evaluates eagerly on Tensor<Real> values;
//   TapeOps<Real>   records every op on a Tape and hands back Var handles.
//
// Layer code is written once against this surface and instantiated with
// either backend, so the taped forward used for training and the plain
// forward used for inference are the same arithmetic.
#pragma once

#include <vector>

#include "nirvana/autodiff.hpp"
#include "nirvana/numerics.hpp"

namespace nirvana {

template <typename Real>
struct ValueOps {
  using RealT = Real;
  using V = Tensor<Real>;

  V constant(const Tensor<Real>& t) const { return t; }
  V scalar(Real s) const { return V::scalar(s); }
  const Tensor<Real>& value(const V& v) const { return v; }

  V matmul(const V& a, const V& b) const { return nirvana::matmul(a, b); }
  V add(const V& a, const V& b) const { return nirvana::add(a, b); }
  V sub(const V& a, const V& b) const { return nirvana::sub(a, b); }
  V mul(const V& a, const V& b) const { return nirvana::mul(a, b); }
  V layer_norm(const V& x, Real eps) const { return nirvana::layer_norm(x, eps); }
  V rms_norm(const V& x, const V& gain, Real eps) const { return nirvana::rms_norm(x, gain, eps); }
  V sigmoid(const V& x) const { return nirvana::sigmoid(x); }
  V swish(const V& x) const { return nirvana::swish(x); }
  V softmax(const V& x) const { return nirvana::softmax(x); }
  V concat(const std::vector<V>& parts) const {
    std::vector<const Tensor<Real>*> ptrs;
    ptrs.reserve(parts.size());
    for (const auto& p : parts) ptrs.push_back(&p);
    return nirvana::concat<Real>(std::span<const Tensor<Real>* const>(ptrs));
  }
  V slice(const V& x, std::size_t offset, std::size_t length) const {
    return nirvana::slice(x, offset, length);
  }
  V sum(const V& x) const { return V::scalar(nirvana::sum(x)); }
  V squared_error(const V& a, const V& b) const { return V::scalar(nirvana::squared_error(a, b)); }
  V reshape(const V& x, Shape s) const { return x.reshaped(std::move(s)); }
  V rsqrt(const V& x) const { return nirvana::rsqrt(x); }
  V cross_entropy(const V& logits, std::size_t target) const {
    return V::scalar(nirvana::cross_entropy(logits, target));
  }
  V delta_update(const V& m, const V& k, const V& v, const V& alpha, const V& beta) const {
    return nirvana::delta_update(m, k, v, alpha, beta);
  }
};

template <typename Real>
struct TapeOps {
  using RealT = Real;
  using V = Var;

  Tape<Real>* tape;

  V constant(const Tensor<Real>& t) const { return tape->constant(t); }
  V scalar(Real s) const { return tape->constant(Tensor<Real>::scalar(s)); }
  const Tensor<Real>& value(V v) const { return tape->value(v); }

  V matmul(V a, V b) const { return tape->record(Primitive::Matmul, {a, b}); }
  V add(V a, V b) const { return tape->record(Primitive::Add, {a, b}); }
  V sub(V a, V b) const { return tape->record(Primitive::Sub, {a, b}); }
  V mul(V a, V b) const { return tape->record(Primitive::Mul, {a, b}); }
  V layer_norm(V x, Real eps) const {
    OpAttrs at;
    at.eps = eps;
    return tape->record(Primitive::LayerNorm, {x}, at);
  }
  V rms_norm(V x, V gain, Real eps) const {
    OpAttrs at;
    at.eps = eps;
    return tape->record(Primitive::RmsNorm, {x, gain}, at);
  }
  V sigmoid(V x) const { return tape->record(Primitive::Sigmoid, {x}); }
  V swish(V x) const { return tape->record(Primitive::Swish, {x}); }
  V softmax(V x) const { return tape->record(Primitive::Softmax, {x}); }
  V concat(const std::vector<V>& parts) const {
    return tape->record(Primitive::Concat, std::span<const Var>(parts));
  }
  V slice(V x, std::size_t offset, std::size_t length) const {
    OpAttrs at;
    at.offset = offset;
    at.length = length;
    return tape->record(Primitive::Slice, {x}, at);
  }
  V sum(V x) const { return tape->record(Primitive::Sum, {x}); }
  V squared_error(V a, V b) const { return tape->record(Primitive::SquaredError, {a, b}); }
  V reshape(V x, Shape s) const {
    OpAttrs at;
    at.shape = std::move(s);
    return tape->record(Primitive::Reshape, {x}, at);
  }
  V rsqrt(V x) const { return tape->record(Primitive::Rsqrt, {x}); }
  V cross_entropy(V logits, std::size_t target) const {
    OpAttrs at;
    at.target = target;
    return tape->record(Primitive::CrossEntropy, {logits}, at);
  }
  V delta_update(V m, V k, V v, V alpha, V beta) const {
    return tape->record(Primitive::DeltaUpdate, {m, k, v, alpha, beta});
  }
};

}  // namespace nirvana
