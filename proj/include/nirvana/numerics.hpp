// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the handful of kernels the rest of the
// library is written against. Every reduction runs in a fixed order
// (innermost index ascending) so results are bit-reproducible as long as
// the translation unit is built without floating-point contraction.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nirvana/errors.hpp"

namespace nirvana {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename Real = double>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel_of(shape_), Real(0)) {}
  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel_of(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  /// Same as the (shape, data) constructor but rejects NaN and Inf.
  static Tensor checked(Shape shape, std::vector<Real> data) {
    Tensor t(std::move(shape), std::move(data));
    if (!t.all_finite()) throw NonFiniteError("non-finite value in checked tensor");
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, Real v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  static Tensor vector(std::initializer_list<Real> v) {
    return Tensor({v.size()}, std::vector<Real>(v));
  }
  static Tensor vector(std::vector<Real> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor scalar(Real v) { return Tensor({1}, {v}); }
  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Real> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = Real(1);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::vector<Real>& values() { return data_; }
  const std::vector<Real>& values() const { return data_; }
  std::span<Real> span() { return data_; }
  std::span<const Real> span() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }
  Real& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Real item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (numel_of(shape) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  /// In-place variant of reshaped().
  void reshape(Shape shape) {
    if (numel_of(shape) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

// ---------------------------------------------------------------------------
// Scalar functions

template <typename Real>
Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
Real swish(Real x) {
  return x * sigmoid(x);
}

// ---------------------------------------------------------------------------
// Tensor kernels

namespace detail {
template <typename Real>
void require_same(const Tensor<Real>& a, const Tensor<Real>& b, const char* what) {
  if (a.numel() != b.numel())
    throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// y[i] (+)= sum_p A[i,p] x[p], p ascending for every row. Four rows run
// side by side so the adds overlap; each row keeps its own sequential sum.
template <typename Real>
void matvec(const Real* a, std::size_t m, std::size_t k, const Real* x, Real* y, bool add_to) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const Real* r0 = a + i * k;
    const Real* r1 = r0 + k;
    const Real* r2 = r1 + k;
    const Real* r3 = r2 + k;
    Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    for (std::size_t p = 0; p < k; ++p) {
      const Real xp = x[p];
      s0 += r0[p] * xp;
      s1 += r1[p] * xp;
      s2 += r2[p] * xp;
      s3 += r3[p] * xp;
    }
    if (add_to) {
      y[i] += s0, y[i + 1] += s1, y[i + 2] += s2, y[i + 3] += s3;
    } else {
      y[i] = s0, y[i + 1] = s1, y[i + 2] = s2, y[i + 3] = s3;
    }
  }
  for (; i < m; ++i) {
    const Real* row = a + i * k;
    Real s = 0;
    for (std::size_t p = 0; p < k; ++p) s += row[p] * x[p];
    y[i] = add_to ? y[i] + s : s;
  }
}
}  // namespace detail

/// Matrix product. Rank-1 operands act as a column (right) or a row (left):
/// [m x k] * [k] -> [m], [k] * [k x n] -> [n], [m x k] * [k x n] -> [m x n].
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  if (a_vec && b_vec) throw DimensionError("matmul of two rank-1 tensors; use dot");
  const std::size_t m = a_vec ? 1 : a.dim(0);
  const std::size_t k = a_vec ? a.dim(0) : a.dim(1);
  const std::size_t kb = b.dim(0);
  const std::size_t n = b_vec ? 1 : b.dim(1);
  if (a.rank() > 2 || b.rank() > 2) throw DimensionError("matmul expects rank <= 2");
  if (k != kb)
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  Tensor<Real> out(a_vec ? Shape{n} : (b_vec ? Shape{m} : Shape{m, n}));
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  if (n == 1) {
    detail::matvec(pa, m, k, pb, po, false);
    return out;
  }
  // i-p-j order: each output element still accumulates p in ascending order.
  for (std::size_t i = 0; i < m; ++i) {
    Real* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = pa[i * k + p];
      const Real* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

template <typename Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) throw DimensionError("dot length mismatch");
  Real acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename Real>
Real dot(const Tensor<Real>& a, const Tensor<Real>& b) {
  return dot<Real>(a.span(), b.span());
}

/// v k^T as a [len(v) x len(k)] matrix.
template <typename Real>
Tensor<Real> outer(const Tensor<Real>& v, const Tensor<Real>& k) {
  Tensor<Real> out({v.numel(), k.numel()});
  for (std::size_t i = 0; i < v.numel(); ++i)
    for (std::size_t j = 0; j < k.numel(); ++j) out[i * k.numel() + j] = v[i] * k[j];
  return out;
}

namespace detail {
template <typename Real, typename F>
Tensor<Real> binary(const Tensor<Real>& a, const Tensor<Real>& b, F f, const char* what) {
  if (a.numel() == b.numel()) {
    if (a.shape() != b.shape() && a.numel() != 1)
      throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    Tensor<Real> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.numel() == 1) {
    Tensor<Real> out(a.shape());
    const Real s = b[0];
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], s);
    return out;
  }
  if (a.numel() == 1) {
    Tensor<Real> out(b.shape());
    const Real s = a[0];
    for (std::size_t i = 0; i < b.numel(); ++i) out[i] = f(s, b[i]);
    return out;
  }
  throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <typename Real, typename F>
Tensor<Real> unary(const Tensor<Real>& a, F f) {
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}
}  // namespace detail

// Elementwise arithmetic; either operand may be a single-element tensor.
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(a, b, [](Real x, Real y) { return x + y; }, "add");
}
template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(a, b, [](Real x, Real y) { return x - y; }, "sub");
}
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary(a, b, [](Real x, Real y) { return x * y; }, "mul");
}
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  return detail::unary(a, [s](Real x) { return x * s; });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return detail::unary(x, [](Real v) { return sigmoid(v); });
}
template <typename Real>
Tensor<Real> swish(const Tensor<Real>& x) {
  return detail::unary(x, [](Real v) { return swish(v); });
}
template <typename Real>
Tensor<Real> rsqrt(const Tensor<Real>& x) {
  return detail::unary(x, [](Real v) { return Real(1) / std::sqrt(v); });
}

/// One delta-rule write on a [dv x dk] memory:
///   M' = alpha (M - beta (M k) k^T) + beta v k^T
/// with scalar alpha and beta given as single-element tensors.
template <typename Real>
Tensor<Real> delta_update(const Tensor<Real>& m, const Tensor<Real>& k, const Tensor<Real>& v,
                          const Tensor<Real>& alpha, const Tensor<Real>& beta) {
  const std::size_t dk = k.numel(), dv = v.numel();
  if (m.rank() != 2 || m.dim(0) != dv || m.dim(1) != dk || alpha.numel() != 1 || beta.numel() != 1)
    throw DimensionError("delta_update: memory " + shape_str(m.shape()) + ", key " +
                         shape_str(k.shape()) + ", value " + shape_str(v.shape()));
  const Real a = alpha[0], b = beta[0];
  Tensor<Real> mk({dv});
  detail::matvec(m.data(), dv, dk, k.data(), mk.data(), false);
  Tensor<Real> out({dv, dk});
  for (std::size_t i = 0; i < dv; ++i) {
    const Real* mr = m.data() + i * dk;
    Real* o = out.data() + i * dk;
    for (std::size_t j = 0; j < dk; ++j) o[j] = a * (mr[j] - b * (mk[i] * k[j])) + b * (v[i] * k[j]);
  }
  return out;
}

template <typename Real>
Real sum(const Tensor<Real>& x) {
  Real acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  return acc;
}

template <typename Real>
Real squared_error(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same(a, b, "squared_error");
  Real acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const Real d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kRmsNormEps = 1e-6;

/// Affine-free layer norm over the whole tensor: (x - mean) / sqrt(var + eps).
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, Real eps = Real(kLayerNormEps)) {
  const std::size_t n = x.numel();
  if (n == 0) throw DimensionError("layer_norm of empty tensor");
  const Real inv_n = Real(1) / Real(n);
  const Real mean = sum(x) * inv_n;
  Tensor<Real> out(x.shape());
  Real var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = x[i] - mean;
    var += out[i] * out[i];
  }
  var = var * inv_n;
  const Real inv = Real(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) out[i] = out[i] * inv;
  return out;
}

template <typename Real>
Tensor<Real> rms_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                      Real eps = Real(kRmsNormEps)) {
  if (gain.numel() != x.numel())
    throw DimensionError("rms_norm gain length " + std::to_string(gain.numel()) + " vs " +
                         std::to_string(x.numel()));
  const std::size_t n = x.numel();
  Real ms = 0;
  for (std::size_t i = 0; i < n; ++i) ms += x[i] * x[i];
  ms = ms * (Real(1) / Real(n));
  const Real inv = Real(1) / std::sqrt(ms + eps);
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * inv * gain[i];
  return out;
}

/// Max-subtracted softmax over all elements.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& scores) {
  if (scores.numel() == 0) return scores;
  const Real mx = *std::max_element(scores.values().begin(), scores.values().end());
  Tensor<Real> out(scores.shape());
  Real z = 0;
  for (std::size_t i = 0; i < scores.numel(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    z += out[i];
  }
  const Real inv = Real(1) / z;
  for (std::size_t i = 0; i < scores.numel(); ++i) out[i] = out[i] * inv;
  return out;
}

/// -log softmax(logits)[target].
template <typename Real>
Real cross_entropy(const Tensor<Real>& logits, std::size_t target) {
  if (target >= logits.numel()) throw DimensionError("cross_entropy target out of range");
  const Real mx = *std::max_element(logits.values().begin(), logits.values().end());
  Real z = 0;
  for (std::size_t i = 0; i < logits.numel(); ++i) z += std::exp(logits[i] - mx);
  return std::log(z) + mx - logits[target];
}

/// Concatenate along axis 0. Rank-1 parts join into a longer vector; rank-2
/// parts with equal column counts stack their rows.
template <typename Real>
Tensor<Real> concat(std::span<const Tensor<Real>* const> parts) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const std::size_t rank = parts[0]->rank();
  const std::size_t cols = parts[0]->cols();
  std::size_t rows = 0;
  std::size_t total = 0;
  for (const auto* p : parts) {
    if (p->rank() != rank || (rank == 2 && p->cols() != cols))
      throw DimensionError("concat parts disagree in trailing shape");
    rows += p->rows();
    total += p->numel();
  }
  std::vector<Real> data;
  data.reserve(total);
  for (const auto* p : parts) data.insert(data.end(), p->values().begin(), p->values().end());
  return Tensor<Real>(rank == 1 ? Shape{rows} : Shape{rows, cols}, std::move(data));
}

template <typename Real>
Tensor<Real> concat(std::initializer_list<std::reference_wrapper<const Tensor<Real>>> parts) {
  std::vector<const Tensor<Real>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p.get());
  return concat<Real>(std::span<const Tensor<Real>* const>(ptrs));
}

/// Rows [offset, offset+length) along axis 0.
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t offset, std::size_t length) {
  if (x.rank() == 0 || offset + length > x.dim(0))
    throw DimensionError("slice [" + std::to_string(offset) + ", +" + std::to_string(length) +
                         ") out of range for " + shape_str(x.shape()));
  const std::size_t stride = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = length;
  return Tensor<Real>(std::move(s), std::vector<Real>(x.values().begin() + offset * stride,
                                                      x.values().begin() + (offset + length) * stride));
}

template <typename Real>
std::size_t argmax(const Tensor<Real>& x) {
  return static_cast<std::size_t>(
      std::max_element(x.values().begin(), x.values().end()) - x.values().begin());
}

template <typename Real>
Real frobenius_norm(const Tensor<Real>& x) {
  Real acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i] * x[i];
  return std::sqrt(acc);
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same(a, b, "max_abs_diff");
  Real m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Deterministic random numbers. The engine is mt19937_64, whose output
// sequence is fixed by the standard; the distributions below are written
// out by hand because std:: distributions differ between library vendors.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), engine_(mix(seed, stream)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t draws() const { return counter_; }

  /// Independent generator for a named sub-stream of the same seed.
  Rng fork(std::uint64_t stream) const { return Rng(seed_, stream_ * 0x9E3779B97F4A7C15ull + stream + 1); }

  std::uint64_t next_u64() {
    ++counter_;
    return engine_();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do x = next_u64();
    while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one variate per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  template <typename Real = double>
  Tensor<Real> randn(Shape shape, double stddev = 1.0) {
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<Real>(normal() * stddev);
    return t;
  }

  template <typename Real = double>
  Tensor<Real> rand(Shape shape, double lo, double hi) {
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<Real>(uniform(lo, hi));
    return t;
  }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over (seed, stream)
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::uint64_t counter_ = 0;
};

}  // namespace nirvana
