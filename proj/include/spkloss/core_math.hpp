// Copyright 2026 The spkloss Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SPKLOSS_CORE_MATH_HPP_
#define SPKLOSS_CORE_MATH_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace spkloss {

/// Raised when an operation receives inputs outside its mathematical domain
/// (zero-norm vectors, mismatched dimensions, out-of-range labels, ...).
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) acc += a[d] * b[d];
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

namespace detail {

inline void require_same_dim(std::span<const double> a, std::span<const double> b,
                             const char* op) {
  if (a.size() != b.size())
    throw DomainError(std::string(op) + ": dimension mismatch (" + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()) + ")");
  if (a.empty()) throw DomainError(std::string(op) + ": empty vectors");
}

}  // namespace detail

/// Cosine of the angle between a and b, clamped to [-1, 1].
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  detail::require_same_dim(a, b, "cosine_similarity");
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0)) throw DomainError("cosine_similarity: first argument has zero norm");
  if (!(nb > 0.0)) throw DomainError("cosine_similarity: second argument has zero norm");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double squared_euclidean(std::span<const double> a, std::span<const double> b) {
  detail::require_same_dim(a, b, "squared_euclidean");
  double acc = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = a[d] - b[d];
    acc += diff * diff;
  }
  return acc;
}

inline double log_sum_exp(std::span<const double> logits) {
  if (logits.empty()) throw DomainError("log_sum_exp: empty input");
  const double peak = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(peak)) return peak;
  double acc = 0.0;
  for (double z : logits) acc += std::exp(z - peak);
  return peak + std::log(acc);
}

struct CrossEntropy {
  double loss = 0.0;
  Vector grad_logits;
};

/// Cross-entropy of softmax(logits) against a one-hot target, with the
/// gradient softmax(logits) - one_hot(target).
inline CrossEntropy softmax_cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size())
    throw DomainError("softmax_cross_entropy: target index " + std::to_string(target) +
                      " out of range for " + std::to_string(logits.size()) + " logits");
  const double lse = log_sum_exp(logits);
  CrossEntropy out;
  out.loss = lse - logits[target];
  out.grad_logits.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) out.grad_logits[c] = std::exp(logits[c] - lse);
  out.grad_logits[target] -= 1.0;
  return out;
}

/// Unit vector along v together with the original norm. Throws on a zero norm.
struct Normalized {
  Vector unit;
  double length = 0.0;
};

inline Normalized normalize(std::span<const double> v, std::string_view what,
                            std::ptrdiff_t index = -1) {
  const double len = norm(v);
  if (!(len > 0.0)) {
    std::string msg(what);
    if (index >= 0) msg += " " + std::to_string(index);
    throw DomainError(msg + " has zero norm");
  }
  Normalized out{Vector(v.begin(), v.end()), len};
  for (double& x : out.unit) x /= len;
  return out;
}

/// Pulls a gradient taken w.r.t. a unit vector u = v/|v| back to v:
/// (g - (g.u) u) / |v|, accumulated into `out`.
inline void accumulate_through_normalization(std::span<const double> grad_unit,
                                             const Normalized& n, std::span<double> out,
                                             double weight = 1.0) {
  const double radial = dot(grad_unit, n.unit);
  const double inv = weight / n.length;
  for (std::size_t d = 0; d < out.size(); ++d)
    out[d] += inv * (grad_unit[d] - radial * n.unit[d]);
}

}  // namespace spkloss

#endif  // SPKLOSS_CORE_MATH_HPP_
