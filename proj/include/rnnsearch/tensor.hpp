// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rnnsearch/error.hpp"
#include "rnnsearch/random.hpp"

namespace rnnsearch {

/// Dense row-major 2-D array. Batches put one sentence per row.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument(detail::concat("Tensor: data length ", data_.size(),
                                                 " does not match shape ", rows_, "x", cols_));
    }
  }
  Tensor(std::initializer_list<std::initializer_list<Real>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw std::invalid_argument("Tensor: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols); }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = Real(1);
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  Real operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<Real> span() noexcept { return data_; }
  std::span<const Real> span() const noexcept { return data_; }
  std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  const std::vector<Real>& values() const noexcept { return data_; }

  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  std::string shape_string() const { return detail::concat(rows_, "x", cols_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

template <typename Real>
std::ostream& operator<<(std::ostream& os, const Tensor<Real>& t) {
  os << "[";
  for (std::size_t r = 0; r < t.rows(); ++r) {
    os << (r ? ", [" : "[");
    for (std::size_t c = 0; c < t.cols(); ++c) os << (c ? ", " : "") << t(r, c);
    os << "]";
  }
  return os << "]";
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> out(t.size());
  std::transform(t.values().begin(), t.values().end(), out.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Tensor<To>(t.rows(), t.cols(), std::move(out));
}

namespace kernel {

// out (+)= a * b ; a is r x k, b is k x c.
template <typename Real>
void gemm_nn(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& out) {
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  for (std::size_t i = 0; i < r; ++i) {
    Real* o = out.data() + i * c;
    const Real* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real s = ai[p];
      const Real* bp = b.data() + p * c;
      for (std::size_t j = 0; j < c; ++j) o[j] += s * bp[j];
    }
  }
}

// out (+)= a * b^T ; a is r x k, b is c x k.
template <typename Real>
void gemm_nt(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& out) {
  const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
  for (std::size_t i = 0; i < r; ++i) {
    const Real* ai = a.data() + i * k;
    Real* o = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      const Real* bj = b.data() + j * k;
      // eight partial sums so the compiler can vectorise the reduction
      Real part[8] = {};
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8)
        for (std::size_t l = 0; l < 8; ++l) part[l] += ai[p + l] * bj[p + l];
      Real acc = ((part[0] + part[4]) + (part[1] + part[5])) + ((part[2] + part[6]) + (part[3] + part[7]));
      for (; p < k; ++p) acc += ai[p] * bj[p];
      o[j] += acc;
    }
  }
}

// out (+)= a^T * b ; a is k x r, b is k x c.
template <typename Real>
void gemm_tn(const Tensor<Real>& a, const Tensor<Real>& b, Tensor<Real>& out) {
  const std::size_t k = a.rows(), r = a.cols(), c = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const Real* ap = a.data() + p * r;
    const Real* bp = b.data() + p * c;
    for (std::size_t i = 0; i < r; ++i) {
      const Real s = ap[i];
      if (s == Real(0)) continue;
      Real* o = out.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) o[j] += s * bp[j];
    }
  }
}

}  // namespace kernel

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(detail::concat("matmul: inner dimensions differ (",
                                               a.shape_string(), " * ", b.shape_string(), ")"));
  }
  Tensor<Real> out(a.rows(), b.cols());
  kernel::gemm_nn(a, b, out);
  return out;
}

/// a * b^T, for weights stored as (out x in).
template <typename Real>
Tensor<Real> matmul_bt(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument(detail::concat("matmul_bt: inner dimensions differ (",
                                               a.shape_string(), " * ", b.shape_string(), "^T)"));
  }
  Tensor<Real> out(a.rows(), b.rows());
  kernel::gemm_nt(a, b, out);
  return out;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  Tensor<Real> out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

/// Numerically stable softmax of one vector (max subtraction).
template <typename Real>
std::vector<Real> softmax_row(std::span<const Real> v) {
  if (v.empty()) throw std::invalid_argument("softmax_row: empty vector");
  const Real mx = *std::max_element(v.begin(), v.end());
  std::vector<Real> out(v.size());
  Real total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (auto& x : out) x /= total;
  return out;
}

template <typename Real>
Tensor<Real> gaussian_fill(Rng& rng, std::size_t rows, std::size_t cols, double mean, double stddev) {
  if (!(stddev >= 0.0)) throw std::invalid_argument("gaussian_fill: negative standard deviation");
  Tensor<Real> out(rows, cols);
  for (auto& x : out.span()) x = static_cast<Real>(mean + stddev * rng.normal());
  return out;
}

/// Random orthogonal matrix: Gram-Schmidt (applied twice) on a Gaussian matrix.
template <typename Real>
Tensor<Real> orthogonal_init(Rng& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("orthogonal_init: n must be at least 1");
  // Columns are built as rows of q, then transposed back at the end.
  std::vector<double> q(n * n);
  for (auto& x : q) x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    double* qi = q.data() + i * n;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        const double* qj = q.data() + j * n;
        double dot = 0;
        for (std::size_t k = 0; k < n; ++k) dot += qi[k] * qj[k];
        for (std::size_t k = 0; k < n; ++k) qi[k] -= dot * qj[k];
      }
    }
    double norm = 0;
    for (std::size_t k = 0; k < n; ++k) norm += qi[k] * qi[k];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("orthogonal_init: degenerate Gaussian draw");
    for (std::size_t k = 0; k < n; ++k) qi[k] /= norm;
  }
  Tensor<Real> out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) out(k, i) = static_cast<Real>(q[i * n + k]);
  return out;
}

template <typename Real>
double max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace rnnsearch
