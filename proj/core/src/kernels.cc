// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/kernels.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace mole {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

namespace {

void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) {
    throw ShapeError(std::string(what) + " must be a matrix, got " + shape_string(s));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul lhs");
  require_matrix(b.shape(), "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner extents differ: " + shape_string(a.shape()) +
                     " * " + shape_string(b.shape()));
  }
  Tensor<T> c({m, n});
  const T* ap = a.data();
  const T* bp = b.data();
  T* cp = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = cp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ap[i * k + p];
      const T* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul_tn lhs");
  require_matrix(b.shape(), "matmul_tn rhs");
  Tensor<T> c({a.dim(1), b.dim(1)});
  matmul_tn_accumulate(a, b, c);
  return c;
}

template <typename T>
void matmul_tn_accumulate(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  require_matrix(a.shape(), "matmul_tn lhs");
  require_matrix(b.shape(), "matmul_tn rhs");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k || c.shape() != Shape{m, n}) {
    throw ShapeError("matmul_tn extents differ: " + shape_string(a.shape()) +
                     "^T * " + shape_string(b.shape()) + " -> " +
                     shape_string(c.shape()));
  }
  const T* ap = a.data();
  const T* bp = b.data();
  T* cp = c.data();
  for (std::size_t r = 0; r < k; ++r) {
    const T* arow = ap + r * m;
    const T* brow = bp + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T ari = arow[i];
      if (ari == T(0)) continue;
      T* crow = cp + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += ari * brow[j];
    }
  }
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul_nt lhs");
  require_matrix(b.shape(), "matmul_nt rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt inner extents differ: " + shape_string(a.shape()) +
                     " * " + shape_string(b.shape()) + "^T");
  }
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, w);
  if (!bias.empty()) {
    const std::size_t n = y.dim(1);
    if (bias.size() != n) {
      throw ShapeError("bias length " + std::to_string(bias.size()) +
                       " does not match output width " + std::to_string(n));
    }
    for (std::size_t i = 0; i < y.dim(0); ++i) {
      T* row = y.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += bias[j];
    }
  }
  return y;
}

template <typename T>
void softmax_inplace(std::span<T> values) {
  if (values.empty()) throw ValueError("softmax of an empty vector");
  const T peak = *std::max_element(values.begin(), values.end());
  T total = T(0);
  for (T& v : values) {
    v = std::exp(v - peak);
    total += v;
  }
  for (T& v : values) v /= total;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.begin(), logits.end());
  softmax_inplace<T>(out);
  return out;
}

template <typename T>
T logsumexp(std::span<const T> values) {
  if (values.empty()) throw ValueError("logsumexp of an empty vector");
  const T peak = *std::max_element(values.begin(), values.end());
  T total = T(0);
  for (T v : values) total += std::exp(v - peak);
  return peak + std::log(total);
}

template <typename T>
std::vector<T> rmsnorm(std::span<const T> x, std::span<const T> gain, T eps) {
  if (x.size() != gain.size() || x.empty()) {
    throw ShapeError("rmsnorm width " + std::to_string(x.size()) +
                     " vs gain " + std::to_string(gain.size()));
  }
  T sum_sq = T(0);
  for (T v : x) sum_sq += v * v;
  const T inv = T(1) / std::sqrt(sum_sq / static_cast<T>(x.size()) + eps);
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * (x[i] * inv);
  return y;
}

template <typename T>
Tensor<T> rmsnorm_rows(const Tensor<T>& x, std::span<const T> gain, T eps,
                       std::vector<T>* inv_rms) {
  require_matrix(x.shape(), "rmsnorm input");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gain.size() != d) {
    throw ShapeError("rmsnorm width " + std::to_string(d) + " vs gain " +
                     std::to_string(gain.size()));
  }
  Tensor<T> y({rows, d});
  if (inv_rms) inv_rms->assign(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T sum_sq = T(0);
    for (std::size_t i = 0; i < d; ++i) sum_sq += xr[i] * xr[i];
    const T inv = T(1) / std::sqrt(sum_sq / static_cast<T>(d) + eps);
    T* yr = y.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) yr[i] = gain[i] * (xr[i] * inv);
    if (inv_rms) (*inv_rms)[r] = inv;
  }
  return y;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) *
                static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

std::size_t rotary_span(std::size_t d_head, double rotary_fraction) {
  const double raw = rotary_fraction * static_cast<double>(d_head);
  const auto span = static_cast<std::size_t>(std::llround(raw));
  if (rotary_fraction <= 0.0 || std::abs(raw - static_cast<double>(span)) > 1e-9 ||
      span == 0 || span % 2 != 0 || span > d_head) {
    throw ValueError("rotary span " + std::to_string(raw) +
                     " must be a positive even integer <= d_head");
  }
  return span;
}

template <typename T>
void rotate_heads_inplace(std::span<T> row, std::size_t n_heads, std::size_t d_head,
                          std::size_t position, double rotary_fraction, bool inverse) {
  if (row.size() != n_heads * d_head) {
    throw ShapeError("rotary row has " + std::to_string(row.size()) +
                     " values, expected " + std::to_string(n_heads * d_head));
  }
  const std::size_t span = rotary_span(d_head, rotary_fraction);
  const std::size_t half = span / 2;
  if (position == 0) return;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(kRotaryBase, -2.0 * static_cast<double>(i) /
                                                  static_cast<double>(span));
    const double angle = static_cast<double>(position) * freq;
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* head = row.data() + h * d_head;
      const T x1 = head[i];
      const T x2 = head[i + half];
      head[i] = x1 * c - x2 * s;
      head[i + half] = x2 * c + x1 * s;
    }
  }
}

template <typename T>
Tensor<T> apply_rotary(const Tensor<T>& heads, std::size_t position,
                       double rotary_fraction) {
  require_matrix(heads.shape(), "rotary input");
  Tensor<T> out = heads;
  rotate_heads_inplace<T>(out.values(), heads.dim(0), heads.dim(1), position,
                          rotary_fraction);
  return out;
}

#define MOLE_INSTANTIATE_KERNELS(T)                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                  \
  template void matmul_tn_accumulate(const Tensor<T>&, const Tensor<T>&, Tensor<T>&); \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template std::vector<T> softmax(std::span<const T>);                               \
  template void softmax_inplace(std::span<T>);                                       \
  template T logsumexp(std::span<const T>);                                          \
  template std::vector<T> rmsnorm(std::span<const T>, std::span<const T>, T);        \
  template Tensor<T> rmsnorm_rows(const Tensor<T>&, std::span<const T>, T,           \
                                  std::vector<T>*);                                  \
  template T gelu(T);                                                                \
  template T gelu_grad(T);                                                           \
  template Tensor<T> apply_rotary(const Tensor<T>&, std::size_t, double);            \
  template void rotate_heads_inplace(std::span<T>, std::size_t, std::size_t,         \
                                     std::size_t, double, bool);

MOLE_INSTANTIATE_KERNELS(float)
MOLE_INSTANTIATE_KERNELS(double)

#undef MOLE_INSTANTIATE_KERNELS

}  // namespace mole
