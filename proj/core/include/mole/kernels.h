// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Reference numeric kernels. Every reduction runs in a fixed order so results
// are bit-reproducible; a single output element of any matmul variant is
// accumulated over the inner index in ascending order starting from zero,
// independently of how many rows the operands carry.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mole/tensor.h"

namespace mole {

/// RMSNorm epsilon used throughout the model.
inline constexpr double kNormEps = 1e-5;

/// Base of the rotary frequency ladder.
inline constexpr double kRotaryBase = 10000.0;

// ---- matrix products ------------------------------------------------------

/// (m x k) * (k x n). Throws ShapeError on rank or inner-extent mismatch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a^T * b for a: (k x m), b: (k x n).
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

/// a * b^T for a: (m x k), b: (n x k).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// c += a^T * b, used for weight-gradient accumulation.
template <typename T>
void matmul_tn_accumulate(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c);

/// y = x * w + bias (bias broadcast over rows; may be empty).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// ---- pointwise and row kernels -------------------------------------------

/// Max-subtracted softmax. Throws ValueError on empty input.
template <typename T>
std::vector<T> softmax(std::span<const T> logits);

/// In-place variant over a mutable row.
template <typename T>
void softmax_inplace(std::span<T> values);

/// log(sum(exp(x))) with max subtraction.
template <typename T>
T logsumexp(std::span<const T> values);

/// y_t = gain_t * x_t / sqrt(mean(x^2) + eps).
template <typename T>
std::vector<T> rmsnorm(std::span<const T> x, std::span<const T> gain, T eps);

/// Row-wise RMSNorm of a (rows x d) matrix. When `inv_rms` is given it
/// receives 1/sqrt(mean(x^2)+eps) for each row.
template <typename T>
Tensor<T> rmsnorm_rows(const Tensor<T>& x, std::span<const T> gain, T eps,
                       std::vector<T>* inv_rms = nullptr);

/// Exact-erf GELU.
template <typename T>
T gelu(T x);

/// d gelu / dx = Phi(x) + x * phi(x).
template <typename T>
T gelu_grad(T x);

// ---- rotary position embedding -------------------------------------------

/// Number of rotated dimensions per head. Throws ValueError unless
/// rotary_fraction * d_head is a positive even integer.
std::size_t rotary_span(std::size_t d_head, double rotary_fraction);

/// Rotates the first rotary_fraction*d_head dimensions of each head of a
/// (heads x d_head) tensor. Dimension i is paired with i + span/2 and turned
/// by position * base^(-2i/span); the tail passes through.
template <typename T>
Tensor<T> apply_rotary(const Tensor<T>& heads, std::size_t position,
                       double rotary_fraction);

/// In-place rotation of a packed row of `n_heads * d_head` values. `inverse`
/// applies the transpose rotation (used by backprop).
template <typename T>
void rotate_heads_inplace(std::span<T> row, std::size_t n_heads,
                          std::size_t d_head, std::size_t position,
                          double rotary_fraction, bool inverse = false);

}  // namespace mole
