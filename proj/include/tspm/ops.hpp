// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tspm/tensor.hpp"

namespace tspm {

// Matrix product over the last two axes; leading (batch) axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
// x[..., n] + b[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
// Normalizes over the last axis, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// Rows of x along axis 0 in the given order.
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

Tensor mean(const Tensor& x, std::size_t axis);
Tensor max(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);

// x [in] or [..., in]; weight [in, out]; bias [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Attention probabilities softmax(q Kᵀ / √d) for q [.., n, d], keys [.., s, d].
Tensor attention_probs(const Tensor& q, const Tensor& keys);
Tensor scaled_dot_attention(const Tensor& q, const Tensor& keys, const Tensor& values);

// −log softmax(logits)[label] for logits of shape [C].
Tensor cross_entropy(const Tensor& logits, std::size_t label);

// Forward: returns x unchanged (bit-exact). Backward: x receives the upstream
// gradient untouched and gate[i] receives Σ_j g[i,j]·x[i,j], as if row i had
// been multiplied by gate[i] evaluated at 1. x is [n, ...], gate is [n].
Tensor straight_through_gate(const Tensor& x, const Tensor& gate);

// Multiply-accumulate count of every matmul on this thread since the last reset.
std::uint64_t matmul_macs();
void reset_matmul_macs();

}  // namespace tspm
