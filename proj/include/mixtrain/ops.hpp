#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mixtrain/tensor.hpp"

// Differentiable operations. Each op records a backward rule on the active
// tape of the calling thread when at least one input requires grad;
// otherwise it is a plain forward computation.
//
// Broadcasting is limited to equal shapes and scalar-vs-tensor.

namespace mixtrain {

// One byte per element: nonzero selects the position.
using Mask = std::vector<std::uint8_t>;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
// tanh approximation
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
template <typename T>
Tensor<T> log(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// x[..., in] · weight[in, out] + bias[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6));

// x[b, t, e] + pos[t, e] for every batch row.
template <typename T>
Tensor<T> add_position(const Tensor<T>& x, const Tensor<T>& pos);

// Multi-head scaled dot-product self-attention over packed projections
// qkv[b, t, 3e] laid out as [q | k | v]. Returns [b, t, e].
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t heads);

// [b, t, e] -> [b, e], mean over tokens.
template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x);

// Replaces token rows `indices` (sorted, unique) of x[b, t, e] with token[e].
template <typename T>
Tensor<T> replace_tokens(const Tensor<T>& x, const Tensor<T>& token, std::span<const std::size_t> indices);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);
// Mean squared error restricted to positions where mask != 0.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, const Mask& mask);

}  // namespace mixtrain
