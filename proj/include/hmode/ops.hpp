#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hmode/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the active
// tape of its precision when at least one operand requires a gradient.
namespace hmode::ops {

/// Cross-correlation of input [C_in,H,W] with kernel [C_out,C_in,k,k] plus
/// per-channel bias, zero padding on every side.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t padding);

// Binary ops accept equal shapes or a single-element operand on either side.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// max(0, x); the subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

inline constexpr double kSigmoidEpsilon = 1e-7;

/// Logistic sigmoid clamped to [eps, 1-eps]. Clamped entries pass no gradient.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Per-element softmax across a list of same-shape maps.
template <typename T>
std::vector<Tensor<T>> softmax_group(std::span<const Tensor<T>> maps);

/// Bilinear resize with half-pixel (align-corners-false) sampling. Accepts
/// [C,H,W] or [H,W]; the rank is preserved.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& input);

/// Sum over non-overlapping block x block cells. Accepts [C,H,W] or [H,W].
template <typename T>
Tensor<T> block_sum(const Tensor<T>& input, std::size_t block);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Concatenates [C1,H,W] and [C2,H,W] along channels.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Channel c of [C,H,W] as an [H,W] map.
template <typename T>
Tensor<T> channel(const Tensor<T>& x, std::size_t c);

/// Multiplies every channel of x [C,H,W] by the single map m [1,H,W] or [H,W].
template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& m);

/// Picks flat elements of x into a rank-1 tensor.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> flat_indices);

/// Flattens and concatenates tensors into one rank-1 tensor.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> parts);

/// Mean binary cross-entropy of probabilities `pred` against a constant
/// target in [0,1]. `pred` must already be clamped away from 0 and 1.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace hmode::ops
