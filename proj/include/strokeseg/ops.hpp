#pragma once

// Differentiable tensor operations. Spatial tensors are laid out N-C-D-H-W
// with W fastest.

#include "strokeseg/tensor.hpp"

namespace strokeseg::ad {

/// Stride-1 cross-correlation with zero padding (k-1)/2, k in {1, 3}.
/// w: (Cout, Cin, k, k, k); b: (Cout) or undefined.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Direct six-loop convolution; forward only. Reference path for conv3d.
template <class T>
Tensor<T> conv3d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// 2x2x2 non-overlapping max pooling; ties route the gradient to the first
/// element of the cell in D-H-W scan order.
template <class T>
Tensor<T> maxpool3d(const Tensor<T>& x);

/// 2x2x2 non-overlapping mean pooling.
template <class T>
Tensor<T> avgpool3d(const Tensor<T>& x);

/// Factor-2 trilinear interpolation, align_corners=false: output sample o
/// reads source coordinate (o + 0.5) / 2 - 0.5 clamped into the input.
template <class T>
Tensor<T> trilinear_upsample(const Tensor<T>& x);

/// Per (sample, channel) normalization over D*H*W with biased variance.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Derivative at 0 is `alpha`.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha);
template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// (N, C, D, H, W) -> (N, C).
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// x: (N, in), w: (out, in), b: (out) or undefined -> (N, out).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y);
/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y);
template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor);
/// Scalar sum; accumulates in double.
template <class T>
Tensor<T> sum(const Tensor<T>& x);

/// x: (N, C, D, H, W), s: (N, C) -> x scaled per channel.
template <class T>
Tensor<T> mul_channelwise(const Tensor<T>& x, const Tensor<T>& s);

/// Concatenates two N-C-D-H-W tensors along C.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

} // namespace strokeseg::ad
