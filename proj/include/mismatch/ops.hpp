#pragma once

// Differentiable tensor operations. Image tensors are NCHW; convolution
// weights are OIHW. Every op records a gradient node when a tape is active.

#include "mismatch/tensor.hpp"

namespace mismatch::ad {

/// Stride-1 2-D cross-correlation with zero padding and kernel dilation.
/// Output extent is H + 2*padding - (dilation*(K-1)+1) + 1 per axis.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int padding,
              int dilation = 1);

/// Padding that keeps the spatial size for an odd kernel.
constexpr int same_padding(int kernel, int dilation) { return dilation * (kernel - 1) / 2; }

Tensor relu(const Tensor& x);
/// Logistic function, clamped so results stay strictly inside (0, 1).
Tensor sigmoid(const Tensor& x);

/// Per-sample, per-channel normalisation over H*W followed by gamma*x + beta.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

/// 2x2 max pooling with stride 2; H and W must be even.
Tensor maxpool2(const Tensor& x);
/// x2 bilinear upsampling, half-pixel centres (align_corners = false).
Tensor upsample_bilinear2(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double k);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of squared differences over all elements; shape {1}.
Tensor mse(const Tensor& a, const Tensor& b);

/// Same values, no tape link: gradients never flow back through the result.
Tensor stop_gradient(const Tensor& x);

}  // namespace mismatch::ad
