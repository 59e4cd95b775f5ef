#pragma once

// Independent reference implementations used to check the library. They
// share no code with src/ beyond the Tensor container.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mismatch/metrics.hpp"
#include "mismatch/tensor.hpp"

namespace oracle {

using mismatch::ad::Shape;
using mismatch::ad::Tensor;

/// Direct 7-loop cross-correlation, NCHW x OIHW, stride 1.
std::vector<double> conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad, int dil);

std::vector<double> maxpool2(const Tensor& x);

/// Max (dilate) or min over the clipped 3x3 window.
std::vector<double> morph(const Tensor& x, bool dilate);

/// x2 bilinear with half-pixel centres, computed per output pixel.
std::vector<double> upsample2(const Tensor& x);

/// Elementwise mean, summing snapshots in the order given.
std::vector<std::vector<double>> average(const std::vector<std::vector<std::vector<double>>>& snapshots);

/// ECE by assigning each pixel to its bin with a linear scan over the
/// edges, then weighting the per-bin gaps.
double ece(const std::vector<double>& probs, const std::vector<double>& gt, std::size_t bins,
           mismatch::metrics::ConfidenceMode mode, double threshold = 0.5);

/// Soft Dice loss written out directly.
double dice(const std::vector<double>& p, const std::vector<double>& g, double smooth);

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);
Tensor random_parameter(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

struct GradCheck {
  double max_relative_error = 0.0;  // worst over the checked tensors
  std::size_t evaluations = 0;
};

/// Compares reverse-mode gradients of `loss()` with respect to each tensor in
/// `inputs` against central differences (step h). The error of one tensor is
/// ||g_rev - g_fd|| / max(||g_rev||, ||g_fd||, 1e-12) in the Euclidean norm.
/// `loss` must build its graph from scratch on every call.
GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          double h = 1e-5);

}  // namespace oracle
