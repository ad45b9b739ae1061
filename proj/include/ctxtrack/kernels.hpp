#pragma once

#include <string>

#include "ctxtrack/tensor.hpp"

namespace ctxtrack {

enum class KernelMode { average, laplacian, learnable };

std::string to_string(KernelMode mode);
KernelMode kernel_mode_from_string(const std::string& name);

/// Square odd-sized 2-D filter applied identically to every channel.
struct Kernel2D {
  std::size_t size = 3;
  Tensor weights;  // size x size
  KernelMode mode = KernelMode::average;

  /// All weights 1/k^2.
  static Kernel2D average(std::size_t k);
  /// 4-neighbour stencil: centre -4, edge neighbours +1, corners 0.
  static Kernel2D laplacian();
  /// Trainable kernel, initialised to the average filter.
  static Kernel2D learnable(std::size_t k);
  static Kernel2D make(KernelMode mode, std::size_t k);
};

// Dense helpers shared by the forward API and the tape ops.

/// Same-size 2-D correlation with zero padding. Input is H x W or H x W x C.
Tensor conv2d_same(const Tensor& input, const Kernel2D& kernel);
Tensor conv2d_same(const Tensor& input, const Tensor& weights);

/// Gradient of sum(out * upstream) with respect to the kernel weights.
Tensor conv2d_same_kernel_grad(const Tensor& input, const Tensor& upstream, std::size_t k);
/// Gradient of sum(out * upstream) with respect to the input (a flipped correlation).
Tensor conv2d_same_input_grad(const Tensor& upstream, const Tensor& weights,
                              const Shape& input_shape);

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& input);

/// A[n x k] * B[k x m].
Tensor matmul(const Tensor& a, const Tensor& b);
/// A[n x k] * B[m x k]^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// A[k x n]^T * B[k x m].
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

/// log(sum(exp(x))) over a span, stable; -inf for an empty span.
double log_sum_exp(std::span<const double> x);

}  // namespace ctxtrack
