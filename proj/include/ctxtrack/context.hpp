#pragma once

#include <vector>

#include "ctxtrack/kernels.hpp"
#include "ctxtrack/nn.hpp"
#include "ctxtrack/tensor.hpp"

namespace ctxtrack {

/// Per-frame output of the segmenter: pixel features, core instance
/// embeddings, soft masks and class logits.
struct InstanceObservation {
  Tensor features;      // H x W x C
  Tensor core;          // N x C
  Tensor masks;         // N x H x W, entries in [0, 1]
  Tensor class_scores;  // N x K

  std::size_t height() const { return features.dim(0); }
  std::size_t width() const { return features.dim(1); }
  std::size_t channels() const { return features.dim(2); }
  std::size_t instances() const { return core.dim(0); }
  std::size_t classes() const { return class_scores.dim(1); }

  /// Throws ConfigError unless shapes agree and masks lie in [0, 1].
  void validate() const;
  Tensor mask(std::size_t n) const;  // H x W

  friend bool operator==(const InstanceObservation&, const InstanceObservation&) = default;
};

/// Binarise at `threshold` (>=), apply the 4-neighbour Laplacian and keep
/// pixels with strictly positive response: the one-pixel exterior ring.
Tensor boundary_band(const Tensor& mask, double threshold = 0.5);

struct SurroundingFeatures {
  Tensor surrounding;                    // N x C
  std::vector<std::size_t> band_sizes;  // pixels in each instance's band
};

/// Band weights: row n is the band of mask n divided by its size (zero row if empty).
Tensor band_weights(const Tensor& masks, double threshold, std::vector<std::size_t>* sizes = nullptr);

/// Mean of the smoothed feature map over each instance's boundary band.
SurroundingFeatures surrounding_embedding(const InstanceObservation& obs, const Kernel2D& kernel,
                                          double threshold = 0.5);
inline SurroundingFeatures surrounding_embedding(const InstanceObservation& obs,
                                                 std::size_t avg_kernel_size = 9) {
  return surrounding_embedding(obs, Kernel2D::average(avg_kernel_size));
}

/// Differentiable variant: band_weights (N x HW) times the filtered map.
Var surrounding_embedding(Var features, Var kernel, const Tensor& band_weights);

struct ContextHeadConfig {
  std::size_t channels = 16;
  KernelMode kernel_mode = KernelMode::average;
  std::size_t kernel_size = 9;
  double mask_threshold = 0.5;
  bool final_relu = true;

  MlpShape fusion_shape() const {
    return {{2 * channels, channels, channels, channels}, final_relu};
  }
};

/// Fusion MLP parameters under "fusion.", plus "kernel" for the learnable filter.
ParameterSet init_context_head(const ContextHeadConfig& config, CounterRng& rng);
Kernel2D context_kernel(const ContextHeadConfig& config, const ParameterSet& head);

/// Q = MLP(concat(core, surrounding)), row by row.
Tensor fuse_context(const Tensor& core, const Tensor& surrounding, const ParameterSet& head,
                    const ContextHeadConfig& config);
Var fuse_context(const BoundParams& head, const ContextHeadConfig& config, Var core, Var surrounding);

struct ContextEmbeddings {
  Tensor surrounding;  // N x C
  Tensor fused;        // N x C
  std::vector<std::size_t> band_sizes;
};

ContextEmbeddings compute_context(const InstanceObservation& obs, const ParameterSet& head,
                                  const ContextHeadConfig& config);

}  // namespace ctxtrack
