#include "ctxtrack/context.hpp"

namespace ctxtrack {

void InstanceObservation::validate() const {
  if (features.rank() != 3) throw ConfigError("features must be H x W x C");
  const std::size_t h = features.dim(0), w = features.dim(1), c = features.dim(2);
  if (core.rank() != 2 || core.dim(1) != c)
    throw ConfigError("core embeddings must be N x " + std::to_string(c));
  const std::size_t n = core.dim(0);
  if (masks.shape() != Shape{n, h, w})
    throw ConfigError("masks must be " + shape_string({n, h, w}) + ", got " + shape_string(masks.shape()));
  if (class_scores.rank() != 2 || class_scores.dim(0) != n)
    throw ConfigError("class scores must be N x K with N = " + std::to_string(n));
  for (double v : masks.storage())
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("mask entries must lie in [0, 1]");
}

Tensor InstanceObservation::mask(std::size_t n) const {
  const std::size_t hw = masks.dim(1) * masks.dim(2);
  std::vector<double> d(masks.storage().begin() + static_cast<std::ptrdiff_t>(n * hw),
                        masks.storage().begin() + static_cast<std::ptrdiff_t>((n + 1) * hw));
  return Tensor({masks.dim(1), masks.dim(2)}, std::move(d));
}

Tensor boundary_band(const Tensor& mask, double threshold) {
  if (mask.rank() != 2) throw ConfigError("boundary_band expects an H x W mask");
  Tensor binary(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) binary[i] = mask[i] >= threshold ? 1.0 : 0.0;
  Tensor response = conv2d_same(binary, Kernel2D::laplacian());
  for (auto& v : response.storage()) v = v > 0.0 ? 1.0 : 0.0;
  return response;
}

Tensor band_weights(const Tensor& masks, double threshold, std::vector<std::size_t>* sizes) {
  if (masks.rank() != 3) throw ConfigError("band_weights expects N x H x W masks");
  const std::size_t n = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  Tensor out({n, h * w}, 0.0);
  if (sizes) sizes->assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> m(masks.storage().begin() + static_cast<std::ptrdiff_t>(i * h * w),
                          masks.storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w));
    const Tensor band = boundary_band(Tensor({h, w}, std::move(m)), threshold);
    std::size_t count = 0;
    for (double v : band.storage()) count += v > 0.0;
    if (sizes) (*sizes)[i] = count;
    if (count == 0) continue;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t p = 0; p < h * w; ++p) out[i * h * w + p] = band[p] * inv;
  }
  return out;
}

SurroundingFeatures surrounding_embedding(const InstanceObservation& obs, const Kernel2D& kernel,
                                          double threshold) {
  const std::size_t h = obs.height(), w = obs.width(), c = obs.channels();
  SurroundingFeatures out;
  const Tensor weights = band_weights(obs.masks, threshold, &out.band_sizes);
  const Tensor smoothed = conv2d_same(obs.features, kernel).reshaped({h * w, c});
  out.surrounding = matmul(weights, smoothed);
  return out;
}

Var surrounding_embedding(Var features, Var kernel, const Tensor& weights) {
  const Shape s = features.value().shape();
  Var smoothed = ops::conv2d_same(features, kernel);
  Var flat = ops::reshape(smoothed, {s[0] * s[1], s[2]});
  Var w = features.tape->constant(weights);
  return ops::matmul(w, flat);
}

ParameterSet init_context_head(const ContextHeadConfig& config, CounterRng& rng) {
  ParameterSet head;
  head.merge(init_mlp(config.fusion_shape(), rng), "fusion.");
  if (config.kernel_mode == KernelMode::learnable)
    head.set("kernel", Kernel2D::learnable(config.kernel_size).weights);
  return head;
}

Kernel2D context_kernel(const ContextHeadConfig& config, const ParameterSet& head) {
  auto k = Kernel2D::make(config.kernel_mode, config.kernel_size);
  if (config.kernel_mode == KernelMode::learnable) k.weights = head.at("kernel");
  return k;
}

Var fuse_context(const BoundParams& head, const ContextHeadConfig& config, Var core, Var surrounding) {
  const auto shape = config.fusion_shape();
  if (core.value().cols() != config.channels || surrounding.value().cols() != config.channels) {
    throw ConfigError("fuse_context expects " + std::to_string(config.channels) +
                      "-wide core and surrounding embeddings");
  }
  return mlp_forward(head, shape, ops::concat_cols(core, surrounding), "fusion.");
}

Tensor fuse_context(const Tensor& core, const Tensor& surrounding, const ParameterSet& head,
                    const ContextHeadConfig& config) {
  Tape tape;
  BoundParams bound(tape, head, false);
  return fuse_context(bound, config, tape.constant(core), tape.constant(surrounding)).value();
}

ContextEmbeddings compute_context(const InstanceObservation& obs, const ParameterSet& head,
                                  const ContextHeadConfig& config) {
  auto s = surrounding_embedding(obs, context_kernel(config, head), config.mask_threshold);
  ContextEmbeddings out;
  out.fused = fuse_context(obs.core, s.surrounding, head, config);
  out.surrounding = std::move(s.surrounding);
  out.band_sizes = std::move(s.band_sizes);
  return out;
}

}  // namespace ctxtrack
