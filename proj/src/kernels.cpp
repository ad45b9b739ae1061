#include "ctxtrack/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ctxtrack {

std::string to_string(KernelMode mode) {
  switch (mode) {
    case KernelMode::average: return "average";
    case KernelMode::laplacian: return "laplacian";
    case KernelMode::learnable: return "learnable";
  }
  return "unknown";
}

KernelMode kernel_mode_from_string(const std::string& name) {
  if (name == "average") return KernelMode::average;
  if (name == "laplacian") return KernelMode::laplacian;
  if (name == "learnable") return KernelMode::learnable;
  throw ConfigError("unknown kernel mode '" + name + "'");
}

namespace {

void require_odd(std::size_t k) {
  if (k == 0 || k % 2 == 0) {
    throw ConfigError("kernel size must be odd, got " + std::to_string(k));
  }
}

struct Grid {
  std::size_t h, w, c;
};

Grid grid_of(const Shape& s) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw ConfigError("conv2d_same expects H x W or H x W x C input, got " + shape_string(s));
}

}  // namespace

Kernel2D Kernel2D::average(std::size_t k) {
  require_odd(k);
  const double w = 1.0 / static_cast<double>(k * k);
  return {k, Tensor({k, k}, w), KernelMode::average};
}

Kernel2D Kernel2D::laplacian() {
  Tensor w({3, 3}, 0.0);
  w.at(1, 1) = -4.0;
  w.at(0, 1) = w.at(2, 1) = w.at(1, 0) = w.at(1, 2) = 1.0;
  return {3, std::move(w), KernelMode::laplacian};
}

Kernel2D Kernel2D::learnable(std::size_t k) {
  auto kernel = average(k);
  kernel.mode = KernelMode::learnable;
  return kernel;
}

Kernel2D Kernel2D::make(KernelMode mode, std::size_t k) {
  switch (mode) {
    case KernelMode::average: return average(k);
    case KernelMode::laplacian: return laplacian();
    case KernelMode::learnable: return learnable(k);
  }
  throw ConfigError("unknown kernel mode");
}

Tensor conv2d_same(const Tensor& input, const Kernel2D& kernel) {
  require_odd(kernel.size);
  return conv2d_same(input, kernel.weights);
}

Tensor conv2d_same(const Tensor& input, const Tensor& weights) {
  if (weights.rank() != 2 || weights.dim(0) != weights.dim(1)) {
    throw ConfigError("kernel weights must be square, got " + shape_string(weights.shape()));
  }
  const std::size_t k = weights.dim(0);
  require_odd(k);
  const auto [h, w, c] = grid_of(input.shape());
  if (h == 0 || w == 0) throw ConfigError("conv2d_same on empty grid");
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out(input.shape(), 0.0);
  const double* in = input.data().data();
  double* o = out.data().data();
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const double wv = weights.at(static_cast<std::size_t>(dy + r), static_cast<std::size_t>(dx + r));
      if (wv == 0.0) continue;
      const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
      const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(h) - dy);
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
      const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, static_cast<std::ptrdiff_t>(w) - dx);
      for (std::ptrdiff_t y = y0; y < y1; ++y) {
        double* orow = o + (y * static_cast<std::ptrdiff_t>(w)) * static_cast<std::ptrdiff_t>(c);
        const double* irow = in + ((y + dy) * static_cast<std::ptrdiff_t>(w) + dx) *
                                      static_cast<std::ptrdiff_t>(c);
        for (std::ptrdiff_t i = x0 * static_cast<std::ptrdiff_t>(c);
             i < x1 * static_cast<std::ptrdiff_t>(c); ++i) {
          orow[i] += wv * irow[i];
        }
      }
    }
  }
  return out;
}

Tensor conv2d_same_kernel_grad(const Tensor& input, const Tensor& upstream, std::size_t k) {
  require_odd(k);
  const auto [h, w, c] = grid_of(input.shape());
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  Tensor g({k, k}, 0.0);
  const double* in = input.data().data();
  const double* up = upstream.data().data();
  const auto sw = static_cast<std::ptrdiff_t>(w);
  const auto sc = static_cast<std::ptrdiff_t>(c);
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
      const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(h) - dy);
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
      const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, sw - dx);
      double acc = 0.0;
      for (std::ptrdiff_t y = y0; y < y1; ++y) {
        const double* urow = up + y * sw * sc;
        const double* irow = in + ((y + dy) * sw + dx) * sc;
        for (std::ptrdiff_t i = x0 * sc; i < x1 * sc; ++i) acc += urow[i] * irow[i];
      }
      g.at(static_cast<std::size_t>(dy + r), static_cast<std::size_t>(dx + r)) = acc;
    }
  }
  return g;
}

Tensor conv2d_same_input_grad(const Tensor& upstream, const Tensor& weights,
                              const Shape& input_shape) {
  // out[y,x] = sum w[dy,dx] in[y+dy,x+dx]  =>  d in[p] = sum w[dy,dx] up[p-d]
  const std::size_t k = weights.dim(0);
  Tensor flipped({k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) flipped.at(i, j) = weights.at(k - 1 - i, k - 1 - j);
  Tensor g = conv2d_same(upstream, flipped);
  return g.reshaped(input_shape);
}

Tensor softmax_rows(const Tensor& input) {
  Tensor out(input.shape());
  const std::size_t n = input.rows();
  for (std::size_t r = 0; r < n; ++r) {
    auto in = input.row(r);
    auto o = out.row(r);
    if (in.empty()) continue;
    const double m = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      o[i] = std::exp(in[i] - m);
      s += o[i];
    }
    for (auto& v : o) v /= s;
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ConfigError("matmul inner dimension mismatch " + shape_string(a.shape()) + " * " +
                      shape_string(b.shape()));
  }
  Tensor out({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = b.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ConfigError("matmul_nt inner dimension mismatch " + shape_string(a.shape()) + " * " +
                      shape_string(b.shape()) + "^T");
  }
  Tensor out({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.data().data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out[i * m + j] = s;
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ConfigError("matmul_tn inner dimension mismatch " + shape_string(a.shape()) + "^T * " +
                      shape_string(b.shape()));
  }
  Tensor out({n, m}, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.data().data() + p * n;
    const double* br = b.data().data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a[i * m + j];
  return out;
}

double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace ctxtrack
