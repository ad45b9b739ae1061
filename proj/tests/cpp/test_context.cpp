#include <cmath>

#include "doctest.h"
#include "ctxtrack/scenario.hpp"
#include "test_support.hpp"

using namespace ctxtrack;
using namespace ctxtrack::testing;

TEST_CASE("kernel construction") {
  const Kernel2D avg = Kernel2D::average(9);
  for (double v : avg.weights.storage()) CHECK(v == 1.0 / 81.0);
  const Kernel2D lap = Kernel2D::laplacian();
  CHECK(lap.weights == Tensor::from_rows({{0, 1, 0}, {1, -4, 1}, {0, 1, 0}}));
  CHECK(Kernel2D::learnable(5).weights == Kernel2D::average(5).weights);
  CHECK_THROWS_AS(Kernel2D::average(4), ConfigError);
  CHECK_THROWS_AS(Kernel2D::make(KernelMode::learnable, 0), ConfigError);
  for (KernelMode m : {KernelMode::average, KernelMode::laplacian, KernelMode::learnable})
    CHECK(kernel_mode_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(kernel_mode_from_string("gaussian"), ConfigError);
}

TEST_CASE("convolution of constants and impulses") {
  const Tensor constant({12, 12, 2}, 3.5);
  const Tensor avg = conv2d_same(constant, Kernel2D::average(9));
  CHECK(avg.at(6, 6, 0) == doctest::Approx(3.5).epsilon(1e-14));
  CHECK(avg.at(0, 0, 1) < 3.5);  // zero padding at the border
  const Tensor lap = conv2d_same(constant, Kernel2D::laplacian());
  CHECK(lap.at(5, 5, 1) == 0.0);
  Tensor impulse({5, 5}, 0.0);
  impulse.at(2, 2) = 1.0;
  const Tensor r = conv2d_same(impulse, Kernel2D::laplacian());
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      const bool centre = y == 2 && x == 2;
      const bool nb = (y == 2 && (x == 1 || x == 3)) || (x == 2 && (y == 1 || y == 3));
      CHECK(r.at(y, x) == (centre ? -4.0 : nb ? 1.0 : 0.0));
    }
}

TEST_CASE("convolution matches a direct loop") {
  CounterRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 2 + rng.below(8), w = 2 + rng.below(8), c = 1 + rng.below(3), k = 1 + 2 * rng.below(4);
    const Tensor in = random_tensor({h, w, c}, rng);
    const Kernel2D avg = Kernel2D::average(k);
    const Tensor out = conv2d_same(in, avg);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) CHECK(out.at(y, x, ch) == doctest::Approx(box_average(in, y, x, ch, k)).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows") {
  const Tensor a = softmax_rows(Tensor::from_rows({{0, 0}}));
  CHECK(a.at(0, 0) == 0.5);
  const Tensor b = softmax_rows(Tensor::from_rows({{1000, 0}}));
  CHECK(b.all_finite());
  CHECK(b.at(0, 0) == doctest::Approx(1.0));
  CHECK(b.at(0, 1) < 1e-300);
  const Tensor c = softmax_rows(Tensor::from_rows({{1, 2, 3}}));
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(c.at(0, i) - double(std::exp(1.0L + i) / z)) < 1e-15);
  CounterRng rng(12);
  const Tensor r = softmax_rows(random_tensor({1000, 7}, rng, -50, 50));
  for (std::size_t i = 0; i < 1000; ++i) {
    double s = 0.0;
    for (double v : r.row(i)) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("boundary band examples") {
  CHECK(boundary_band(Tensor({6, 6}, 0.0)) == Tensor({6, 6}, 0.0));
  Tensor dot({5, 5}, 0.0);
  dot.at(2, 2) = 1.0;
  const Tensor b = boundary_band(dot);
  double total = 0.0;
  for (double v : b.storage()) total += v;
  CHECK(total == 4.0);
  CHECK(b.at(1, 2) == 1.0);
  CHECK(b.at(3, 2) == 1.0);
  CHECK(b.at(2, 1) == 1.0);
  CHECK(b.at(2, 3) == 1.0);
  Tensor square({7, 7}, 0.0);
  for (std::size_t y = 2; y < 5; ++y)
    for (std::size_t x = 2; x < 5; ++x) square.at(y, x) = 1.0;
  const Tensor ring = boundary_band(square);
  double count = 0.0;
  for (double v : ring.storage()) count += v;
  CHECK(count == 12.0);
  CHECK(ring == band_oracle(square));
}

TEST_CASE("boundary band equals the neighbourhood-scan oracle") {
  CounterRng rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t h = 1 + rng.below(10), w = 1 + rng.below(10);
    const Tensor m = random_tensor({h, w}, rng, 0.0, 1.0);
    CHECK(boundary_band(m) == band_oracle(m));
  }
}

TEST_CASE("surrounding embedding examples") {
  CounterRng rng(14);
  InstanceObservation o = random_observation(3, 10, 10, 4, rng);
  o.features = Tensor({10, 10, 4}, 0.0);
  for (std::size_t p = 0; p < 100; ++p)
    for (std::size_t c = 0; c < 4; ++c) o.features[p * 4 + c] = double(c) + 1.0;
  // Constant map and a 1x1 average: every nonempty band reads the constant.
  const auto s = surrounding_embedding(o, Kernel2D::average(1));
  for (std::size_t n = 0; n < 3; ++n)
    if (s.band_sizes[n] > 0)
      for (std::size_t c = 0; c < 4; ++c) CHECK(s.surrounding.at(n, c) == doctest::Approx(double(c) + 1.0).epsilon(1e-14));
  // An empty mask has an empty band and a zero row.
  for (std::size_t p = 0; p < 100; ++p) o.masks[p] = 0.0;
  const auto e = surrounding_embedding(o, Kernel2D::average(9));
  CHECK(e.band_sizes[0] == 0);
  for (std::size_t c = 0; c < 4; ++c) CHECK(e.surrounding.at(0, c) == 0.0);
}

TEST_CASE("surrounding embedding equals the per-pixel oracle") {
  CounterRng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + 2 * rng.below(5);
    const InstanceObservation o = random_observation(1 + rng.below(4), 8, 8, 4, rng);
    const Tensor got = surrounding_embedding(o, Kernel2D::average(k)).surrounding;
    const Tensor want = surrounding_oracle(o.features, o.masks, k);
    CHECK(max_abs_diff(got, want) <= 1e-12);
  }
}

TEST_CASE("differentiable surrounding embedding agrees with the direct form") {
  CounterRng rng(16);
  const InstanceObservation o = random_observation(3, 9, 7, 3, rng);
  const Kernel2D k = Kernel2D::average(5);
  Tape tape;
  const Var v = surrounding_embedding(tape.constant(o.features), tape.constant(k.weights), band_weights(o.masks, 0.5));
  CHECK(max_abs_diff(v.value(), surrounding_embedding(o, k).surrounding) <= 1e-12);
  std::vector<std::size_t> sizes;
  const Tensor bw = band_weights(o.masks, 0.5, &sizes);
  for (std::size_t n = 0; n < 3; ++n) {
    double s = 0.0;
    for (double x : bw.row(n)) s += x;
    CHECK(s == doctest::Approx(sizes[n] ? 1.0 : 0.0));
  }
}

TEST_CASE("surrounding embedding is local and equivariant") {
  CounterRng rng(17);
  InstanceObservation o = random_observation(1, 24, 24, 2, rng);
  o.masks = Tensor({1, 24, 24}, 0.0);
  for (std::size_t y = 3; y < 6; ++y)
    for (std::size_t x = 3; x < 6; ++x) o.masks.at(0, y, x) = 1.0;
  const std::size_t k = 5;
  const Tensor before = surrounding_embedding(o, Kernel2D::average(k)).surrounding;
  // Band spans rows/cols 2..6; radius (k-1)/2 + 1 = 3 means pixels at >= 10 are out of reach.
  for (std::size_t y = 10; y < 24; ++y)
    for (std::size_t x = 0; x < 24; ++x) o.features.at(y, x, 0) += 100.0;
  CHECK(surrounding_embedding(o, Kernel2D::average(k)).surrounding == before);

  const InstanceObservation p = random_observation(4, 8, 8, 3, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  InstanceObservation q = p;
  q.masks = permute_rows(p.masks, perm);
  q.core = permute_rows(p.core, perm);
  q.class_scores = permute_rows(p.class_scores, perm);
  CHECK(surrounding_embedding(q, Kernel2D::average(3)).surrounding ==
        permute_rows(surrounding_embedding(p, Kernel2D::average(3)).surrounding, perm));
}

TEST_CASE("fusion MLP examples") {
  ContextHeadConfig hc;
  hc.channels = 3;
  CounterRng rng(18);
  ParameterSet zero = init_context_head(hc, rng);
  const ParameterSet shape_src = zero;
  for (const auto& [name, t] : shape_src.items()) zero.set(name, Tensor(t.shape(), 0.0));
  const Tensor core = random_tensor({4, 3}, rng), sur = random_tensor({4, 3}, rng);
  CHECK(fuse_context(core, sur, zero, hc) == Tensor({4, 3}, 0.0));

  const ParameterSet head = init_context_head(hc, rng);
  const Tensor q = fuse_context(core, sur, head, hc);
  // Manual layer-by-layer evaluation.
  const MlpShape shape = hc.fusion_shape();
  for (std::size_t n = 0; n < 4; ++n) {
    std::vector<double> x{core.at(n, 0), core.at(n, 1), core.at(n, 2), sur.at(n, 0), sur.at(n, 1), sur.at(n, 2)};
    for (std::size_t l = 0; l < shape.layers(); ++l) {
      const Tensor& w = head.at("fusion.w" + std::to_string(l));
      const Tensor& b = head.at("fusion.b" + std::to_string(l));
      std::vector<double> y(w.cols());
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double s = b[j];
        for (std::size_t i = 0; i < w.rows(); ++i) s += x[i] * w.at(i, j);
        y[j] = std::max(0.0, s);
      }
      x = y;
    }
    for (std::size_t j = 0; j < 3; ++j) CHECK(q.at(n, j) == doctest::Approx(x[j]).epsilon(1e-13));
  }
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  CHECK(fuse_context(permute_rows(core, perm), permute_rows(sur, perm), head, hc) == permute_rows(q, perm));
  Tape tape;
  BoundParams hp(tape, head, false);
  CHECK(max_abs_diff(fuse_context(hp, hc, tape.constant(core), tape.constant(sur)).value(), q) <= 1e-14);
}

TEST_CASE("random 2-3-3-2 MLP matches a hand-rolled evaluation") {
  const MlpShape shape{{2, 3, 3, 2}, true};
  CounterRng rng(19);
  const ParameterSet p = init_mlp(shape, rng);
  const Tensor x = Tensor::from_rows({{0.3, -0.7}});
  const Tensor y = mlp_forward(p, shape, x);
  std::vector<double> h{0.3, -0.7};
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor& w = p.at("w" + std::to_string(l));
    const Tensor& b = p.at("b" + std::to_string(l));
    std::vector<double> o(w.cols());
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = b[j];
      for (std::size_t i = 0; i < w.rows(); ++i) s += h[i] * w.at(i, j);
      o[j] = s > 0 ? s : 0.0;
    }
    h = o;
  }
  CHECK(y.at(0, 0) == doctest::Approx(h[0]).epsilon(1e-14));
  CHECK(y.at(0, 1) == doctest::Approx(h[1]).epsilon(1e-14));
  const MlpShape ident{{3, 3, 3, 3}, true};
  const Tensor nonneg = Tensor::from_rows({{0.5, 0.0, 2.0}});
  CHECK(mlp_forward(identity_mlp(ident), ident, nonneg) == nonneg);
}

TEST_CASE("compute_context on a generated frame is finite with zero rows for empty bands") {
  const Scenario s = generate_scenario(twin_family_config(3));
  ContextHeadConfig hc;
  CounterRng rng(20);
  const ParameterSet head = init_context_head(hc, rng);
  for (const auto& f : s.frames) {
    const ContextEmbeddings e = compute_context(f.observation, head, hc);
    CHECK(e.fused.all_finite());
    for (std::size_t n = 0; n < e.band_sizes.size(); ++n)
      if (e.band_sizes[n] == 0)
        for (double v : e.surrounding.row(n)) CHECK(v == 0.0);
  }
}

TEST_CASE("learnable kernel is read from the head") {
  ContextHeadConfig hc;
  hc.kernel_mode = KernelMode::learnable;
  hc.kernel_size = 5;
  CounterRng rng(21);
  ParameterSet head = init_context_head(hc, rng);
  CHECK(head.contains("kernel"));
  CHECK(context_kernel(hc, head).weights == Kernel2D::average(5).weights);
  Tensor k({5, 5}, 0.0);
  k.at(2, 2) = 1.0;
  head.set("kernel", k);
  CHECK(context_kernel(hc, head).weights == k);
}
