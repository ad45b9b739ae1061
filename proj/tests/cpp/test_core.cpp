#include <cmath>

#include "doctest.h"
#include "test_support.hpp"

using namespace ctxtrack;
using namespace ctxtrack::testing;

namespace {

void require_grad(const GradCheckResult& r) {
  INFO(r.failure);
  CHECK(r.ok);
}

}  // namespace

TEST_CASE("rng matches the SplitMix64 reference stream") {
  CounterRng r(0);
  CHECK(r.next_u64() == 0xE220A8397B1DCDAFull);
  CHECK(r.next_u64() == 0x6E789E6AA1B965F4ull);
  CHECK(r.counter() == 2);
}

TEST_CASE("rng streams are reproducible and split independently") {
  CounterRng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  CounterRng c = CounterRng(42).split(1), d = CounterRng(42).split(2);
  CHECK(c.next_u64() != d.next_u64());
  CounterRng p(9);
  auto perm = p.permutation(20);
  std::sort(perm.begin(), perm.end());
  for (std::size_t i = 0; i < 20; ++i) CHECK(perm[i] == i);
  CounterRng u(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
    CHECK(u.below(7) < 7);
  }
}

TEST_CASE("tensor shape checks") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), ConfigError);
  const Tensor t = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6.0);
  CHECK(t.reshaped({3, 2}).at(2, 1) == 6.0);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ConfigError);
}

TEST_CASE("backward requires a scalar on the same tape") {
  Tape tape, other;
  Var x = tape.variable(Tensor({2}, 1.0));
  CHECK_THROWS_AS(tape.backward(x), ContractViolation);
  Var y = other.variable(Tensor({1}, 1.0));
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);
  CHECK_THROWS_AS(ops::add(x, y), ContractViolation);
}

TEST_CASE("gradients accumulate over fan-out") {
  Tape tape;
  Var x = tape.variable(Tensor({1}, {3.0}));
  Var y = ops::add(ops::mul(x, x), ops::scale(x, 2.0));
  tape.backward(y);
  CHECK(tape.grad(x)[0] == doctest::Approx(8.0));
}

TEST_CASE("elementwise, matrix and reduction ops match finite differences") {
  CounterRng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(4), d = 1 + rng.below(5), m = 1 + rng.below(4);
    const Tensor w = random_tensor({n, m}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) {
          Var a = ops::add(ops::mul(v[0], v[1]), ops::sub(v[0], ops::scale(v[1], 0.5)));
          return weighted_sum(t, ops::matmul(a, v[2]), w);
        },
        {random_tensor({n, d}, rng), random_tensor({n, d}, rng), random_tensor({d, m}, rng)}, rng));
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::matmul_nt(v[0], v[1]), w); },
        {random_tensor({n, d}, rng), random_tensor({m, d}, rng)}, rng));
    const Tensor wd = random_tensor({n, d}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) {
          return weighted_sum(t, ops::mul_row(ops::add_row(v[0], v[1]), v[2]), wd);
        },
        {random_tensor({n, d}, rng), random_tensor({d}, rng), random_tensor({d}, rng)}, rng));
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::softmax_rows(v[0]), wd); },
        {random_tensor({n, d}, rng, -3, 3)}, rng));
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::normalize_rows(v[0]), wd); },
        {random_tensor({n, d}, rng)}, rng));
  }
}

TEST_CASE("layer norm, concat, gather, reshape and convolution gradients") {
  CounterRng rng(202);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(4), d = 2 + rng.below(5);
    const Tensor wd = random_tensor({n, d}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::layer_norm_rows(v[0], v[1], v[2]), wd); },
        {random_tensor({n, d}, rng), random_tensor({d}, rng), random_tensor({d}, rng)}, rng));
    const Tensor wc = random_tensor({n, 2 * d}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::concat_cols(v[0], v[1]), wc); },
        {random_tensor({n, d}, rng), random_tensor({n, d}, rng)}, rng));
    const Tensor wr = random_tensor({2 * n, d}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::concat_rows({v[0], v[1]}), wr); },
        {random_tensor({n, d}, rng), random_tensor({n, d}, rng)}, rng));
    const std::vector<std::size_t> idx{n - 1, 0, n - 1};
    const Tensor wg = random_tensor({3, d}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::gather_rows(v[0], idx), wg); },
        {random_tensor({n, d}, rng)}, rng));
    const Tensor wflat = random_tensor({n * d}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::reshape(v[0], {n * d}), wflat); },
        {random_tensor({n, d}, rng)}, rng));
    const std::size_t h = 3 + rng.below(4), w = 3 + rng.below(4), c = 1 + rng.below(3);
    const std::size_t k = rng.below(2) ? 3 : 5;
    const Tensor wo = random_tensor({h, w, c}, rng);
    require_grad(check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::conv2d_same(v[0], v[1]), wo); },
        {random_tensor({h, w, c}, rng), random_tensor({k, k}, rng)}, rng));
  }
}

TEST_CASE("contrastive_sum matches its direct definition") {
  CounterRng rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.below(4);
    const Tensor s = random_tensor({n, n}, rng, -2, 2);
    ops::ContrastiveTerm term{0, {1}, {}};
    for (std::size_t j = 2; j < n; ++j) term.negatives.push_back(j);
    Tape tape;
    const double got = ops::contrastive_sum(tape.constant(s), {term}).value()[0];
    double inner = 0.0;
    for (std::size_t q : term.negatives) inner += std::exp(s.at(0, q) - s.at(0, 1));
    CHECK(got == doctest::Approx(std::log1p(inner)).epsilon(1e-12));
    ops::ContrastiveTerm none{0, {}, {1}};
    Tape t2;
    CHECK(ops::contrastive_sum(t2.constant(s), {none}).value()[0] == 0.0);
  }
}

TEST_CASE("loss and network gradient suites") {
  CounterRng rng(404);
  for (int i = 0; i < 25; ++i) {
    require_grad(grad_instance_emb(rng));
    require_grad(grad_instance_ctx(rng));
    require_grad(grad_instance_pcc(rng));
    require_grad(grad_instance_bce(rng));
    require_grad(grad_instance_dice(rng));
    require_grad(grad_instance_ce(rng));
    require_grad(grad_instance_mlp(rng));
  }
  for (int i = 0; i < 10; ++i) require_grad(grad_instance_attention(rng));
}

TEST_CASE("hungarian agrees with exhaustive search") {
  CounterRng rng(505);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t a = 1 + rng.below(6), b = 1 + rng.below(6);
    // Small integer costs produce ties; the tie-break must still agree.
    const bool ties = trial % 2 == 0;
    Tensor cost({a, b});
    for (auto& v : cost.storage()) v = ties ? double(rng.below(3)) : rng.uniform(-5, 5);
    const Assignment got = hungarian(cost), want = brute_force_assignment(cost);
    INFO("trial " << trial << " " << a << "x" << b);
    CHECK(got.is_injective());
    CHECK(assignment_cost(cost, got) == doctest::Approx(assignment_cost(cost, want)).epsilon(1e-12));
    CHECK(got.target_of == want.target_of);
  }
}

TEST_CASE("hungarian edge cases") {
  CHECK(hungarian(Tensor({0, 3})).target_of.empty());
  const Assignment a = hungarian(Tensor({3, 0}));
  CHECK(a.target_of == std::vector<std::size_t>(3, Assignment::npos));
  Tensor bad({2, 2}, 0.0);
  bad.at(0, 1) = std::nan("");
  CHECK_THROWS_AS(hungarian(bad), ContractViolation);
  CHECK_THROWS_AS(hungarian(Tensor({4})), ConfigError);
  const Assignment eq = hungarian(Tensor({3, 3}, 1.0));
  CHECK(eq.target_of == std::vector<std::size_t>{0, 1, 2});
  const auto inv = hungarian(Tensor::from_rows({{5, 0}, {0, 5}})).source_of();
  CHECK(inv == std::vector<std::size_t>{1, 0});
}

TEST_CASE("adamw: zero learning rate leaves parameters unchanged") {
  CounterRng rng(606);
  ParameterSet p;
  p.set("w", random_tensor({3, 2}, rng));
  p.set("b", random_tensor({2}, rng));
  const ParameterSet before = p;
  AdamW opt({});
  std::map<std::string, Tensor> g{{"w", random_tensor({3, 2}, rng)}, {"b", random_tensor({2}, rng)}};
  opt.step(p, g, 0.0);
  CHECK(p == before);
}

TEST_CASE("adamw decays matrices but not vectors") {
  ParameterSet p;
  p.set("w", Tensor({1, 1}, {1.0}));
  p.set("b", Tensor({1}, {1.0}));
  AdamWConfig cfg;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  opt.step(p, {{"w", Tensor({1, 1}, 0.0)}, {"b", Tensor({1}, 0.0)}}, 0.1);
  CHECK(p.at("w")[0] == doctest::Approx(0.95));
  CHECK(p.at("b")[0] == 1.0);
}

TEST_CASE("adamw first step moves by the learning rate against the gradient") {
  ParameterSet p;
  p.set("b", Tensor({2}, {0.0, 0.0}));
  AdamW opt({});
  opt.step(p, {{"b", Tensor({2}, {3.0, -0.1})}}, 0.01);
  CHECK(p.at("b")[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p.at("b")[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("step-down schedule drops tenfold at 70 percent") {
  CHECK(step_down_lr(1.0, 0, 100) == 1.0);
  CHECK(step_down_lr(1.0, 69, 100) == 1.0);
  CHECK(step_down_lr(1.0, 70, 100) == doctest::Approx(0.1));
  CHECK(step_down_lr(1.0, 99, 100) == doctest::Approx(0.1));
}

TEST_CASE("mlp identity initialisation passes inputs through") {
  const MlpShape shape{{3, 3, 3}, false};
  const ParameterSet p = identity_mlp(shape);
  const Tensor x = Tensor::from_rows({{1, -2, 3}});
  const Tensor y = mlp_forward(p, shape, x);
  CHECK(y.at(0, 0) == 1.0);
  CHECK(y.at(0, 1) == 0.0);  // ReLU after the hidden layer
  CHECK(y.at(0, 2) == 3.0);
  CounterRng rng(1);
  CHECK_THROWS_AS(mlp_forward(init_mlp(shape, rng), shape, Tensor({1, 4})), ConfigError);
}
