#include <cmath>

#include "ctxtrack/scenario.hpp"
#include "ctxtrack/training.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace ctxtrack;
using namespace ctxtrack::testing;

namespace {

ParameterSet perturbed_tracker(const TrackerConfig& tc, CounterRng& rng, double scale) {
  ParameterSet p = init_tracker_params(tc, rng);
  const ParameterSet base = p;
  for (const auto& [name, t] : base.items()) {
    Tensor x = t;
    for (auto& v : x.storage()) v += scale * rng.normal();
    p.set(name, x);
  }
  return p;
}

std::vector<FrameInputs> frame_inputs(const Scenario& s, const ParameterSet& head, const ContextHeadConfig& hc) {
  return prepare_tracker_video(s, head, hc).frames;
}

double max_diff(const TrackedVideo& a, const TrackedVideo& b) {
  double d = 0.0;
  for (std::size_t t = 0; t < a.ordered.size(); ++t) {
    d = std::max(d, max_abs_diff(a.ordered[t].masks, b.ordered[t].masks));
    d = std::max(d, max_abs_diff(a.ordered[t].class_logits, b.ordered[t].class_logits));
    d = std::max(d, max_abs_diff(a.states[t].core, b.states[t].core));
    d = std::max(d, max_abs_diff(a.states[t].fused, b.states[t].fused));
  }
  return d;
}

/// Two distinct objects crossing horizontally on separate rows.
ScenarioConfig crossing_config(std::uint64_t seed) {
  ScenarioConfig c;
  c.height = c.width = 48;
  c.channels = 8;
  c.classes = 2;
  c.frames = 10;
  c.slots = 2;
  c.seed = seed;
  ObjectSpec a;
  a.y = 16;
  a.x = 8;
  a.vx = 3.0;
  a.appearance = {4, 0, 0, 0, 0, 0, 0, 0};
  ObjectSpec b = a;
  b.y = 30;
  b.x = 40;
  b.vx = -3.0;
  b.label = 1;
  b.appearance = {0, 4, 0, 0, 0, 0, 0, 0};
  c.objects = {a, b};
  return c;
}

}  // namespace

TEST_CASE("context cross-attention examples") {
  CounterRng rng(41);
  const Tensor values = random_tensor({3, 4}, rng);
  // A query aligned with one key scaled large selects that key's value.
  const Tensor keys = random_orthonormal(3, 4, rng);
  Tensor query({1, 4});
  for (std::size_t c = 0; c < 4; ++c) query[c] = 100.0 * keys.at(1, c);
  const Tensor out = context_cross_attention(query, keys, values);
  for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(0, c) == doctest::Approx(values.at(1, c)).epsilon(1e-12));
  // Identical keys: uniform attention.
  const Tensor same({3, 4}, 0.5);
  const Tensor mean = context_cross_attention(random_tensor({2, 4}, rng), same, values);
  for (std::size_t c = 0; c < 4; ++c) {
    const double m = (values.at(0, c) + values.at(1, c) + values.at(2, c)) / 3.0;
    CHECK(mean.at(0, c) == doctest::Approx(m).epsilon(1e-12));
    CHECK(mean.at(1, c) == doctest::Approx(m).epsilon(1e-12));
  }
  // Single detection.
  const Tensor v1 = random_tensor({1, 4}, rng);
  const Tensor single = context_cross_attention(random_tensor({3, 4}, rng), random_tensor({1, 4}, rng), v1);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(single.at(r, c) == doctest::Approx(v1.at(0, c)).epsilon(1e-14));
}

TEST_CASE("cross-attention rows lie in the convex hull of the values") {
  CounterRng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    const Tensor v = random_tensor({n, 3}, rng);
    const Tensor out = context_cross_attention(random_tensor({n, 3}, rng, -3, 3), random_tensor({n, 3}, rng, -3, 3), v);
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < n; ++r) {
        lo = std::min(lo, v.at(r, c));
        hi = std::max(hi, v.at(r, c));
      }
      for (std::size_t r = 0; r < n; ++r) {
        CHECK(out.at(r, c) >= lo - 1e-12);
        CHECK(out.at(r, c) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("a fresh tracker without query/key norms is the plain cross-attention") {
  CounterRng rng(43);
  for (KeySource ks : {KeySource::core, KeySource::fused}) {
    TrackerConfig tc;
    tc.channels = 6;
    tc.cross_norm = false;
    tc.key_source = ks;
    ContextHeadConfig hc;
    hc.channels = 6;
    const ParameterSet tracker = init_tracker_params(tc, rng), head = init_context_head(hc, rng);
    const FrameInputs f{random_tensor({4, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4, 6}, rng),
                        random_tensor({4, 2, 2}, rng, 0, 1), random_tensor({4, 3}, rng)};
    const Tensor prev = random_tensor({4, 6}, rng);
    Tape tape;
    const BoundParams tp(tape, tracker, false), hp(tape, head, false);
    const StepVars s = tracker_step(tp, hp, tc, hc, tape.constant(prev), f);
    const Tensor want = context_cross_attention(prev, ks == KeySource::fused ? f.fused : f.core, f.core);
    CHECK(max_abs_diff(s.ordered_core.value(), want) <= 1e-12);
  }
}

TEST_CASE("align_context identity and planted permutations") {
  CounterRng rng(44);
  const Tensor core = random_orthonormal(4, 6, rng), sur = random_tensor({4, 6}, rng);
  const Alignment id = align_context(core, core, sur);
  CHECK(id.aligned == sur);
  CHECK(id.detection_to_slot.target_of == std::vector<std::size_t>{0, 1, 2, 3});

  std::size_t recovered = 0, trials = 0;
  for (std::size_t n = 1; n <= 6; ++n)
    for (int t = 0; t < 170; ++t) {
      const Tensor q = random_orthonormal(n, 8, rng), s = random_tensor({n, 8}, rng);
      const auto perm = rng.permutation(n);  // detection i is slot perm[i]
      Tensor ordered({n, 8});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 8; ++c) ordered.at(perm[i], c) = q.at(i, c);
      const Tensor cos = cosine_matrix(q, ordered);
      bool permutation_matrix = true;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          permutation_matrix &= std::abs(cos.at(i, j) - (perm[i] == j ? 1.0 : 0.0)) < 1e-12;
      CHECK(permutation_matrix);
      const Alignment a = align_context(ordered, q, s);
      ++trials;
      recovered += a.detection_to_slot.target_of == perm;
      // Reading the aligned rows back through the inverse reproduces the input.
      CHECK(permute_rows(a.aligned, perm) == s);
    }
  CHECK(trials >= 1000);
  CHECK(recovered == trials);
}

TEST_CASE("cosine treats zero rows as dissimilar to everything") {
  const Tensor a = Tensor::from_rows({{0, 0}, {1, 0}});
  const Tensor c = cosine_matrix(a, a);
  CHECK(c.at(0, 0) == 0.0);
  CHECK(c.at(0, 1) == 0.0);
  CHECK(c.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("a tracker step is equivariant to detection order") {
  CounterRng rng(45);
  for (int trial = 0; trial < 40; ++trial)
    for (bool align : {true, false})
      for (KeySource ks : {KeySource::fused, KeySource::core}) {
        TrackerConfig tc;
        tc.channels = 6;
        tc.blocks = 2;
        tc.align_context = align;
        tc.key_source = ks;
        ContextHeadConfig hc;
        hc.channels = 6;
        const ParameterSet tracker = perturbed_tracker(tc, rng, 0.1), head = init_context_head(hc, rng);
        const std::size_t n = 2 + rng.below(5);
        const FrameInputs f{random_tensor({n, 6}, rng), random_tensor({n, 6}, rng), random_tensor({n, 6}, rng),
                            random_tensor({n, 3, 3}, rng, 0, 1), random_tensor({n, 3}, rng)};
        const Tensor prev = random_tensor({n, 6}, rng);
        const auto perm = rng.permutation(n);
        Tape tape;
        const BoundParams tp(tape, tracker, false), hp(tape, head, false);
        const StepVars a = tracker_step(tp, hp, tc, hc, tape.constant(prev), f);
        const StepVars b = tracker_step(tp, hp, tc, hc, tape.constant(prev), permute_detections(f, perm));
        CHECK(max_abs_diff(a.ordered_core.value(), b.ordered_core.value()) <= 1e-9);
        CHECK(max_abs_diff(a.slot_masks.value(), b.slot_masks.value()) <= 1e-9);
        CHECK(max_abs_diff(a.slot_logits.value(), b.slot_logits.value()) <= 1e-9);
        if (align) CHECK(max_abs_diff(a.next_query.value(), b.next_query.value()) <= 1e-9);
      }
}

TEST_CASE("tracked videos are invariant to detection order") {
  ContextHeadConfig hc;
  CounterRng rng(46);
  const ParameterSet head = init_context_head(hc, rng);
  for (std::uint64_t seed : {1, 2, 3}) {
    const Scenario s = generate_scenario(twin_family_config(seed));
    const auto frames = frame_inputs(s, head, hc);
    auto shuffled = frames;
    for (std::size_t t = 1; t < shuffled.size(); ++t)
      shuffled[t] = permute_detections(frames[t], rng.permutation(frames[t].core.rows()));
    TrackerConfig tc;
    const ParameterSet tracker = perturbed_tracker(tc, rng, 0.05);
    CHECK(max_diff(track_video(frames, tracker, tc, head, hc), track_video(shuffled, tracker, tc, head, hc)) == 0.0);
    // Core keys collapse twin slots onto near-identical rows, so this exercises exact ties.
    tc.key_source = KeySource::core;
    const ParameterSet core_tracker = perturbed_tracker(tc, rng, 0.05);
    CHECK(max_diff(track_video(frames, core_tracker, tc, head, hc), track_video(shuffled, core_tracker, tc, head, hc)) ==
          0.0);
  }
}

TEST_CASE("frame-1 detection order fixes slot order") {
  ContextHeadConfig hc;
  TrackerConfig tc;
  CounterRng rng(146);
  const ParameterSet head = init_context_head(hc, rng), tracker = init_tracker_params(tc, rng);
  const Scenario s = generate_scenario(twin_family_config(7));
  const auto frames = frame_inputs(s, head, hc);
  const TrackedVideo one = track_video({frames[0]}, tracker, tc, head, hc);
  CHECK(one.ordered.size() == 1);
  CHECK(one.ordered[0].masks == frames[0].masks);
  CHECK(one.ordered[0].class_logits == frames[0].class_logits);
  CHECK(initial_state(frames[0]).fused == frames[0].fused);

  // Shuffling frame 1 permutes every later frame's slots the same way.
  const auto perm = rng.permutation(frames[0].core.rows());
  auto shuffled = frames;
  shuffled[0] = permute_detections(frames[0], perm);
  const TrackedVideo a = track_video(frames, tracker, tc, head, hc), b = track_video(shuffled, tracker, tc, head, hc);
  double d = 0.0;
  for (std::size_t t = 0; t < frames.size(); ++t)
    d = std::max(d, max_abs_diff(b.ordered[t].masks, permute_rows(a.ordered[t].masks, perm)));
  CHECK(d <= 1e-9);
}

TEST_CASE("repeating a frame keeps slot order") {
  ContextHeadConfig hc;
  TrackerConfig tc;
  CounterRng rng(47);
  const ParameterSet head = init_context_head(hc, rng), tracker = init_tracker_params(tc, rng);
  const Scenario s = generate_scenario(twin_family_config(8));
  const auto frames = frame_inputs(s, head, hc);
  const TrackedVideo v = track_video({frames[3], frames[3], frames[3]}, tracker, tc, head, hc);
  for (const auto& st : v.states) {
    for (std::size_t slot = 0; slot < st.slot_detection.size(); ++slot) {
      const std::size_t d = st.slot_detection[slot];
      // Padding rows are interchangeable; every visible detection stays in its slot.
      if (s.frames[3].detection_object[d] != Assignment::npos) CHECK(d == slot);
    }
  }
}

TEST_CASE("crossing objects with distinct appearance keep their identities") {
  ContextHeadConfig hc;
  hc.channels = 8;
  TrackerConfig tc;
  tc.channels = 8;
  tc.key_source = KeySource::core;
  CounterRng rng(48);
  const ParameterSet head = init_context_head(hc, rng), tracker = init_tracker_params(tc, rng);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scenario s = generate_scenario(crossing_config(seed));
    const auto frames = frame_inputs(s, head, hc);
    const TrackedVideo v = track_video(frames, tracker, tc, head, hc);
    const auto oracle = oracle_slot_detections(s);
    std::vector<Tensor> oracle_masks;
    for (std::size_t t = 0; t < frames.size(); ++t) oracle_masks.push_back(ordered_prediction(frames[t], oracle[t]).masks);
    const AssociationMetrics got = evaluate_association(v.ordered, s.gt);
    CHECK(got.accuracy == evaluate_association(oracle_masks, s.gt).accuracy);
    CHECK(got.accuracy == 1.0);
    CHECK(got.id_switches == 0);
  }
}

TEST_CASE("single-object video is trivially consistent") {
  ScenarioConfig c = crossing_config(3);
  c.objects.resize(1);
  c.slots = 1;
  ContextHeadConfig hc;
  hc.channels = 8;
  TrackerConfig tc;
  tc.channels = 8;
  CounterRng rng(49);
  const ParameterSet head = init_context_head(hc, rng), tracker = init_tracker_params(tc, rng);
  const Scenario s = generate_scenario(c);
  const TrackedVideo v = track_video(frame_inputs(s, head, hc), tracker, tc, head, hc);
  CHECK(evaluate_association(v.ordered, s.gt).accuracy == 1.0);
}

TEST_CASE("tracking is deterministic") {
  ContextHeadConfig hc;
  TrackerConfig tc;
  CounterRng r1(50), r2(50);
  const ParameterSet h1 = init_context_head(hc, r1), t1 = perturbed_tracker(tc, r1, 0.1);
  const ParameterSet h2 = init_context_head(hc, r2), t2 = perturbed_tracker(tc, r2, 0.1);
  CHECK(t1 == t2);
  const Scenario s = generate_scenario(twin_family_config(9));
  CHECK(max_diff(track_video(frame_inputs(s, h1, hc), t1, tc, h1, hc),
                 track_video(frame_inputs(s, h2, hc), t2, tc, h2, hc)) == 0.0);
}

TEST_CASE("one-step clip loss gradient matches finite differences") {
  ContextHeadConfig hc;
  TrackerConfig tc;
  CounterRng rng(51);
  const ParameterSet head = init_context_head(hc, rng);
  const Scenario s = generate_scenario(twin_family_config(10));
  const TrackerVideo video = prepare_tracker_video(s, head, hc);
  ParameterSet tracker = perturbed_tracker(tc, rng, 0.05);
  const LossWeights w;
  std::map<std::string, Tensor> grads;
  clip_tracker_loss(video, 4, 2, tracker, tc, head, hc, w, &grads);
  std::size_t checked = 0;
  for (const std::string name : {"b0.cross.wq", "b0.cross.wk", "b0.lnq.g", "b0.lnk.b", "b0.cross.bq"}) {
    for (int i = 0; i < 3; ++i) {
      Tensor x = tracker.at(name);
      const std::size_t j = rng.below(x.size());
      const double orig = x[j], h = 1e-6;
      x[j] = orig + h;
      tracker.set(name, x);
      const double up = clip_tracker_loss(video, 4, 2, tracker, tc, head, hc, w);
      x[j] = orig - h;
      tracker.set(name, x);
      const double down = clip_tracker_loss(video, 4, 2, tracker, tc, head, hc, w);
      x[j] = orig;
      tracker.set(name, x);
      INFO(name << "[" << j << "]");
      CHECK(gradient_close(grads.at(name)[j], (up - down) / (2 * h)));
      ++checked;
    }
  }
  CHECK(checked == 15);
}

TEST_CASE("tracker configuration names") {
  CHECK(key_source_from_string("core") == KeySource::core);
  CHECK(key_source_from_string("fused") == KeySource::fused);
  CHECK_THROWS_AS(key_source_from_string("both"), ConfigError);
  TrackerConfig tc;
  ContextHeadConfig hc;
  CounterRng rng(52);
  const ParameterSet head = init_context_head(hc, rng), tracker = init_tracker_params(tc, rng);
  const FrameInputs bad{Tensor({3, 5}), Tensor({3, 5}), Tensor({3, 5}), Tensor({3, 2, 2}), Tensor({3, 2})};
  CHECK_THROWS_AS(tracker_step(initial_state(bad), bad, tracker, tc, head, hc), ConfigError);
}

TEST_CASE("zero training steps return the initial tracker") {
  ContextHeadConfig hc;
  TrackerConfig tc;
  CounterRng rng(53);
  const ParameterSet head = init_context_head(hc, rng);
  const std::vector<TrackerVideo> videos{prepare_tracker_video(generate_scenario(twin_family_config(11)), head, hc)};
  TrackerTrainConfig train;
  train.steps = 0;
  train.seed = 99;
  CounterRng init = CounterRng(99).split(21);
  CHECK(train_tracker(videos, tc, head, hc, train).tracker == init_tracker_params(tc, init));
}
