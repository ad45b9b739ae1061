#include "ctxtrack/tracker.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "ctxtrack/kernels.hpp"

namespace ctxtrack {

std::string to_string(KeySource k) { return k == KeySource::core ? "core" : "fused"; }

KeySource key_source_from_string(const std::string& name) {
  if (name == "core") return KeySource::core;
  if (name == "fused") return KeySource::fused;
  throw ConfigError("unknown key source '" + name + "'");
}

namespace {

std::string blk(std::size_t b) { return "b" + std::to_string(b) + "."; }

/// Row r of a tensor whose leading dimension indexes detections.
std::pair<const double*, const double*> detection_row(const Tensor& t, std::size_t r) {
  const std::size_t stride = t.size() / t.dim(0);
  const double* begin = t.storage().data() + r * stride;
  return {begin, begin + stride};
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& src) {
  Tensor out(t.shape());
  const std::size_t stride = t.size() / t.dim(0);
  for (std::size_t i = 0; i < src.size(); ++i)
    std::copy_n(t.storage().begin() + static_cast<std::ptrdiff_t>(src[i] * stride), stride,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
  return out;
}

/// Detections sorted by content, core first, so tie-breaks do not depend on arrival order.
std::vector<std::size_t> content_order(const FrameInputs& f) {
  std::vector<std::size_t> order(f.core.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::array<const Tensor*, 5> fields{&f.core, &f.class_logits, &f.masks, &f.surrounding, &f.fused};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (const Tensor* t : fields) {
      const auto [a0, a1] = detection_row(*t, a);
      const auto [b0, b1] = detection_row(*t, b);
      const auto [pa, pb] = std::mismatch(a0, a1, b0);
      if (pa != a1) return *pa < *pb;
    }
    return false;
  });
  return order;
}

FrameInputs gather_detections(const FrameInputs& f, const std::vector<std::size_t>& src) {
  return {gather_rows(f.core, src), gather_rows(f.surrounding, src), gather_rows(f.fused, src),
          gather_rows(f.masks, src), gather_rows(f.class_logits, src)};
}

Tensor identity(std::size_t c) {
  Tensor t({c, c}, 0.0);
  for (std::size_t i = 0; i < c; ++i) t.at(i, i) = 1.0;
  return t;
}

void add_attention(ParameterSet& p, const std::string& prefix, std::size_t c, bool zero_output) {
  for (const char* n : {"q", "k", "v"}) {
    p.set(prefix + "w" + n, identity(c));
    p.set(prefix + "b" + n, Tensor({c}, 0.0));
  }
  p.set(prefix + "wo", zero_output ? Tensor({c, c}, 0.0) : identity(c));
  p.set(prefix + "bo", Tensor({c}, 0.0));
}

Var linear(const BoundParams& p, const std::string& w, const std::string& b, Var x) {
  return ops::add_row(ops::matmul(x, p[w]), p[b]);
}

struct AttentionOut {
  Var mixed;  // before the output projection
  Var logits;
  Var weights;
};

AttentionOut attention(const BoundParams& p, const std::string& prefix, Var q, Var k, Var v,
                              std::size_t channels) {
  Var qp = linear(p, prefix + "wq", prefix + "bq", q);
  Var kp = linear(p, prefix + "wk", prefix + "bk", k);
  Var vp = linear(p, prefix + "wv", prefix + "bv", v);
  Var logits = ops::scale(ops::matmul_nt(qp, kp), 1.0 / std::sqrt(static_cast<double>(channels)));
  Var weights = ops::softmax_rows(logits);
  return {ops::matmul(weights, vp), logits, weights};
}

Tensor flat_masks(const Tensor& masks) { return masks.reshaped({masks.dim(0), masks.size() / masks.dim(0)}); }

}  // namespace

ParameterSet init_tracker_params(const TrackerConfig& config, CounterRng& rng) {
  const std::size_t c = config.channels;
  const std::size_t hidden = c * config.ffn_multiplier;
  ParameterSet p;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    const auto pre = blk(b);
    add_attention(p, pre + "cross.", c, b > 0);
    add_attention(p, pre + "self.", c, true);
    for (const char* ln : {"ln1.", "ln2."}) {
      p.set(pre + ln + "g", Tensor({c}, 1.0));
      p.set(pre + ln + "b", Tensor({c}, 0.0));
    }
    if (config.cross_norm)
      for (const char* ln : {"lnq.", "lnk."}) {
        p.set(pre + ln + "g", Tensor({c}, config.cross_norm_gain));
        p.set(pre + ln + "b", Tensor({c}, 0.0));
      }
    const double bound = std::sqrt(6.0 / static_cast<double>(c));
    Tensor w1({c, hidden});
    for (auto& v : w1.storage()) v = rng.uniform(-bound, bound);
    p.set(pre + "ffn.w1", std::move(w1));
    p.set(pre + "ffn.b1", Tensor({hidden}, 0.0));
    p.set(pre + "ffn.w2", Tensor({hidden, c}, 0.0));
    p.set(pre + "ffn.b2", Tensor({c}, 0.0));
  }
  return p;
}

Tensor context_cross_attention(const Tensor& query, const Tensor& key, const Tensor& value) {
  if (query.cols() != key.cols() || key.rows() != value.rows())
    throw ConfigError("cross attention shape mismatch");
  Tensor logits = matmul_nt(query, key);
  const double s = 1.0 / std::sqrt(static_cast<double>(query.cols()));
  for (auto& v : logits.storage()) v *= s;
  return matmul(softmax_rows(logits), value);
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  auto norms = [](const Tensor& x) {
    std::vector<double> n(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0.0;
      for (double v : x.row(r)) s += v * v;
      n[r] = std::sqrt(s);
    }
    return n;
  };
  const auto na = norms(a), nb = norms(b);
  Tensor out = matmul_nt(a, b);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double d = na[i] * nb[j];
      out.at(i, j) = d > 0.0 ? out.at(i, j) / d : 0.0;
    }
  return out;
}

Alignment align_context(const Tensor& ordered_core, const Tensor& core, const Tensor& surrounding) {
  if (ordered_core.shape() != core.shape() || surrounding.rows() != core.rows())
    throw ConfigError("align_context shape mismatch");
  Tensor cost = cosine_matrix(core, ordered_core);
  for (auto& v : cost.storage()) v = -v;
  Alignment out;
  out.detection_to_slot = hungarian(cost);
  out.aligned = Tensor(surrounding.shape(), 0.0);
  const std::size_t c = surrounding.cols();
  for (auto [n, slot] : out.detection_to_slot.pairs())
    std::copy_n(surrounding.row(n).begin(), c, out.aligned.row(slot).begin());
  return out;
}

FrameInputs make_frame_inputs(const InstanceObservation& obs, const ContextEmbeddings& ctx) {
  return {obs.core, ctx.surrounding, ctx.fused, obs.masks, obs.class_scores};
}

TrackState initial_state(const FrameInputs& frame) {
  TrackState s;
  s.core = frame.core;
  s.fused = frame.fused;
  s.slot_detection.resize(frame.core.rows());
  for (std::size_t i = 0; i < s.slot_detection.size(); ++i) s.slot_detection[i] = i;
  return s;
}

StepVars tracker_step(const BoundParams& tracker, const BoundParams& head, const TrackerConfig& config,
                      const ContextHeadConfig& head_config, Var prev_query, const FrameInputs& frame) {
  Tape& tape = tracker.tape();
  const std::size_t c = config.channels;
  if (frame.core.cols() != c || prev_query.value().cols() != c)
    throw ConfigError("tracker expects " + std::to_string(c) + "-wide embeddings");
  Var value = tape.constant(frame.core);
  Var key = config.key_source == KeySource::fused ? tape.constant(frame.fused) : value;

  StepVars out;
  Var h;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    const auto pre = blk(b);
    Var q = prev_query, k = key;
    if (config.cross_norm) {
      q = ops::layer_norm_rows(q, tracker[pre + "lnq.g"], tracker[pre + "lnq.b"]);
      k = ops::layer_norm_rows(k, tracker[pre + "lnk.g"], tracker[pre + "lnk.b"]);
    }
    AttentionOut cross = attention(tracker, pre + "cross.", q, k, value, c);
    Var projected = linear(tracker, pre + "cross.wo", pre + "cross.bo", cross.mixed);
    if (b == 0) {
      out.attention_logits = cross.logits;
      out.attention = cross.weights;
      h = projected;
    } else {
      h = ops::add(h, projected);
    }
    Var n1 = ops::layer_norm_rows(h, tracker[pre + "ln1.g"], tracker[pre + "ln1.b"]);
    AttentionOut self = attention(tracker, pre + "self.", n1, n1, n1, c);
    h = ops::add(h, linear(tracker, pre + "self.wo", pre + "self.bo", self.mixed));
    Var n2 = ops::layer_norm_rows(h, tracker[pre + "ln2.g"], tracker[pre + "ln2.b"]);
    Var ff = ops::relu(linear(tracker, pre + "ffn.w1", pre + "ffn.b1", n2));
    h = ops::add(h, linear(tracker, pre + "ffn.w2", pre + "ffn.b2", ff));
  }
  out.ordered_core = h;
  out.slot_masks = ops::matmul(out.attention, tape.constant(flat_masks(frame.masks)));
  out.slot_logits = ops::matmul(out.attention, tape.constant(frame.class_logits));

  out.alignment = align_context(h.value(), frame.core, frame.surrounding);
  const Tensor surround = config.align_context ? out.alignment.aligned : frame.surrounding;
  if (config.key_source == KeySource::fused) {
    out.next_query = fuse_context(head, head_config, h, tape.constant(surround));
  } else {
    out.next_query = h;
  }
  return out;
}

TrackState tracker_step(const TrackState& state, const FrameInputs& frame, const ParameterSet& tracker,
                        const TrackerConfig& config, const ParameterSet& head,
                        const ContextHeadConfig& head_config) {
  std::vector<std::size_t> order(frame.core.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Without alignment the surroundings stay in arrival order.
  if (config.align_context) order = content_order(frame);
  const FrameInputs sorted = gather_detections(frame, order);
  Tape tape;
  BoundParams tp(tape, tracker, false);
  BoundParams hp(tape, head, false);
  Var query = tape.constant(config.key_source == KeySource::fused ? state.fused : state.core);
  StepVars step = tracker_step(tp, hp, config, head_config, query, sorted);
  TrackState next;
  next.core = step.ordered_core.value();
  const Tensor surround = config.align_context ? step.alignment.aligned : sorted.surrounding;
  next.fused = config.key_source == KeySource::fused ? step.next_query.value()
                                                     : fuse_context(next.core, surround, head, head_config);
  Tensor cost = step.attention_logits.value();
  for (auto& v : cost.storage()) v = -v;
  next.slot_detection = hungarian(cost).target_of;
  for (auto& d : next.slot_detection)
    if (d != Assignment::npos) d = order[d];
  return next;
}

FramePrediction ordered_prediction(const FrameInputs& frame, const std::vector<std::size_t>& slot_detection) {
  const std::size_t n = slot_detection.size();
  const std::size_t hw = frame.masks.size() / frame.masks.dim(0);
  const std::size_t k = frame.class_logits.cols();
  FramePrediction p{Tensor({n, frame.masks.dim(1), frame.masks.dim(2)}, 0.0), Tensor({n, k}, 0.0)};
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t d = slot_detection[s];
    if (d == Assignment::npos) continue;
    std::copy_n(frame.masks.storage().begin() + static_cast<std::ptrdiff_t>(d * hw), hw,
                p.masks.storage().begin() + static_cast<std::ptrdiff_t>(s * hw));
    std::copy_n(frame.class_logits.row(d).begin(), k, p.class_logits.row(s).begin());
  }
  return p;
}

TrackedVideo track_video(const std::vector<FrameInputs>& frames, const ParameterSet& tracker,
                         const TrackerConfig& config, const ParameterSet& head,
                         const ContextHeadConfig& head_config) {
  TrackedVideo out;
  if (frames.empty()) return out;
  TrackState state = initial_state(frames.front());
  out.ordered.push_back(ordered_prediction(frames.front(), state.slot_detection));
  out.states.push_back(state);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    state = tracker_step(state, frames[t], tracker, config, head, head_config);
    out.ordered.push_back(ordered_prediction(frames[t], state.slot_detection));
    out.states.push_back(state);
  }
  return out;
}

}  // namespace ctxtrack
