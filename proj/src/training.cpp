#include "ctxtrack/training.hpp"

#include <cmath>
#include <numeric>

namespace ctxtrack {

namespace {

void check_finite(double loss, std::size_t step, const std::vector<StepScalars>& log, const char* what) {
  if (!std::isfinite(loss) || loss > 1e6)
    throw TrainingDiverged(std::string(what) + " diverged at step " + std::to_string(step) + " (loss " +
                               std::to_string(loss) + ")",
                           step, log);
}

VideoGroundTruth slice_gt(const VideoGroundTruth& gt, std::size_t start, std::size_t frames) {
  VideoGroundTruth out;
  out.frames = frames;
  for (const auto& track : gt.tracks) {
    GroundTruthTrack t;
    t.identity = track.identity;
    t.label = track.label;
    t.masks.assign(track.masks.begin() + static_cast<std::ptrdiff_t>(start),
                   track.masks.begin() + static_cast<std::ptrdiff_t>(start + frames));
    bool any = false;
    for (const auto& m : t.masks) any = any || m.has_value();
    if (any) out.tracks.push_back(std::move(t));
  }
  return out;
}

Tensor flat(const Tensor& masks) { return masks.reshaped({masks.dim(0), masks.size() / masks.dim(0)}); }

/// Contrastive loss of one clip on a tape; `head` may be trainable or constant.
Var clip_ctx_loss(Tape& tape, const BoundParams& head, const ContextHeadConfig& hc, const ContextVideo& v,
                  std::size_t start, std::size_t frames, const ContrastiveOptions& options) {
  std::vector<Var> fused;
  std::vector<Assignment> matches;
  const bool learnable = hc.kernel_mode == KernelMode::learnable;
  for (std::size_t t = start; t < start + frames; ++t) {
    Var core = tape.constant(v.core[t]);
    Var surround = learnable ? surrounding_embedding(tape.constant(v.features[t]), head["kernel"], v.band[t])
                             : tape.constant(v.surrounding[t]);
    fused.push_back(fuse_context(head, hc, core, surround));
    matches.push_back(v.matches[t]);
  }
  return cross_frame_contrastive(fused, matches, options);
}

}  // namespace

ContextVideo prepare_context_video(const Scenario& scenario, const ContextHeadConfig& config) {
  ContextVideo v;
  v.matches = detection_matches(scenario);
  const bool learnable = config.kernel_mode == KernelMode::learnable;
  const Kernel2D kernel = learnable ? Kernel2D::average(config.kernel_size)
                                    : Kernel2D::make(config.kernel_mode, config.kernel_size);
  for (const auto& f : scenario.frames) {
    const auto& obs = f.observation;
    if (obs.channels() != config.channels)
      throw ConfigError("model.channels: head expects " + std::to_string(config.channels) +
                        " channels, scenario has " + std::to_string(obs.channels()));
    v.core.push_back(obs.core);
    if (learnable) {
      v.band.push_back(band_weights(obs.masks, config.mask_threshold));
      v.features.push_back(obs.features);
    } else {
      v.surrounding.push_back(surrounding_embedding(obs, kernel, config.mask_threshold).surrounding);
    }
    v.prototypes.push_back(pcc_prototypes(obs.features, obs.masks));
  }
  return v;
}

ContextTrainResult train_context_head(const std::vector<ContextVideo>& videos, const ContextHeadConfig& hc,
                                      const ContextTrainConfig& config) {
  CounterRng rng = CounterRng(config.seed).split(11);
  return train_context_head(videos, hc, config, init_context_head(hc, rng));
}

ContextTrainResult train_context_head(const std::vector<ContextVideo>& videos, const ContextHeadConfig& hc,
                                      const ContextTrainConfig& config, ParameterSet initial) {
  if (videos.empty()) throw ConfigError("train_context_head needs at least one video");
  for (const auto& v : videos)
    if (v.core.size() < config.frames)
      throw ConfigError("context_training.frames: exceeds video length " + std::to_string(v.core.size()));
  ContextTrainResult out;
  out.head = std::move(initial);
  AdamW opt(config.optimizer);
  const CounterRng sampler = CounterRng(config.seed).split(12);
  std::vector<double> ctx_values;
  for (std::size_t step = 0; step < config.steps; ++step) {
    CounterRng r = sampler.split(step);
    const ContextVideo& v = videos[r.below(videos.size())];
    const std::size_t start = r.below(v.core.size() - config.frames + 1);

    Tape tape;
    BoundParams head(tape, out.head, true);
    Var ctx = clip_ctx_loss(tape, head, hc, v, start, config.frames, config.contrastive);
    std::vector<Tensor> protos(v.prototypes.begin() + static_cast<std::ptrdiff_t>(start),
                               v.prototypes.begin() + static_cast<std::ptrdiff_t>(start + config.frames));
    std::vector<Assignment> matches(v.matches.begin() + static_cast<std::ptrdiff_t>(start),
                                    v.matches.begin() + static_cast<std::ptrdiff_t>(start + config.frames));
    const double pcc = pcc_loss(protos, matches, config.contrastive);
    const double ctx_value = ctx.value()[0];
    const double total = (config.use_ctx ? config.weights.ctx * ctx_value : 0.0) +
                         (config.use_pcc ? config.weights.pcc * pcc : 0.0);
    check_finite(total, step, out.log, "context training");
    ctx_values.push_back(ctx_value);
    if (step == 0) out.ctx_initial = ctx_value;

    const double lr = step_down_lr(config.optimizer.learning_rate, step, config.steps);
    if (config.use_ctx) {
      tape.backward(ops::scale(ctx, config.weights.ctx));
      opt.step(out.head, tape.parameter_gradients(), lr);
    }
    if (config.log_every && (step % config.log_every == 0 || step + 1 == config.steps))
      out.log.push_back({step, {{"ctx", ctx_value}, {"pcc", pcc}, {"total", total}, {"lr", lr}}});
  }
  const std::size_t window = std::max<std::size_t>(1, config.window);
  for (std::size_t i = 0; i < ctx_values.size(); i += window) {
    const std::size_t end = std::min(ctx_values.size(), i + window);
    out.window_means.push_back(std::accumulate(ctx_values.begin() + static_cast<std::ptrdiff_t>(i),
                                               ctx_values.begin() + static_cast<std::ptrdiff_t>(end), 0.0) /
                               static_cast<double>(end - i));
  }
  if (!out.window_means.empty()) {
    out.ctx_final = out.window_means.back();
    out.trend_ok = !config.use_ctx || out.window_means.size() < 2 || out.window_means.back() < out.window_means.front();
  }
  return out;
}

double evaluate_ctx_loss(const std::vector<ContextVideo>& videos, const ParameterSet& head_params,
                         const ContextHeadConfig& hc, std::size_t frames, const ContrastiveOptions& options) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& v : videos) {
    for (std::size_t start = 0; start + frames <= v.core.size(); ++start) {
      Tape tape;
      BoundParams head(tape, head_params, false);
      sum += clip_ctx_loss(tape, head, hc, v, start, frames, options).value()[0];
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

TrackerVideo prepare_tracker_video(const Scenario& scenario, const ParameterSet& head, const ContextHeadConfig& hc) {
  TrackerVideo v;
  v.gt = scenario.gt;
  for (const auto& f : scenario.frames)
    v.frames.push_back(make_frame_inputs(f.observation, compute_context(f.observation, head, hc)));
  return v;
}

double clip_tracker_loss(const TrackerVideo& video, std::size_t start, std::size_t frames,
                         const ParameterSet& tracker_params, const TrackerConfig& config,
                         const ParameterSet& head_params, const ContextHeadConfig& hc, const LossWeights& weights,
                         std::map<std::string, Tensor>* grads) {
  if (frames == 0 || start + frames > video.frames.size()) throw ConfigError("clip exceeds video length");
  Tape tape;
  BoundParams tracker(tape, tracker_params, grads != nullptr);
  BoundParams head(tape, head_params, false);
  const FrameInputs& first = video.frames[start];
  std::vector<Var> masks{tape.constant(flat(first.masks))};
  std::vector<Var> logits{tape.constant(first.class_logits)};
  std::vector<FramePrediction> values{{first.masks, first.class_logits}};
  Var query = tape.constant(config.key_source == KeySource::fused ? first.fused : first.core);
  for (std::size_t t = start + 1; t < start + frames; ++t) {
    const FrameInputs& frame = video.frames[t];
    StepVars s = tracker_step(tracker, head, config, hc, query, frame);
    masks.push_back(s.slot_masks);
    logits.push_back(s.slot_logits);
    values.push_back({s.slot_masks.value().reshaped(frame.masks.shape()), s.slot_logits.value()});
    query = tape.constant(s.next_query.value());  // truncated backprop between frames
  }
  const VideoGroundTruth gt = slice_gt(video.gt, start, frames);
  if (gt.tracks.empty()) return 0.0;
  const Assignment sigma = first_appearance_match(values, gt, weights);
  Var loss = tracker_objective(masks, logits, gt, sigma, weights);
  if (grads) {
    tape.backward(loss);
    *grads = tape.parameter_gradients();
  }
  return loss.value()[0];
}

TrackerTrainResult train_tracker(const std::vector<TrackerVideo>& videos, const TrackerConfig& config,
                                 const ParameterSet& head, const ContextHeadConfig& hc,
                                 const TrackerTrainConfig& train) {
  CounterRng init = CounterRng(train.seed).split(21);
  TrackerTrainResult out;
  out.tracker = init_tracker_params(config, init);
  if (train.steps == 0) return out;
  if (videos.empty()) throw ConfigError("train_tracker needs at least one video");
  for (const auto& v : videos)
    if (v.frames.size() < train.frames)
      throw ConfigError("tracker_training.frames: exceeds video length " + std::to_string(v.frames.size()));
  AdamW opt(train.optimizer);
  const CounterRng sampler = CounterRng(train.seed).split(22);
  const std::size_t tail = std::max<std::size_t>(1, train.steps / 10);
  double tail_sum = 0.0;
  for (std::size_t step = 0; step < train.steps; ++step) {
    CounterRng r = sampler.split(step);
    const TrackerVideo& v = videos[r.below(videos.size())];
    const std::size_t start = r.below(v.frames.size() - train.frames + 1);
    std::map<std::string, Tensor> grads;
    const double loss = clip_tracker_loss(v, start, train.frames, out.tracker, config, head, hc, train.weights, &grads);
    check_finite(loss, step, out.log, "tracker training");
    if (step == 0) out.loss_initial = loss;
    if (step + tail >= train.steps) tail_sum += loss;
    const double lr = step_down_lr(train.optimizer.learning_rate, step, train.steps);
    opt.step(out.tracker, grads, lr);
    if (train.log_every && (step % train.log_every == 0 || step + 1 == train.steps))
      out.log.push_back({step, {{"tracker", loss}, {"lr", lr}}});
  }
  out.loss_final = tail_sum / static_cast<double>(tail);
  return out;
}

}  // namespace ctxtrack
