#pragma once

#include <string>
#include <vector>

#include "ctxtrack/context.hpp"
#include "ctxtrack/hungarian.hpp"
#include "ctxtrack/losses.hpp"
#include "ctxtrack/nn.hpp"

namespace ctxtrack {

enum class KeySource { core, fused };
std::string to_string(KeySource k);
KeySource key_source_from_string(const std::string& name);

struct TrackerConfig {
  std::size_t channels = 16;
  std::size_t blocks = 6;
  std::size_t ffn_multiplier = 4;
  KeySource key_source = KeySource::fused;
  bool align_context = true;
  /// Layer-normalise cross-attention queries and keys (pre-LN sublayer). Gains start at
  /// `cross_norm_gain`; when false the first block is exactly the raw dot-product form.
  bool cross_norm = true;
  double cross_norm_gain = 2.0;
};

/// Transformer block parameters, identity-initialised so that a fresh tracker
/// computes exactly softmax(Q*_{t-1} Q_t^T / sqrt(C)) Q^_t: cross-attention
/// projections are identities, residual output projections start at zero.
ParameterSet init_tracker_params(const TrackerConfig& config, CounterRng& rng);

/// softmax(query key^T / sqrt(C)) value, no projections.
Tensor context_cross_attention(const Tensor& query, const Tensor& key, const Tensor& value);

struct Alignment {
  Tensor aligned;           // N x C surrounding features in slot order
  Assignment detection_to_slot;  // sigma_H
};

/// Match unordered detections to ordered slots by cosine similarity of core
/// embeddings; zero-norm rows have similarity 0 to everything.
Alignment align_context(const Tensor& ordered_core, const Tensor& core, const Tensor& surrounding);

/// Cosine similarity matrix between rows of a and rows of b.
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

/// Everything the tracker consumes for one frame, in detection order.
struct FrameInputs {
  Tensor core;         // N x C
  Tensor surrounding;  // N x C
  Tensor fused;        // N x C
  Tensor masks;        // N x H x W
  Tensor class_logits; // N x K
};

FrameInputs make_frame_inputs(const InstanceObservation& obs, const ContextEmbeddings& ctx);

struct TrackState {
  Tensor core;   // Q^*_t, slot order
  Tensor fused;  // Q*_t, slot order
  /// Detection each slot holds this frame: Hungarian on the block-1 attention logits.
  std::vector<std::size_t> slot_detection;
};

/// Tape-level outputs of one step.
struct StepVars {
  Var ordered_core;     // Q^*_t
  Var next_query;       // query for the following frame
  Var attention_logits; // block-1 cross-attention logits, slots x detections
  Var attention;        // their row softmax; the soft slot readout
  Var slot_masks;       // attention-weighted masks, N x HW
  Var slot_logits;      // attention-weighted class logits, N x K
  Alignment alignment;
};

/// Frame-1 state: slots take the detection order.
TrackState initial_state(const FrameInputs& frame);

/// One tracking step on a tape. `prev_query` is Q*_{t-1} (fused keys) or
/// Q^*_{t-1} (core keys). The context head is applied as constants.
StepVars tracker_step(const BoundParams& tracker, const BoundParams& head, const TrackerConfig& config,
                      const ContextHeadConfig& head_config, Var prev_query, const FrameInputs& frame);

/// Tape-free step from a TrackState.
TrackState tracker_step(const TrackState& state, const FrameInputs& frame, const ParameterSet& tracker,
                        const TrackerConfig& config, const ParameterSet& head,
                        const ContextHeadConfig& head_config);

struct TrackedVideo {
  std::vector<FramePrediction> ordered;      // per frame, slot order
  std::vector<TrackState> states;
};

/// Frame 1 initialises slots from detection order; later frames step the tracker.
TrackedVideo track_video(const std::vector<FrameInputs>& frames, const ParameterSet& tracker,
                         const TrackerConfig& config, const ParameterSet& head,
                         const ContextHeadConfig& head_config);

/// Reorder per-detection masks/logits into slot order.
FramePrediction ordered_prediction(const FrameInputs& frame, const std::vector<std::size_t>& slot_detection);

}  // namespace ctxtrack
