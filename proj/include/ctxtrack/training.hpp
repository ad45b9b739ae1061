#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxtrack/context.hpp"
#include "ctxtrack/losses.hpp"
#include "ctxtrack/nn.hpp"
#include "ctxtrack/scenario.hpp"
#include "ctxtrack/tracker.hpp"

namespace ctxtrack {

/// Named scalars logged at one optimisation step.
struct StepScalars {
  std::size_t step = 0;
  std::map<std::string, double> values;

  friend bool operator==(const StepScalars&, const StepScalars&) = default;
};

/// Raised when a loss exceeds 1e6 or turns non-finite. Carries the log so far.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, std::vector<StepScalars> log)
      : std::runtime_error(what), step_(step), log_(std::move(log)) {}
  std::size_t step() const { return step_; }
  const std::vector<StepScalars>& log() const { return log_; }

 private:
  std::size_t step_;
  std::vector<StepScalars> log_;
};

struct ContextTrainConfig {
  std::size_t steps = 300;
  std::size_t frames = 3;
  AdamWConfig optimizer;
  bool use_ctx = true;
  bool use_pcc = true;
  ContrastiveOptions contrastive;
  LossWeights weights;
  std::size_t log_every = 10;
  std::size_t window = 50;
  std::uint64_t seed = 0;
};

struct ContextTrainResult {
  ParameterSet head;
  std::vector<StepScalars> log;
  double ctx_initial = 0.0;
  double ctx_final = 0.0;       // mean over the last window
  std::vector<double> window_means;
  bool trend_ok = true;         // last window mean below the first
};

/// Per-video tensors the context head consumes, precomputed once.
struct ContextVideo {
  std::vector<Tensor> core;          // per frame N x C
  std::vector<Tensor> surrounding;   // fixed-kernel surrounding features (average / laplacian)
  std::vector<Tensor> band;          // N x HW band weights (learnable kernel)
  std::vector<Tensor> features;      // H x W x C (learnable kernel)
  std::vector<Tensor> prototypes;    // N x C
  std::vector<Assignment> matches;   // track -> detection row
};

ContextVideo prepare_context_video(const Scenario& scenario, const ContextHeadConfig& config);

/// Optimise the fusion MLP (and the filter, when learnable) against
/// lambda_ctx L_CTX; L_PCC is logged but has no trainable producer here.
ContextTrainResult train_context_head(const std::vector<ContextVideo>& videos, const ContextHeadConfig& head_config,
                                      const ContextTrainConfig& config);
ContextTrainResult train_context_head(const std::vector<ContextVideo>& videos, const ContextHeadConfig& head_config,
                                      const ContextTrainConfig& config, ParameterSet initial);

/// Mean L_CTX over every window of `frames` consecutive frames of every video.
double evaluate_ctx_loss(const std::vector<ContextVideo>& videos, const ParameterSet& head,
                         const ContextHeadConfig& head_config, std::size_t frames,
                         const ContrastiveOptions& options = {});

struct TrackerTrainConfig {
  std::size_t steps = 300;
  std::size_t frames = 5;
  AdamWConfig optimizer;
  LossWeights weights;
  std::size_t log_every = 10;
  std::uint64_t seed = 0;
};

struct TrackerTrainResult {
  ParameterSet tracker;
  std::vector<StepScalars> log;
  double loss_initial = 0.0;
  double loss_final = 0.0;  // mean over the last 10% of steps
};

/// One training video for the tracker: frame inputs under a frozen head, plus gt.
struct TrackerVideo {
  std::vector<FrameInputs> frames;
  VideoGroundTruth gt;
};

TrackerVideo prepare_tracker_video(const Scenario& scenario, const ParameterSet& head,
                                   const ContextHeadConfig& head_config);

/// L_T on one clip: the tracker unrolled over `frames`, slots initialised from the first.
double clip_tracker_loss(const TrackerVideo& video, std::size_t start, std::size_t frames, const ParameterSet& tracker,
                         const TrackerConfig& config, const ParameterSet& head, const ContextHeadConfig& head_config,
                         const LossWeights& weights, std::map<std::string, Tensor>* grads = nullptr);

/// Optimise tracker parameters against L_T with the context head frozen.
TrackerTrainResult train_tracker(const std::vector<TrackerVideo>& videos, const TrackerConfig& config,
                                 const ParameterSet& head, const ContextHeadConfig& head_config,
                                 const TrackerTrainConfig& train);

}  // namespace ctxtrack
