#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxtrack/config.hpp"

namespace ctxtrack {

struct VideoSet {
  std::vector<Scenario> train;
  std::vector<Scenario> eval;
};

/// Train videos use seeds train_seed + i, eval videos eval_seed + i (or the
/// configured eval file).
VideoSet make_videos(const ExperimentConfig& config);

/// Copy of `config` with the model seed and both video seed ranges shifted for
/// replicate r, so replicates share nothing.
inline constexpr std::uint64_t kReplicateStride = 100003;
ExperimentConfig replicate(const ExperimentConfig& config, std::size_t r);

struct EvalSummary {
  double accuracy = 0.0;     // mean over videos
  double id_switches = 0.0;  // mean per video
  double mean_iou = 0.0;
  std::vector<AssociationMetrics> videos;
};

EvalSummary summarize(std::vector<AssociationMetrics> videos);

/// Tracker association on each video with a frozen head.
EvalSummary evaluate_tracker(const std::vector<Scenario>& videos, const ParameterSet& tracker,
                             const TrackerConfig& tracker_config, const ParameterSet& head,
                             const ContextHeadConfig& head_config);
/// Segmenter-only association: consecutive-frame cosine matching of fused embeddings.
EvalSummary evaluate_linking(const std::vector<Scenario>& videos, const ParameterSet& head,
                             const ContextHeadConfig& head_config);
/// Ground-truth identity slots; accuracy 1 by construction.
EvalSummary evaluate_oracle(const std::vector<Scenario>& videos);

ContextTrainResult run_context_training(const ExperimentConfig& config, const std::vector<Scenario>& train);
TrackerTrainResult run_tracker_training(const ExperimentConfig& config, const std::vector<Scenario>& train,
                                        const ParameterSet& head);
/// Identity-initialised tracker for `config`.
ParameterSet initial_tracker(const ExperimentConfig& config);

struct AblationRow {
  std::string suite;
  std::string setting;
  std::string protocol;  // "linking" or "tracker"
  std::size_t seeds = 0;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double id_switches_mean = 0.0, id_switches_std = 0.0;
  double mean_iou_mean = 0.0, mean_iou_std = 0.0;
};

struct AblationTable {
  std::string suite;
  std::vector<AblationRow> rows;
};

/// kernel_size, kernel_type, frame_count, key_source, alignment.
const std::vector<std::string>& ablation_suites();

/// CONTEXT_TRACK_THREADS when set (a positive integer), else hardware concurrency.
std::size_t thread_budget();

/// Run every setting of `suite` for `seeds` replicates (at least 5) and report
/// mean and sample standard deviation. Results do not depend on `threads`.
AblationTable run_ablation(const ExperimentConfig& base, const std::string& suite, std::size_t seeds = 5,
                           std::size_t threads = 0);

std::string ablation_csv_header();
std::string to_csv(const AblationTable& table);

}  // namespace ctxtrack
