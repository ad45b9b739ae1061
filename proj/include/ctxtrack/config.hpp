#pragma once

#include <cstdint>
#include <string>

#include "ctxtrack/context.hpp"
#include "ctxtrack/scenario.hpp"
#include "ctxtrack/tracker.hpp"
#include "ctxtrack/training.hpp"

namespace ctxtrack {

inline constexpr int kConfigVersion = 1;

/// Where an experiment's videos come from.
struct ScenarioSource {
  std::string family = "twin";
  TwinFamilyOptions twin;
  std::size_t train_videos = 16;
  std::uint64_t train_seed = 5000;
  std::size_t eval_videos = 20;
  std::uint64_t eval_seed = 100;
  /// Scenario file evaluated instead of generated eval videos; empty for none.
  std::string eval_file;
};

/// Everything that determines an experiment. Defaults follow the reference
/// training recipe (lr 1e-4, weight decay 5e-2, 3 and 5 sampled frames).
struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  ScenarioSource scenario;
  std::size_t slots = 8;
  ContextHeadConfig head;
  TrackerConfig tracker;
  ContextTrainConfig context_training;
  TrackerTrainConfig tracker_training;
  LossWeights weights;

  /// Throws ConfigError naming the offending key.
  void validate() const;
  /// Training configs with the shared seed and loss weights filled in.
  ContextTrainConfig context_train_config() const;
  TrackerTrainConfig tracker_train_config() const;
};

/// Canonical text: JSON with sorted keys, two-space indent, trailing newline.
std::string to_text(const ExperimentConfig& config);
/// Strict parse. Unknown keys, wrong types and version mismatches raise
/// ConfigError with the dotted key path. Missing keys keep their defaults.
ExperimentConfig experiment_config_from_text(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

std::string to_text(const ScenarioConfig& config);
ScenarioConfig scenario_config_from_text(const std::string& text);

std::uint64_t fnv1a64(const std::string& bytes);
/// fnv1a64 as 16 lowercase hex digits.
std::string hex_hash(const std::string& bytes);
/// hex_hash of the canonical text.
std::string config_hash(const ExperimentConfig& config);

std::string read_text_file(const std::string& path);

}  // namespace ctxtrack
