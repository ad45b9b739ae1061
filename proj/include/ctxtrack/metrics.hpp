#pragma once

#include <map>
#include <string>
#include <vector>

#include "ctxtrack/training.hpp"

namespace ctxtrack {

/// One run's outputs. Holds nothing time-dependent, so repeated runs with the
/// same config and seed serialise to identical bytes; wall-clock goes to a
/// separate timing file.
struct MetricsRecord {
  std::string run_id;
  std::string command;
  std::string config_hash;
  std::string config_text;  // canonical config the hash was computed from
  std::map<std::string, std::vector<StepScalars>> logs;  // per training phase
  std::map<std::string, double> final_metrics;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

/// run_id = "<command>-<config hash>-<seed>".
MetricsRecord make_record(const std::string& command, const std::string& config_text, std::uint64_t seed);

std::string to_text(const MetricsRecord& record);
MetricsRecord metrics_record_from_text(const std::string& text);

/// True when config_hash matches FNV-1a of the stored config text.
bool hash_matches(const MetricsRecord& record);

/// Atomically write `<dir>/metrics.json`.
void write_metrics(const std::string& dir, const MetricsRecord& record);
/// Atomically write `<dir>/timing.json` with wall-clock seconds per phase.
void write_timing(const std::string& dir, const std::map<std::string, double>& seconds);

}  // namespace ctxtrack
