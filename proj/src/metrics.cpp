#include "ctxtrack/metrics.hpp"

#include "ctxtrack/config.hpp"
#include "ctxtrack/io.hpp"
#include "json.hpp"

namespace ctxtrack {

using json = nlohmann::json;

namespace {

template <class T>
T field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("metrics record: missing '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("metrics record: bad type for '") + key + "'");
  }
}

}  // namespace

MetricsRecord make_record(const std::string& command, const std::string& config_text, std::uint64_t seed) {
  MetricsRecord r;
  r.command = command;
  r.config_text = config_text;
  r.config_hash = hex_hash(config_text);
  r.run_id = command + "-" + r.config_hash + "-" + std::to_string(seed);
  return r;
}

std::string to_text(const MetricsRecord& r) {
  json j;
  j["run_id"] = r.run_id;
  j["command"] = r.command;
  j["config_hash"] = r.config_hash;
  j["config"] = r.config_text;
  json logs = json::object();
  for (const auto& [phase, steps] : r.logs) {
    json arr = json::array();
    for (const auto& s : steps) arr.push_back({{"step", s.step}, {"values", s.values}});
    logs[phase] = std::move(arr);
  }
  j["logs"] = std::move(logs);
  j["final"] = r.final_metrics;
  return j.dump(2) + "\n";
}

MetricsRecord metrics_record_from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("metrics record: ") + e.what());
  }
  MetricsRecord r;
  r.run_id = field<std::string>(j, "run_id");
  r.command = field<std::string>(j, "command");
  r.config_hash = field<std::string>(j, "config_hash");
  r.config_text = field<std::string>(j, "config");
  const json logs = field<json>(j, "logs");
  for (const auto& [phase, arr] : logs.items())
    for (const auto& s : arr)
      r.logs[phase].push_back({field<std::size_t>(s, "step"), field<std::map<std::string, double>>(s, "values")});
  r.final_metrics = field<std::map<std::string, double>>(j, "final");
  return r;
}

bool hash_matches(const MetricsRecord& record) { return record.config_hash == hex_hash(record.config_text); }

void write_metrics(const std::string& dir, const MetricsRecord& record) {
  write_file_atomic(dir + "/metrics.json", to_text(record));
}

void write_timing(const std::string& dir, const std::map<std::string, double>& seconds) {
  write_file_atomic(dir + "/timing.json", json(seconds).dump(2) + "\n");
}

}  // namespace ctxtrack
