#include <cstdlib>
#include <filesystem>
#include <optional>

#include "ctxtrack/config.hpp"
#include "ctxtrack/experiment.hpp"
#include "ctxtrack/metrics.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace ctxtrack;
using namespace ctxtrack::testing;

namespace {

/// Small enough that an ablation suite runs in seconds.
ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 3;
  c.scenario.twin.frames = 5;
  c.scenario.train_videos = 1;
  c.scenario.eval_videos = 2;
  c.tracker.blocks = 2;
  c.context_training.steps = 6;
  c.context_training.log_every = 2;
  c.context_training.window = 2;
  c.context_training.optimizer.learning_rate = 1e-3;
  c.tracker_training.steps = 3;
  c.tracker_training.frames = 3;
  c.tracker_training.log_every = 1;
  c.tracker_training.optimizer.learning_rate = 1e-3;
  return c;
}

std::string config_path() { return std::string(CTXTRACK_SOURCE_DIR) + "/configs/twin_benchmark.json"; }

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (old_) ::setenv(name_, old_->c_str(), 1);
    else ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST_CASE("config text is canonical and strict") {
  const ExperimentConfig c = load_experiment_config(config_path());
  const std::string text = to_text(c);
  CHECK(text == read_text_file(config_path()));
  CHECK(experiment_config_from_text(text).seed == c.seed);
  CHECK(to_text(experiment_config_from_text(text)) == text);
  CHECK(config_hash(c) == hex_hash(text));
  CHECK(config_hash(c).size() == 16);

  CHECK_THROWS_WITH_AS(experiment_config_from_text(R"({"model": {"chanels": 16}})"),
                       doctest::Contains("model.chanels"), ConfigError);
  CHECK_THROWS_WITH_AS(experiment_config_from_text(R"({"seed": "seven"})"), doctest::Contains("seed"), ConfigError);
  CHECK_THROWS_WITH_AS(experiment_config_from_text(R"({"version": 2})"), doctest::Contains("version"), ConfigError);
  CHECK_THROWS_WITH_AS(experiment_config_from_text(R"({"model": {"key_source": "both"}})"),
                       doctest::Contains("key_source"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_text("{"), ConfigError);

  const ExperimentConfig d = experiment_config_from_text("{}");
  CHECK(d.context_training.optimizer.learning_rate == 1e-4);
  CHECK(d.context_training.optimizer.weight_decay == 5e-2);
  CHECK(d.context_training.frames == 3);
  CHECK(d.tracker_training.frames == 5);
}

TEST_CASE("fnv hash reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(hex_hash("a") == "af63dc4c8601ec8c");
}

TEST_CASE("metrics records round trip") {
  const std::string text = to_text(tiny_config());
  MetricsRecord r = make_record("train-context", text, 3);
  CHECK(r.run_id == "train-context-" + hex_hash(text) + "-3");
  CHECK(hash_matches(r));
  r.logs["context"] = {{0, {{"ctx", 1.5}}}, {10, {{"ctx", 0.25}, {"pcc", 0.125}}}};
  r.final_metrics["accuracy"] = 0.1 + 0.2;
  const MetricsRecord back = metrics_record_from_text(to_text(r));
  CHECK(back == r);
  CHECK(to_text(back) == to_text(r));
  r.config_text += " ";
  CHECK_FALSE(hash_matches(r));

  const auto dir = std::filesystem::temp_directory_path() / "ctxtrack_test_metrics";
  std::filesystem::create_directories(dir);
  write_metrics(dir.string(), back);
  write_timing(dir.string(), {{"total", 1.0}});
  CHECK(metrics_record_from_text(read_text_file((dir / "metrics.json").string())) == back);
  CHECK(std::filesystem::exists(dir / "timing.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("replicates shift every seed") {
  const ExperimentConfig c = tiny_config();
  const ExperimentConfig r = replicate(c, 2);
  CHECK(r.seed == c.seed + 2 * kReplicateStride);
  CHECK(r.scenario.train_seed == c.scenario.train_seed + 2 * kReplicateStride);
  CHECK(r.scenario.eval_seed == c.scenario.eval_seed + 2 * kReplicateStride);
  CHECK(to_text(replicate(c, 0)) == to_text(c));
}

TEST_CASE("thread budget reads the environment") {
  {
    ScopedEnv env("CONTEXT_TRACK_THREADS", "3");
    CHECK(thread_budget() == 3);
  }
  for (const char* bad : {"0", "-2", "x", "4x", ""}) {
    ScopedEnv env("CONTEXT_TRACK_THREADS", bad);
    CHECK_THROWS_AS(thread_budget(), ConfigError);
  }
}

TEST_CASE("ablation tables are well formed and thread independent") {
  const ExperimentConfig c = tiny_config();
  const AblationTable sizes = run_ablation(c, "kernel_size", 5, 1);
  REQUIRE(sizes.rows.size() == 5);
  const std::vector<std::string> want{"3", "5", "7", "9", "11"};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(sizes.rows[i].setting == want[i]);
    CHECK(sizes.rows[i].protocol == "linking");
    CHECK(sizes.rows[i].seeds == 5);
    CHECK(sizes.rows[i].accuracy_mean >= 0.0);
    CHECK(sizes.rows[i].accuracy_mean <= 1.0);
    CHECK(sizes.rows[i].accuracy_std >= 0.0);
  }
  const std::string csv = to_csv(sizes);
  CHECK(csv.rfind(ablation_csv_header(), 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  CHECK(to_csv(run_ablation(c, "kernel_size", 5, 3)) == csv);

  const AblationTable align = run_ablation(c, "alignment", 5, 2);
  REQUIRE(align.rows.size() == 2);
  CHECK(align.rows[0].protocol == "tracker");
  const AblationTable keys = run_ablation(c, "key_source", 5, 2);
  REQUIRE(keys.rows.size() == 3);
  CHECK(keys.rows[2].setting == "fused_minus_core");

  CHECK_THROWS_AS(run_ablation(c, "kernel_size", 4, 1), ConfigError);
  CHECK_THROWS_WITH_AS(run_ablation(c, "kernels", 5, 1), doctest::Contains("kernel_size"), ConfigError);
}

TEST_CASE("context training with zero learning rate leaves the head unchanged") {
  ExperimentConfig c = tiny_config();
  c.context_training.optimizer.learning_rate = 0.0;
  const VideoSet v = make_videos(c);
  const ContextTrainResult r = run_context_training(c, v.train);
  CounterRng init = CounterRng(c.seed).split(11);
  CHECK(r.head == init_context_head(c.head, init));
  CHECK_FALSE(r.log.empty());
}

TEST_CASE("training is deterministic") {
  const ExperimentConfig c = tiny_config();
  const VideoSet v = make_videos(c);
  const ContextTrainResult a = run_context_training(c, v.train), b = run_context_training(c, v.train);
  CHECK(a.head == b.head);
  CHECK(a.log == b.log);
  const TrackerTrainResult ta = run_tracker_training(c, v.train, a.head);
  const TrackerTrainResult tb = run_tracker_training(c, v.train, a.head);
  CHECK(ta.tracker == tb.tracker);
  CHECK(ta.log == tb.log);
  CounterRng init = CounterRng(c.seed).split(21);
  CHECK(initial_tracker(c) == init_tracker_params(c.tracker, init));
}

TEST_CASE("context training halves the contrastive loss on twin scenarios") {
  ExperimentConfig c = load_experiment_config(config_path());
  c.scenario.train_videos = 4;
  const VideoSet v = make_videos(c);
  const ContextTrainResult r = run_context_training(c, v.train);
  REQUIRE(c.context_training.steps <= 2000);
  INFO("initial " << r.ctx_initial << " final " << r.ctx_final);
  CHECK(r.ctx_final <= 0.5 * r.ctx_initial);
  CHECK(r.trend_ok);
}
