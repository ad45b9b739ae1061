#include "ctxtrack/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "ctxtrack/io.hpp"

namespace ctxtrack {

namespace {

template <class F>
void parallel_for(std::size_t count, std::size_t threads, F&& body) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Stat {
  double mean = 0.0, std = 0.0;
};

Stat stat(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / double(v.size() - 1));
  }
  return s;
}

std::vector<TrackerVideo> tracker_videos(const std::vector<Scenario>& videos, const ParameterSet& head,
                                         const ContextHeadConfig& hc) {
  std::vector<TrackerVideo> out;
  for (const auto& s : videos) out.push_back(prepare_tracker_video(s, head, hc));
  return out;
}

struct Setting {
  std::string name;
  std::function<void(ExperimentConfig&)> apply;
};

struct SuiteSpec {
  std::string protocol;
  std::vector<Setting> settings;
};

SuiteSpec suite_spec(const std::string& suite) {
  SuiteSpec s;
  if (suite == "kernel_size") {
    s.protocol = "linking";
    for (std::size_t k : {3, 5, 7, 9, 11})
      s.settings.push_back({std::to_string(k), [k](ExperimentConfig& c) { c.head.kernel_size = k; }});
  } else if (suite == "kernel_type") {
    s.protocol = "linking";
    for (KernelMode m : {KernelMode::average, KernelMode::learnable})
      s.settings.push_back({to_string(m), [m](ExperimentConfig& c) { c.head.kernel_mode = m; }});
  } else if (suite == "frame_count") {
    s.protocol = "linking";
    for (std::size_t f : {2, 3, 4})
      s.settings.push_back({std::to_string(f), [f](ExperimentConfig& c) { c.context_training.frames = f; }});
  } else if (suite == "key_source") {
    s.protocol = "tracker";
    for (KeySource k : {KeySource::core, KeySource::fused})
      s.settings.push_back({to_string(k), [k](ExperimentConfig& c) { c.tracker.key_source = k; }});
  } else if (suite == "alignment") {
    s.protocol = "tracker";
    for (bool on : {false, true})
      s.settings.push_back({on ? "on" : "off", [on](ExperimentConfig& c) { c.tracker.align_context = on; }});
  } else {
    std::string names;
    for (const auto& n : ablation_suites()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation suite '" + suite + "' (expected one of " + names + ")");
  }
  return s;
}

AblationRow make_row(const std::string& suite, const std::string& setting, const std::string& protocol,
                     const std::vector<EvalSummary>& runs) {
  std::vector<double> acc, sw, iou;
  for (const auto& r : runs) {
    acc.push_back(r.accuracy);
    sw.push_back(r.id_switches);
    iou.push_back(r.mean_iou);
  }
  AblationRow row{suite, setting, protocol, runs.size()};
  const Stat a = stat(acc), s = stat(sw), i = stat(iou);
  row.accuracy_mean = a.mean;
  row.accuracy_std = a.std;
  row.id_switches_mean = s.mean;
  row.id_switches_std = s.std;
  row.mean_iou_mean = i.mean;
  row.mean_iou_std = i.std;
  return row;
}

}  // namespace

VideoSet make_videos(const ExperimentConfig& config) {
  config.validate();
  const auto& src = config.scenario;
  VideoSet v;
  for (std::size_t i = 0; i < src.train_videos; ++i)
    v.train.push_back(generate_scenario(twin_family_config(src.train_seed + i, src.twin)));
  if (!src.eval_file.empty()) {
    v.eval.push_back(load_scenario(src.eval_file));
  } else {
    for (std::size_t i = 0; i < src.eval_videos; ++i)
      v.eval.push_back(generate_scenario(twin_family_config(src.eval_seed + i, src.twin)));
  }
  for (const auto& s : v.eval)
    if (s.config.channels != config.head.channels)
      throw ConfigError("model.channels: eval scenario has " + std::to_string(s.config.channels) + " channels");
  return v;
}

ExperimentConfig replicate(const ExperimentConfig& config, std::size_t r) {
  ExperimentConfig c = config;
  const std::uint64_t shift = kReplicateStride * r;
  c.seed += shift;
  c.scenario.train_seed += shift;
  c.scenario.eval_seed += shift;
  return c;
}

EvalSummary summarize(std::vector<AssociationMetrics> videos) {
  EvalSummary s;
  for (const auto& m : videos) {
    s.accuracy += m.accuracy;
    s.id_switches += double(m.id_switches);
    s.mean_iou += m.mean_iou;
  }
  if (!videos.empty()) {
    const double n = double(videos.size());
    s.accuracy /= n;
    s.id_switches /= n;
    s.mean_iou /= n;
  }
  s.videos = std::move(videos);
  return s;
}

EvalSummary evaluate_tracker(const std::vector<Scenario>& videos, const ParameterSet& tracker,
                             const TrackerConfig& tc, const ParameterSet& head, const ContextHeadConfig& hc) {
  std::vector<AssociationMetrics> out;
  for (const auto& s : videos) {
    const TrackerVideo v = prepare_tracker_video(s, head, hc);
    out.push_back(evaluate_association(track_video(v.frames, tracker, tc, head, hc).ordered, v.gt));
  }
  return summarize(std::move(out));
}

EvalSummary evaluate_linking(const std::vector<Scenario>& videos, const ParameterSet& head,
                             const ContextHeadConfig& hc) {
  std::vector<AssociationMetrics> out;
  for (const auto& s : videos) {
    std::vector<FrameInputs> frames;
    std::vector<Tensor> fused;
    for (const auto& f : s.frames) {
      frames.push_back(make_frame_inputs(f.observation, compute_context(f.observation, head, hc)));
      fused.push_back(frames.back().fused);
    }
    const auto order = link_by_similarity(fused);
    std::vector<Tensor> masks;
    for (std::size_t t = 0; t < frames.size(); ++t) masks.push_back(ordered_prediction(frames[t], order[t]).masks);
    out.push_back(evaluate_association(masks, s.gt));
  }
  return summarize(std::move(out));
}

EvalSummary evaluate_oracle(const std::vector<Scenario>& videos) {
  std::vector<AssociationMetrics> out;
  for (const auto& s : videos) {
    const auto order = oracle_slot_detections(s);
    std::vector<Tensor> masks;
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
      const auto& obs = s.frames[t].observation;
      FrameInputs f{obs.core, obs.core, obs.core, obs.masks, obs.class_scores};
      masks.push_back(ordered_prediction(f, order[t]).masks);
    }
    out.push_back(evaluate_association(masks, s.gt));
  }
  return summarize(std::move(out));
}

ContextTrainResult run_context_training(const ExperimentConfig& config, const std::vector<Scenario>& train) {
  std::vector<ContextVideo> videos;
  for (const auto& s : train) videos.push_back(prepare_context_video(s, config.head));
  return train_context_head(videos, config.head, config.context_train_config());
}

TrackerTrainResult run_tracker_training(const ExperimentConfig& config, const std::vector<Scenario>& train,
                                        const ParameterSet& head) {
  return train_tracker(tracker_videos(train, head, config.head), config.tracker, head, config.head,
                       config.tracker_train_config());
}

ParameterSet initial_tracker(const ExperimentConfig& config) {
  TrackerTrainConfig t = config.tracker_train_config();
  t.steps = 0;
  return train_tracker({}, config.tracker, {}, config.head, t).tracker;
}

const std::vector<std::string>& ablation_suites() {
  static const std::vector<std::string> names{"kernel_size", "kernel_type", "frame_count", "key_source",
                                              "alignment"};
  return names;
}

std::size_t thread_budget() {
  if (const char* env = std::getenv("CONTEXT_TRACK_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0)
      throw ConfigError(std::string("CONTEXT_TRACK_THREADS: expected a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

AblationTable run_ablation(const ExperimentConfig& base, const std::string& suite, std::size_t seeds,
                           std::size_t threads) {
  const SuiteSpec spec = suite_spec(suite);
  if (seeds < 5) throw ConfigError("ablations average at least 5 seeds, got " + std::to_string(seeds));
  base.validate();
  if (threads == 0) threads = thread_budget();
  const std::size_t n = spec.settings.size();
  // results[setting][seed]
  std::vector<std::vector<EvalSummary>> results(n, std::vector<EvalSummary>(seeds));

  if (spec.protocol == "linking") {
    parallel_for(n * seeds, threads, [&](std::size_t job) {
      const std::size_t k = job / seeds, r = job % seeds;
      ExperimentConfig c = replicate(base, r);
      spec.settings[k].apply(c);
      c.validate();
      const VideoSet v = make_videos(c);
      const auto head = run_context_training(c, v.train).head;
      results[k][r] = evaluate_linking(v.eval, head, c.head);
    });
  } else {
    // Settings only touch the tracker, so each replicate trains one head.
    parallel_for(seeds, threads, [&](std::size_t r) {
      const ExperimentConfig rc = replicate(base, r);
      const VideoSet v = make_videos(rc);
      const auto head = run_context_training(rc, v.train).head;
      for (std::size_t k = 0; k < n; ++k) {
        ExperimentConfig c = rc;
        spec.settings[k].apply(c);
        const auto tracker = run_tracker_training(c, v.train, head).tracker;
        results[k][r] = evaluate_tracker(v.eval, tracker, c.tracker, head, c.head);
      }
    });
  }

  AblationTable table{suite, {}};
  for (std::size_t k = 0; k < n; ++k)
    table.rows.push_back(make_row(suite, spec.settings[k].name, spec.protocol, results[k]));
  if (suite == "key_source") {
    std::vector<EvalSummary> diff(seeds);
    for (std::size_t r = 0; r < seeds; ++r) {
      diff[r].accuracy = results[1][r].accuracy - results[0][r].accuracy;
      diff[r].id_switches = results[1][r].id_switches - results[0][r].id_switches;
      diff[r].mean_iou = results[1][r].mean_iou - results[0][r].mean_iou;
    }
    table.rows.push_back(make_row(suite, "fused_minus_core", spec.protocol, diff));
  }
  return table;
}

std::string ablation_csv_header() {
  return "suite,setting,protocol,seeds,accuracy_mean,accuracy_std,id_switches_mean,id_switches_std,"
         "mean_iou_mean,mean_iou_std\n";
}

std::string to_csv(const AblationTable& table) {
  std::string out = ablation_csv_header();
  char buf[256];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.seeds, r.accuracy_mean, r.accuracy_std,
                  r.id_switches_mean, r.id_switches_std, r.mean_iou_mean, r.mean_iou_std);
    out += r.suite + "," + r.setting + "," + r.protocol + buf;
  }
  return out;
}

}  // namespace ctxtrack
