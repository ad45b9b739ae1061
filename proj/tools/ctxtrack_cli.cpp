#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "ctxtrack/experiment.hpp"
#include "ctxtrack/io.hpp"
#include "ctxtrack/metrics.hpp"

using namespace ctxtrack;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Experiment config (JSON)");
  app->add_option("--seed", c.seed, "Override the config seed");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_experiment_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

class Clock {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

std::string path_in(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

void put_eval(MetricsRecord& r, const std::string& prefix, const EvalSummary& e) {
  r.final_metrics[prefix + "accuracy"] = e.accuracy;
  r.final_metrics[prefix + "id_switches"] = e.id_switches;
  r.final_metrics[prefix + "mean_iou"] = e.mean_iou;
}

int cmd_generate(const Common& c, std::optional<std::uint64_t> index) {
  const ExperimentConfig cfg = load(c);
  const std::uint64_t seed = c.seed ? *c.seed : cfg.scenario.eval_seed + (index ? *index : 0);
  Clock clock;
  const Scenario s = generate_scenario(twin_family_config(seed, cfg.scenario.twin));
  const double elapsed = clock.lap();
  const std::string path = path_in(c.out, "scenario.ctxs");
  save_scenario(path, s);
  MetricsRecord r = make_record("generate", to_text(cfg), seed);
  r.final_metrics["frames"] = double(s.frames.size());
  r.final_metrics["objects"] = double(s.config.objects.size());
  r.final_metrics["twin_separability"] = twin_separability(s);
  write_metrics(c.out, r);
  write_timing(c.out, {{"generate", elapsed}});
  std::printf("wrote %s (seed %llu, %zu frames, %zu objects)\n", path.c_str(), static_cast<unsigned long long>(seed),
              s.frames.size(), s.config.objects.size());
  return 0;
}

int cmd_train_context(const Common& c) {
  const ExperimentConfig cfg = load(c);
  Clock clock;
  std::map<std::string, double> timing;
  const VideoSet v = make_videos(cfg);
  timing["generate"] = clock.lap();
  const ContextTrainResult res = run_context_training(cfg, v.train);
  timing["train_context"] = clock.lap();
  const EvalSummary link = evaluate_linking(v.eval, res.head, cfg.head);
  timing["evaluate"] = clock.lap();

  save_checkpoint(path_in(c.out, "head.ctxt"), res.head);
  MetricsRecord r = make_record("train-context", to_text(cfg), cfg.seed);
  r.logs["context"] = res.log;
  r.final_metrics["ctx_initial"] = res.ctx_initial;
  r.final_metrics["ctx_final"] = res.ctx_final;
  r.final_metrics["trend_ok"] = res.trend_ok ? 1.0 : 0.0;
  put_eval(r, "linking.", link);
  write_metrics(c.out, r);
  write_timing(c.out, timing);
  std::printf("train-context ctx %.4f -> %.4f linking_accuracy=%.4f\n", res.ctx_initial, res.ctx_final,
              link.accuracy);
  return 0;
}

int cmd_train_tracker(const Common& c, const std::string& head_path) {
  const ExperimentConfig cfg = load(c);
  Clock clock;
  std::map<std::string, double> timing;
  const VideoSet v = make_videos(cfg);
  timing["generate"] = clock.lap();
  MetricsRecord r = make_record("train-tracker", to_text(cfg), cfg.seed);
  ParameterSet head;
  if (head_path.empty()) {
    const ContextTrainResult ctx = run_context_training(cfg, v.train);
    head = ctx.head;
    r.logs["context"] = ctx.log;
    r.final_metrics["ctx_initial"] = ctx.ctx_initial;
    r.final_metrics["ctx_final"] = ctx.ctx_final;
    save_checkpoint(path_in(c.out, "head.ctxt"), head);
    timing["train_context"] = clock.lap();
  } else {
    head = load_checkpoint(head_path);
  }
  const EvalSummary pre = evaluate_tracker(v.eval, initial_tracker(cfg), cfg.tracker, head, cfg.head);
  const TrackerTrainResult res = run_tracker_training(cfg, v.train, head);
  timing["train_tracker"] = clock.lap();
  const EvalSummary post = evaluate_tracker(v.eval, res.tracker, cfg.tracker, head, cfg.head);
  timing["evaluate"] = clock.lap();

  save_checkpoint(path_in(c.out, "tracker.ctxt"), res.tracker);
  r.logs["tracker"] = res.log;
  r.final_metrics["tracker_loss_initial"] = res.loss_initial;
  r.final_metrics["tracker_loss_final"] = res.loss_final;
  put_eval(r, "pre.", pre);
  put_eval(r, "post.", post);
  write_metrics(c.out, r);
  write_timing(c.out, timing);
  std::printf("train-tracker loss %.4f -> %.4f accuracy %.4f -> %.4f\n", res.loss_initial, res.loss_final,
              pre.accuracy, post.accuracy);
  return 0;
}

int cmd_eval(const Common& c, const std::string& head_path, const std::string& tracker, const std::string& scenario) {
  ExperimentConfig cfg = load(c);
  if (!scenario.empty()) cfg.scenario.eval_file = scenario;
  Clock clock;
  std::vector<Scenario> videos;
  if (!cfg.scenario.eval_file.empty()) {
    videos.push_back(load_scenario(cfg.scenario.eval_file));
  } else {
    for (std::size_t i = 0; i < cfg.scenario.eval_videos; ++i)
      videos.push_back(generate_scenario(twin_family_config(cfg.scenario.eval_seed + i, cfg.scenario.twin)));
  }
  ParameterSet head;
  if (head_path.empty()) {
    CounterRng rng = CounterRng(cfg.seed).split(11);
    head = init_context_head(cfg.head, rng);
  } else {
    head = load_checkpoint(head_path);
  }
  EvalSummary e;
  if (tracker == "oracle") {
    e = evaluate_oracle(videos);
  } else if (tracker == "linking") {
    e = evaluate_linking(videos, head, cfg.head);
  } else if (tracker == "initial") {
    e = evaluate_tracker(videos, initial_tracker(cfg), cfg.tracker, head, cfg.head);
  } else {
    e = evaluate_tracker(videos, load_checkpoint(tracker), cfg.tracker, head, cfg.head);
  }
  MetricsRecord r = make_record("eval", to_text(cfg), cfg.seed);
  put_eval(r, "", e);
  r.final_metrics["videos"] = double(e.videos.size());
  for (std::size_t i = 0; i < e.videos.size(); ++i)
    r.final_metrics["video" + std::to_string(i) + ".accuracy"] = e.videos[i].accuracy;
  write_metrics(c.out, r);
  write_timing(c.out, {{"eval", clock.lap()}});
  std::printf("eval tracker=%s videos=%zu accuracy=%.4f id_switches=%.3f mean_iou=%.4f\n", tracker.c_str(),
              e.videos.size(), e.accuracy, e.id_switches, e.mean_iou);
  return 0;
}

int cmd_ablate(const Common& c, const std::string& suite, std::size_t seeds, std::size_t threads) {
  const ExperimentConfig cfg = load(c);
  Clock clock;
  const AblationTable table = run_ablation(cfg, suite, seeds, threads);
  const std::string csv = to_csv(table);
  write_file_atomic(path_in(c.out, "ablate_" + suite + ".csv"), csv);
  MetricsRecord r = make_record("ablate-" + suite, to_text(cfg), cfg.seed);
  for (const auto& row : table.rows) {
    r.final_metrics[row.setting + ".accuracy_mean"] = row.accuracy_mean;
    r.final_metrics[row.setting + ".accuracy_std"] = row.accuracy_std;
  }
  r.final_metrics["seeds"] = double(seeds);
  write_metrics(c.out, r);
  write_timing(c.out, {{"ablate", clock.lap()}});
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_inspect(const Common& c, const std::string& file, bool rewrite) {
  const std::string bytes = read_binary_file(file);
  std::string again;
  if (bytes.rfind("CTXS", 0) == 0) {
    const Scenario s = decode_scenario(bytes);
    std::size_t present = 0;
    for (const auto& t : s.gt.tracks)
      for (const auto& m : t.masks) present += m.has_value();
    std::printf("scenario %zux%zu C=%zu K=%zu frames=%zu objects=%zu slots=%zu twin_groups=%zu occlusions=%zu "
                "visible_instances=%zu seed=%llu\n",
                s.config.height, s.config.width, s.config.channels, s.config.classes, s.frames.size(),
                s.config.objects.size(), s.config.slots, s.config.twin_groups.size(), s.config.occlusions.size(),
                present, static_cast<unsigned long long>(s.config.seed));
    again = encode_scenario(s);
  } else if (bytes.rfind("CTXT", 0) == 0) {
    const NamedTensors t = decode_tensors(bytes);
    std::printf("tensor container with %zu entries\n", t.size());
    for (const auto& [name, v] : t) {
      std::string shape;
      for (std::size_t d : v.shape()) shape += (shape.empty() ? "" : "x") + std::to_string(d);
      std::printf("  %s [%s]\n", name.c_str(), shape.c_str());
    }
    again = encode_tensors(t);
  } else {
    throw FormatError("'" + file + "' is neither a scenario nor a tensor container");
  }
  std::printf("round trip %s\n", again == bytes ? "identical" : "DIFFERS");
  if (rewrite) {
    const std::string path = path_in(c.out, std::filesystem::path(file).filename().string());
    write_file_atomic(path, again);
    std::printf("wrote %s\n", path.c_str());
  }
  return again == bytes ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware instance association on synthetic twin videos"};
  app.require_subcommand(1);

  Common gen_c, ctx_c, trk_c, eval_c, abl_c, ins_c;
  std::optional<std::uint64_t> gen_index;
  auto* gen = app.add_subcommand("generate", "Render one twin scenario to <out>/scenario.ctxs");
  add_common(gen, gen_c);
  gen->add_option("--index", gen_index, "Eval video index used when --seed is absent");

  auto* ctx = app.add_subcommand("train-context", "Train the context head with the context loss");
  add_common(ctx, ctx_c);

  std::string trk_head;
  auto* trk = app.add_subcommand("train-tracker", "Train the tracker with the head frozen");
  add_common(trk, trk_c);
  trk->add_option("--head", trk_head, "Head checkpoint; trained first when absent");

  std::string eval_head, eval_tracker = "initial", eval_scenario;
  auto* ev = app.add_subcommand("eval", "Evaluate association accuracy");
  add_common(ev, eval_c);
  ev->add_option("--head", eval_head, "Head checkpoint (untrained head when absent)");
  ev->add_option("--tracker", eval_tracker, "Tracker checkpoint, or initial | linking | oracle")
      ->capture_default_str();
  ev->add_option("--scenario", eval_scenario, "Scenario file to evaluate instead of generated videos");

  std::string suite;
  std::size_t seeds = 5, threads = 0;
  auto* abl = app.add_subcommand("ablate", "Run an ablation suite and write a CSV table");
  add_common(abl, abl_c);
  abl->add_option("suite", suite, "kernel_size | kernel_type | frame_count | key_source | alignment")->required();
  abl->add_option("--seeds", seeds, "Replicates per setting (>= 5)")->capture_default_str();
  abl->add_option("--threads", threads, "Parallel replicates (default CONTEXT_TRACK_THREADS or all cores)");

  std::string ins_file;
  auto* ins = app.add_subcommand("inspect", "Summarise a scenario or tensor file and check its round trip");
  add_common(ins, ins_c);
  ins->add_option("file", ins_file, "File to inspect")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0) std::cerr << app.help();
    return code;
  }
  const Common* active = nullptr;
  for (auto [sub, common] : {std::pair{gen, &gen_c}, {ctx, &ctx_c}, {trk, &trk_c}, {ev, &eval_c}, {abl, &abl_c},
                             {ins, &ins_c}})
    if (sub->parsed()) active = common;
  try {
    if (gen->parsed()) return cmd_generate(gen_c, gen_index);
    if (ctx->parsed()) return cmd_train_context(ctx_c);
    if (trk->parsed()) return cmd_train_tracker(trk_c, trk_head);
    if (ev->parsed()) return cmd_eval(eval_c, eval_head, eval_tracker, eval_scenario);
    if (abl->parsed()) return cmd_ablate(abl_c, suite, seeds, threads);
    if (ins->parsed()) return cmd_inspect(ins_c, ins_file, ins->get_option("--out")->count() > 0);
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    std::string config_text;
    try {
      config_text = to_text(load(*active));
    } catch (const std::exception&) {
    }
    MetricsRecord r = make_record("diverged", config_text, e.step());
    r.logs["diverged"] = e.log();
    r.final_metrics["diverged_at_step"] = double(e.step());
    write_metrics(active->out, r);
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
