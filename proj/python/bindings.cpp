#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ctxtrack/config.hpp"
#include "ctxtrack/context.hpp"
#include "ctxtrack/experiment.hpp"
#include "ctxtrack/hungarian.hpp"
#include "ctxtrack/io.hpp"
#include "ctxtrack/losses.hpp"
#include "ctxtrack/scenario.hpp"
#include "ctxtrack/tracker.hpp"

namespace py = pybind11;
using namespace ctxtrack;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

py::object slot(std::size_t v) { return v == Assignment::npos ? py::object(py::none()) : py::int_(v); }

py::list slots(const std::vector<std::size_t>& v) {
  py::list out;
  for (std::size_t x : v) out.append(slot(x));
  return out;
}

ParameterSet to_params(const py::dict& d) {
  ParameterSet p;
  for (const auto& [k, v] : d) p.set(py::cast<std::string>(k), to_tensor(py::cast<Array>(v)));
  return p;
}

py::dict to_dict(const ParameterSet& p) {
  py::dict d;
  for (const auto& [k, v] : p.items()) d[py::str(k)] = to_array(v);
  return d;
}

ContextHeadConfig head_config(std::size_t channels, const std::string& kernel_mode, std::size_t kernel_size) {
  ContextHeadConfig c;
  c.channels = channels;
  c.kernel_mode = kernel_mode_from_string(kernel_mode);
  c.kernel_size = kernel_size;
  return c;
}

py::dict scenario_dict(const Scenario& s) {
  py::list frames;
  for (const auto& f : s.frames) {
    py::dict d;
    d["features"] = to_array(f.observation.features);
    d["core"] = to_array(f.observation.core);
    d["masks"] = to_array(f.observation.masks);
    d["class_scores"] = to_array(f.observation.class_scores);
    d["detection_object"] = slots(f.detection_object);
    frames.append(d);
  }
  py::list tracks;
  for (const auto& t : s.gt.tracks) {
    py::dict d;
    d["identity"] = t.identity;
    d["label"] = t.label;
    py::list masks;
    for (const auto& m : t.masks) masks.append(m ? py::object(to_array(*m)) : py::object(py::none()));
    d["masks"] = masks;
    tracks.append(d);
  }
  py::dict out;
  out["config"] = to_text(s.config);
  out["frames"] = frames;
  out["tracks"] = tracks;
  out["separability"] = twin_separability(s);
  return out;
}

py::dict summary_dict(const EvalSummary& e) {
  py::dict d;
  d["accuracy"] = e.accuracy;
  d["id_switches"] = e.id_switches;
  d["mean_iou"] = e.mean_iou;
  return d;
}

}  // namespace

PYBIND11_MODULE(_ctxtrack, m) {
  m.doc() = "Context-aware instance association";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_RuntimeError);

  m.def(
      "hungarian",
      [](const Array& cost) { return slots(hungarian(to_tensor(cost)).target_of); },
      py::arg("cost"), "Minimum-cost assignment; entry i is the column of row i or None.");

  m.def(
      "boundary_band", [](const Array& mask, double threshold) { return to_array(boundary_band(to_tensor(mask), threshold)); },
      py::arg("mask"), py::arg("threshold") = 0.5, "Pixels within one step of the mask but outside it.");

  m.def(
      "surrounding_embedding",
      [](const Array& features, const Array& masks, std::size_t kernel_size) {
        InstanceObservation obs;
        obs.features = to_tensor(features);
        obs.masks = to_tensor(masks);
        const std::size_t n = obs.masks.rank() > 0 ? obs.masks.dim(0) : 0;
        obs.core = Tensor({n, obs.features.rank() == 3 ? obs.features.dim(2) : 0});
        obs.class_scores = Tensor({n, 1});
        return to_array(surrounding_embedding(obs, Kernel2D::average(kernel_size)).surrounding);
      },
      py::arg("features"), py::arg("masks"), py::arg("kernel_size") = 9,
      "Mean filtered feature over each instance's boundary band (H x W x C features, N x H x W masks).");

  m.def(
      "init_context_head",
      [](std::size_t channels, std::uint64_t seed, const std::string& kernel_mode, std::size_t kernel_size) {
        CounterRng rng(seed);
        return to_dict(init_context_head(head_config(channels, kernel_mode, kernel_size), rng));
      },
      py::arg("channels") = 16, py::arg("seed") = 0, py::arg("kernel_mode") = "average", py::arg("kernel_size") = 9);

  m.def(
      "fuse_context",
      [](const Array& core, const Array& surrounding, const py::dict& head, const std::string& kernel_mode,
         std::size_t kernel_size) {
        const Tensor c = to_tensor(core);
        return to_array(
            fuse_context(c, to_tensor(surrounding), to_params(head), head_config(c.cols(), kernel_mode, kernel_size)));
      },
      py::arg("core"), py::arg("surrounding"), py::arg("head"), py::arg("kernel_mode") = "average",
      py::arg("kernel_size") = 9, "Fusion MLP over concatenated core and surrounding rows.");

  m.def(
      "contrastive_loss",
      [](const Array& anchor, const Array& positives, const Array& negatives, bool cosine) {
        ContrastiveOptions opt;
        opt.cosine = cosine;
        const Tensor a = to_tensor(anchor), p = to_tensor(positives), n = to_tensor(negatives);
        return contrastive_emb_loss(a, {p}, n.size() == 0 ? std::vector<Tensor>{} : std::vector<Tensor>{n}, nullptr,
                                    opt);
      },
      py::arg("anchor"), py::arg("positives"), py::arg("negatives"), py::arg("cosine") = false,
      "log(1 + sum exp(v.k- - v.k+)) over positive/negative pairs for a 1 x C anchor.");

  m.def(
      "align_context",
      [](const Array& ordered_core, const Array& core, const Array& surrounding) {
        const Alignment a = align_context(to_tensor(ordered_core), to_tensor(core), to_tensor(surrounding));
        return py::make_tuple(to_array(a.aligned), slots(a.detection_to_slot.target_of));
      },
      py::arg("ordered_core"), py::arg("core"), py::arg("surrounding"),
      "Surrounding rows moved into slot order; also returns detection -> slot.");

  m.def(
      "context_cross_attention",
      [](const Array& q, const Array& k, const Array& v) {
        return to_array(context_cross_attention(to_tensor(q), to_tensor(k), to_tensor(v)));
      },
      py::arg("query"), py::arg("key"), py::arg("value"));

  m.def(
      "twin_scenario", [](std::uint64_t seed) { return scenario_dict(generate_scenario(twin_family_config(seed))); },
      py::arg("seed"), "Render one twin-occlusion video.");

  m.def(
      "load_scenario", [](const std::string& path) { return scenario_dict(load_scenario(path)); }, py::arg("path"));

  m.def(
      "save_twin_scenario",
      [](std::uint64_t seed, const std::string& path) { save_scenario(path, generate_scenario(twin_family_config(seed))); },
      py::arg("seed"), py::arg("path"));

  m.def(
      "canonical_config", [](const std::string& text) { return to_text(experiment_config_from_text(text)); },
      py::arg("text"), "Validate a config and return its canonical text.");

  m.def(
      "config_hash", [](const std::string& text) { return config_hash(experiment_config_from_text(text)); },
      py::arg("text"));

  m.def(
      "evaluate",
      [](const std::string& config_text, const std::string& tracker) {
        const ExperimentConfig cfg = experiment_config_from_text(config_text);
        std::vector<Scenario> videos;
        for (std::size_t i = 0; i < cfg.scenario.eval_videos; ++i)
          videos.push_back(generate_scenario(twin_family_config(cfg.scenario.eval_seed + i, cfg.scenario.twin)));
        CounterRng rng = CounterRng(cfg.seed).split(11);
        const ParameterSet head = init_context_head(cfg.head, rng);
        EvalSummary e;
        {
          py::gil_scoped_release release;
          if (tracker == "oracle") e = evaluate_oracle(videos);
          else if (tracker == "linking") e = evaluate_linking(videos, head, cfg.head);
          else if (tracker == "initial") e = evaluate_tracker(videos, initial_tracker(cfg), cfg.tracker, head, cfg.head);
          else throw ConfigError("tracker must be initial, linking or oracle, got '" + tracker + "'");
        }
        return summary_dict(e);
      },
      py::arg("config_text") = "{}", py::arg("tracker") = "initial",
      "Association accuracy on the config's eval videos with an untrained head.");

  m.def(
      "train",
      [](const std::string& config_text) {
        const ExperimentConfig cfg = experiment_config_from_text(config_text);
        ParameterSet head, tracker;
        EvalSummary pre, post;
        double ctx_initial = 0, ctx_final = 0;
        {
          py::gil_scoped_release release;
          const VideoSet v = make_videos(cfg);
          const ContextTrainResult ctx = run_context_training(cfg, v.train);
          head = ctx.head;
          ctx_initial = ctx.ctx_initial;
          ctx_final = ctx.ctx_final;
          pre = evaluate_tracker(v.eval, initial_tracker(cfg), cfg.tracker, head, cfg.head);
          tracker = run_tracker_training(cfg, v.train, head).tracker;
          post = evaluate_tracker(v.eval, tracker, cfg.tracker, head, cfg.head);
        }
        py::dict out;
        out["head"] = to_dict(head);
        out["tracker"] = to_dict(tracker);
        out["ctx_initial"] = ctx_initial;
        out["ctx_final"] = ctx_final;
        out["pre"] = summary_dict(pre);
        out["post"] = summary_dict(post);
        return out;
      },
      py::arg("config_text"), "Train the context head then the tracker; returns parameters and accuracies.");
}
