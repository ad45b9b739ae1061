#include "ctxtrack/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ctxtrack {

using json = nlohmann::json;

namespace {

std::string type_name(const json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  return "object";
}

[[noreturn]] void type_error(const std::string& path, const char* expected, const json& got) {
  throw ConfigError(path + ": expected " + expected + ", got " + type_name(got));
}

/// Reads one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) type_error(path_.empty() ? "<root>" : path_, "an object", j_);
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) type_error(key_path(key), "a boolean", *v);
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) type_error(key_path(key), "a number", *v);
      out = v->get<double>();
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) out = to_unsigned(*v, key_path(key));
  }
  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) type_error(key_path(key), "an integer", *v);
      out = v->get<int>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) type_error(key_path(key), "a string", *v);
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) out = to_doubles(*v, key_path(key));
  }
  template <class E, class Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string name;
    get(key, name);
    if (!seen_.count(key)) return;
    try {
      out = parse(name);
    } catch (const ConfigError& e) {
      throw ConfigError(key_path(key) + ": " + e.what());
    }
  }

  static std::uint64_t to_unsigned(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) throw ConfigError(path + ": must be non-negative");
    type_error(path, "a non-negative integer", v);
  }
  static std::vector<double> to_doubles(const json& v, const std::string& path) {
    if (!v.is_array()) type_error(path, "an array of numbers", v);
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) type_error(path + "[" + std::to_string(i) + "]", "a number", v[i]);
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void get_size(Reader& r, const std::string& key, std::size_t& out) {
  std::uint64_t v = out;
  r.get(key, v);
  out = static_cast<std::size_t>(v);
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---- scenario config ----

json to_json(const ObjectSpec& o) {
  json j;
  j["shape"] = to_string(o.shape);
  j["half_height"] = o.half_height;
  j["half_width"] = o.half_width;
  j["y"] = o.y;
  j["x"] = o.x;
  j["vy"] = o.vy;
  j["vx"] = o.vx;
  j["appearance"] = o.appearance;
  j["label"] = o.label;
  j["attach_to"] = o.attach_to ? json(*o.attach_to) : json(nullptr);
  j["offset_y"] = o.offset_y;
  j["offset_x"] = o.offset_x;
  j["first_frame"] = o.first_frame;
  j["bounds"] = o.bounds ? json(*o.bounds) : json(nullptr);
  return j;
}

ObjectSpec object_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  ObjectSpec o;
  r.get_enum("shape", o.shape, object_shape_from_string);
  r.get("half_height", o.half_height);
  r.get("half_width", o.half_width);
  r.get("y", o.y);
  r.get("x", o.x);
  r.get("vy", o.vy);
  r.get("vx", o.vx);
  r.get("appearance", o.appearance);
  get_size(r, "label", o.label);
  if (const json* v = r.find("attach_to"); v && !v->is_null())
    o.attach_to = static_cast<std::size_t>(Reader::to_unsigned(*v, r.key_path("attach_to")));
  r.get("offset_y", o.offset_y);
  r.get("offset_x", o.offset_x);
  get_size(r, "first_frame", o.first_frame);
  if (const json* v = r.find("bounds"); v && !v->is_null()) {
    const auto b = Reader::to_doubles(*v, r.key_path("bounds"));
    if (b.size() != 4) throw ConfigError(r.key_path("bounds") + ": expected 4 numbers");
    o.bounds = std::array<double, 4>{b[0], b[1], b[2], b[3]};
  }
  r.finish();
  return o;
}

json to_json(const ScenarioConfig& c) {
  json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["channels"] = c.channels;
  j["classes"] = c.classes;
  j["frames"] = c.frames;
  j["slots"] = c.slots;
  j["objects"] = json::array();
  for (const auto& o : c.objects) j["objects"].push_back(to_json(o));
  j["twin_groups"] = c.twin_groups;
  j["occlusions"] = json::array();
  for (const auto& e : c.occlusions)
    j["occlusions"].push_back({{"target", e.target}, {"first", e.first}, {"last", e.last}, {"fraction", e.fraction}});
  j["pixel_noise"] = c.pixel_noise;
  j["core_noise"] = c.core_noise;
  j["class_noise"] = c.class_noise;
  j["position_amplitude"] = c.position_amplitude;
  j["background"] = c.background;
  j["occluder"] = c.occluder;
  j["seed"] = c.seed;
  return j;
}

ScenarioConfig scenario_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  ScenarioConfig c;
  get_size(r, "height", c.height);
  get_size(r, "width", c.width);
  get_size(r, "channels", c.channels);
  get_size(r, "classes", c.classes);
  get_size(r, "frames", c.frames);
  get_size(r, "slots", c.slots);
  if (const json* v = r.find("objects")) {
    if (!v->is_array()) type_error(r.key_path("objects"), "an array", *v);
    for (std::size_t i = 0; i < v->size(); ++i)
      c.objects.push_back(object_from_json((*v)[i], r.key_path("objects") + "[" + std::to_string(i) + "]"));
  }
  if (const json* v = r.find("twin_groups")) {
    const std::string p = r.key_path("twin_groups");
    if (!v->is_array()) type_error(p, "an array", *v);
    for (std::size_t i = 0; i < v->size(); ++i) {
      const json& g = (*v)[i];
      const std::string gp = p + "[" + std::to_string(i) + "]";
      if (!g.is_array()) type_error(gp, "an array", g);
      std::vector<std::size_t> members;
      for (std::size_t k = 0; k < g.size(); ++k)
        members.push_back(static_cast<std::size_t>(Reader::to_unsigned(g[k], gp + "[" + std::to_string(k) + "]")));
      c.twin_groups.push_back(std::move(members));
    }
  }
  if (const json* v = r.find("occlusions")) {
    const std::string p = r.key_path("occlusions");
    if (!v->is_array()) type_error(p, "an array", *v);
    for (std::size_t i = 0; i < v->size(); ++i) {
      Reader e((*v)[i], p + "[" + std::to_string(i) + "]");
      OcclusionEvent ev;
      get_size(e, "target", ev.target);
      get_size(e, "first", ev.first);
      get_size(e, "last", ev.last);
      e.get("fraction", ev.fraction);
      e.finish();
      c.occlusions.push_back(ev);
    }
  }
  r.get("pixel_noise", c.pixel_noise);
  r.get("core_noise", c.core_noise);
  r.get("class_noise", c.class_noise);
  r.get("position_amplitude", c.position_amplitude);
  r.get("background", c.background);
  r.get("occluder", c.occluder);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

// ---- experiment config ----

json to_json(const TwinFamilyOptions& o) {
  return {{"height", o.height},
          {"width", o.width},
          {"channels", o.channels},
          {"classes", o.classes},
          {"frames", o.frames},
          {"pairs", o.pairs},
          {"appearance_scale", o.appearance_scale},
          {"twin_radius_min", o.twin_radius_min},
          {"twin_radius_max", o.twin_radius_max},
          {"mate_half_min", o.mate_half_min},
          {"mate_half_max", o.mate_half_max},
          {"max_speed", o.max_speed},
          {"cell_margin", o.cell_margin},
          {"pixel_noise", o.pixel_noise},
          {"core_noise", o.core_noise},
          {"class_noise", o.class_noise},
          {"position_amplitude", o.position_amplitude},
          {"occlusion_events", o.occlusion_events},
          {"occlusion_fraction", o.occlusion_fraction},
          {"max_attempts", o.max_attempts}};
}

TwinFamilyOptions twin_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  TwinFamilyOptions o;
  get_size(r, "height", o.height);
  get_size(r, "width", o.width);
  get_size(r, "channels", o.channels);
  get_size(r, "classes", o.classes);
  get_size(r, "frames", o.frames);
  get_size(r, "pairs", o.pairs);
  r.get("appearance_scale", o.appearance_scale);
  r.get("twin_radius_min", o.twin_radius_min);
  r.get("twin_radius_max", o.twin_radius_max);
  r.get("mate_half_min", o.mate_half_min);
  r.get("mate_half_max", o.mate_half_max);
  r.get("max_speed", o.max_speed);
  r.get("cell_margin", o.cell_margin);
  r.get("pixel_noise", o.pixel_noise);
  r.get("core_noise", o.core_noise);
  r.get("class_noise", o.class_noise);
  r.get("position_amplitude", o.position_amplitude);
  get_size(r, "occlusion_events", o.occlusion_events);
  r.get("occlusion_fraction", o.occlusion_fraction);
  get_size(r, "max_attempts", o.max_attempts);
  r.finish();
  return o;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  const auto& s = c.scenario;
  j["scenario"] = {{"family", s.family},         {"twin", to_json(s.twin)},
                   {"train_videos", s.train_videos}, {"train_seed", s.train_seed},
                   {"eval_videos", s.eval_videos},   {"eval_seed", s.eval_seed},
                   {"eval_file", s.eval_file}};
  const auto& h = c.head;
  const auto& t = c.tracker;
  j["model"] = {{"channels", h.channels},
                {"slots", c.slots},
                {"kernel_mode", to_string(h.kernel_mode)},
                {"kernel_size", h.kernel_size},
                {"mask_threshold", h.mask_threshold},
                {"final_relu", h.final_relu},
                {"blocks", t.blocks},
                {"ffn_multiplier", t.ffn_multiplier},
                {"key_source", to_string(t.key_source)},
                {"align_context", t.align_context},
                {"cross_norm", t.cross_norm},
                {"cross_norm_gain", t.cross_norm_gain}};
  const auto& ct = c.context_training;
  j["context_training"] = {{"steps", ct.steps},
                           {"frames", ct.frames},
                           {"learning_rate", ct.optimizer.learning_rate},
                           {"weight_decay", ct.optimizer.weight_decay},
                           {"use_ctx", ct.use_ctx},
                           {"use_pcc", ct.use_pcc},
                           {"cosine", ct.contrastive.cosine},
                           {"same_frame_negatives", ct.contrastive.same_frame_negatives},
                           {"log_every", ct.log_every},
                           {"window", ct.window}};
  const auto& tt = c.tracker_training;
  j["tracker_training"] = {{"steps", tt.steps},
                           {"frames", tt.frames},
                           {"learning_rate", tt.optimizer.learning_rate},
                           {"weight_decay", tt.optimizer.weight_decay},
                           {"log_every", tt.log_every}};
  const auto& w = c.weights;
  j["loss_weights"] = {{"cls", w.cls}, {"bce", w.bce}, {"dice", w.dice}, {"ctx", w.ctx}, {"pcc", w.pcc}};
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  Reader r(j, "");
  ExperimentConfig c;
  if (const json* v = r.find("version")) {
    if (!v->is_number_integer()) type_error("version", "an integer", *v);
    if (v->get<long long>() != kConfigVersion)
      throw ConfigError("version: unsupported config version " + v->dump() + " (expected " +
                        std::to_string(kConfigVersion) + ")");
  }
  r.get("seed", c.seed);
  if (const json* v = r.find("scenario")) {
    Reader s(*v, "scenario");
    auto& src = c.scenario;
    s.get("family", src.family);
    if (const json* tw = s.find("twin")) src.twin = twin_from_json(*tw, "scenario.twin");
    get_size(s, "train_videos", src.train_videos);
    s.get("train_seed", src.train_seed);
    get_size(s, "eval_videos", src.eval_videos);
    s.get("eval_seed", src.eval_seed);
    s.get("eval_file", src.eval_file);
    s.finish();
  }
  if (const json* v = r.find("model")) {
    Reader m(*v, "model");
    get_size(m, "channels", c.head.channels);
    get_size(m, "slots", c.slots);
    m.get_enum("kernel_mode", c.head.kernel_mode, kernel_mode_from_string);
    get_size(m, "kernel_size", c.head.kernel_size);
    m.get("mask_threshold", c.head.mask_threshold);
    m.get("final_relu", c.head.final_relu);
    get_size(m, "blocks", c.tracker.blocks);
    get_size(m, "ffn_multiplier", c.tracker.ffn_multiplier);
    m.get_enum("key_source", c.tracker.key_source, key_source_from_string);
    m.get("align_context", c.tracker.align_context);
    m.get("cross_norm", c.tracker.cross_norm);
    m.get("cross_norm_gain", c.tracker.cross_norm_gain);
    m.finish();
  }
  c.tracker.channels = c.head.channels;
  if (const json* v = r.find("context_training")) {
    Reader t(*v, "context_training");
    auto& ct = c.context_training;
    get_size(t, "steps", ct.steps);
    get_size(t, "frames", ct.frames);
    t.get("learning_rate", ct.optimizer.learning_rate);
    t.get("weight_decay", ct.optimizer.weight_decay);
    t.get("use_ctx", ct.use_ctx);
    t.get("use_pcc", ct.use_pcc);
    t.get("cosine", ct.contrastive.cosine);
    t.get("same_frame_negatives", ct.contrastive.same_frame_negatives);
    get_size(t, "log_every", ct.log_every);
    get_size(t, "window", ct.window);
    t.finish();
  }
  if (const json* v = r.find("tracker_training")) {
    Reader t(*v, "tracker_training");
    auto& tt = c.tracker_training;
    get_size(t, "steps", tt.steps);
    get_size(t, "frames", tt.frames);
    t.get("learning_rate", tt.optimizer.learning_rate);
    t.get("weight_decay", tt.optimizer.weight_decay);
    get_size(t, "log_every", tt.log_every);
    t.finish();
  }
  if (const json* v = r.find("loss_weights")) {
    Reader w(*v, "loss_weights");
    w.get("cls", c.weights.cls);
    w.get("bce", c.weights.bce);
    w.get("dice", c.weights.dice);
    w.get("ctx", c.weights.ctx);
    w.get("pcc", c.weights.pcc);
    w.finish();
  }
  r.finish();
  c.validate();
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (version != kConfigVersion) throw ConfigError("version: unsupported config version " + std::to_string(version));
  if (scenario.family != "twin") throw ConfigError("scenario.family: unknown family '" + scenario.family + "'");
  const auto& tw = scenario.twin;
  if (tw.pairs == 0) throw ConfigError("scenario.twin.pairs: must be positive");
  if (tw.frames < 2) throw ConfigError("scenario.twin.frames: need at least 2 frames");
  if (tw.channels < 4) throw ConfigError("scenario.twin.channels: need at least 4 channels");
  if (scenario.train_videos == 0) throw ConfigError("scenario.train_videos: must be positive");
  if (scenario.eval_videos == 0 && scenario.eval_file.empty())
    throw ConfigError("scenario.eval_videos: must be positive");
  if (head.channels == 0) throw ConfigError("model.channels: must be positive");
  if (head.channels != tw.channels)
    throw ConfigError("model.channels: " + std::to_string(head.channels) + " differs from scenario.twin.channels " +
                      std::to_string(tw.channels));
  if (slots != 4 * tw.pairs)
    throw ConfigError("model.slots: the twin family renders 4 objects per pair (" + std::to_string(4 * tw.pairs) +
                      "), got " + std::to_string(slots));
  if (head.kernel_size == 0 || head.kernel_size % 2 == 0) throw ConfigError("model.kernel_size: must be odd");
  if (!(head.mask_threshold > 0.0 && head.mask_threshold <= 1.0))
    throw ConfigError("model.mask_threshold: must lie in (0, 1]");
  if (tracker.blocks == 0) throw ConfigError("model.blocks: must be positive");
  if (tracker.ffn_multiplier == 0) throw ConfigError("model.ffn_multiplier: must be positive");
  if (!(tracker.cross_norm_gain > 0.0)) throw ConfigError("model.cross_norm_gain: must be positive");
  const auto& ct = context_training;
  if (ct.frames < 2 || ct.frames > tw.frames)
    throw ConfigError("context_training.frames: must lie in [2, scenario.twin.frames]");
  if (ct.optimizer.learning_rate < 0.0) throw ConfigError("context_training.learning_rate: must be >= 0");
  if (ct.optimizer.weight_decay < 0.0) throw ConfigError("context_training.weight_decay: must be >= 0");
  const auto& tt = tracker_training;
  if (tt.frames < 2 || tt.frames > tw.frames)
    throw ConfigError("tracker_training.frames: must lie in [2, scenario.twin.frames]");
  if (tt.optimizer.learning_rate < 0.0) throw ConfigError("tracker_training.learning_rate: must be >= 0");
  if (tt.optimizer.weight_decay < 0.0) throw ConfigError("tracker_training.weight_decay: must be >= 0");
  for (auto [name, v] : {std::pair{"cls", weights.cls}, {"bce", weights.bce}, {"dice", weights.dice},
                         {"ctx", weights.ctx}, {"pcc", weights.pcc}})
    if (v < 0.0) throw ConfigError(std::string("loss_weights.") + name + ": must be >= 0");
}

ContextTrainConfig ExperimentConfig::context_train_config() const {
  ContextTrainConfig c = context_training;
  c.weights = weights;
  c.seed = seed;
  return c;
}

TrackerTrainConfig ExperimentConfig::tracker_train_config() const {
  TrackerTrainConfig c = tracker_training;
  c.weights = weights;
  c.seed = seed;
  return c;
}

std::string to_text(const ExperimentConfig& config) { return dump(to_json(config)); }

ExperimentConfig experiment_config_from_text(const std::string& text) {
  return experiment_from_json(parse_json(text));
}

ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_text(read_text_file(path));
}

std::string to_text(const ScenarioConfig& config) { return dump(to_json(config)); }

ScenarioConfig scenario_config_from_text(const std::string& text) {
  return scenario_from_json(parse_json(text), "");
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_hash(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

std::string config_hash(const ExperimentConfig& config) { return hex_hash(to_text(config)); }

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace ctxtrack
