#include "ctxtrack/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ctxtrack/tracker.hpp"

namespace ctxtrack {

std::string to_string(ObjectShape s) { return s == ObjectShape::disc ? "disc" : "rectangle"; }

ObjectShape object_shape_from_string(const std::string& name) {
  if (name == "disc") return ObjectShape::disc;
  if (name == "rectangle") return ObjectShape::rectangle;
  throw ConfigError("unknown object shape '" + name + "'");
}

namespace {

constexpr std::size_t npos = Assignment::npos;
constexpr int kBackground = -1;
constexpr int kOccluder = -2;

std::string obj(std::size_t k) { return "objects[" + std::to_string(k) + "]"; }

std::size_t root_of(const ScenarioConfig& c, std::size_t k) {
  return c.objects[k].attach_to ? *c.objects[k].attach_to : k;
}

struct Extent {
  double lo_y, hi_y, lo_x, hi_x;
};

/// Bounding box of a root's group relative to the root centre.
Extent group_extent(const ScenarioConfig& c, std::size_t root) {
  Extent e{0, 0, 0, 0};
  bool first = true;
  for (std::size_t k = 0; k < c.objects.size(); ++k) {
    if (root_of(c, k) != root) continue;
    const auto& o = c.objects[k];
    const double oy = k == root ? 0.0 : o.offset_y, ox = k == root ? 0.0 : o.offset_x;
    const Extent m{oy - o.half_height, oy + o.half_height, ox - o.half_width, ox + o.half_width};
    if (first) {
      e = m;
      first = false;
    } else {
      e = {std::min(e.lo_y, m.lo_y), std::max(e.hi_y, m.hi_y), std::min(e.lo_x, m.lo_x),
           std::max(e.hi_x, m.hi_x)};
    }
  }
  return e;
}

void bounce(double& p, double& v, double lo, double hi, double limit) {
  if (p + lo < 0.0) {
    p += 2.0 * -(p + lo);
    v = -v;
  } else if (p + hi > limit) {
    p -= 2.0 * (p + hi - limit);
    v = -v;
  }
}

std::array<double, 4> bounds_of(const ScenarioConfig& c, const ObjectSpec& o) {
  return o.bounds ? *o.bounds : std::array<double, 4>{0.0, double(c.height - 1), 0.0, double(c.width - 1)};
}

bool inside(const ObjectSpec& o, double cy, double cx, std::size_t y, std::size_t x) {
  const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
  if (o.shape == ObjectShape::rectangle) return std::abs(dy) <= o.half_height && std::abs(dx) <= o.half_width;
  const double ry = o.half_height, rx = o.half_width;
  return (dy * dy) / (ry * ry) + (dx * dx) / (rx * rx) <= 1.0;
}

double position_code(std::size_t j, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  const double freq = static_cast<double>(j / 4 + 1);
  const double ay = 2.0 * std::numbers::pi * freq * static_cast<double>(y) / static_cast<double>(h);
  const double ax = 2.0 * std::numbers::pi * freq * static_cast<double>(x) / static_cast<double>(w);
  switch (j % 4) {
    case 0: return std::sin(ay);
    case 1: return std::cos(ay);
    case 2: return std::sin(ax);
    default: return std::cos(ax);
  }
}

/// Cut column for an occluder hiding `fraction` of the target's pixels from its left edge.
void apply_occluder(std::vector<int>& owner, std::size_t h, std::size_t w, int target, double fraction) {
  std::vector<std::size_t> col(w, 0);
  std::size_t area = 0, r0 = h, r1 = 0, c0 = w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (owner[y * w + x] == target) {
        ++col[x];
        ++area;
        r0 = std::min(r0, y);
        r1 = std::max(r1, y);
        c0 = std::min(c0, x);
      }
  if (area == 0 || fraction <= 0.0) return;
  const double goal = fraction * static_cast<double>(area);
  std::size_t cut = c0, hidden = 0, best_cut = c0;
  double best = goal;
  while (cut < w) {
    hidden += col[cut];
    ++cut;
    const double err = std::abs(static_cast<double>(hidden) - goal);
    if (err < best) {
      best = err;
      best_cut = cut;
    }
    if (hidden == area) break;
  }
  for (std::size_t y = r0; y <= r1; ++y)
    for (std::size_t x = c0; x < best_cut; ++x) owner[y * w + x] = kOccluder;
}

double row_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double d = a.at(i, c) - b.at(j, c);
    s += d * d;
  }
  return std::sqrt(s);
}

Scenario render(const ScenarioConfig& config) {
  config.validate();
  const std::size_t h = config.height, w = config.width, c = config.channels, n = config.slots;
  const std::size_t k_classes = config.classes, objects = config.objects.size();
  const std::size_t pe = config.position_channels();
  const auto traj = object_trajectories(config);
  const CounterRng root(config.seed);
  const CounterRng pixel_rng = root.split(1), core_rng = root.split(2), class_rng = root.split(3),
                   order_rng = root.split(4);
  std::vector<double> background = config.background, occluder = config.occluder;
  background.resize(c, 0.0);
  occluder.resize(c, 0.0);

  Scenario s;
  s.config = config;
  s.gt.frames = config.frames;
  s.gt.tracks.resize(objects);
  for (std::size_t k = 0; k < objects; ++k) {
    s.gt.tracks[k].identity = k;
    s.gt.tracks[k].label = config.objects[k].label;
    s.gt.tracks[k].masks.resize(config.frames);
  }

  for (std::size_t t = 0; t < config.frames; ++t) {
    std::vector<int> owner(h * w, kBackground);
    for (std::size_t k = 0; k < objects; ++k) {
      const auto& o = config.objects[k];
      if (t < o.first_frame) continue;
      const auto [cy, cx] = traj[k][t];
      const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(cy - o.half_height)));
      const auto y1 = static_cast<std::size_t>(std::min(double(h - 1), std::ceil(cy + o.half_height)));
      const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(cx - o.half_width)));
      const auto x1 = static_cast<std::size_t>(std::min(double(w - 1), std::ceil(cx + o.half_width)));
      for (std::size_t y = y0; y <= y1; ++y)
        for (std::size_t x = x0; x <= x1; ++x)
          if (inside(o, cy, cx, y, x)) owner[y * w + x] = static_cast<int>(k);
    }
    for (const auto& e : config.occlusions)
      if (e.first <= t && t <= e.last) apply_occluder(owner, h, w, static_cast<int>(e.target), e.fraction);

    Tensor features({h, w, c});
    CounterRng noise = pixel_rng.split(t);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const int who = owner[y * w + x];
        const std::vector<double>& base = who == kBackground ? background
                                          : who == kOccluder ? occluder
                                                             : config.objects[static_cast<std::size_t>(who)].appearance;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double v = base[ch];
          if (ch >= c - pe) v += config.position_amplitude * position_code(ch - (c - pe), y, x, h, w);
          features.at(y, x, ch) = v + config.pixel_noise * noise.normal();
        }
      }

    // Detections: existing objects in index order, then padding; shuffled below.
    std::vector<std::size_t> detections;
    for (std::size_t k = 0; k < objects; ++k)
      if (t >= config.objects[k].first_frame) detections.push_back(k);
    detections.resize(n, npos);
    const auto perm = order_rng.split(t).permutation(n);

    ScenarioFrame frame;
    auto& obs = frame.observation;
    obs.features = features;
    obs.core = Tensor({n, c});
    obs.masks = Tensor({n, h, w});
    obs.class_scores = Tensor({n, k_classes});
    frame.detection_object.resize(n);
    CounterRng core_noise = core_rng.split(t), class_noise = class_rng.split(t);
    for (std::size_t row = 0; row < n; ++row) {
      const std::size_t k = detections[perm[row]];
      frame.detection_object[row] = k;
      std::size_t area = 0;
      if (k != npos) {
        Tensor gt_mask({h, w});
        for (std::size_t p = 0; p < h * w; ++p)
          if (owner[p] == static_cast<int>(k)) {
            gt_mask[p] = 1.0;
            obs.masks[row * h * w + p] = 1.0;
            ++area;
            for (std::size_t ch = 0; ch < c; ++ch) obs.core.at(row, ch) += features[p * c + ch];
          }
        if (area > 0) s.gt.tracks[k].masks[t] = std::move(gt_mask);
      }
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double eps = config.core_noise * core_noise.normal();
        if (area > 0)
          obs.core.at(row, ch) = obs.core.at(row, ch) / static_cast<double>(area) + eps;
        else if (k == npos)
          obs.core.at(row, ch) = eps;
      }
      for (std::size_t q = 0; q < k_classes; ++q) {
        const double hot = (k != npos && area > 0 && config.objects[k].label == q) ? 1.0 : 0.0;
        obs.class_scores.at(row, q) = hot + config.class_noise * class_noise.normal();
      }
    }
    s.frames.push_back(std::move(frame));
  }
  return s;
}

}  // namespace

void ScenarioConfig::validate() const {
  if (height == 0 || width == 0) throw ConfigError("height/width must be positive");
  if (channels == 0) throw ConfigError("channels must be positive");
  if (classes == 0) throw ConfigError("classes must be positive");
  if (objects.size() > slots)
    throw ConfigError("slots: " + std::to_string(objects.size()) + " objects exceed " + std::to_string(slots) +
                      " slots");
  if (!background.empty() && background.size() != channels) throw ConfigError("background: length must be C");
  if (!occluder.empty() && occluder.size() != channels) throw ConfigError("occluder: length must be C");
  if (pixel_noise < 0 || core_noise < 0 || class_noise < 0) throw ConfigError("noise levels must be >= 0");
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const auto& o = objects[k];
    if (!(o.half_height > 0.0 && o.half_width > 0.0)) throw ConfigError(obj(k) + ": sizes must be positive");
    if (2.0 * o.half_height + 1.0 > static_cast<double>(height) ||
        2.0 * o.half_width + 1.0 > static_cast<double>(width))
      throw ConfigError(obj(k) + ": object larger than grid");
    if (o.appearance.size() != channels)
      throw ConfigError(obj(k) + ".appearance: expected " + std::to_string(channels) + " values");
    if (o.label >= classes) throw ConfigError(obj(k) + ".label: out of range");
    if (o.attach_to) {
      const std::size_t p = *o.attach_to;
      if (p >= objects.size() || p == k || objects[p].attach_to)
        throw ConfigError(obj(k) + ".attach_to: must name a free-moving object");
    }
  }
  for (std::size_t k = 0; k < objects.size(); ++k) {
    if (objects[k].attach_to) continue;
    const Extent e = group_extent(*this, k);
    const auto& o = objects[k];
    if (o.y + e.hi_y < 0.0 || o.y + e.lo_y > double(height - 1) || o.x + e.hi_x < 0.0 ||
        o.x + e.lo_x > double(width - 1))
      throw ConfigError(obj(k) + ": starts off the grid");
    if (e.hi_y - e.lo_y + 1.0 > double(height) || e.hi_x - e.lo_x + 1.0 > double(width))
      throw ConfigError(obj(k) + ": attached group larger than grid");
    if (o.bounds) {
      const auto& b = *o.bounds;
      if (!(b[0] <= b[1] && b[2] <= b[3]) || b[0] < 0.0 || b[2] < 0.0 || b[1] > double(height - 1) ||
          b[3] > double(width - 1))
        throw ConfigError(obj(k) + ".bounds: must be an on-grid box");
      const double tol = 1e-9;
      if (o.y + e.lo_y < b[0] - tol || o.y + e.hi_y > b[1] + tol || o.x + e.lo_x < b[2] - tol ||
          o.x + e.hi_x > b[3] + tol)
        throw ConfigError(obj(k) + ": starts outside its bounds");
    }
  }
  for (const auto& g : twin_groups) {
    if (g.size() < 2) throw ConfigError("twin_groups: groups need at least two members");
    for (std::size_t m : g) {
      if (m >= objects.size()) throw ConfigError("twin_groups: member out of range");
      if (objects[m].appearance != objects[g[0]].appearance)
        throw ConfigError("twin_groups: members must share appearance");
    }
  }
  for (const auto& e : occlusions) {
    if (e.target >= objects.size()) throw ConfigError("occlusions: target out of range");
    if (e.first > e.last || e.last >= frames) throw ConfigError("occlusions: frame range invalid");
    if (!(e.fraction >= 0.0 && e.fraction <= 1.0)) throw ConfigError("occlusions: fraction must lie in [0, 1]");
  }
}

std::vector<std::vector<std::pair<double, double>>> object_trajectories(const ScenarioConfig& config) {
  const std::size_t objects = config.objects.size();
  std::vector<std::vector<std::pair<double, double>>> out(objects);
  for (std::size_t k = 0; k < objects; ++k) {
    const auto& o = config.objects[k];
    if (o.attach_to) continue;
    const Extent e = group_extent(config, k);
    const auto box = bounds_of(config, o);
    double y = o.y - box[0], x = o.x - box[2], vy = o.vy, vx = o.vx;
    const double ly = box[1] - box[0], lx = box[3] - box[2];
    for (std::size_t t = 0; t < config.frames; ++t) {
      out[k].emplace_back(y + box[0], x + box[2]);
      y += vy;
      x += vx;
      // Only groups that fit inside their box are reflected at its edges.
      if (e.hi_y - e.lo_y <= ly) bounce(y, vy, e.lo_y, e.hi_y, ly);
      if (e.hi_x - e.lo_x <= lx) bounce(x, vx, e.lo_x, e.hi_x, lx);
    }
  }
  for (std::size_t k = 0; k < objects; ++k) {
    const auto& o = config.objects[k];
    if (!o.attach_to) continue;
    for (const auto& [py, px] : out[*o.attach_to]) out[k].emplace_back(py + o.offset_y, px + o.offset_x);
  }
  return out;
}

Scenario generate_scenario(const ScenarioConfig& config) {
  Scenario s = render(config);
  if (!config.twin_groups.empty()) {
    const double ratio = twin_separability(s);
    if (!(ratio < 0.1))
      throw SeparabilityError("twin separability ratio " + std::to_string(ratio) + " is not below 0.1");
  }
  return s;
}

Scenario occlude(const Scenario& scenario, const std::vector<OcclusionEvent>& schedule) {
  if (schedule.empty()) return scenario;
  ScenarioConfig config = scenario.config;
  config.occlusions.insert(config.occlusions.end(), schedule.begin(), schedule.end());
  return generate_scenario(config);
}

double twin_separability(const Scenario& s) {
  if (s.config.twin_groups.empty()) return 0.0;
  double core = 0.0, surround = 0.0;
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    const auto& f = s.frames[t];
    const Tensor sur = surrounding_embedding(f.observation, 9).surrounding;
    std::vector<std::size_t> row(s.config.objects.size(), npos);
    for (std::size_t r = 0; r < f.detection_object.size(); ++r) {
      const std::size_t k = f.detection_object[r];
      if (k != npos && s.gt.tracks[k].present(t)) row[k] = r;
    }
    for (const auto& g : s.config.twin_groups)
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = i + 1; j < g.size(); ++j) {
          const std::size_t a = row[g[i]], b = row[g[j]];
          if (a == npos || b == npos) continue;
          core += row_distance(f.observation.core, a, f.observation.core, b);
          surround += row_distance(sur, a, sur, b);
        }
  }
  if (surround <= 0.0) return core > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return core / surround;
}

ScenarioConfig twin_family_config(std::uint64_t seed, const TwinFamilyOptions& opt) {
  if (opt.pairs == 0 || opt.pairs * 4 > 16) throw ConfigError("pairs must lie in [1, 4]");
  if (opt.channels < 4) throw ConfigError("channels must be at least 4");
  const std::size_t c = opt.channels, appearance = c - c / 4;
  const double h = double(opt.height), w = double(opt.width);
  const std::size_t groups = 2 * opt.pairs;
  const std::size_t grid = groups <= 4 ? 2 : 3;
  std::string last;
  for (std::size_t attempt = 0; attempt < opt.max_attempts; ++attempt) {
    CounterRng rng = CounterRng(seed).split(0x7419 + attempt);
    ScenarioConfig cfg;
    cfg.height = opt.height;
    cfg.width = opt.width;
    cfg.channels = c;
    cfg.classes = opt.classes;
    cfg.frames = opt.frames;
    cfg.slots = 2 * groups;
    cfg.seed = rng.next_u64();
    cfg.pixel_noise = opt.pixel_noise;
    cfg.core_noise = opt.core_noise;
    cfg.class_noise = opt.class_noise;
    cfg.position_amplitude = opt.position_amplitude;
    auto random_appearance = [&] {
      // Random direction with norm appearance_scale * sqrt(dims).
      std::vector<double> a(c, 0.0);
      double norm = 0.0;
      for (std::size_t i = 0; i < appearance; ++i) {
        a[i] = rng.normal();
        norm += a[i] * a[i];
      }
      const double s = opt.appearance_scale * std::sqrt(double(appearance) / norm);
      for (std::size_t i = 0; i < appearance; ++i) a[i] *= s;
      return a;
    };
    cfg.occluder = random_appearance();
    const auto cells = rng.permutation(grid * grid);
    for (std::size_t p = 0; p < opt.pairs; ++p) {
      const auto shared = random_appearance();
      const std::size_t label = rng.below(opt.classes);
      std::vector<std::size_t> members;
      for (std::size_t m = 0; m < 2; ++m) {
        const std::size_t g = 2 * p + m;
        ObjectSpec twin;
        twin.shape = ObjectShape::disc;
        twin.half_height = twin.half_width = rng.uniform(opt.twin_radius_min, opt.twin_radius_max);
        twin.appearance = shared;
        twin.label = label;
        twin.vy = rng.uniform(-opt.max_speed, opt.max_speed);
        twin.vx = rng.uniform(-opt.max_speed, opt.max_speed);

        ObjectSpec mate;
        mate.shape = ObjectShape::rectangle;
        mate.half_height = rng.uniform(opt.mate_half_min, opt.mate_half_max);
        mate.half_width = rng.uniform(opt.mate_half_min, opt.mate_half_max);
        mate.appearance = random_appearance();
        mate.label = rng.below(opt.classes);
        const std::size_t side = rng.below(4);
        const double gap = 1.0;
        const double dy = twin.half_height + gap + mate.half_height + 1.0;
        const double dx = twin.half_width + gap + mate.half_width + 1.0;
        mate.offset_y = side == 0 ? -dy : side == 1 ? dy : rng.uniform(-2.0, 2.0);
        mate.offset_x = side == 2 ? -dx : side == 3 ? dx : rng.uniform(-2.0, 2.0);

        // Place the group inside its cell, fully on the grid.
        const double lo_y = std::min(-twin.half_height, mate.offset_y - mate.half_height);
        const double hi_y = std::max(twin.half_height, mate.offset_y + mate.half_height);
        const double lo_x = std::min(-twin.half_width, mate.offset_x - mate.half_width);
        const double hi_x = std::max(twin.half_width, mate.offset_x + mate.half_width);
        const std::size_t cell = cells[g];
        const double cell_h = h / double(grid), cell_w = w / double(grid);
        const double cy = (double(cell / grid) + 0.5) * cell_h + rng.uniform(-0.15, 0.15) * cell_h;
        const double cx = (double(cell % grid) + 0.5) * cell_w + rng.uniform(-0.15, 0.15) * cell_w;
        const double margin = opt.cell_margin;
        const std::array<double, 4> box{double(cell / grid) * cell_h + margin,
                                        double(cell / grid + 1) * cell_h - 1.0 - margin,
                                        double(cell % grid) * cell_w + margin,
                                        double(cell % grid + 1) * cell_w - 1.0 - margin};
        if (box[1] - box[0] < hi_y - lo_y || box[3] - box[2] < hi_x - lo_x)
          throw ConfigError("cell_margin: groups do not fit inside their cells");
        twin.y = std::clamp(cy, box[0] - lo_y, box[1] - hi_y);
        twin.x = std::clamp(cx, box[2] - lo_x, box[3] - hi_x);
        twin.bounds = box;

        const std::size_t twin_index = cfg.objects.size();
        members.push_back(twin_index);
        mate.attach_to = twin_index;
        cfg.objects.push_back(std::move(twin));
        cfg.objects.push_back(std::move(mate));
      }
      cfg.twin_groups.push_back(members);
    }
    for (std::size_t e = 0; e < opt.occlusion_events && opt.frames >= 4; ++e) {
      OcclusionEvent ev;
      const auto& group = cfg.twin_groups[rng.below(cfg.twin_groups.size())];
      ev.target = group[rng.below(group.size())];
      ev.first = 1 + rng.below(opt.frames - 3);
      ev.last = std::min(opt.frames - 1, ev.first + 1 + rng.below(2));
      ev.fraction = opt.occlusion_fraction;
      cfg.occlusions.push_back(ev);
    }
    try {
      generate_scenario(cfg);
      return cfg;
    } catch (const SeparabilityError& e) {
      last = e.what();
    }
  }
  throw SeparabilityError("no separable twin scenario for seed " + std::to_string(seed) + " after " +
                          std::to_string(opt.max_attempts) + " attempts (" + last + ")");
}

std::vector<Assignment> detection_matches(const Scenario& s) {
  std::vector<Assignment> out;
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    const auto& f = s.frames[t];
    Assignment a;
    a.num_targets = f.detection_object.size();
    a.target_of.assign(s.gt.tracks.size(), npos);
    for (std::size_t r = 0; r < f.detection_object.size(); ++r) {
      const std::size_t k = f.detection_object[r];
      if (k != npos && s.gt.tracks[k].present(t)) a.target_of[k] = r;
    }
    out.push_back(std::move(a));
  }
  return out;
}

AssociationMetrics evaluate_association(const std::vector<Tensor>& ordered, const VideoGroundTruth& gt) {
  AssociationMetrics m;
  const std::size_t frames = std::min(ordered.size(), gt.frames), tracks = gt.tracks.size();
  if (frames == 0 || tracks == 0) {
    m.accuracy = 1.0;
    m.mean_iou = 1.0;
    return m;
  }
  const std::size_t slots = ordered[0].dim(0);
  std::vector<std::vector<std::size_t>> slot_at(tracks, std::vector<std::size_t>(frames, npos));
  Tensor votes({tracks, slots}, 0.0);
  m.matched_iou.assign(frames, 0.0);
  double iou_sum = 0.0;
  std::size_t iou_frames = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    const Tensor& masks = ordered[t];
    if (masks.rank() != 3 || masks.dim(0) != slots)
      throw ConfigError("evaluate_association: slot count must be constant");
    const std::size_t hw = masks.dim(1) * masks.dim(2);
    std::vector<std::size_t> present;
    for (std::size_t k = 0; k < tracks; ++k)
      if (gt.tracks[k].present(t)) present.push_back(k);
    if (present.empty()) continue;
    Tensor iou({present.size(), slots}, 0.0);
    for (std::size_t i = 0; i < present.size(); ++i) {
      const Tensor& g = *gt.tracks[present[i]].masks[t];
      if (g.size() != hw) throw ConfigError("evaluate_association: mask size mismatch");
      for (std::size_t s = 0; s < slots; ++s) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t p = 0; p < hw; ++p) {
          const bool a = masks[s * hw + p] >= 0.5, b = g[p] >= 0.5;
          inter += a && b;
          uni += a || b;
        }
        iou.at(i, s) = uni ? double(inter) / double(uni) : 0.0;
      }
    }
    Tensor cost = iou;
    for (auto& v : cost.storage()) v = -v;
    const Assignment a = hungarian(cost);
    double frame_iou = 0.0;
    for (std::size_t i = 0; i < present.size(); ++i) {
      const std::size_t s = a.target_of[i];
      if (s == npos || iou.at(i, s) <= 0.0) continue;
      slot_at[present[i]][t] = s;
      votes.at(present[i], s) += 1.0;
      frame_iou += iou.at(i, s);
    }
    m.matched_iou[t] = frame_iou / double(present.size());
    iou_sum += m.matched_iou[t];
    ++iou_frames;
  }
  for (auto& v : votes.storage()) v = -v;
  const Assignment majority = hungarian(votes);
  std::size_t correct = 0;
  for (std::size_t k = 0; k < tracks; ++k) {
    std::size_t prev = npos;
    bool seen = false;
    for (std::size_t t = 0; t < frames; ++t) {
      if (!gt.tracks[k].present(t)) continue;
      ++m.pairs;
      const std::size_t s = slot_at[k][t];
      if (s != npos && s == majority.target_of[k]) ++correct;
      if (seen && s != prev) ++m.id_switches;
      prev = s;
      seen = true;
    }
  }
  m.accuracy = m.pairs ? double(correct) / double(m.pairs) : 1.0;
  m.mean_iou = iou_frames ? iou_sum / double(iou_frames) : 1.0;
  return m;
}

AssociationMetrics evaluate_association(const std::vector<FramePrediction>& ordered, const VideoGroundTruth& gt) {
  std::vector<Tensor> masks;
  masks.reserve(ordered.size());
  for (const auto& p : ordered) masks.push_back(p.masks);
  return evaluate_association(masks, gt);
}

std::vector<std::vector<std::size_t>> oracle_slot_detections(const Scenario& s) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& f : s.frames) {
    const std::size_t n = f.detection_object.size();
    std::vector<std::size_t> slot(n, npos);
    std::vector<bool> used(n, false);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t k = f.detection_object[r];
      if (k != npos && k < n) {
        slot[k] = r;
        used[r] = true;
      }
    }
    std::size_t next = 0;
    for (std::size_t sl = 0; sl < n; ++sl) {
      if (slot[sl] != npos) continue;
      while (used[next]) ++next;
      slot[sl] = next;
      used[next] = true;
    }
    out.push_back(std::move(slot));
  }
  return out;
}

std::vector<std::vector<std::size_t>> link_by_similarity(const std::vector<Tensor>& embeddings) {
  std::vector<std::vector<std::size_t>> out;
  if (embeddings.empty()) return out;
  const std::size_t n = embeddings[0].rows(), c = embeddings[0].cols();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  out.push_back(order);
  Tensor memory = embeddings[0];
  for (std::size_t t = 1; t < embeddings.size(); ++t) {
    const Tensor& e = embeddings[t];
    if (e.rows() != n || e.cols() != c) throw ConfigError("link_by_similarity: shapes must match across frames");
    Tensor cost = cosine_matrix(memory, e);
    for (auto& v : cost.storage()) v = -v;
    const Assignment a = hungarian(cost);
    for (std::size_t s = 0; s < n; ++s) {
      order[s] = a.target_of[s];
      std::copy_n(e.row(order[s]).begin(), c, memory.row(s).begin());
    }
    out.push_back(order);
  }
  return out;
}

}  // namespace ctxtrack
