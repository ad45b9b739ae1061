#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctxtrack/context.hpp"
#include "ctxtrack/losses.hpp"
#include "ctxtrack/rng.hpp"

namespace ctxtrack {

/// Raised when a twin scenario violates the separability assertion.
class SeparabilityError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

enum class ObjectShape { disc, rectangle };
std::string to_string(ObjectShape s);
ObjectShape object_shape_from_string(const std::string& name);

/// One rendered object. Discs are ellipses with the given semi-axes.
struct ObjectSpec {
  ObjectShape shape = ObjectShape::disc;
  double half_height = 4.0;
  double half_width = 4.0;
  double y = 0.0;  // centre at frame 0
  double x = 0.0;
  double vy = 0.0;  // pixels per frame
  double vx = 0.0;
  std::vector<double> appearance;  // length C
  std::size_t label = 0;
  /// Rigidly attached objects follow their parent at a fixed offset.
  std::optional<std::size_t> attach_to;
  double offset_y = 0.0;
  double offset_x = 0.0;
  std::size_t first_frame = 0;
  /// Box {top, bottom, left, right} the object's group bounces inside; the grid when unset.
  std::optional<std::array<double, 4>> bounds;

  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

/// An external occluder strip over `fraction` of the target's visible area,
/// growing from the target's left edge, for frames [first, last].
struct OcclusionEvent {
  std::size_t target = 0;
  std::size_t first = 0;
  std::size_t last = 0;
  double fraction = 0.5;

  friend bool operator==(const OcclusionEvent&, const OcclusionEvent&) = default;
};

struct ScenarioConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 16;
  std::size_t classes = 4;
  std::size_t frames = 12;
  std::size_t slots = 8;  // N; detections are padded to this count
  std::vector<ObjectSpec> objects;
  std::vector<std::vector<std::size_t>> twin_groups;
  std::vector<OcclusionEvent> occlusions;
  double pixel_noise = 0.1;
  double core_noise = 0.05;
  double class_noise = 0.1;
  double position_amplitude = 0.05;
  std::vector<double> background;   // length C, zeros when empty
  std::vector<double> occluder;     // appearance of occluder strips
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first problem found.
  void validate() const;
  std::size_t position_channels() const { return channels / 4; }

  friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

struct ScenarioFrame {
  InstanceObservation observation;
  /// Object index behind each detection row, npos for padding rows.
  std::vector<std::size_t> detection_object;

  friend bool operator==(const ScenarioFrame&, const ScenarioFrame&) = default;
};

struct Scenario {
  ScenarioConfig config;
  VideoGroundTruth gt;  // track k is object k
  std::vector<ScenarioFrame> frames;

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// Object centres per frame after rigid attachment and group bouncing.
std::vector<std::vector<std::pair<double, double>>> object_trajectories(const ScenarioConfig& config);

/// Render ground truth and observations. Twin scenarios must satisfy
/// twin_separability() < 0.1; otherwise ConfigError is thrown.
Scenario generate_scenario(const ScenarioConfig& config);

/// Apply occlusion events on top of the config's own schedule and re-render.
Scenario occlude(const Scenario& scenario, const std::vector<OcclusionEvent>& schedule);

/// Twin-occlusion family: two twin pairs sharing appearance, each twin with its
/// own rigidly attached companion, plus partial occlusions of twins.
struct TwinFamilyOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 16;
  std::size_t classes = 4;
  std::size_t frames = 12;
  std::size_t pairs = 2;
  double appearance_scale = 5.0;
  double twin_radius_min = 4.0;
  double twin_radius_max = 5.5;
  double mate_half_min = 4.0;
  double mate_half_max = 6.0;
  double max_speed = 1.5;
  /// Groups bounce inside their own grid cell, shrunk by this margin.
  double cell_margin = 2.0;
  double pixel_noise = 0.1;
  double core_noise = 0.02;
  double class_noise = 0.1;
  double position_amplitude = 0.01;
  std::size_t occlusion_events = 2;
  double occlusion_fraction = 0.4;
  std::size_t max_attempts = 64;
};

/// Materialise a twin family config for `seed`, retrying (deterministically)
/// until the separability assertion holds.
ScenarioConfig twin_family_config(std::uint64_t seed, const TwinFamilyOptions& options = {});

/// Mean over frames and twin pairs of inter-twin core distance divided by
/// inter-twin surrounding distance (9 x 9 average kernel). 0 when no twins.
double twin_separability(const Scenario& scenario);

/// Per frame, track -> detection row for every visible object.
std::vector<Assignment> detection_matches(const Scenario& scenario);

struct AssociationMetrics {
  double accuracy = 0.0;
  std::size_t id_switches = 0;
  std::vector<double> matched_iou;  // per frame
  double mean_iou = 0.0;
  std::size_t pairs = 0;
};

/// Slot-to-identity assignment fixed by majority vote over frames, with
/// per-frame Hungarian matching on mask IoU. `ordered[t]` holds slot masks.
AssociationMetrics evaluate_association(const std::vector<Tensor>& ordered, const VideoGroundTruth& gt);
AssociationMetrics evaluate_association(const std::vector<FramePrediction>& ordered, const VideoGroundTruth& gt);

/// Slot orders that a ground-truth-identity oracle would produce.
std::vector<std::vector<std::size_t>> oracle_slot_detections(const Scenario& scenario);

/// Greedy online association by cosine similarity of embeddings between
/// consecutive frames (no tracker). Returns per-frame slot -> detection.
std::vector<std::vector<std::size_t>> link_by_similarity(const std::vector<Tensor>& embeddings);

}  // namespace ctxtrack
