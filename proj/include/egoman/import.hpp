#pragma once

// Import adapter skeleton: per-frame world-frame wrist poses plus one
// interaction annotation become a TrajectorySample. The field mapping from
// public egocentric releases is in docs/dataset_schema.md. Only checked on
// constructed input, never against a real release.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "egoman/error.hpp"
#include "egoman/geometry.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

/// Wrist poses in the world frame; nullopt marks an untracked hand.
struct RawWristFrame {
  double timestamp = 0.0;  // seconds, any origin
  std::optional<RigidTransform> left;
  std::optional<RigidTransform> right;
};

struct RawInteraction {
  std::string sample_id;
  std::string scene_id;
  std::string intent;
  std::string action_phrase;
  double approach_start = 0.0;  // same clock as RawWristFrame
  double contact = 0.0;
  double end = 0.0;
  // Camera pose (camera -> world) at approach_start. Poses are re-expressed in
  // this frame.
  RigidTransform world_from_camera;
  CameraIntrinsics camera;
  std::vector<double> context_features;
  std::size_t past_frames = 5;
  bool has_approach = true;  // false: the clip starts at contact
};

namespace detail {

inline Pose6DoF pose_of(const RigidTransform& t) { return {t.translation, matrix_to_rot6d(t.rotation)}; }

inline Waypoint waypoint_at(const Trajectory& grid, WaypointKind kind, double t) {
  for (const BiHandState& s : grid) {
    if (std::abs(s.timestamp - t) <= 0.5 * kFrameDt) {
      Waypoint w;
      w.kind = kind;
      w.timestamp = s.timestamp;
      w.left = s.left;
      w.right = s.right;
      w.left_visible = s.left_valid;
      w.right_visible = s.right_valid;
      return w;
    }
  }
  throw ValidationError(std::string("import: no frame near ") + to_string(kind) + " at t=" + std::to_string(t));
}

}  // namespace detail

/// Shifts time so approach_start is 0, resamples to 10 FPS, re-anchors into
/// the camera frame at approach_start, cuts past/future and places the three
/// waypoints on the nearest grid frames. Throws ValidationError when the
/// result breaks a sample invariant.
inline TrajectorySample import_interaction(const std::vector<RawWristFrame>& frames, const RawInteraction& a) {
  if (!(a.contact >= a.approach_start) || !(a.end > a.contact)) {
    throw ValidationError("import: need approach_start <= contact < end for " + a.sample_id);
  }
  Trajectory world;
  for (const RawWristFrame& f : frames) {
    BiHandState s;
    s.timestamp = f.timestamp - a.approach_start;
    s.left_valid = f.left.has_value();
    s.right_valid = f.right.has_value();
    if (f.left) s.left = detail::pose_of(*f.left);
    if (f.right) s.right = detail::pose_of(*f.right);
    world.push_back(s);
  }
  const Trajectory grid = reanchor(resample_10fps(world), a.world_from_camera.inverse());

  const double end = std::round((a.end - a.approach_start) * kFps) / kFps;
  TrajectorySample out;
  out.sample_id = a.sample_id;
  out.scene_id = a.scene_id;
  out.intent = a.intent;
  out.action_phrase = a.action_phrase;
  out.context_features = a.context_features;
  out.camera = a.camera;
  const double past_begin = -static_cast<double>(a.past_frames - 1) * kFrameDt;
  for (const BiHandState& s : grid) {
    if (s.timestamp >= past_begin - kGridTol && s.timestamp <= kGridTol) out.past.push_back(s);
    if (s.timestamp > kGridTol && s.timestamp <= end + kGridTol) out.future.push_back(s);
  }
  if (out.past.size() != a.past_frames) throw ValidationError("import: not enough history before " + a.sample_id);

  const double contact = a.contact - a.approach_start;
  out.waypoints = {detail::waypoint_at(out.past, WaypointKind::Start, 0.0),
                   detail::waypoint_at(out.future, WaypointKind::Contact, std::max(contact, kFrameDt)),
                   detail::waypoint_at(out.future, WaypointKind::End, end)};
  if (a.has_approach && contact > 0.0) out.stages.approach = Interval{0.0, out.waypoints[1].timestamp};
  out.stages.manipulation = {out.waypoints[1].timestamp, out.waypoints[2].timestamp};

  const auto violations = validate_sample(out);
  if (!violations.empty()) {
    throw ValidationError("import: " + a.sample_id + " violates " + violations.front().rule + ": " +
                          violations.front().message);
  }
  return out;
}

}  // namespace egoman
