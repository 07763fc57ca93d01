#pragma once

// Data model for bi-hand 6-DoF trajectories, waypoints, stages and samples.
//
// Timestamps are seconds relative to the last observed frame (t = 0). Past
// frames sit at non-positive multiples of 0.1 s, future frames start at 0.1 s.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "egoman/error.hpp"
#include "egoman/geometry.hpp"

namespace egoman {

inline constexpr double kFps = 10.0;
inline constexpr double kFrameDt = 0.1;
inline constexpr double kGridTol = 1e-6;
inline constexpr std::size_t kMaxFutureSteps = 50;
inline constexpr std::size_t kPosDim = 6;
inline constexpr std::size_t kRotDim = 12;
inline constexpr std::size_t kStateDim = kPosDim + kRotDim;

enum class Hand { Left = 0, Right = 1 };
inline constexpr std::array<Hand, 2> kHands{Hand::Left, Hand::Right};

struct Pose6DoF {
  Vec3 position = Vec3::Zero();
  Rotation6D rotation;

  bool is_finite() const { return position.allFinite() && rotation.is_finite(); }
  RotationMatrix rotation_matrix() const { return rot6d_to_matrix(rotation); }
  friend bool operator==(const Pose6DoF& a, const Pose6DoF& b) {
    return a.position == b.position && a.rotation == b.rotation;
  }
};

struct BiHandState {
  double timestamp = 0.0;
  Pose6DoF left;
  Pose6DoF right;
  bool left_valid = true;
  bool right_valid = true;

  const Pose6DoF& pose(Hand h) const { return h == Hand::Left ? left : right; }
  Pose6DoF& pose(Hand h) { return h == Hand::Left ? left : right; }
  bool valid(Hand h) const { return h == Hand::Left ? left_valid : right_valid; }
  void set_valid(Hand h, bool v) { (h == Hand::Left ? left_valid : right_valid) = v; }
  friend bool operator==(const BiHandState&, const BiHandState&) = default;
};

using Trajectory = std::vector<BiHandState>;

enum class WaypointKind { Start = 0, Contact = 1, End = 2 };

inline const char* to_string(WaypointKind k) {
  switch (k) {
    case WaypointKind::Start: return "START";
    case WaypointKind::Contact: return "CONTACT";
    case WaypointKind::End: return "END";
  }
  return "?";
}

struct Waypoint {
  WaypointKind kind = WaypointKind::Start;
  double timestamp = 0.0;
  Pose6DoF left;
  Pose6DoF right;
  bool left_visible = true;
  bool right_visible = true;

  const Pose6DoF& pose(Hand h) const { return h == Hand::Left ? left : right; }
  Pose6DoF& pose(Hand h) { return h == Hand::Left ? left : right; }
  bool visible(Hand h) const { return h == Hand::Left ? left_visible : right_visible; }
  bool any_visible() const { return left_visible || right_visible; }
  friend bool operator==(const Waypoint&, const Waypoint&) = default;
};

/// START, CONTACT, END in that order.
using WaypointSet = std::array<Waypoint, 3>;

struct Interval {
  double start = 0.0;
  double end = 0.0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

struct StageLabels {
  std::optional<Interval> approach;
  Interval manipulation;
  friend bool operator==(const StageLabels&, const StageLabels&) = default;
};

struct ActionEmbedding {
  std::vector<double> z;
  friend bool operator==(const ActionEmbedding&, const ActionEmbedding&) = default;
};

struct TrajectorySample {
  std::string sample_id;
  std::string scene_id;
  std::string intent;
  std::string action_phrase;
  std::vector<double> context_features;
  Trajectory past;
  Trajectory future;
  WaypointSet waypoints;
  StageLabels stages;
  CameraIntrinsics camera;

  const Waypoint& waypoint(WaypointKind k) const { return waypoints[static_cast<std::size_t>(k)]; }
  Waypoint& waypoint(WaypointKind k) { return waypoints[static_cast<std::size_t>(k)]; }
  friend bool operator==(const TrajectorySample&, const TrajectorySample&) = default;
};

// ---------------------------------------------------------------------------
// Flattening: [left.xyz, right.xyz] and [left.rot6d, right.rot6d].

struct FlatState {
  std::array<double, kPosDim> pos{};
  std::array<double, kRotDim> rot{};
};

inline FlatState flatten_state(const BiHandState& s) {
  FlatState f;
  for (Hand h : kHands) {
    const auto i = static_cast<std::size_t>(h);
    const Pose6DoF& p = s.pose(h);
    for (std::size_t c = 0; c < 3; ++c) f.pos[3 * i + c] = p.position[static_cast<Eigen::Index>(c)];
    for (std::size_t c = 0; c < 6; ++c) f.rot[6 * i + c] = p.rotation[c];
  }
  return f;
}

inline BiHandState unflatten_state(const FlatState& f, double timestamp = 0.0,
                                   bool left_valid = true, bool right_valid = true) {
  BiHandState s;
  s.timestamp = timestamp;
  s.left_valid = left_valid;
  s.right_valid = right_valid;
  for (Hand h : kHands) {
    const auto i = static_cast<std::size_t>(h);
    Pose6DoF& p = s.pose(h);
    p.position = Vec3(f.pos[3 * i], f.pos[3 * i + 1], f.pos[3 * i + 2]);
    for (std::size_t c = 0; c < 6; ++c) p.rotation[c] = f.rot[6 * i + c];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Re-anchoring

inline Pose6DoF transform_pose(const Pose6DoF& p, const RigidTransform& tf) {
  Pose6DoF out;
  out.position = tf.apply(p.position);
  out.rotation = matrix_to_rot6d(tf.rotation * rot6d_to_matrix(p.rotation));
  return out;
}

/// Expresses every state in the frame given by `anchor` (world -> anchor camera).
inline Trajectory reanchor(const Trajectory& states, const RigidTransform& anchor) {
  Trajectory out;
  out.reserve(states.size());
  for (const BiHandState& s : states) {
    BiHandState t = s;
    t.left = transform_pose(s.left, anchor);
    t.right = transform_pose(s.right, anchor);
    out.push_back(t);
  }
  return out;
}

inline Waypoint reanchor(const Waypoint& w, const RigidTransform& anchor) {
  Waypoint out = w;
  out.left = transform_pose(w.left, anchor);
  out.right = transform_pose(w.right, anchor);
  return out;
}

// ---------------------------------------------------------------------------
// Resampling onto the 10 FPS grid

namespace detail {

inline Pose6DoF interpolate_pose(const Pose6DoF& a, const Pose6DoF& b, double s) {
  Pose6DoF out;
  out.position = (1.0 - s) * a.position + s * b.position;
  out.rotation = matrix_to_rot6d(slerp(rot6d_to_matrix(a.rotation), rot6d_to_matrix(b.rotation), s));
  return out;
}

}  // namespace detail

/// Linear positions, geodesic rotations, output at exact multiples of 0.1 s.
/// Input states that already lie on the grid are copied through unchanged.
inline Trajectory resample_10fps(const Trajectory& states) {
  if (states.size() < 2) throw TooShort("resampling needs at least two states");
  for (std::size_t i = 1; i < states.size(); ++i) {
    if (!(states[i].timestamp > states[i - 1].timestamp)) {
      throw Error("resample_10fps: timestamps must be strictly increasing");
    }
  }
  const double t0 = states.front().timestamp;
  const double t1 = states.back().timestamp;
  if (t1 - t0 < 0.2 - 1e-9) throw TooShort("trajectory spans less than 0.2 s");

  constexpr double kSnap = 1e-9;
  const auto k_begin = static_cast<long>(std::ceil(t0 * kFps - kSnap));
  const auto k_end = static_cast<long>(std::floor(t1 * kFps + kSnap));

  Trajectory out;
  out.reserve(static_cast<std::size_t>(k_end - k_begin + 1));
  std::size_t seg = 0;
  for (long k = k_begin; k <= k_end; ++k) {
    const double t = static_cast<double>(k) / kFps;
    while (seg + 2 < states.size() && states[seg + 1].timestamp <= t + kSnap) ++seg;
    const BiHandState& a = states[seg];
    const BiHandState& b = states[seg + 1];
    if (std::abs(a.timestamp - t) <= kSnap) {
      out.push_back(a);
      continue;
    }
    if (std::abs(b.timestamp - t) <= kSnap) {
      out.push_back(b);
      continue;
    }
    const double s = (t - a.timestamp) / (b.timestamp - a.timestamp);
    BiHandState r;
    r.timestamp = t;
    for (Hand h : kHands) {
      r.pose(h) = detail::interpolate_pose(a.pose(h), b.pose(h), s);
      r.set_valid(h, a.valid(h) && b.valid(h));
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string field;
  std::string rule;
  std::string message;
};

namespace detail {

inline bool on_grid_spacing(const Trajectory& t) {
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (std::abs(t[i].timestamp - t[i - 1].timestamp - kFrameDt) > kGridTol) return false;
  }
  return true;
}

inline bool poses_ok(const Pose6DoF& p) {
  if (!p.is_finite()) return false;
  try {
    (void)rot6d_to_matrix(p.rotation);
  } catch (const DegenerateRotation&) {
    return false;
  }
  return true;
}

}  // namespace detail

/// Empty iff every sample invariant holds.
inline std::vector<Violation> validate_sample(const TrajectorySample& s) {
  std::vector<Violation> v;
  auto add = [&](std::string field, std::string rule, std::string msg) {
    v.push_back({std::move(field), std::move(rule), std::move(msg)});
  };

  if (s.sample_id.empty()) add("sample_id", "non_empty", "sample id is empty");

  if (s.past.empty()) {
    add("past", "non_empty", "no past states");
  } else {
    if (!detail::on_grid_spacing(s.past)) add("past", "fps_10", "past states are not spaced at 0.1 s (10 FPS)");
    if (std::abs(s.past.back().timestamp) > kGridTol) {
      add("past", "anchor_at_zero", "last past timestamp must be 0");
    }
  }
  if (s.future.empty()) {
    add("future", "non_empty", "no future states");
  } else {
    if (s.future.size() > kMaxFutureSteps) add("future", "max_horizon", "future exceeds 50 steps");
    if (!detail::on_grid_spacing(s.future)) add("future", "fps_10", "future states are not spaced at 0.1 s (10 FPS)");
    if (std::abs(s.future.front().timestamp - kFrameDt) > kGridTol) {
      add("future", "starts_at_0.1", "first future timestamp must be 0.1 s");
    }
  }
  for (const Trajectory* traj : {&s.past, &s.future}) {
    const char* name = traj == &s.past ? "past" : "future";
    for (const BiHandState& st : *traj) {
      if (!detail::poses_ok(st.left) || !detail::poses_ok(st.right)) {
        add(name, "finite_pose", "state at t=" + std::to_string(st.timestamp) + " has a non-finite or degenerate pose");
        break;
      }
    }
  }

  const WaypointKind kinds[] = {WaypointKind::Start, WaypointKind::Contact, WaypointKind::End};
  for (std::size_t i = 0; i < 3; ++i) {
    const Waypoint& w = s.waypoints[i];
    const std::string field = std::string("waypoints.") + to_string(kinds[i]);
    if (w.kind != kinds[i]) add(field, "kind_order", "waypoints must be START, CONTACT, END");
    if (!(w.timestamp >= 0.0) || !std::isfinite(w.timestamp)) add(field, "non_negative_time", "timestamp must be >= 0");
    if (!detail::poses_ok(w.left) || !detail::poses_ok(w.right)) add(field, "finite_pose", "non-finite or degenerate pose");
  }
  if (std::abs(s.waypoints[0].timestamp) > kGridTol) add("waypoints.START", "start_at_zero", "START timestamp must be 0");
  if (s.waypoints[1].timestamp > s.waypoints[2].timestamp) {
    add("waypoints.CONTACT", "contact_before_end", "CONTACT timestamp must not exceed END timestamp");
  }

  const Interval& m = s.stages.manipulation;
  if (!(m.end > m.start)) add("stages.manipulation", "non_empty_interval", "manipulation interval is empty");
  if (s.stages.approach) {
    const Interval& a = *s.stages.approach;
    if (!(a.end > a.start)) add("stages.approach", "non_empty_interval", "approach interval is empty");
    if (a.end > m.start + kGridTol) add("stages.approach", "approach_before_manipulation", "approach must end before manipulation starts");
  }
  if (!s.camera.valid()) add("camera", "valid_intrinsics", "intrinsics violate fx,fy > 0 or principal point bounds");
  for (double x : s.context_features) {
    if (!std::isfinite(x)) {
      add("context_features", "finite", "non-finite context feature");
      break;
    }
  }
  return v;
}

/// Copies the trajectory frame at `t` (nearest grid frame) of past+future.
inline const BiHandState* frame_at(const TrajectorySample& s, double t) {
  const Trajectory* traj = t <= kGridTol ? &s.past : &s.future;
  for (const BiHandState& st : *traj) {
    if (std::abs(st.timestamp - t) <= 0.5 * kFrameDt) return &st;
  }
  return nullptr;
}

}  // namespace egoman
