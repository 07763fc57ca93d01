#pragma once

#include <Eigen/Geometry>

#include <random>

#include "egoman/geometry.hpp"
#include "egoman/trajectory.hpp"

namespace egoman::testing {

inline RotationMatrix random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return RotationMatrix::trusted(q.toRotationMatrix());
}

inline Vec3 random_vec(std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  return {n(rng), n(rng), n(rng)};
}

inline Pose6DoF random_pose(std::mt19937_64& rng) {
  return {random_vec(rng, 0.3), matrix_to_rot6d(random_rotation(rng))};
}

inline BiHandState random_state(std::mt19937_64& rng, double t = 0.0) {
  BiHandState s;
  s.timestamp = t;
  s.left = random_pose(rng);
  s.right = random_pose(rng);
  return s;
}

/// Straight-line trajectory at 10 FPS starting at t0 with `steps` frames.
inline Trajectory line_trajectory(std::size_t steps, const Vec3& start, const Vec3& velocity, double t0 = 0.1) {
  Trajectory t;
  for (std::size_t i = 0; i < steps; ++i) {
    BiHandState s;
    s.timestamp = t0 + static_cast<double>(i) / kFps;
    s.left.position = start + velocity * static_cast<double>(i) / kFps;
    s.right.position = start + Vec3(0.3, 0, 0) + velocity * static_cast<double>(i) / kFps;
    t.push_back(s);
  }
  return t;
}

}  // namespace egoman::testing

namespace egoman::testing {

/// Well-formed sample: 5 past frames, `future_steps` future frames along a
/// straight line, CONTACT at 0.5 s and END at the last future frame.
inline TrajectorySample simple_sample(std::size_t future_steps = 10, const std::string& id = "s0") {
  TrajectorySample s;
  s.sample_id = id;
  s.scene_id = "scene0";
  s.intent = "pick up the red cup";
  s.action_phrase = "right hand grabs the red cup";
  s.context_features.assign(8, 0.1);
  const Vec3 base(0.0, 0.1, 0.5);
  const Vec3 vel(0.1, 0.0, 0.05);
  for (int i = -4; i <= 0; ++i) {
    BiHandState st;
    st.timestamp = i / kFps;
    st.left.position = base + vel * st.timestamp - Vec3(0.2, 0, 0);
    st.right.position = base + vel * st.timestamp;
    s.past.push_back(st);
  }
  for (std::size_t i = 1; i <= future_steps; ++i) {
    BiHandState st;
    st.timestamp = static_cast<double>(i) / kFps;
    st.left.position = base + vel * st.timestamp - Vec3(0.2, 0, 0);
    st.right.position = base + vel * st.timestamp;
    st.right.rotation = matrix_to_rot6d(RotationMatrix::rot_z(3.0 * static_cast<double>(i)));
    s.future.push_back(st);
  }
  auto wp_from = [](WaypointKind k, const BiHandState& st) {
    Waypoint w;
    w.kind = k;
    w.timestamp = st.timestamp;
    w.left = st.left;
    w.right = st.right;
    return w;
  };
  s.waypoints[0] = wp_from(WaypointKind::Start, s.past.back());
  s.waypoints[1] = wp_from(WaypointKind::Contact, s.future[4]);
  s.waypoints[2] = wp_from(WaypointKind::End, s.future.back());
  s.stages.approach = Interval{0.0, 0.5};
  s.stages.manipulation = Interval{0.5, s.future.back().timestamp};
  return s;
}

}  // namespace egoman::testing
