#pragma once

// JSON encoding of the core types shared by the dataset, prediction and
// token files. Floating-point values are written at 9 significant digits.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/error.hpp"
#include "egoman/trajectory.hpp"

namespace egoman::io {

using nlohmann::json;

inline double round9(double x) {
  if (!std::isfinite(x)) return x;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return std::strtod(buf, nullptr);
}

inline json num(double x) {
  if (!std::isfinite(x)) throw ValidationError("refusing to serialize a non-finite value");
  return round9(x);
}

inline json vec(const double* p, std::size_t n) {
  json a = json::array();
  for (std::size_t i = 0; i < n; ++i) a.push_back(num(p[i]));
  return a;
}

inline json vec(const std::vector<double>& v) { return vec(v.data(), v.size()); }

/// Reads a number, throwing ParseError naming `what` on a type mismatch.
inline double get_num(const json& j, const char* what) {
  if (!j.is_number()) throw ParseError(std::string(what) + ": expected a number");
  return j.get<double>();
}

inline const json& field(const json& j, const char* key) {
  if (!j.is_object()) throw ParseError(std::string("expected an object holding '") + key + "'");
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'");
  return *it;
}

inline std::vector<double> get_vec(const json& j, const char* what, std::size_t expect = 0) {
  if (!j.is_array()) throw ParseError(std::string(what) + ": expected an array");
  if (expect != 0 && j.size() != expect) {
    throw ParseError(std::string(what) + ": expected " + std::to_string(expect) + " values");
  }
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& x : j) out.push_back(get_num(x, what));
  return out;
}

inline bool get_bool(const json& j, const char* what) {
  if (!j.is_boolean()) throw ParseError(std::string(what) + ": expected a boolean");
  return j.get<bool>();
}

inline std::string get_str(const json& j, const char* what) {
  if (!j.is_string()) throw ParseError(std::string(what) + ": expected a string");
  return j.get<std::string>();
}

inline json pose_json(const Pose6DoF& p, const char* flag_name, bool flag) {
  return {{"position", vec(p.position.data(), 3)}, {"rot6d", vec(p.rotation.a.data(), 6)}, {flag_name, flag}};
}

inline Pose6DoF pose_from(const json& j, const char* flag_name, bool& flag) {
  Pose6DoF p;
  const auto pos = get_vec(field(j, "position"), "position", 3);
  const auto rot = get_vec(field(j, "rot6d"), "rot6d", 6);
  p.position = Vec3(pos[0], pos[1], pos[2]);
  for (std::size_t i = 0; i < 6; ++i) p.rotation[i] = rot[i];
  flag = get_bool(field(j, flag_name), flag_name);
  return p;
}

inline json state_json(const BiHandState& s) {
  return {{"timestamp", num(s.timestamp)},
          {"left", pose_json(s.left, "valid", s.left_valid)},
          {"right", pose_json(s.right, "valid", s.right_valid)}};
}

inline BiHandState state_from(const json& j) {
  BiHandState s;
  s.timestamp = get_num(field(j, "timestamp"), "timestamp");
  s.left = pose_from(field(j, "left"), "valid", s.left_valid);
  s.right = pose_from(field(j, "right"), "valid", s.right_valid);
  return s;
}

inline json trajectory_json(const Trajectory& t) {
  json a = json::array();
  for (const auto& s : t) a.push_back(state_json(s));
  return a;
}

inline Trajectory trajectory_from(const json& j, const char* what) {
  if (!j.is_array()) throw ParseError(std::string(what) + ": expected an array of states");
  Trajectory t;
  t.reserve(j.size());
  for (const auto& s : j) t.push_back(state_from(s));
  return t;
}

inline WaypointKind kind_from(const std::string& s) {
  if (s == "START") return WaypointKind::Start;
  if (s == "CONTACT") return WaypointKind::Contact;
  if (s == "END") return WaypointKind::End;
  throw ParseError("unknown waypoint kind '" + s + "'");
}

inline json waypoint_json(const Waypoint& w) {
  return {{"kind", to_string(w.kind)},
          {"timestamp", num(w.timestamp)},
          {"left", pose_json(w.left, "visible", w.left_visible)},
          {"right", pose_json(w.right, "visible", w.right_visible)}};
}

inline Waypoint waypoint_from(const json& j) {
  Waypoint w;
  w.kind = kind_from(get_str(field(j, "kind"), "kind"));
  w.timestamp = get_num(field(j, "timestamp"), "timestamp");
  w.left = pose_from(field(j, "left"), "visible", w.left_visible);
  w.right = pose_from(field(j, "right"), "visible", w.right_visible);
  return w;
}

inline json waypoints_json(const WaypointSet& ws) {
  json a = json::array();
  for (const auto& w : ws) a.push_back(waypoint_json(w));
  return a;
}

/// Waypoints may appear in any order in the file; they are returned as
/// START, CONTACT, END. A missing kind is a parse error.
inline WaypointSet waypoints_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ParseError("waypoints: expected three records");
  WaypointSet out;
  bool seen[3] = {false, false, false};
  for (const auto& e : j) {
    Waypoint w = waypoint_from(e);
    const auto k = static_cast<std::size_t>(w.kind);
    if (seen[k]) throw ParseError(std::string("waypoints: duplicate ") + to_string(w.kind));
    seen[k] = true;
    out[k] = w;
  }
  return out;
}

inline json camera_json(const CameraIntrinsics& c) {
  return {{"fx", num(c.fx)}, {"fy", num(c.fy)}, {"cx", num(c.cx)}, {"cy", num(c.cy)},
          {"width", c.width}, {"height", c.height}};
}

inline CameraIntrinsics camera_from(const json& j) {
  CameraIntrinsics c;
  c.fx = get_num(field(j, "fx"), "camera.fx");
  c.fy = get_num(field(j, "fy"), "camera.fy");
  c.cx = get_num(field(j, "cx"), "camera.cx");
  c.cy = get_num(field(j, "cy"), "camera.cy");
  c.width = static_cast<int>(get_num(field(j, "width"), "camera.width"));
  c.height = static_cast<int>(get_num(field(j, "height"), "camera.height"));
  return c;
}

inline json interval_json(const Interval& i) { return json::array({num(i.start), num(i.end)}); }

inline Interval interval_from(const json& j, const char* what) {
  const auto v = get_vec(j, what, 2);
  return {v[0], v[1]};
}

inline json sample_json(const TrajectorySample& s) {
  json stages = {{"approach", s.stages.approach ? interval_json(*s.stages.approach) : json(nullptr)},
                 {"manipulation", interval_json(s.stages.manipulation)}};
  return {{"sample_id", s.sample_id},
          {"scene_id", s.scene_id},
          {"intent", s.intent},
          {"action_phrase", s.action_phrase},
          {"context_features", vec(s.context_features)},
          {"camera", camera_json(s.camera)},
          {"past", trajectory_json(s.past)},
          {"future", trajectory_json(s.future)},
          {"waypoints", waypoints_json(s.waypoints)},
          {"stages", stages}};
}

inline TrajectorySample sample_from(const json& j) {
  TrajectorySample s;
  s.sample_id = get_str(field(j, "sample_id"), "sample_id");
  s.scene_id = get_str(field(j, "scene_id"), "scene_id");
  s.intent = get_str(field(j, "intent"), "intent");
  s.action_phrase = get_str(field(j, "action_phrase"), "action_phrase");
  s.context_features = get_vec(field(j, "context_features"), "context_features");
  s.camera = camera_from(field(j, "camera"));
  s.past = trajectory_from(field(j, "past"), "past");
  s.future = trajectory_from(field(j, "future"), "future");
  s.waypoints = waypoints_from(field(j, "waypoints"));
  const json& st = field(j, "stages");
  const json& ap = field(st, "approach");
  if (!ap.is_null()) s.stages.approach = interval_from(ap, "stages.approach");
  s.stages.manipulation = interval_from(field(st, "manipulation"), "stages.manipulation");
  return s;
}

}  // namespace egoman::io
