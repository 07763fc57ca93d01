#pragma once

// The trajectory-token interface <ACT><START><CONTACT><END>, the providers
// that produce it (ground truth, perturbed ground truth, external files) and
// the rule-based interaction-stage annotator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/embedding.hpp"
#include "egoman/error.hpp"
#include "egoman/geometry.hpp"
#include "egoman/serialize.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

struct TrajectoryTokenBundle {
  ActionEmbedding act;
  WaypointSet waypoints;  ///< START, CONTACT, END

  const Waypoint& start() const { return waypoints[0]; }
  const Waypoint& contact() const { return waypoints[1]; }
  const Waypoint& end() const { return waypoints[2]; }
  friend bool operator==(const TrajectoryTokenBundle&, const TrajectoryTokenBundle&) = default;
};

inline std::vector<Violation> validate_bundle(const TrajectoryTokenBundle& b) {
  std::vector<Violation> v;
  const WaypointKind kinds[] = {WaypointKind::Start, WaypointKind::Contact, WaypointKind::End};
  for (std::size_t i = 0; i < 3; ++i) {
    const Waypoint& w = b.waypoints[i];
    const std::string f = std::string("waypoints.") + to_string(kinds[i]);
    if (w.kind != kinds[i]) v.push_back({f, "kind_order", "waypoints must be START, CONTACT, END"});
    if (!std::isfinite(w.timestamp) || w.timestamp < 0) v.push_back({f, "non_negative_time", "timestamp must be >= 0"});
    if (!w.left.is_finite() || !w.right.is_finite()) v.push_back({f, "finite_pose", "non-finite pose"});
  }
  if (b.start().timestamp != 0.0) v.push_back({"waypoints.START", "start_at_zero", "START timestamp must be 0"});
  if (b.contact().timestamp > b.end().timestamp) {
    v.push_back({"waypoints.CONTACT", "contact_before_end", "CONTACT timestamp exceeds END timestamp"});
  }
  for (double x : b.act.z) {
    if (!std::isfinite(x)) {
      v.push_back({"act", "finite", "non-finite action embedding"});
      break;
    }
  }
  return v;
}

struct EmbeddingSpec {
  std::size_t dim = kDefaultEmbeddingDim;
  std::uint64_t seed = kDefaultEmbeddingSeed;
};

/// Ground-truth waypoints plus the embedded action phrase.
inline TrajectoryTokenBundle oracle_provider(const TrajectorySample& s, const EmbeddingSpec& emb = {}) {
  TrajectoryTokenBundle b;
  b.act = intent_embedding(s.action_phrase.empty() ? s.intent : s.action_phrase, emb.dim, emb.seed);
  b.waypoints = s.waypoints;
  return b;
}

struct TokenNoise {
  double sigma_pos = 0.0;   ///< meters
  double sigma_time = 0.0;  ///< seconds
  double sigma_rot = 0.0;   ///< degrees
};

/// Oracle bundle with Gaussian noise on waypoint positions and on the CONTACT
/// and END timestamps, and a random-axis rotation of N(0, sigma_rot) degrees
/// on each orientation. The random draws do not depend on the sigmas, so one
/// seed gives coupled perturbations across noise levels.
inline TrajectoryTokenBundle noisy_provider(const TrajectorySample& s, const TokenNoise& noise, std::uint64_t seed,
                                            const EmbeddingSpec& emb = {}) {
  if (!(noise.sigma_pos >= 0 && noise.sigma_time >= 0 && noise.sigma_rot >= 0)) {
    throw std::invalid_argument("noisy_provider: noise scales must be >= 0");
  }
  TrajectoryTokenBundle b = oracle_provider(s, emb);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t k = 0; k < 3; ++k) {
    Waypoint& w = b.waypoints[k];
    const double dt = n(rng);
    if (k > 0) w.timestamp = std::max(0.0, w.timestamp + noise.sigma_time * dt);
    for (Hand h : kHands) {
      Pose6DoF& p = w.pose(h);
      const double dx = n(rng), dy = n(rng), dz = n(rng);
      p.position += noise.sigma_pos * Vec3(dx, dy, dz);
      Vec3 axis(n(rng), n(rng), n(rng));
      const double angle = noise.sigma_rot * n(rng);
      if (axis.norm() < 1e-12) axis = Vec3::UnitZ();
      if (angle != 0.0) {
        const RotationMatrix r = RotationMatrix::axis_angle(axis.normalized(), deg2rad(angle));
        p.rotation = matrix_to_rot6d(r * rot6d_to_matrix(p.rotation));
      }
    }
  }
  if (b.waypoints[1].timestamp > b.waypoints[2].timestamp) {
    std::swap(b.waypoints[1].timestamp, b.waypoints[2].timestamp);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Bundle files (one JSON object per line)

inline nlohmann::json bundle_json(const std::string& sample_id, const TrajectoryTokenBundle& b) {
  return {{"sample_id", sample_id}, {"act", io::vec(b.act.z)}, {"waypoints", io::waypoints_json(b.waypoints)}};
}

inline void write_bundles(const std::filesystem::path& path, const std::map<std::string, TrajectoryTokenBundle>& bundles) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [id, b] : bundles) out << bundle_json(id, b).dump() << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

struct BundleFile {
  std::map<std::string, TrajectoryTokenBundle> bundles;
  std::vector<std::string> rejected;  ///< one human-readable line per skipped record
};

/// Reads externally produced bundles. Malformed records raise ParseError with
/// the line number; records that parse but violate the bundle invariants, or
/// name a sample outside `known_ids` (when given), are skipped and reported.
inline BundleFile file_provider(const std::filesystem::path& path, const std::set<std::string>* known_ids = nullptr) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  BundleFile out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    std::string id;
    TrajectoryTokenBundle b;
    try {
      const auto j = nlohmann::json::parse(line);
      id = io::get_str(io::field(j, "sample_id"), "sample_id");
      b.act.z = io::get_vec(io::field(j, "act"), "act");
      b.waypoints = io::waypoints_from(io::field(j, "waypoints"));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (known_ids && !known_ids->count(id)) {
      out.rejected.push_back(where + ": unknown sample_id '" + id + "'");
      continue;
    }
    const auto v = validate_bundle(b);
    if (!v.empty()) {
      std::string msg = where + ": sample '" + id + "' skipped:";
      for (const auto& x : v) msg += " " + x.field + " (" + x.rule + ")";
      out.rejected.push_back(msg);
      continue;
    }
    if (out.bundles.count(id)) {
      out.rejected.push_back(where + ": duplicate sample_id '" + id + "'");
      continue;
    }
    out.bundles.emplace(id, std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage annotation from an object track

struct ObjectTrack {
  std::vector<double> timestamps;  ///< seconds, strictly increasing
  std::vector<Vec3> positions;     ///< camera frame, meters
  std::vector<bool> visible;

  std::size_t size() const { return timestamps.size(); }
};

struct StageRule {
  double motion_eps = 0.01;    ///< meters of displacement that count as motion
  double lookback = 0.2;       ///< seconds over which displacement is measured
  double window_min = 0.5;     ///< approach ends this long before onset
  double window_max = 2.0;     ///< approach starts this long before onset
  double max_dist = 1.0;       ///< object must be within this range of the camera
  bool require_approach = false;  ///< throw NoValidApproach instead of omitting it
};

struct StageAnnotation {
  StageLabels labels;
  double onset = 0.0;
  bool has_approach = false;
};

/// Motion onset is the first sample whose displacement from the latest
/// sample at least `lookback` earlier exceeds `motion_eps` (both visible).
/// The approach window [onset - window_max, onset - window_min] is clipped
/// to the latest contiguous run of samples where the object is visible and
/// within `max_dist`; manipulation runs from onset to the end of the track.
inline StageAnnotation infer_stages(const ObjectTrack& track, const StageRule& rule = {}) {
  const std::size_t n = track.size();
  if (n < 3) throw TooShort("object track needs at least 3 samples");
  if (track.positions.size() != n || track.visible.size() != n) throw ShapeMismatch("object track fields differ in length");
  for (std::size_t i = 1; i < n; ++i) {
    if (!(track.timestamps[i] > track.timestamps[i - 1])) throw BadTimestamp("object track timestamps must increase");
  }
  constexpr double kEps = 1e-9;
  std::optional<std::size_t> onset;
  std::size_t ref = 0;
  bool have_ref = false;
  for (std::size_t i = 0; i < n && !onset; ++i) {
    while (ref < i && track.timestamps[ref] <= track.timestamps[i] - rule.lookback + kEps) {
      have_ref = true;
      ++ref;
    }
    if (!have_ref) continue;
    const std::size_t r = ref - 1;
    if (!track.visible[i] || !track.visible[r]) continue;
    if ((track.positions[i] - track.positions[r]).norm() > rule.motion_eps) onset = i;
  }
  if (!onset) throw NoMotionOnset("object never moves by more than " + std::to_string(rule.motion_eps) + " m");

  StageAnnotation out;
  out.onset = track.timestamps[*onset];
  out.labels.manipulation = {out.onset, track.timestamps.back()};
  if (!(out.labels.manipulation.end > out.labels.manipulation.start)) {
    out.labels.manipulation.end = out.onset + 1.0 / kFps;
  }

  const double a = out.onset - rule.window_max;
  const double b = out.onset - rule.window_min;
  auto ok = [&](std::size_t i) { return track.visible[i] && track.positions[i].norm() <= rule.max_dist; };
  std::optional<Interval> best;
  for (std::size_t i = 0; i < n;) {
    if (!ok(i)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < n && ok(j + 1)) ++j;
    const double lo = std::max(a, track.timestamps[i]);
    const double hi = std::min(b, track.timestamps[j]);
    if (hi > lo) best = Interval{lo, hi};
    i = j + 1;
  }
  if (best) {
    out.labels.approach = best;
    out.has_approach = true;
  } else if (rule.require_approach) {
    throw NoValidApproach("no visible, in-range span inside the approach window");
  }
  return out;
}

}  // namespace egoman
