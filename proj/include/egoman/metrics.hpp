#pragma once

// Trajectory and waypoint evaluation metrics.
//
// All metrics are double precision. Per-entry errors are averaged over the
// (step, hand) pairs where the hand is valid in both prediction and ground
// truth. Predictions longer than the ground truth are truncated to the
// ground-truth horizon by ade/fde/rot_error and by evaluate_prediction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/error.hpp"
#include "egoman/geometry.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

namespace detail {

inline void check_horizon(const Trajectory& pred, const Trajectory& gt) {
  if (gt.empty() || pred.empty()) throw EmptyTrajectory("trajectory is empty");
  if (pred.size() < gt.size()) {
    throw Error("prediction has " + std::to_string(pred.size()) + " steps, ground truth " +
                std::to_string(gt.size()));
  }
}

inline bool both_valid(const BiHandState& a, const BiHandState& b, Hand h) {
  return a.valid(h) && b.valid(h);
}

/// Hand-averaged position distance between two states; 0 if no common valid hand.
inline double cell_cost(const BiHandState& a, const BiHandState& b) {
  double sum = 0.0;
  int n = 0;
  for (Hand h : kHands) {
    if (!both_valid(a, b, h)) continue;
    sum += (a.pose(h).position - b.pose(h).position).norm();
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace detail

/// Average displacement error (meters).
inline double ade(const Trajectory& pred, const Trajectory& gt) {
  detail::check_horizon(pred, gt);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (Hand h : kHands) {
      if (!detail::both_valid(pred[i], gt[i], h)) continue;
      sum += (pred[i].pose(h).position - gt[i].pose(h).position).norm();
      ++n;
    }
  }
  if (n == 0) throw EmptyTrajectory("no valid hand in any step");
  return sum / static_cast<double>(n);
}

/// Final displacement error (meters), at the last ground-truth step.
inline double fde(const Trajectory& pred, const Trajectory& gt) {
  detail::check_horizon(pred, gt);
  const std::size_t last = gt.size() - 1;
  return ade(Trajectory{pred[last]}, Trajectory{gt[last]});
}

/// Mean geodesic rotation error (degrees).
inline double rot_error(const Trajectory& pred, const Trajectory& gt) {
  detail::check_horizon(pred, gt);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (Hand h : kHands) {
      if (!detail::both_valid(pred[i], gt[i], h)) continue;
      sum += geodesic_degrees(pred[i].pose(h).rotation_matrix(), gt[i].pose(h).rotation_matrix());
      ++n;
    }
  }
  if (n == 0) throw EmptyTrajectory("no valid hand in any step");
  return sum / static_cast<double>(n);
}

/// Result of the DTW recursion: total cost and number of cells on the path.
struct DtwPath {
  double cost = 0.0;
  std::size_t length = 0;
};

/// Lexicographic order: lower cost first, then shorter path.
inline bool dtw_better(const DtwPath& a, const DtwPath& b) {
  return a.cost < b.cost || (a.cost == b.cost && a.length < b.length);
}

/// Optimal monotone alignment under match/insert/delete moves with unit
/// weights. Costs are accumulated from (0, 0) forward.
inline DtwPath dtw_path(const Trajectory& a, const Trajectory& b) {
  if (a.empty() || b.empty()) throw EmptyTrajectory("dtw on empty trajectory");
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  std::vector<DtwPath> d(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      DtwPath best{0.0, 0};
      if (i > 0 || j > 0) {
        best = {std::numeric_limits<double>::infinity(), 0};
        if (i > 0 && j > 0 && dtw_better(d[(i - 1) * m + j - 1], best)) best = d[(i - 1) * m + j - 1];
        if (i > 0 && dtw_better(d[(i - 1) * m + j], best)) best = d[(i - 1) * m + j];
        if (j > 0 && dtw_better(d[i * m + j - 1], best)) best = d[i * m + j - 1];
      }
      d[i * m + j] = {best.cost + detail::cell_cost(a[i], b[j]), best.length + 1};
    }
  }
  return d.back();
}

/// Path-length-normalized DTW distance (meters).
inline double dtw(const Trajectory& pred, const Trajectory& gt) {
  const DtwPath p = dtw_path(pred, gt);
  return p.cost / static_cast<double>(p.length);
}

// ---------------------------------------------------------------------------
// Best-of-K

struct MetricRow {
  double ade = 0.0;
  double fde = 0.0;
  double dtw = 0.0;
  double rot = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

enum class BestOfKMode {
  PerMetric,   ///< each metric minimized independently
  JointByAde,  ///< pick the trajectory with the lowest ADE, report all its metrics
};

inline Trajectory truncate_to(const Trajectory& pred, std::size_t steps) {
  return Trajectory(pred.begin(), pred.begin() + static_cast<std::ptrdiff_t>(std::min(steps, pred.size())));
}

inline MetricRow evaluate_prediction(const Trajectory& pred, const Trajectory& gt) {
  detail::check_horizon(pred, gt);
  const Trajectory p = truncate_to(pred, gt.size());
  return {ade(p, gt), fde(p, gt), dtw(p, gt), rot_error(p, gt)};
}

/// Best-of-k over precomputed per-sample rows.
inline MetricRow best_of_k(std::span<const MetricRow> rows, std::size_t k,
                           BestOfKMode mode = BestOfKMode::PerMetric) {
  if (k < 1 || rows.size() < k) {
    throw NotEnoughSamples("best_of_k needs k=" + std::to_string(k) + " samples, got " +
                           std::to_string(rows.size()));
  }
  if (mode == BestOfKMode::JointByAde) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i) {
      if (rows[i].ade < rows[best].ade) best = i;
    }
    return rows[best];
  }
  MetricRow out = rows[0];
  for (std::size_t i = 1; i < k; ++i) {
    out.ade = std::min(out.ade, rows[i].ade);
    out.fde = std::min(out.fde, rows[i].fde);
    out.dtw = std::min(out.dtw, rows[i].dtw);
    out.rot = std::min(out.rot, rows[i].rot);
  }
  return out;
}

inline MetricRow best_of_k(std::span<const Trajectory> samples, const Trajectory& gt, std::size_t k,
                           BestOfKMode mode = BestOfKMode::PerMetric) {
  if (k < 1 || samples.size() < k) {
    throw NotEnoughSamples("best_of_k needs k=" + std::to_string(k) + " samples, got " +
                           std::to_string(samples.size()));
  }
  std::vector<MetricRow> rows;
  rows.reserve(k);
  for (std::size_t i = 0; i < k; ++i) rows.push_back(evaluate_prediction(samples[i], gt));
  return best_of_k(rows, k, mode);
}

/// Dataset-level means of best-of-K rows, keyed by K.
struct MetricReport {
  std::map<std::size_t, MetricRow> by_k;
  std::size_t n_samples = 0;
  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

/// Accumulates per-sample best-of-K rows. Add samples in a fixed order
/// (sorted by sample id) for bitwise-reproducible means.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::vector<std::size_t> ks, BestOfKMode mode = BestOfKMode::PerMetric)
      : ks_(std::move(ks)), mode_(mode) {}

  void add(std::span<const MetricRow> per_sample_rows) {
    for (std::size_t k : ks_) {
      const MetricRow r = best_of_k(per_sample_rows, k, mode_);
      MetricRow& s = sums_[k];
      s.ade += r.ade;
      s.fde += r.fde;
      s.dtw += r.dtw;
      s.rot += r.rot;
    }
    ++n_;
  }

  MetricReport report() const {
    MetricReport rep;
    rep.n_samples = n_;
    for (std::size_t k : ks_) {
      MetricRow m;
      if (n_ > 0) {
        const MetricRow& s = sums_.at(k);
        const double n = static_cast<double>(n_);
        m = {s.ade / n, s.fde / n, s.dtw / n, s.rot / n};
      }
      rep.by_k[k] = m;
    }
    return rep;
  }

 private:
  std::vector<std::size_t> ks_;
  BestOfKMode mode_;
  std::map<std::size_t, MetricRow> sums_;
  std::size_t n_ = 0;
};

// ---------------------------------------------------------------------------
// Waypoint metrics

struct WaypointReport {
  double contact = 0.0;
  double traj = 0.0;
  double loc = 0.0;
  double time = 0.0;
  double rot = 0.0;
  friend bool operator==(const WaypointReport&, const WaypointReport&) = default;
};

/// Position error at the ground-truth approach-completion instant, averaged
/// over the hands visible in the ground-truth CONTACT waypoint.
inline double contact_distance(const Waypoint& pred, const TrajectorySample& gt) {
  const Waypoint& c = gt.waypoint(WaypointKind::Contact);
  double sum = 0.0;
  int n = 0;
  for (Hand h : kHands) {
    if (!c.visible(h)) continue;
    sum += (pred.pose(h).position - c.pose(h).position).norm();
    ++n;
  }
  if (n == 0) throw MissingWaypoint("ground-truth CONTACT has no visible hand");
  return sum / n;
}

/// Mean over waypoints of the distance to the nearest ground-truth step.
inline double traj_warp_distance(std::span<const Waypoint> pred, const Trajectory& gt) {
  if (pred.empty()) throw MissingWaypoint("no predicted waypoints");
  if (gt.empty()) throw EmptyTrajectory("ground-truth trajectory is empty");
  double total = 0.0;
  std::size_t counted = 0;
  for (const Waypoint& w : pred) {
    double best = std::numeric_limits<double>::infinity();
    for (const BiHandState& s : gt) {
      double sum = 0.0;
      int n = 0;
      for (Hand h : kHands) {
        if (!w.visible(h) || !s.valid(h)) continue;
        sum += (w.pose(h).position - s.pose(h).position).norm();
        ++n;
      }
      if (n > 0) best = std::min(best, sum / n);
    }
    if (std::isfinite(best)) {
      total += best;
      ++counted;
    }
  }
  if (counted == 0) throw MissingWaypoint("no waypoint shares a visible hand with the trajectory");
  return total / static_cast<double>(counted);
}

struct LocTimeRot {
  double loc = 0.0;
  double time = 0.0;
  double rot = 0.0;
};

/// Loc, Time and Rot over CONTACT and END. START is excluded from Time since
/// it is pinned at t = 0.
inline LocTimeRot waypoint_loc_time_rot(const WaypointSet& pred, const WaypointSet& gt) {
  LocTimeRot out;
  int n_loc = 0;
  for (WaypointKind k : {WaypointKind::Contact, WaypointKind::End}) {
    const Waypoint& p = pred[static_cast<std::size_t>(k)];
    const Waypoint& g = gt[static_cast<std::size_t>(k)];
    if (p.kind != k || g.kind != k) throw MissingWaypoint(std::string("missing ") + to_string(k));
    out.time += std::abs(p.timestamp - g.timestamp) / 2.0;
    double loc = 0.0;
    double rot = 0.0;
    int n = 0;
    for (Hand h : kHands) {
      if (!g.visible(h)) continue;
      loc += (p.pose(h).position - g.pose(h).position).norm();
      rot += geodesic_degrees(p.pose(h).rotation_matrix(), g.pose(h).rotation_matrix());
      ++n;
    }
    if (n > 0) {
      out.loc += loc / n;
      out.rot += rot / n;
      ++n_loc;
    }
  }
  if (n_loc > 0) {
    out.loc /= n_loc;
    out.rot /= n_loc;
  }
  return out;
}

inline WaypointReport waypoint_report(const WaypointSet& pred, const TrajectorySample& gt) {
  WaypointReport r;
  r.contact = contact_distance(pred[1], gt);
  r.traj = traj_warp_distance(std::span<const Waypoint>(pred).subspan(1), gt.future);
  const LocTimeRot ltr = waypoint_loc_time_rot(pred, gt.waypoints);
  r.loc = ltr.loc;
  r.time = ltr.time;
  r.rot = ltr.rot;
  return r;
}

// ---------------------------------------------------------------------------
// Serialization: fixed column order metric, K, value, n_samples.

inline constexpr const char* kMetricNames[] = {"ade", "fde", "dtw", "rot"};

inline double metric_value(const MetricRow& r, std::string_view name) {
  if (name == "ade") return r.ade;
  if (name == "fde") return r.fde;
  if (name == "dtw") return r.dtw;
  return r.rot;
}

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string report_to_csv(const MetricReport& rep) {
  std::string out = "metric,K,value,n_samples\n";
  for (const char* name : kMetricNames) {
    for (const auto& [k, row] : rep.by_k) {
      out += std::string(name) + "," + std::to_string(k) + "," + format_value(metric_value(row, name)) + "," +
             std::to_string(rep.n_samples) + "\n";
    }
  }
  return out;
}

inline nlohmann::ordered_json report_to_json(const MetricReport& rep) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const char* name : kMetricNames) {
    for (const auto& [k, row] : rep.by_k) {
      rows.push_back({{"metric", name}, {"K", k}, {"value", metric_value(row, name)}, {"n_samples", rep.n_samples}});
    }
  }
  nlohmann::ordered_json j;
  j["rows"] = rows;
  j["metadata"] = {{"dtw_step_pattern", "match/insert/delete, unit weights"},
                   {"dtw_normalization", "optimal path cost / path length"},
                   {"dtw_cell_cost", "mean over hands valid in both sequences"},
                   {"best_of_k", "per-metric minimum"},
                   {"horizon", "predictions truncated to ground-truth duration"}};
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport rep;
  for (const auto& row : j.at("rows")) {
    const auto k = row.at("K").get<std::size_t>();
    const auto name = row.at("metric").get<std::string>();
    const double v = row.at("value").get<double>();
    rep.n_samples = row.at("n_samples").get<std::size_t>();
    MetricRow& r = rep.by_k[k];
    if (name == "ade") r.ade = v;
    else if (name == "fde") r.fde = v;
    else if (name == "dtw") r.dtw = v;
    else if (name == "rot") r.rot = v;
  }
  return rep;
}

inline std::string waypoint_report_to_csv(const WaypointReport& w, std::size_t n_samples) {
  std::string out = "metric,value,n_samples\n";
  const std::pair<const char*, double> rows[] = {
      {"contact", w.contact}, {"traj", w.traj}, {"loc", w.loc}, {"time", w.time}, {"rot", w.rot}};
  for (const auto& [name, v] : rows) {
    out += std::string(name) + "," + format_value(v) + "," + std::to_string(n_samples) + "\n";
  }
  return out;
}

}  // namespace egoman
