#pragma once

// Training objectives with analytic gradients with respect to the predictions.
//
//   fm_loss               flow-matching velocity regression
//   waypoint_loss         time/3D/2D/rot6D/geodesic waypoint supervision
//   action_semantic_loss  cosine loss below kappa samples, InfoNCE at or above

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "egoman/error.hpp"
#include "egoman/geometry.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

struct LossWeights {
  double wp = 0.3;
  double act = 0.1;
  double time = 1.0;
  double pos3d = 2.0;
  double pos2d = 0.5;
  double rot6d = 0.5;
  double geo = 0.15;
  double beta_rot6d = 0.2;
  double beta_3d = 0.07;
  double beta_2d = 0.02;
  double beta_time = 0.2;
  double sigma_time = 3.0;  ///< frames; 0 selects exact-frame targets
  int kappa = 10;
  double rot_weight_fm = 0.5;

  void validate() const {
    for (double v : {wp, act, time, pos3d, pos2d, rot6d, geo, rot_weight_fm, sigma_time}) {
      if (!(v >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
    }
    for (double b : {beta_rot6d, beta_3d, beta_2d, beta_time}) {
      if (!(b > 0.0)) throw std::invalid_argument("Huber thresholds must be positive");
    }
    if (kappa < 1) throw std::invalid_argument("kappa must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Huber

inline double huber_elem(double r, double beta) {
  const double a = std::abs(r);
  return a <= beta ? 0.5 * r * r / beta : a - 0.5 * beta;
}

inline double huber_elem_grad(double r, double beta) {
  return std::abs(r) <= beta ? r / beta : (r > 0 ? 1.0 : -1.0);
}

/// Elementwise Huber averaged over the residual vector.
inline double huber(std::span<const double> r, double beta) {
  if (!(beta > 0)) throw std::invalid_argument("huber: beta must be positive");
  if (r.empty()) return 0.0;
  double s = 0.0;
  for (double x : r) s += huber_elem(x, beta);
  return s / static_cast<double>(r.size());
}

// ---------------------------------------------------------------------------
// Flow matching

template <typename T>
struct FmLossResult {
  T value{};
  T position_mse{};
  T rotation_mse{};
  std::vector<T> grad;  ///< d value / d v_hat
};

/// Masked MSE between v_hat and (x1 - x0) on rows of kStateDim values
/// (6 position components then 12 rotation components), with the rotation
/// block scaled by `rot_weight`. An empty mask weights every element by 1.
template <typename T>
FmLossResult<T> fm_loss(std::span<const T> v_hat, std::span<const T> x0, std::span<const T> x1,
                        std::span<const T> mask, T rot_weight) {
  const std::size_t n = v_hat.size();
  if (x0.size() != n || x1.size() != n || (!mask.empty() && mask.size() != n) || n % kStateDim != 0) {
    throw ShapeMismatch("fm_loss: operand sizes differ or are not a multiple of 18");
  }
  T pos_sum{}, rot_sum{}, pos_w{}, rot_w{};
  for (std::size_t i = 0; i < n; ++i) {
    const T m = mask.empty() ? T(1) : mask[i];
    const T d = v_hat[i] - (x1[i] - x0[i]);
    if (i % kStateDim < kPosDim) {
      pos_sum += m * d * d;
      pos_w += m;
    } else {
      rot_sum += m * d * d;
      rot_w += m;
    }
  }
  FmLossResult<T> out;
  out.position_mse = pos_w > 0 ? pos_sum / pos_w : T(0);
  out.rotation_mse = rot_w > 0 ? rot_sum / rot_w : T(0);
  out.value = out.position_mse + rot_weight * out.rotation_mse;
  out.grad.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T m = mask.empty() ? T(1) : mask[i];
    const T d = v_hat[i] - (x1[i] - x0[i]);
    if (i % kStateDim < kPosDim) {
      if (pos_w > 0) out.grad[i] = T(2) * m * d / pos_w;
    } else if (rot_w > 0) {
      out.grad[i] = rot_weight * T(2) * m * d / rot_w;
    }
  }
  return out;
}

template <typename T>
FmLossResult<T> fm_loss(std::span<const T> v_hat, std::span<const T> x0, std::span<const T> x1,
                        T rot_weight = T(0.5)) {
  return fm_loss<T>(v_hat, x0, x1, std::span<const T>{}, rot_weight);
}

// ---------------------------------------------------------------------------
// Waypoint loss

/// Per waypoint: timestamp, left xyz, right xyz, left rot6d, right rot6d.
inline constexpr std::size_t kWaypointParams = 1 + 3 + 3 + 6 + 6;

inline std::vector<double> waypoint_params(const WaypointSet& w) {
  std::vector<double> p;
  p.reserve(3 * kWaypointParams);
  for (const Waypoint& wp : w) {
    p.push_back(wp.timestamp);
    for (Hand h : kHands) {
      for (int c = 0; c < 3; ++c) p.push_back(wp.pose(h).position[c]);
    }
    for (Hand h : kHands) {
      for (std::size_t c = 0; c < 6; ++c) p.push_back(wp.pose(h).rotation[c]);
    }
  }
  return p;
}

inline WaypointSet waypoints_from_params(std::span<const double> p, WaypointSet like) {
  if (p.size() != 3 * kWaypointParams) throw ShapeMismatch("waypoint parameter vector must have 57 entries");
  std::size_t i = 0;
  for (Waypoint& wp : like) {
    wp.timestamp = p[i++];
    for (Hand h : kHands) {
      for (int c = 0; c < 3; ++c) wp.pose(h).position[c] = p[i++];
    }
    for (Hand h : kHands) {
      for (std::size_t c = 0; c < 6; ++c) wp.pose(h).rotation[c] = p[i++];
    }
  }
  return like;
}

struct WaypointLossResult {
  double total = 0.0;
  double time = 0.0;
  double pos3d = 0.0;
  double pos2d = 0.0;
  double rot6d = 0.0;
  double geo = 0.0;
  bool missing_intrinsics = false;
  std::vector<double> grad;  ///< d total / d waypoint_params(pred)
};

/// Supervision target for one hand of one waypoint.
struct WaypointTarget {
  Vec3 position = Vec3::Zero();
  Rotation6D rotation;
};

/// Gaussian-window target: the weighted mean of the ground-truth trajectory
/// (past and future) over frame offsets |d| <= 3 sigma around the waypoint
/// frame, weights exp(-d^2 / (2 sigma^2)). sigma <= 0, or no valid frame in
/// the window, yields the ground-truth waypoint pose itself.
inline WaypointTarget waypoint_target(const TrajectorySample& gt, WaypointKind kind, Hand hand,
                                      double sigma_frames) {
  const Waypoint& w = gt.waypoint(kind);
  WaypointTarget exact{w.pose(hand).position, w.pose(hand).rotation};
  if (!(sigma_frames > 0.0)) return exact;

  const long center = std::lround(w.timestamp * kFps);
  const double reach = 3.0 * sigma_frames;
  double wsum = 0.0;
  Vec3 pos = Vec3::Zero();
  std::array<double, 6> rot{};
  auto visit = [&](const Trajectory& traj) {
    for (const BiHandState& s : traj) {
      if (!s.valid(hand)) continue;
      const double d = static_cast<double>(std::lround(s.timestamp * kFps) - center);
      if (std::abs(d) > reach) continue;
      const double wt = std::exp(-d * d / (2.0 * sigma_frames * sigma_frames));
      wsum += wt;
      pos += wt * s.pose(hand).position;
      for (std::size_t c = 0; c < 6; ++c) rot[c] += wt * s.pose(hand).rotation[c];
    }
  };
  visit(gt.past);
  visit(gt.future);
  if (wsum <= 0.0) return exact;
  WaypointTarget t;
  t.position = pos / wsum;
  for (std::size_t c = 0; c < 6; ++c) t.rotation[c] = rot[c] / wsum;
  return t;
}

namespace detail {

/// Vector-Jacobian product of Gram-Schmidt: given dL/dR (3x3) returns dL/da (6).
inline std::array<double, 6> gram_schmidt_vjp(const Rotation6D& r, const Mat3& dR) {
  const Vec3 a1 = r.first();
  const Vec3 a2 = r.second();
  const double n1 = a1.norm();
  const Vec3 b1 = a1 / n1;
  const Vec3 u2 = a2 - b1.dot(a2) * b1;
  const double nu = u2.norm();
  const Vec3 b2 = u2 / nu;
  Vec3 g1 = dR.col(0);
  Vec3 g2 = dR.col(1);
  const Vec3 g3 = dR.col(2);
  // b3 = b1 x b2
  g1 += b2.cross(g3);
  g2 += g3.cross(b1);
  // b2 = u2 / |u2|
  const Vec3 gu = (g2 - b2 * b2.dot(g2)) / nu;
  // u2 = a2 - (b1 . a2) b1
  const Vec3 ga2 = gu - b1 * b1.dot(gu);
  g1 -= b1.dot(a2) * gu + b1.dot(gu) * a2;
  // b1 = a1 / |a1|
  const Vec3 ga1 = (g1 - b1 * b1.dot(g1)) / n1;
  return {ga1.x(), ga1.y(), ga1.z(), ga2.x(), ga2.y(), ga2.z()};
}

inline constexpr double kGeoRegularizer = 1e-8;

inline Rotation6D regularized(Rotation6D r) {
  r[0] += kGeoRegularizer;
  r[4] += kGeoRegularizer;
  return r;
}

}  // namespace detail

/// Weighted waypoint loss with its gradient.
///
/// Terms are averaged over supervised entries: L_time over CONTACT and END,
/// the pose terms over (waypoint, hand) pairs visible in the ground truth,
/// each entry contributing the Huber sum over its components. The 2D term
/// works in image-normalized coordinates (pixels / image size) and skips
/// points at or behind the camera; it is dropped entirely when the sample
/// intrinsics are invalid.
inline WaypointLossResult waypoint_loss(const WaypointSet& pred, const TrajectorySample& gt, const LossWeights& w) {
  WaypointLossResult res;
  res.grad.assign(3 * kWaypointParams, 0.0);
  const CameraIntrinsics& cam = gt.camera;
  res.missing_intrinsics = !cam.valid();

  // Gradients of each (unweighted) term, combined at the end.
  std::vector<double> g_time(res.grad.size(), 0.0), g_3d(res.grad.size(), 0.0), g_2d(res.grad.size(), 0.0),
      g_r6(res.grad.size(), 0.0), g_geo(res.grad.size(), 0.0);
  int n_time = 0, n_3d = 0, n_2d = 0, n_geo = 0;

  for (std::size_t k = 0; k < 3; ++k) {
    const Waypoint& p = pred[k];
    const Waypoint& g = gt.waypoints[k];
    const std::size_t base = k * kWaypointParams;
    if (k > 0) {
      const double r = p.timestamp - g.timestamp;
      res.time += huber_elem(r, w.beta_time);
      g_time[base] += huber_elem_grad(r, w.beta_time);
      ++n_time;
    }
    for (Hand h : kHands) {
      if (!g.visible(h)) continue;
      const auto hi = static_cast<std::size_t>(h);
      const std::size_t pos_off = base + 1 + 3 * hi;
      const std::size_t rot_off = base + 7 + 6 * hi;
      const WaypointTarget tgt = waypoint_target(gt, g.kind, h, w.sigma_time);
      const Vec3& pp = p.pose(h).position;

      for (int c = 0; c < 3; ++c) {
        const double r = pp[c] - tgt.position[c];
        res.pos3d += huber_elem(r, w.beta_3d);
        g_3d[pos_off + static_cast<std::size_t>(c)] += huber_elem_grad(r, w.beta_3d);
      }
      ++n_3d;

      if (!res.missing_intrinsics && pp.z() > kMinDepth && tgt.position.z() > kMinDepth) {
        const Vec2 uv = project(pp, cam);
        const Vec2 uv_t = project(tgt.position, cam);
        const double du = (uv.x() - uv_t.x()) / cam.width;
        const double dv = (uv.y() - uv_t.y()) / cam.height;
        res.pos2d += huber_elem(du, w.beta_2d) + huber_elem(dv, w.beta_2d);
        const double gu = huber_elem_grad(du, w.beta_2d);
        const double gv = huber_elem_grad(dv, w.beta_2d);
        const double z = pp.z();
        g_2d[pos_off + 0] += gu * cam.fx / (z * cam.width);
        g_2d[pos_off + 1] += gv * cam.fy / (z * cam.height);
        g_2d[pos_off + 2] += -gu * cam.fx * pp.x() / (z * z * cam.width) - gv * cam.fy * pp.y() / (z * z * cam.height);
        ++n_2d;
      }

      for (std::size_t c = 0; c < 6; ++c) {
        const double r = p.pose(h).rotation[c] - tgt.rotation[c];
        res.rot6d += huber_elem(r, w.beta_rot6d);
        g_r6[rot_off + c] += huber_elem_grad(r, w.beta_rot6d);
      }

      const Rotation6D pr = detail::regularized(p.pose(h).rotation);
      const Mat3 rp = rot6d_to_matrix(pr).matrix();
      const Mat3 rt = rot6d_to_matrix(detail::regularized(tgt.rotation)).matrix();
      const double c = std::clamp(((rt.transpose() * rp).trace() - 1.0) / 2.0, -1.0, 1.0);
      res.geo += std::acos(c);
      const double s2 = 1.0 - c * c;
      if (s2 > 1e-24) {
        const double dtheta_dc = -1.0 / std::sqrt(s2);
        const Mat3 dR = dtheta_dc * 0.5 * rt;
        const std::array<double, 6> ga = detail::gram_schmidt_vjp(pr, dR);
        for (std::size_t q = 0; q < 6; ++q) g_geo[rot_off + q] += ga[q];
      }
      ++n_geo;
    }
  }

  auto finish = [](double& term, std::vector<double>& g, int n) {
    if (n == 0) {
      term = 0.0;
      std::fill(g.begin(), g.end(), 0.0);
      return;
    }
    term /= n;
    for (double& x : g) x /= n;
  };
  finish(res.time, g_time, n_time);
  finish(res.pos3d, g_3d, n_3d);
  finish(res.pos2d, g_2d, n_2d);
  finish(res.rot6d, g_r6, n_3d);
  finish(res.geo, g_geo, n_geo);

  res.total = w.time * res.time + w.pos3d * res.pos3d + w.pos2d * res.pos2d + w.rot6d * res.rot6d + w.geo * res.geo;
  for (std::size_t i = 0; i < res.grad.size(); ++i) {
    res.grad[i] = w.time * g_time[i] + w.pos3d * g_3d[i] + w.pos2d * g_2d[i] + w.rot6d * g_r6[i] + w.geo * g_geo[i];
  }
  return res;
}

// ---------------------------------------------------------------------------
// Action-semantic loss

/// Learnable contrastive temperature, kept inside [1e-3, 1].
struct Temperature {
  static constexpr double kMin = 1e-3;
  static constexpr double kMax = 1.0;
  double value = 0.07;
  void clamp() { value = std::clamp(value, kMin, kMax); }
};

struct SemanticBatch {
  std::vector<std::vector<double>> predicted;
  std::vector<std::vector<double>> targets;
  double temperature = 0.07;
};

struct SemanticLossResult {
  double value = 0.0;
  bool used_infonce = false;
  std::vector<std::vector<double>> grad_predicted;
  double grad_temperature = 0.0;
};

namespace detail {

inline std::vector<double> normalized(const std::vector<double>& v, double* norm_out = nullptr) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (norm_out) *norm_out = n;
  std::vector<double> out(v.size(), 0.0);
  if (n > 0) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  }
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Cosine loss 1 - mean sim(z_i, z_i+) when K < kappa, otherwise InfoNCE with
/// logits sim(z_i, z_j+) / tau and matched-index labels. Predictions are
/// L2-normalized internally.
inline SemanticLossResult action_semantic_loss(const SemanticBatch& b, int kappa) {
  const std::size_t k = b.predicted.size();
  if (k == 0 || b.targets.size() != k) throw ShapeMismatch("action_semantic_loss: need K >= 1 matched pairs");
  const std::size_t dim = b.predicted.front().size();
  for (std::size_t i = 0; i < k; ++i) {
    if (b.predicted[i].size() != dim || b.targets[i].size() != dim) {
      throw ShapeMismatch("action_semantic_loss: embedding dimensions differ");
    }
  }
  std::vector<std::vector<double>> z(k), t(k);
  std::vector<double> norms(k);
  for (std::size_t i = 0; i < k; ++i) {
    z[i] = detail::normalized(b.predicted[i], &norms[i]);
    t[i] = detail::normalized(b.targets[i]);
  }
  const double kd = static_cast<double>(k);
  SemanticLossResult res;
  std::vector<std::vector<double>> gz(k, std::vector<double>(dim, 0.0));

  if (static_cast<int>(k) < kappa) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      s += detail::dot(z[i], t[i]);
      for (std::size_t c = 0; c < dim; ++c) gz[i][c] = -t[i][c] / kd;
    }
    res.value = 1.0 - s / kd;
  } else {
    res.used_infonce = true;
    const double tau = b.temperature;
    std::vector<double> logits(k * k);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) logits[i * k + j] = detail::dot(z[i], t[j]) / tau;
    }
    for (std::size_t i = 0; i < k; ++i) {
      const double* row = &logits[i * k];
      const double mx = *std::max_element(row, row + k);
      double se = 0.0;
      for (std::size_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
      const double lse = mx + std::log(se);
      res.value += (lse - row[i]) / kd;
      for (std::size_t j = 0; j < k; ++j) {
        const double g = (std::exp(row[j] - lse) - (i == j ? 1.0 : 0.0)) / kd;
        for (std::size_t c = 0; c < dim; ++c) gz[i][c] += g * t[j][c] / tau;
        res.grad_temperature -= g * row[j] / tau;
      }
    }
  }

  // Back through the normalization z = p / |p|.
  res.grad_predicted.assign(k, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    if (norms[i] <= 0.0) continue;
    const double zg = detail::dot(z[i], gz[i]);
    for (std::size_t c = 0; c < dim; ++c) res.grad_predicted[i][c] = (gz[i][c] - z[i][c] * zg) / norms[i];
  }
  return res;
}

inline double total_finetune_loss(double fm, double wp, double act, const LossWeights& w) {
  if (!std::isfinite(fm) || !std::isfinite(wp) || !std::isfinite(act)) {
    throw NumericalFailure("total_finetune_loss: non-finite term");
  }
  return fm + w.wp * wp + w.act * act;
}

}  // namespace egoman
