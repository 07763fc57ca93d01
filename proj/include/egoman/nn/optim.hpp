#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "egoman/nn/layers.hpp"

namespace egoman::nn {

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  ///< 0 disables clipping

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw std::invalid_argument("warmup_fraction must be in [0, 1)");
    if (total_steps == 0) throw std::invalid_argument("total_steps must be >= 1");
  }

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
  }
};

/// Linear warmup to the peak rate, then cosine decay to zero at total_steps.
inline double learning_rate_at(const OptimizerConfig& cfg, std::size_t step) {
  const std::size_t warm = cfg.warmup_steps();
  if (step <= warm) {
    return warm == 0 ? cfg.learning_rate : cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
  }
  if (step >= cfg.total_steps) return 0.0;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(cfg.total_steps - warm);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const { return cfg_; }
  std::vector<Mat<T>>& first_moment() { return m_; }
  std::vector<Mat<T>>& second_moment() { return v_; }
  const std::vector<Mat<T>>& first_moment() const { return m_; }
  const std::vector<Mat<T>>& second_moment() const { return v_; }

  /// Applies update number `step` (1-based) to every parameter that has a
  /// gradient. Returns the learning rate used.
  double step(ParameterStore<T>& ps, std::size_t step) {
    if (step < 1) throw std::invalid_argument("optimizer step must be >= 1");
    auto& entries = ps.entries();
    if (m_.size() != entries.size()) {
      m_.clear();
      v_.clear();
      for (const auto& e : entries) {
        m_.push_back(Mat<T>::Zero(e.tensor.rows(), e.tensor.cols()));
        v_.push_back(Mat<T>::Zero(e.tensor.rows(), e.tensor.cols()));
      }
    }
    T clip = T(1);
    if (cfg_.max_grad_norm > 0) {
      double sq = 0.0;
      for (const auto& e : entries) {
        if (e.tensor.has_grad()) sq += static_cast<double>(e.tensor.grad().squaredNorm());
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.max_grad_norm) clip = static_cast<T>(cfg_.max_grad_norm / norm);
    }
    const double lr = learning_rate_at(cfg_, step);
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step)));
    const T lr_t = static_cast<T>(lr);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Tensor<T>& p = entries[i].tensor;
      Mat<T>& w = p.mutable_value();
      if (p.has_grad()) {
        const Mat<T> g = p.grad() * clip;
        m_[i] = b1 * m_[i] + (T(1) - b1) * g;
        v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      }
      const auto update = (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
      w.array() -= lr_t * (update + wd * w.array());
    }
    return lr;
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Mat<T>> m_;
  std::vector<Mat<T>> v_;
};

}  // namespace egoman::nn
