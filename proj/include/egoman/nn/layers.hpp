#pragma once

// Parameterized building blocks: linear, layer norm, MLP, multi-head
// attention, embedding tables, plus the sinusoidal time embedding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "egoman/nn/tensor.hpp"

namespace egoman::nn {

/// Owns every trainable tensor of a model, in creation order.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  /// Truncated normal (std 0.02, cut at 2 std).
  Tensor<T> normal(const std::string& name, Eigen::Index r, Eigen::Index c, double std = 0.02) {
    std::normal_distribution<double> dist(0.0, std);
    Mat<T> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double x = dist(rng_);
      while (std::abs(x) > 2.0 * std) x = dist(rng_);
      m.data()[i] = static_cast<T>(x);
    }
    return add(name, std::move(m));
  }
  Tensor<T> zeros(const std::string& name, Eigen::Index r, Eigen::Index c) { return add(name, Mat<T>::Zero(r, c)); }
  Tensor<T> ones(const std::string& name, Eigen::Index r, Eigen::Index c) { return add(name, Mat<T>::Ones(r, c)); }

  Tensor<T> add(const std::string& name, Mat<T> value) {
    Tensor<T> t = Tensor<T>::parameter(std::move(value));
    entries_.push_back({name, t});
    return t;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.tensor.value().size());
    return n;
  }
  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::mt19937_64 rng_;
  std::vector<Entry> entries_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // 1 x out

  Linear() = default;
  Linear(ParameterStore<T>& ps, const std::string& name, Eigen::Index in, Eigen::Index out)
      : weight(ps.normal(name + ".weight", in, out)), bias(ps.zeros(name + ".bias", 1, out)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& ps, const std::string& name, Eigen::Index dim)
      : gain(ps.ones(name + ".gain", 1, dim)), bias(ps.zeros(name + ".bias", 1, dim)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(ParameterStore<T>& ps, const std::string& name, Eigen::Index dim, Eigen::Index hidden)
      : fc1(ps, name + ".fc1", dim, hidden), fc2(ps, name + ".fc2", hidden, dim) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  Eigen::Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<T>& ps, const std::string& name, Eigen::Index dim, Eigen::Index n_heads)
      : q(ps, name + ".q", dim, dim),
        k(ps, name + ".k", dim, dim),
        v(ps, name + ".v", dim, dim),
        o(ps, name + ".o", dim, dim),
        heads(n_heads) {}

  /// Queries attend to keys/values group-wise (see `attention`).
  Tensor<T> operator()(const Tensor<T>& xq, const Tensor<T>& xkv, Eigen::Index q_group, Eigen::Index kv_group) const {
    return o(attention(q(xq), k(xkv), v(xkv), heads, q_group, kv_group));
  }
  Tensor<T> self(const Tensor<T>& x, Eigen::Index group) const { return (*this)(x, x, group, group); }
};

template <typename T>
struct Embedding {
  Tensor<T> table;

  Embedding() = default;
  Embedding(ParameterStore<T>& ps, const std::string& name, Eigen::Index count, Eigen::Index dim)
      : table(ps.normal(name + ".table", count, dim)) {}

  Tensor<T> operator()(std::vector<Eigen::Index> ids) const { return gather_rows(table, std::move(ids)); }
};

/// Interleaved [sin(w_0 s), cos(w_0 s), sin(w_1 s), ...] with s = 1000 t and
/// geometric frequencies w_i = 10000^(-i / (dim/2)).
inline std::vector<double> sinusoidal_time_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ShapeMismatch("sinusoidal_time_embedding: dim must be even and positive");
  std::vector<double> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double a = 1000.0 * t * freq;
    e[2 * i] = std::sin(a);
    e[2 * i + 1] = std::cos(a);
  }
  return e;
}

}  // namespace egoman::nn
