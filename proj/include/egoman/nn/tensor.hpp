#pragma once

// Reverse-mode differentiation over dense 2-D tensors.
//
// Every op that touches a tensor requiring gradients records a closure on a
// thread-local tape. `backward(loss)` replays the tape in reverse. The tape
// is cleared explicitly with `reset_tape()` between steps. Parameters are
// leaves: their gradients accumulate until `zero_grad`.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "egoman/error.hpp"

namespace egoman::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;  // allocated lazily
  bool requires_grad = false;
  bool recorded = false;

  void accumulate(const Mat<T>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Mat<T>& zeroed_grad() {
    if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor constant(Mat<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Tensor(std::move(n));
  }
  static Tensor parameter(Mat<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Eigen::Index r, Eigen::Index c) { return constant(Mat<T>::Zero(r, c)); }

  bool defined() const { return n_ != nullptr; }
  Eigen::Index rows() const { return n_->value.rows(); }
  Eigen::Index cols() const { return n_->value.cols(); }
  std::vector<Eigen::Index> shape() const { return {rows(), cols()}; }
  const Mat<T>& value() const { return n_->value; }
  Mat<T>& mutable_value() { return n_->value; }
  /// Gradient, or an empty matrix when none has been accumulated.
  const Mat<T>& grad() const { return n_->grad; }
  bool has_grad() const { return n_->grad.size() != 0; }
  bool requires_grad() const { return n_->requires_grad; }
  bool recorded() const { return n_->recorded; }
  T item() const { return n_->value(0, 0); }
  void zero_grad() { n_->grad.resize(0, 0); }
  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
struct Tape {
  struct Entry {
    std::shared_ptr<Node<T>> out;
    std::function<void(Node<T>&)> backward;
  };
  std::vector<Entry> entries;
  int no_grad_depth = 0;
};

template <typename T>
Tape<T>& tape() {
  thread_local Tape<T> t;
  return t;
}

template <typename T>
void reset_tape() {
  for (auto& e : tape<T>().entries) e.out->recorded = false;
  tape<T>().entries.clear();
}

/// Disables recording in the current thread for its lifetime.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() { ++tape<T>().no_grad_depth; }
  ~NoGradGuard() { --tape<T>().no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ins) {
  return std::any_of(ins.begin(), ins.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

/// Wraps `value` as the output of an op; records `bw` when gradients flow.
template <typename T, typename Fn>
Tensor<T> make_op(Mat<T> value, std::initializer_list<const Tensor<T>*> ins, Fn&& bw) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (tape<T>().no_grad_depth == 0 && any_requires_grad<T>(ins)) {
    n->requires_grad = true;
    n->recorded = true;
    tape<T>().entries.push_back({n, std::function<void(Node<T>&)>(std::forward<Fn>(bw))});
  }
  return Tensor<T>(std::move(n));
}

inline void check(bool ok, const char* what) {
  if (!ok) throw ShapeMismatch(what);
}

}  // namespace detail

/// Populates gradients of every tensor that `loss` depends on. Gradients of
/// leaves accumulate across calls; intermediate gradients are recomputed.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || !loss.recorded()) throw NoGraph("loss has no recorded history");
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeMismatch("backward expects a scalar loss");
  auto& entries = tape<T>().entries;
  std::ptrdiff_t last = -1;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].out->grad.resize(0, 0);
    if (entries[i].out.get() == loss.node()) last = static_cast<std::ptrdiff_t>(i);
  }
  if (last < 0) throw NoGraph("loss is not on the current tape");
  loss.node()->grad = Mat<T>::Ones(1, 1);
  for (std::ptrdiff_t i = last; i >= 0; --i) {
    auto& e = entries[static_cast<std::size_t>(i)];
    if (e.out->grad.size() == 0) continue;
    e.backward(*e.out);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>(a.value() + b.value(), {&a, &b}, [pa, pb](Node<T>& o) {
    if (pa->requires_grad) pa->accumulate(o.grad);
    if (pb->requires_grad) pb->accumulate(o.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>(a.value() - b.value(), {&a, &b}, [pa, pb](Node<T>& o) {
    if (pa->requires_grad) pa->accumulate(o.grad);
    if (pb->requires_grad) pb->accumulate(-o.grad);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>(a.value().cwiseProduct(b.value()), {&a, &b}, [pa, pb](Node<T>& o) {
    if (pa->requires_grad) pa->accumulate(o.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(o.grad.cwiseProduct(pa->value));
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto pa = a.ptr();
  return detail::make_op<T>(a.value() * s, {&a}, [pa, s](Node<T>& o) { pa->accumulate(o.grad * s); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto pa = a.ptr();
  Mat<T> v = a.value().array() + s;
  return detail::make_op<T>(std::move(v), {&a}, [pa](Node<T>& o) { pa->accumulate(o.grad); });
}

/// x (n x m) + r (1 x m) broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& r) {
  detail::check(r.rows() == 1 && r.cols() == x.cols(), "add_rowvec: row vector must be 1 x cols");
  auto px = x.ptr(), pr = r.ptr();
  Mat<T> v = x.value().rowwise() + r.value().row(0);
  return detail::make_op<T>(std::move(v), {&x, &r}, [px, pr](Node<T>& o) {
    if (px->requires_grad) px->accumulate(o.grad);
    if (pr->requires_grad) pr->accumulate(o.grad.colwise().sum());
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  auto pa = a.ptr(), pb = b.ptr();
  Mat<T> v = a.value() * b.value();
  return detail::make_op<T>(std::move(v), {&a, &b}, [pa, pb](Node<T>& o) {
    if (pa->requires_grad) pa->zeroed_grad().noalias() += o.grad * pb->value.transpose();
    if (pb->requires_grad) pb->zeroed_grad().noalias() += pa->value.transpose() * o.grad;
  });
}

/// x W + b with W (in x out) and b (1 x out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::check(x.cols() == w.rows() && b.rows() == 1 && b.cols() == w.cols(), "linear: shape mismatch");
  auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
  Mat<T> v(x.rows(), w.cols());
  v.noalias() = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return detail::make_op<T>(std::move(v), {&x, &w, &b}, [px, pw, pb](Node<T>& o) {
    if (px->requires_grad) px->zeroed_grad().noalias() += o.grad * pw->value.transpose();
    if (pw->requires_grad) pw->zeroed_grad().noalias() += px->value.transpose() * o.grad;
    if (pb->requires_grad) pb->accumulate(o.grad.colwise().sum());
  });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  const Mat<T>& xv = x.value();
  Mat<T> th = (kC * (xv.array() + kA * xv.array().cube())).tanh().matrix();
  Mat<T> v = (T(0.5) * xv.array() * (T(1) + th.array())).matrix();
  auto px = x.ptr();
  return detail::make_op<T>(std::move(v), {&x}, [px, th = std::move(th)](Node<T>& o) {
    const auto xa = px->value.array();
    const auto t = th.array();
    const Mat<T> d =
        (T(0.5) * (T(1) + t) + T(0.5) * xa * (T(1) - t.square()) * kC * (T(1) + T(3) * kA * xa.square())).matrix();
    px->accumulate(o.grad.cwiseProduct(d));
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Mat<T> v(1, 1);
  v(0, 0) = x.value().sum();
  auto px = x.ptr();
  return detail::make_op<T>(std::move(v), {&x}, [px](Node<T>& o) {
    px->accumulate(Mat<T>::Constant(px->value.rows(), px->value.cols(), o.grad(0, 0)));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

/// out[i] = x[idx[i]]; gradients scatter-add back.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<Eigen::Index> idx) {
  Mat<T> v(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::check(idx[i] >= 0 && idx[i] < x.rows(), "gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = x.value().row(idx[i]);
  }
  auto px = x.ptr();
  return detail::make_op<T>(std::move(v), {&x}, [px, idx = std::move(idx)](Node<T>& o) {
    Mat<T>& g = px->zeroed_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += o.grad.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool grad = false;
  for (const auto& p : parts) {
    detail::check(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
    grad = grad || p.requires_grad();
  }
  Mat<T> v(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  if (tape<T>().no_grad_depth == 0 && grad) {
    n->requires_grad = true;
    n->recorded = true;
    std::vector<std::shared_ptr<Node<T>>> ins;
    for (const auto& p : parts) ins.push_back(p.ptr());
    tape<T>().entries.push_back({n, [ins = std::move(ins)](Node<T>& o) {
                                   Eigen::Index off = 0;
                                   for (const auto& in : ins) {
                                     if (in->requires_grad) in->accumulate(o.grad.middleRows(off, in->value.rows()));
                                     off += in->value.rows();
                                   }
                                 }});
  }
  return Tensor<T>(std::move(n));
}

/// Columns [begin, begin + count).
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, Eigen::Index begin, Eigen::Index count) {
  detail::check(begin >= 0 && begin + count <= x.cols(), "slice_cols: range out of bounds");
  auto px = x.ptr();
  return detail::make_op<T>(x.value().middleCols(begin, count), {&x}, [px, begin, count](Node<T>& o) {
    px->zeroed_grad().middleCols(begin, count) += o.grad;
  });
}

// ---------------------------------------------------------------------------
// Normalization, modulation, attention

/// Per-row layer normalization with affine (1 x d) gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const Eigen::Index d = x.cols();
  detail::check(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
                "layer_norm: affine parameters must be 1 x d");
  const Mat<T>& xv = x.value();
  Mat<T> xhat(xv.rows(), d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    const T mu = xv.row(i).mean();
    const T var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Mat<T> v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  auto px = x.ptr(), pg = gain.ptr(), pb = bias.ptr();
  return detail::make_op<T>(std::move(v), {&x, &gain, &bias},
                            [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
                              if (pg->requires_grad) pg->accumulate(o.grad.cwiseProduct(xhat).colwise().sum());
                              if (pb->requires_grad) pb->accumulate(o.grad.colwise().sum());
                              if (!px->requires_grad) return;
                              const T dd = static_cast<T>(xhat.cols());
                              Mat<T> gx(xhat.rows(), xhat.cols());
                              for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                                const auto gh = (o.grad.row(i).array() * pg->value.row(0).array()).eval();
                                const T m1 = gh.mean();
                                const T m2 = (gh * xhat.row(i).array()).sum() / dd;
                                gx.row(i) = ((gh - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
                              }
                              px->accumulate(gx);
                            });
}

/// gamma * x + beta where row g of gamma/beta modulates rows
/// [g * group, (g + 1) * group) of x.
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Eigen::Index group) {
  detail::check(group > 0 && gamma.rows() * group == x.rows() && beta.rows() == gamma.rows() &&
                    gamma.cols() == x.cols() && beta.cols() == x.cols(),
                "film: gamma/beta must be (rows/group) x cols");
  const Mat<T>& xv = x.value();
  Mat<T> v(xv.rows(), xv.cols());
  for (Eigen::Index g = 0; g < gamma.rows(); ++g) {
    v.middleRows(g * group, group) =
        (xv.middleRows(g * group, group).array().rowwise() * gamma.value().row(g).array()).matrix();
    v.middleRows(g * group, group).rowwise() += beta.value().row(g);
  }
  auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
  return detail::make_op<T>(std::move(v), {&x, &gamma, &beta}, [px, pg, pb, group](Node<T>& o) {
    const Eigen::Index groups = pg->value.rows();
    if (px->requires_grad) {
      Mat<T>& gx = px->zeroed_grad();
      for (Eigen::Index g = 0; g < groups; ++g) {
        gx.middleRows(g * group, group) +=
            (o.grad.middleRows(g * group, group).array().rowwise() * pg->value.row(g).array()).matrix();
      }
    }
    if (pg->requires_grad) {
      Mat<T>& gg = pg->zeroed_grad();
      for (Eigen::Index g = 0; g < groups; ++g) {
        gg.row(g) += o.grad.middleRows(g * group, group).cwiseProduct(px->value.middleRows(g * group, group)).colwise().sum();
      }
    }
    if (pb->requires_grad) {
      Mat<T>& gb = pb->zeroed_grad();
      for (Eigen::Index g = 0; g < groups; ++g) gb.row(g) += o.grad.middleRows(g * group, group).colwise().sum();
    }
  });
}

/// Scaled dot-product attention, independently per group and head. Rows of q
/// come in groups of `q_group`, rows of k and v in groups of `kv_group`; the
/// columns are split evenly across `heads`.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Eigen::Index heads,
                    Eigen::Index q_group, Eigen::Index kv_group) {
  const Eigen::Index d = q.cols();
  detail::check(k.cols() == d && v.cols() == d && heads > 0 && d % heads == 0, "attention: width mismatch");
  detail::check(q_group > 0 && kv_group > 0 && q.rows() % q_group == 0 && k.rows() == v.rows() &&
                    k.rows() == (q.rows() / q_group) * kv_group,
                "attention: group layout mismatch");
  const Eigen::Index groups = q.rows() / q_group;
  const Eigen::Index dh = d / heads;
  const T scale_f = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> out(q.rows(), d);
  // Softmax probabilities per (group, head), kept for the backward pass.
  std::vector<Mat<T>> probs(static_cast<std::size_t>(groups * heads));
  for (Eigen::Index g = 0; g < groups; ++g) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = q.value().block(g * q_group, h * dh, q_group, dh);
      const auto kb = k.value().block(g * kv_group, h * dh, kv_group, dh);
      const auto vb = v.value().block(g * kv_group, h * dh, kv_group, dh);
      Mat<T> s(q_group, kv_group);
      s.noalias() = qb * kb.transpose();
      s *= scale_f;
      for (Eigen::Index i = 0; i < q_group; ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      out.block(g * q_group, h * dh, q_group, dh).noalias() = s * vb;
      probs[static_cast<std::size_t>(g * heads + h)] = std::move(s);
    }
  }
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return detail::make_op<T>(
      std::move(out), {&q, &k, &v},
      [pq, pk, pv, probs = std::move(probs), groups, heads, dh, q_group, kv_group, scale_f](Node<T>& o) {
        Mat<T>* gq = pq->requires_grad ? &pq->zeroed_grad() : nullptr;
        Mat<T>* gk = pk->requires_grad ? &pk->zeroed_grad() : nullptr;
        Mat<T>* gv = pv->requires_grad ? &pv->zeroed_grad() : nullptr;
        for (Eigen::Index g = 0; g < groups; ++g) {
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Mat<T>& p = probs[static_cast<std::size_t>(g * heads + h)];
            const auto go = o.grad.block(g * q_group, h * dh, q_group, dh);
            const auto qb = pq->value.block(g * q_group, h * dh, q_group, dh);
            const auto kb = pk->value.block(g * kv_group, h * dh, kv_group, dh);
            const auto vb = pv->value.block(g * kv_group, h * dh, kv_group, dh);
            if (gv) gv->block(g * kv_group, h * dh, kv_group, dh).noalias() += p.transpose() * go;
            Mat<T> dp(q_group, kv_group);
            dp.noalias() = go * vb.transpose();
            Mat<T> ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
            ds -= (p.array().colwise() * rs.array()).matrix();
            ds *= scale_f;
            if (gq) gq->block(g * q_group, h * dh, q_group, dh).noalias() += ds * kb;
            if (gk) gk->block(g * kv_group, h * dh, kv_group, dh).noalias() += ds.transpose() * qb;
          }
        }
      });
}

/// Scalar op whose value and gradient with respect to `x` are supplied by the
/// caller (analytic losses computed outside the tape).
template <typename T>
Tensor<T> external_loss(const Tensor<T>& x, T value, Mat<T> grad) {
  detail::check(grad.rows() == x.rows() && grad.cols() == x.cols(), "external_loss: gradient shape mismatch");
  Mat<T> v(1, 1);
  v(0, 0) = value;
  auto px = x.ptr();
  return detail::make_op<T>(std::move(v), {&x}, [px, grad = std::move(grad)](Node<T>& o) {
    px->accumulate(grad * o.grad(0, 0));
  });
}

}  // namespace egoman::nn
