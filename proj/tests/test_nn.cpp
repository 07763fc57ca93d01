#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "egoman/nn/checkpoint.hpp"
#include "egoman/nn/layers.hpp"
#include "egoman/nn/optim.hpp"
#include "egoman/nn/tensor.hpp"

using namespace egoman;
using namespace egoman::nn;
using Md = Mat<double>;
using Td = Tensor<double>;

namespace {

Md random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Md m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Compares backprop gradients of every tensor in `params` with central
/// differences of `loss_fn`, which must rebuild the graph from scratch.
void expect_gradients(std::vector<Td> params, const std::function<Td()>& loss_fn, double tol = 1e-4) {
  reset_tape<double>();
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  std::vector<Md> analytic;
  for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Md::Zero(p.rows(), p.cols()));
  reset_tape<double>();
  NoGradGuard<double> guard;
  const double h = 1e-6;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Md& v = params[k].mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double keep = v.data()[i];
      v.data()[i] = keep + h;
      const double up = loss_fn().item();
      v.data()[i] = keep - h;
      const double down = loss_fn().item();
      v.data()[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double a = analytic[k].data()[i];
      const double denom = std::max({1e-4, std::abs(fd), std::abs(a)});
      EXPECT_LT(std::abs(fd - a) / denom, tol) << "param " << k << " entry " << i << " fd " << fd << " bp " << a;
    }
  }
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
Td probe(const Td& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, Td::constant(random_mat(rng, x.rows(), x.cols()))));
}

}  // namespace

TEST(Autograd, SimpleProductGradient) {
  reset_tape<double>();
  Td a = Td::parameter(Md::Constant(1, 1, 3.0));
  Td b = Td::parameter(Md::Constant(1, 1, 4.0));
  Td loss = sum(mul(a, b));
  backward(loss);
  EXPECT_DOUBLE_EQ(a.grad()(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(b.grad()(0, 0), 3.0);
}

TEST(Autograd, LeafGradientsAccumulate) {
  reset_tape<double>();
  Td a = Td::parameter(Md::Constant(1, 1, 2.0));
  backward(sum(scale(a, 3.0)));
  backward(sum(scale(a, 3.0)));
  EXPECT_DOUBLE_EQ(a.grad()(0, 0), 6.0);
  a.zero_grad();
  EXPECT_FALSE(a.has_grad());
}

TEST(Autograd, NoGraphErrors) {
  reset_tape<double>();
  Td c = Td::constant(Md::Ones(1, 1));
  EXPECT_THROW(backward(sum(c)), NoGraph);
  Td p = Td::parameter(Md::Ones(1, 1));
  Td out;
  {
    NoGradGuard<double> g;
    out = sum(scale(p, 2.0));
  }
  EXPECT_THROW(backward(out), NoGraph);
}

TEST(Autograd, SharedSubexpression) {
  reset_tape<double>();
  Td x = Td::parameter(Md::Constant(1, 1, 1.5));
  Td y = mul(x, x);
  backward(sum(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 6.0);
}

TEST(GradCheck, ElementwiseAndShapeOps) {
  std::mt19937_64 rng(1);
  Td a = Td::parameter(random_mat(rng, 4, 6));
  Td b = Td::parameter(random_mat(rng, 4, 6));
  Td r = Td::parameter(random_mat(rng, 1, 6));
  expect_gradients({a, b, r}, [&] {
    Td x = add_rowvec(sub(mul(a, b), scale(add(a, b), 0.3)), r);
    Td g = gather_rows(x, {3, 0, 0, 2});
    Td c = concat_rows<double>({g, x});
    return add(add(probe(add_scalar(c, 0.1)), mean(gelu(a))), probe(slice_cols(x, 1, 4), 7));
  });
}

TEST(GradCheck, MatmulAndLinear) {
  std::mt19937_64 rng(2);
  Td x = Td::parameter(random_mat(rng, 5, 3));
  Td w = Td::parameter(random_mat(rng, 3, 4));
  Td bias = Td::parameter(random_mat(rng, 1, 4));
  Td m = Td::parameter(random_mat(rng, 4, 2));
  expect_gradients({x, w, bias, m}, [&] { return probe(matmul(linear(x, w, bias), m)); });
}

TEST(GradCheck, LayerNorm) {
  std::mt19937_64 rng(3);
  Td x = Td::parameter(random_mat(rng, 4, 8, 2.0));
  Td g = Td::parameter(random_mat(rng, 1, 8));
  Td b = Td::parameter(random_mat(rng, 1, 8));
  expect_gradients({x, g, b}, [&] { return probe(layer_norm(x, g, b)); });
}

TEST(GradCheck, Film) {
  std::mt19937_64 rng(4);
  Td x = Td::parameter(random_mat(rng, 6, 4));
  Td g = Td::parameter(random_mat(rng, 2, 4));
  Td b = Td::parameter(random_mat(rng, 2, 4));
  expect_gradients({x, g, b}, [&] { return probe(film(x, g, b, 3)); });
}

TEST(GradCheck, GroupedAttention) {
  std::mt19937_64 rng(5);
  Td q = Td::parameter(random_mat(rng, 6, 8));
  Td k = Td::parameter(random_mat(rng, 10, 8));
  Td v = Td::parameter(random_mat(rng, 10, 8));
  expect_gradients({q, k, v}, [&] { return probe(attention(q, k, v, 2, 3, 5)); });
}

TEST(GradCheck, ParameterizedBlocks) {
  std::mt19937_64 rng(6);
  ParameterStore<double> ps(7);
  Linear<double> lin(ps, "lin", 8, 8);
  LayerNorm<double> ln(ps, "ln", 8);
  Mlp<double> mlp(ps, "mlp", 8, 16);
  MultiHeadAttention<double> attn(ps, "attn", 8, 2);
  Embedding<double> emb(ps, "emb", 5, 8);
  // Larger weights than the 0.02 init so gradients are not vanishingly small.
  for (auto& e : ps.entries()) e.tensor.mutable_value() = random_mat(rng, e.tensor.rows(), e.tensor.cols(), 0.5);
  Td x = Td::parameter(random_mat(rng, 4, 8));
  std::vector<Td> params{x};
  for (auto& e : ps.entries()) params.push_back(e.tensor);
  expect_gradients(params, [&] {
    Td h = add(x, emb({0, 1, 4, 1}));
    h = add(h, attn.self(ln(h), 2));
    h = add(h, mlp(lin(h)));
    return probe(h);
  });
}

TEST(Attention, PermutationEquivariantWithoutPositions) {
  std::mt19937_64 rng(8);
  ParameterStore<double> ps(9);
  MultiHeadAttention<double> attn(ps, "attn", 8, 4);
  NoGradGuard<double> guard;
  const Md x = random_mat(rng, 5, 8);
  const std::vector<Eigen::Index> perm{3, 0, 4, 1, 2};
  Md xp(5, 8);
  for (Eigen::Index i = 0; i < 5; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const Md y = attn.self(Td::constant(x), 5).value();
  const Md yp = attn.self(Td::constant(xp), 5).value();
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_LT((yp.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Attention, GroupsDoNotInteract) {
  std::mt19937_64 rng(10);
  NoGradGuard<double> guard;
  Md q = random_mat(rng, 4, 4), k = random_mat(rng, 6, 4), v = random_mat(rng, 6, 4);
  const Md y = attention(Td::constant(q), Td::constant(k), Td::constant(v), 1, 2, 3).value();
  k.bottomRows(3) = random_mat(rng, 3, 4);
  v.bottomRows(3) = random_mat(rng, 3, 4);
  const Md y2 = attention(Td::constant(q), Td::constant(k), Td::constant(v), 1, 2, 3).value();
  EXPECT_EQ(y.topRows(2), y2.topRows(2));
  EXPECT_NE(y.bottomRows(2), y2.bottomRows(2));
}

TEST(Film, IdentityAndScaleShift) {
  NoGradGuard<double> guard;
  Md x(2, 2);
  x << 1, 2, 3, 4;
  const Td xt = Td::constant(x);
  EXPECT_EQ(film(xt, Td::constant(Md::Ones(1, 2)), Td::constant(Md::Zero(1, 2)), 2).value(), x);
  Md expect(2, 2);
  expect << 2.5, 4.5, 6.5, 8.5;
  EXPECT_EQ(film(xt, Td::constant(Md::Constant(1, 2, 2.0)), Td::constant(Md::Constant(1, 2, 0.5)), 2).value(), expect);
  EXPECT_THROW(film(xt, Td::constant(Md::Ones(1, 3)), Td::constant(Md::Zero(1, 3)), 2), ShapeMismatch);
}

TEST(TimeEmbedding, ValuesAndDistinctness) {
  const auto e0 = sinusoidal_time_embedding(0.0, 8);
  for (std::size_t i = 0; i < 8; i += 2) {
    EXPECT_EQ(e0[i], 0.0);
    EXPECT_EQ(e0[i + 1], 1.0);
  }
  const auto e = sinusoidal_time_embedding(0.25, 4);
  EXPECT_NEAR(e[0], std::sin(250.0), 1e-12);
  EXPECT_NEAR(e[3], std::cos(250.0 / 100.0), 1e-12);
  for (int i = 0; i < 100; ++i) {
    const auto a = sinusoidal_time_embedding(i / 100.0, 32);
    const auto b = sinusoidal_time_embedding((i + 1) / 100.0, 32);
    double d = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
    EXPECT_GT(d, 1e-3);
  }
  EXPECT_THROW(sinusoidal_time_embedding(0.5, 7), ShapeMismatch);
}

TEST(Init, TruncatedNormalIsSeededAndBounded) {
  ParameterStore<double> a(42), b(42);
  const Md ma = a.normal("w", 50, 50).value();
  EXPECT_EQ(ma, b.normal("w", 50, 50).value());
  EXPECT_LE(ma.cwiseAbs().maxCoeff(), 0.04);
  EXPECT_NEAR(ma.mean(), 0.0, 0.002);
}

TEST(Schedule, WarmupThenCosine) {
  OptimizerConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.total_steps = 1000;
  EXPECT_EQ(cfg.warmup_steps(), 50u);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 0), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 25), 5e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 50), 1e-3);
  EXPECT_NEAR(learning_rate_at(cfg, 525), 5e-4, 1e-15);
  EXPECT_EQ(learning_rate_at(cfg, 1000), 0.0);
  double prev = 1.0;
  for (std::size_t s = 50; s <= 1000; ++s) {
    const double lr = learning_rate_at(cfg, s);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.warmup_fraction = 0.0;
  cfg.weight_decay = 0.0;
  cfg.total_steps = 1000000;
  ParameterStore<double> ps;
  Td w = ps.add("w", Md::Constant(1, 3, 1.0));
  reset_tape<double>();
  Md c(1, 3);
  c << 2.0, -0.5, 0.0;
  backward(sum(mul(w, Td::constant(c))));
  AdamW<double> opt(cfg);
  opt.step(ps, 1);
  EXPECT_NEAR(w.value()(0, 0), 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w.value()(0, 1), 1.0 + 0.01, 1e-9);
  EXPECT_EQ(w.value()(0, 2), 1.0);
}

TEST(AdamW, DecoupledWeightDecay) {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.warmup_fraction = 0.0;
  cfg.weight_decay = 0.5;
  cfg.total_steps = 1000000;
  ParameterStore<double> ps;
  Td w = ps.add("w", Md::Constant(1, 1, 2.0));
  AdamW<double> opt(cfg);
  opt.step(ps, 1);  // no gradient: only decay acts
  EXPECT_NEAR(w.value()(0, 0), 2.0 - 0.1 * 0.5 * 2.0, 1e-12);
}

TEST(AdamW, MinimizesQuadratic) {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.0;
  cfg.total_steps = 2000;
  ParameterStore<double> ps;
  Td w = ps.add("w", Md::Constant(1, 4, 3.0));
  AdamW<double> opt(cfg);
  const Td target = Td::constant(Md::Constant(1, 4, -1.0));
  for (std::size_t s = 1; s <= cfg.total_steps; ++s) {
    reset_tape<double>();
    ps.zero_grad();
    const Td d = sub(w, target);
    backward(sum(mul(d, d)));
    opt.step(ps, s);
  }
  EXPECT_LT((w.value().array() + 1.0).abs().maxCoeff(), 1e-3);
}

TEST(Determinism, SameSeedSameTrajectory) {
  auto run = [] {
    std::mt19937_64 rng(11);
    ParameterStore<float> ps(3);
    Mlp<float> mlp(ps, "mlp", 8, 16);
    OptimizerConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.total_steps = 20;
    AdamW<float> opt(cfg);
    std::normal_distribution<float> n;
    for (std::size_t s = 1; s <= 20; ++s) {
      Mat<float> x(4, 8);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
      reset_tape<float>();
      ps.zero_grad();
      Tensor<float> y = mlp(Tensor<float>::constant(x));
      backward(mean(mul(y, y)));
      opt.step(ps, s);
    }
    return ps.entries().back().tensor.value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripRestoresEverything) {
  const auto path = std::filesystem::temp_directory_path() / "egoman_test_ckpt.bin";
  ParameterStore<float> a(1);
  Mlp<float> ma(a, "mlp", 4, 8);
  OptimizerConfig cfg;
  AdamW<float> oa(cfg);
  reset_tape<float>();
  Tensor<float> y = ma(Tensor<float>::constant(Mat<float>::Ones(2, 4)));
  backward(mean(mul(y, y)));
  oa.step(a, 1);
  CheckpointMeta meta;
  meta.config = {{"hidden", 8}};
  meta.step = 1;
  meta.epoch = 0;
  save_checkpoint(path, a, &oa, meta);

  ParameterStore<float> b(2);
  Mlp<float> mb(b, "mlp", 4, 8);
  AdamW<float> ob(cfg);
  const CheckpointMeta back = load_checkpoint(path, b, &ob);
  EXPECT_EQ(back.step, 1u);
  EXPECT_EQ(back.config, meta.config);
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    EXPECT_EQ(a.entries()[i].tensor.value(), b.entries()[i].tensor.value());
    EXPECT_EQ(oa.first_moment()[i], ob.first_moment()[i]);
    EXPECT_EQ(oa.second_moment()[i], ob.second_moment()[i]);
  }
  EXPECT_EQ(read_checkpoint_header(path).at("scalar"), "float32");

  ParameterStore<float> c(3);
  Mlp<float> mc(c, "mlp", 4, 16);
  EXPECT_THROW(load_checkpoint(path, c, static_cast<AdamW<float>*>(nullptr)), ParseError);
  ParameterStore<double> d(3);
  EXPECT_THROW(load_checkpoint(path, d, static_cast<AdamW<double>*>(nullptr)), ParseError);
  std::filesystem::remove(path);
}
