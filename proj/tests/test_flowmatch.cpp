#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "egoman/flowmatch.hpp"
#include "test_util.hpp"

using namespace egoman;
using egoman::testing::simple_sample;
using Md = nn::Mat<double>;

namespace {

MotionExpertConfig tiny_config() {
  MotionExpertConfig c;
  c.hidden_dim = 8;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.pre_dec_layers = 1;
  c.heads = 2;
  c.time_embed_dim = 4;
  c.past_len = 2;
  c.max_future = 3;
  c.euler_steps = 4;
  c.mlp_ratio = 2;
  c.intent_dim = 4;
  c.visual_dim = 3;
  return c;
}

TrajectoryTokenBundle tiny_bundle(const TrajectorySample& s) {
  TrajectoryTokenBundle b = oracle_provider(s, {4, 1});
  return b;
}

TrajectorySample tiny_sample() {
  TrajectorySample s = simple_sample(3);
  s.context_features = {0.1, -0.2, 0.3};
  s.waypoint(WaypointKind::Contact).timestamp = 0.2;
  s.waypoint(WaypointKind::End).timestamp = 0.3;
  s.waypoint(WaypointKind::Contact).right = s.future[1].right;
  s.waypoint(WaypointKind::End).right = s.future[2].right;
  return s;
}

}  // namespace

TEST(PositionId, OffsetByPastLength) {
  MotionExpertConfig c = MotionExpertConfig::desk();
  EXPECT_EQ(waypoint_position_id(1.0, c), 15);
  EXPECT_EQ(waypoint_position_id(0.1, c), 6);
  EXPECT_EQ(waypoint_position_id(0.0, c), 6);  // START never collides with the past
  bool clamped = false;
  EXPECT_EQ(waypoint_position_id(2.6, c, &clamped), 25);
  EXPECT_TRUE(clamped);
  EXPECT_THROW(waypoint_position_id(3.05, c), BadTimestamp);
  EXPECT_THROW(waypoint_position_id(-0.1, c), BadTimestamp);
}

TEST(Euler, ConstantFieldIsExact) {
  Md x0(2, 3), c(2, 3);
  x0 << 1, 2, 3, 4, 5, 6;
  c << 0.5, -1, 2, 0, 0.25, -3;
  for (std::size_t n : {1u, 7u, 150u}) {
    const Md x = euler_integrate(x0, n, [&](const Md&, double) { return c; });
    EXPECT_LT((x - (x0 + c)).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(euler_integrate(x0, 0, [&](const Md&, double) { return c; }), std::invalid_argument);
}

TEST(Euler, StraightLineFieldRecoversEndpoint) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Md x0(20, 18), x1(20, 18);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    x0.data()[i] = n(rng);
    x1.data()[i] = n(rng);
  }
  for (std::size_t steps : {1u, 10u, 150u}) {
    // Along the interpolant x_t the conditional field is (x1 - x_t) / (1 - t).
    const Md x = euler_integrate(x0, steps, [&](const Md& xt, double t) -> Md { return (x1 - xt) / (1.0 - t); });
    EXPECT_LT((x - x1).cwiseAbs().maxCoeff(), 1e-6);
    const Md y = euler_integrate(x0, steps, [&](const Md&, double) -> Md { return x1 - x0; });
    EXPECT_LT((y - x1).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Encoder, InputLayout) {
  const TrajectorySample s = simple_sample();
  MotionExpertConfig c = MotionExpertConfig::desk();
  c.visual_dim = 8;
  const EncoderInput in = build_encoder_input(s, oracle_provider(s), c, {});
  ASSERT_EQ(in.size(), 5u + 3u + 2u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(in[i].position, static_cast<Eigen::Index>(i + 1));
  EXPECT_EQ(in[6].type, TokenType::WaypointContact);
  EXPECT_EQ(in[6].position, 5 + 5);  // CONTACT at 0.5 s
  EXPECT_EQ(in[8].type, TokenType::Intent);
  EXPECT_EQ(in[9].position, 0);
  c.use_waypoints = false;
  EXPECT_EQ(build_encoder_input(s, oracle_provider(s), c, {}).size(), 7u);
}

TEST(Encoder, DeterministicAndTolerantOfEmptyContext) {
  MotionExpert<double> m(tiny_config(), 3);
  TrajectorySample s = tiny_sample();
  TrajectoryTokenBundle b = tiny_bundle(s);
  nn::NoGradGuard<double> g;
  const Md a = m.encode(s, b).tokens.value();
  EXPECT_EQ(a, m.encode(s, b).tokens.value());
  b.act.z.clear();
  s.context_features.clear();
  EXPECT_NO_THROW(m.encode(s, b));
  s.context_features = {1.0};
  EXPECT_THROW(m.encode(s, b), ShapeMismatch);
}

TEST(Encoder, ContextTokenOrderDoesNotMatter) {
  MotionExpert<double> m(tiny_config(), 4);
  const TrajectorySample s = tiny_sample();
  EncoderInput in = m.input_for(s, tiny_bundle(s));
  in.push_back({TokenType::Visual, {0.7, 0.1, -0.9}, 0});
  EncoderInput swapped = in;
  std::swap(swapped[swapped.size() - 1], swapped[swapped.size() - 2]);
  nn::NoGradGuard<double> g;
  const auto ma = m.encode(std::span<const EncoderInput>(&in, 1));
  const auto mb = m.encode(std::span<const EncoderInput>(&swapped, 1));
  const Md x = Md::Random(3, 18);
  const double t[1] = {0.4};
  const Md va = m.velocity(ma, nn::Tensor<double>::constant(x), t).value();
  const Md vb = m.velocity(mb, nn::Tensor<double>::constant(x), t).value();
  EXPECT_LT((va - vb).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Velocity, ShapeAndDeterminism) {
  MotionExpertConfig c = MotionExpertConfig::desk();
  c.visual_dim = 8;
  MotionExpert<float> m(c, 5);
  const TrajectorySample s = simple_sample();
  nn::NoGradGuard<float> g;
  const auto mem = m.encode(s, oracle_provider(s));
  const nn::Mat<float> x = nn::Mat<float>::Random(20, 18);
  const double t[1] = {0.3};
  const auto v = m.velocity(mem, nn::Tensor<float>::constant(x), t).value();
  EXPECT_EQ(v.rows(), 20);
  EXPECT_EQ(v.cols(), 18);
  EXPECT_EQ(v, m.velocity(mem, nn::Tensor<float>::constant(x), t).value());
  const double t2[2] = {0.3, 0.4};
  EXPECT_THROW(m.velocity(mem, nn::Tensor<float>::constant(x), t2), ShapeMismatch);
}

TEST(Velocity, GradientMatchesFiniteDifferences) {
  MotionExpert<double> m(tiny_config(), 6);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 0.3);
  // Non-trivial FiLM and output weights so every path carries gradient.
  for (auto& e : m.parameters().entries()) {
    for (Eigen::Index i = 0; i < e.tensor.value().size(); ++i) e.tensor.mutable_value().data()[i] += n(rng);
  }
  const TrajectorySample s = tiny_sample();
  const TrajectoryTokenBundle b = tiny_bundle(s);
  const Md x = Md::Random(3, 18);
  const double t[1] = {0.37};
  auto loss = [&] {
    const auto mem = m.encode(s, b);
    const auto v = m.velocity(mem, nn::Tensor<double>::constant(x), t);
    return nn::sum(nn::mul(v, v));
  };
  nn::reset_tape<double>();
  m.parameters().zero_grad();
  nn::backward(loss());
  std::size_t checked = 0;
  nn::NoGradGuard<double> g;
  for (auto& e : m.parameters().entries()) {
    Md& w = e.tensor.mutable_value();
    const Md grad = e.tensor.has_grad() ? e.tensor.grad() : Md::Zero(w.rows(), w.cols());
    // A strided subset keeps the check fast while touching every tensor.
    for (Eigen::Index i = 0; i < w.size(); i += 1 + w.size() / 12) {
      // Five-point stencil: key biases have exactly zero gradient (softmax
      // shift invariance), so roundoff in the difference must stay small.
      const double keep = w.data()[i];
      const double h = 1e-4;
      auto at = [&](double dx) {
        w.data()[i] = keep + dx;
        return loss().item();
      };
      const double fd = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      w.data()[i] = keep;
      const double a = grad.data()[i];
      EXPECT_LT(std::abs(fd - a) / std::max({1e-4, std::abs(fd), std::abs(a)}), 1e-4) << e.name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 100u);
}

TEST(Sampling, SeedsAndBestOfK) {
  MotionExpertConfig c = tiny_config();
  MotionExpert<double> m(c, 8);
  const TrajectorySample s = tiny_sample();
  const TrajectoryTokenBundle b = tiny_bundle(s);
  const auto k1 = m.predict_best_of_k(s, b, 1, 42);
  nn::NoGradGuard<double> g;
  const auto mem = m.encode(s, b);
  const auto direct = m.sample(mem, mix_seed(42, 0), &s.past.back());
  EXPECT_EQ(k1.front().trajectory, direct.trajectory);
  const auto k5 = m.predict_best_of_k(s, b, 5, 42);
  EXPECT_EQ(k5.front().trajectory, direct.trajectory);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_NE(k5[i].trajectory, k5[0].trajectory);
  const auto again = m.predict_best_of_k(s, b, 5, 42);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(again[i].trajectory, k5[i].trajectory);
  ASSERT_EQ(direct.trajectory.size(), 3u);
  EXPECT_NEAR(direct.trajectory[2].timestamp, 0.3, 1e-12);
  EXPECT_THROW(m.predict_best_of_k(s, b, 0, 1), std::invalid_argument);
}

TEST(Sampling, DegenerateRotationsFallBack) {
  MotionExpert<double> m(tiny_config(), 9);
  Md flat = Md::Zero(3, 18);
  for (Eigen::Index i = 1; i < 3; ++i) {
    flat(i, 6) = 1;   // left a1
    flat(i, 10) = 1;  // left a2
    flat(i, 12) = 1;
    flat(i, 16) = 1;
  }
  BiHandState last;
  last.left.rotation = matrix_to_rot6d(RotationMatrix::rot_x(20));
  const SampleOutput out = m.decode(flat, &last);
  EXPECT_EQ(out.degenerate_rotations, 2u);  // row 0: both hands all-zero
  EXPECT_EQ(out.trajectory[0].left.rotation, last.left.rotation);
}

TEST(Training, DeterministicLossCurve) {
  auto run = [] {
    MotionExpertConfig c = MotionExpertConfig::desk();
    c.visual_dim = 8;
    MotionExpert<float> m(c, 10);
    nn::OptimizerConfig oc;
    oc.learning_rate = 1e-3;
    oc.total_steps = 10;
    FlowTrainer<float> tr(m, oc, 11);
    const TrajectorySample s = simple_sample();
    const TrajectoryTokenBundle b = oracle_provider(s);
    const TrajectorySample* ss[1] = {&s};
    const TrajectoryTokenBundle* bb[1] = {&b};
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(tr.train_step(ss, bb, LossWeights{}).loss);
    return losses;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_TRUE(std::isfinite(a.front()));
  EXPECT_GT(a.front(), 0.0);
}

TEST(Training, OverfitsSingleSample) {
  MotionExpertConfig c = MotionExpertConfig::desk();
  c.visual_dim = 8;
  MotionExpert<float> m(c, 12);
  nn::OptimizerConfig oc;
  oc.learning_rate = 2e-3;
  oc.total_steps = 500;
  FlowTrainer<float> tr(m, oc, 13);
  const TrajectorySample s = simple_sample(20);
  const TrajectoryTokenBundle b = oracle_provider(s);
  // The same sample repeated across the batch: one memorizable target.
  const std::vector<const TrajectorySample*> ss(8, &s);
  const std::vector<const TrajectoryTokenBundle*> bb(8, &b);
  std::vector<double> losses;
  for (int i = 0; i < 500; ++i) losses.push_back(tr.train_step(ss, bb, LossWeights{}).loss);
  auto window = [&](std::size_t from) {
    double acc = 0;
    for (std::size_t i = from; i < from + 50; ++i) acc += losses[i];
    return acc / 50;
  };
  EXPECT_LT(window(450), window(0) / 10.0) << window(0) << " -> " << window(450);
  for (std::size_t w = 50; w < 500; w += 50) EXPECT_LT(window(w), window(w - 50) * 1.05) << "window at " << w;
}
