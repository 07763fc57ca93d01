#include <gtest/gtest.h>

#include <random>

#include "egoman/trajectory.hpp"
#include "test_util.hpp"

using namespace egoman;

TEST(Flatten, IdentityAtOrigin) {
  const FlatState f = flatten_state(BiHandState{});
  for (double x : f.pos) EXPECT_EQ(x, 0.0);
  const std::array<double, 12> expected{1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0};
  EXPECT_EQ(f.rot, expected);
}

TEST(Flatten, LeftThenRightOrdering) {
  BiHandState s;
  s.left.position = Vec3(1, 2, 3);
  s.right.position = Vec3(4, 5, 6);
  s.right.rotation = Rotation6D{{7, 8, 9, 10, 11, 12}};
  const FlatState f = flatten_state(s);
  const std::array<double, 6> pos{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(f.pos, pos);
  EXPECT_EQ(f.rot[6], 7);
  EXPECT_EQ(f.rot[11], 12);
}

TEST(Flatten, RoundTripIsExact) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    BiHandState s = egoman::testing::random_state(rng, 0.1 * i);
    s.left_valid = i % 2 == 0;
    s.right_valid = i % 3 == 0;
    EXPECT_EQ(unflatten_state(flatten_state(s), s.timestamp, s.left_valid, s.right_valid), s);
  }
}

TEST(Resample, GridInputIsUnchanged) {
  std::mt19937_64 rng(12);
  Trajectory t;
  for (int i = 0; i < 8; ++i) t.push_back(egoman::testing::random_state(rng, i / kFps));
  const Trajectory r = resample_10fps(t);
  ASSERT_EQ(r.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(r[i], t[i]);
  // Idempotent.
  const Trajectory rr = resample_10fps(r);
  ASSERT_EQ(rr.size(), r.size());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(rr[i], r[i]);
}

TEST(Resample, LinearPositionMidpoint) {
  Trajectory t(2);
  t[0].timestamp = 0.0;
  t[1].timestamp = 0.2;
  t[1].left.position = Vec3(0.2, 0, 0);
  const Trajectory r = resample_10fps(t);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_NEAR(r[1].timestamp, 0.1, 1e-15);
  EXPECT_NEAR(r[1].left.position.x(), 0.1, 1e-12);
  EXPECT_EQ(r[0], t[0]);
  EXPECT_EQ(r[2], t[1]);
}

TEST(Resample, GeodesicRotationMidpoint) {
  Trajectory t(2);
  t[0].timestamp = 0.0;
  t[1].timestamp = 0.2;
  t[1].right.rotation = matrix_to_rot6d(RotationMatrix::rot_z(90));
  const Trajectory r = resample_10fps(t);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_NEAR(geodesic_degrees(r[1].right.rotation_matrix(), RotationMatrix::rot_z(45)), 0.0, 1e-6);
  const Mat3 diff = r[1].right.rotation_matrix().matrix() - RotationMatrix::rot_z(45).matrix();
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Resample, OffGridInputLandsOnGrid) {
  Trajectory t(3);
  t[0].timestamp = 0.03;
  t[1].timestamp = 0.17;
  t[2].timestamp = 0.41;
  t[2].left.position = Vec3(0.38, 0, 0);
  t[1].left_valid = false;
  const Trajectory r = resample_10fps(t);
  ASSERT_EQ(r.size(), 4u);  // 0.1, 0.2, 0.3, 0.4
  EXPECT_NEAR(r.front().timestamp, 0.1, 1e-15);
  EXPECT_NEAR(r.back().timestamp, 0.4, 1e-15);
  EXPECT_FALSE(r[0].left_valid);
  EXPECT_TRUE(r[0].right_valid);
  EXPECT_TRUE(r[2].right_valid);
  // Left position is linear in time on the last segment: 0.38 * (0.3-0.17)/(0.41-0.17).
  EXPECT_NEAR(r[2].left.position.x(), 0.38 * (0.3 - 0.17) / (0.41 - 0.17), 1e-12);
}

TEST(Resample, TooShortThrows) {
  Trajectory t(2);
  t[1].timestamp = 0.15;
  EXPECT_THROW(resample_10fps(t), TooShort);
  EXPECT_THROW(resample_10fps(Trajectory(1)), TooShort);
}

TEST(Validate, WellFormedSampleHasNoViolations) {
  EXPECT_TRUE(validate_sample(egoman::testing::simple_sample()).empty());
}

TEST(Validate, ContactAfterEndIsOneViolation) {
  TrajectorySample s = egoman::testing::simple_sample();
  s.waypoints[1].timestamp = s.waypoints[2].timestamp + 0.3;
  const auto v = validate_sample(s);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].rule, "contact_before_end");
}

TEST(Validate, WrongPastSpacingIsOneViolation) {
  TrajectorySample s = egoman::testing::simple_sample();
  for (std::size_t i = 0; i < s.past.size(); ++i) {
    s.past[i].timestamp = -0.15 * static_cast<double>(s.past.size() - 1 - i);
  }
  const auto v = validate_sample(s);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].rule, "fps_10");
  EXPECT_EQ(v[0].field, "past");
}

TEST(Validate, OtherRules) {
  TrajectorySample s = egoman::testing::simple_sample();
  s.waypoints[0].timestamp = 0.2;
  s.stages.approach = Interval{0.0, 0.9};
  s.future.front().timestamp = 0.2;
  s.camera.fx = -1;
  const auto v = validate_sample(s);
  std::vector<std::string> rules;
  for (const auto& x : v) rules.push_back(x.rule);
  EXPECT_NE(std::find(rules.begin(), rules.end(), "start_at_zero"), rules.end());
  EXPECT_NE(std::find(rules.begin(), rules.end(), "approach_before_manipulation"), rules.end());
  EXPECT_NE(std::find(rules.begin(), rules.end(), "valid_intrinsics"), rules.end());
  EXPECT_NE(std::find(rules.begin(), rules.end(), "starts_at_0.1"), rules.end());
}
