#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "egoman/embedding.hpp"
#include "egoman/metrics.hpp"
#include "egoman/tokens.hpp"
#include "test_util.hpp"

using namespace egoman;
using egoman::testing::simple_sample;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "egoman_test_tokens";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Object resting at p until `onset`, then moving 5 cm per 0.1 s along x.
ObjectTrack step_track(double t0, double t1, double onset, const Vec3& p) {
  ObjectTrack t;
  for (int i = static_cast<int>(std::lround(t0 * 10)); i <= static_cast<int>(std::lround(t1 * 10)); ++i) {
    const double ts = i / 10.0;
    t.timestamps.push_back(ts);
    const double moved = ts >= onset - 1e-9 ? 0.05 * (1 + std::lround((ts - onset) * 10)) : 0.0;
    t.positions.push_back(p + Vec3(moved, 0, 0));
    t.visible.push_back(true);
  }
  return t;
}

}  // namespace

TEST(Embedding, DeterministicUnitNorm) {
  const auto a = intent_embedding("Pick up the red cup");
  const auto b = intent_embedding("pick up the red cup");
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.z.size(), kDefaultEmbeddingDim);
  double n = 0;
  for (double x : a.z) n += x * x;
  EXPECT_NEAR(n, 1.0, 1e-12);
  EXPECT_NE(intent_embedding("pick up the red cup", 64, 1), a);
  EXPECT_THROW(intent_embedding("  ,. "), std::invalid_argument);
}

TEST(Embedding, SharedWordsRaiseCosine) {
  const auto a = intent_embedding("pick up the red cup");
  const auto near = intent_embedding("pick up the blue cup");
  const auto far = intent_embedding("open a drawer slowly");
  EXPECT_GT(cosine(a.z, near.z), cosine(a.z, far.z));
  EXPECT_NEAR(cosine(a.z, a.z), 1.0, 1e-12);
}

TEST(Providers, OracleIsGroundTruthAndIdempotent) {
  const auto s = simple_sample();
  const auto b1 = oracle_provider(s);
  const auto b2 = oracle_provider(s);
  EXPECT_EQ(b1.waypoints, s.waypoints);
  EXPECT_EQ(b1.act, b2.act);
  EXPECT_EQ(b1.act, intent_embedding(s.action_phrase));
  EXPECT_TRUE(validate_bundle(b1).empty());
}

TEST(Providers, ZeroNoiseEqualsOracle) {
  const auto s = simple_sample();
  const auto b = noisy_provider(s, TokenNoise{}, 7);
  EXPECT_EQ(b.waypoints, oracle_provider(s).waypoints);
}

TEST(Providers, TinyNoiseConvergesToOracle) {
  const auto s = simple_sample();
  const auto b = noisy_provider(s, TokenNoise{1e-9, 1e-9, 1e-9}, 7);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(b.waypoints[k].timestamp, s.waypoints[k].timestamp, 1e-8);
    for (Hand h : kHands) {
      EXPECT_LT((b.waypoints[k].pose(h).position - s.waypoints[k].pose(h).position).norm(), 1e-8);
      EXPECT_LT(geodesic_degrees(b.waypoints[k].pose(h).rotation_matrix(), s.waypoints[k].pose(h).rotation_matrix()), 1e-6);
    }
  }
}

TEST(Providers, StartTimeStaysAtZeroAndOrderHolds) {
  const auto s = simple_sample();
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto b = noisy_provider(s, TokenNoise{0.05, 0.5, 20}, seed);
    EXPECT_EQ(b.waypoints[0].timestamp, 0.0);
    EXPECT_GE(b.waypoints[1].timestamp, 0.0);
    EXPECT_LE(b.waypoints[1].timestamp, b.waypoints[2].timestamp);
    EXPECT_TRUE(validate_bundle(b).empty());
  }
}

TEST(Providers, NoiseIsCoupledAcrossLevels) {
  // Same seed: the position offset scales linearly with sigma.
  const auto s = simple_sample();
  const auto a = noisy_provider(s, TokenNoise{0.01, 0, 0}, 3);
  const auto b = noisy_provider(s, TokenNoise{0.03, 0, 0}, 3);
  const Vec3 da = a.waypoints[1].right.position - s.waypoints[1].right.position;
  const Vec3 db = b.waypoints[1].right.position - s.waypoints[1].right.position;
  EXPECT_LT((db - 3.0 * da).norm(), 1e-12);
}

TEST(Providers, ContactDistanceMatchesChiMean) {
  // |sigma * N(0, I3)| has mean sigma * sqrt(8 / pi). Reference drawn by an
  // independent sampler, checked against the closed form and the provider.
  const auto s = simple_sample();
  const double sigma = 0.05;
  const double expected = sigma * std::sqrt(8.0 / std::numbers::pi);
  const int n = 4000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto b = noisy_provider(s, TokenNoise{sigma, 0, 0}, 1000 + static_cast<std::uint64_t>(i));
    sum += contact_distance(b.waypoints[1], s);
  }
  EXPECT_NEAR(sum / n, expected, 0.05 * expected);

  std::mt19937 rng(99);
  std::normal_distribution<double> g(0.0, sigma);
  double ref = 0.0;
  for (int i = 0; i < n; ++i) ref += std::sqrt(std::pow(g(rng), 2) + std::pow(g(rng), 2) + std::pow(g(rng), 2));
  EXPECT_NEAR(ref / n, expected, 0.05 * expected);
}

TEST(Providers, RotationNoiseMagnitude) {
  const auto s = simple_sample();
  const auto b = noisy_provider(s, TokenNoise{0, 0, 10}, 11);
  double total = 0;
  for (Hand h : kHands) {
    total += geodesic_degrees(b.waypoints[1].pose(h).rotation_matrix(), s.waypoints[1].pose(h).rotation_matrix());
  }
  EXPECT_GT(total, 0.0);
  EXPECT_LT(total, 2 * 60.0);
}

TEST(Providers, RejectsNegativeSigma) {
  EXPECT_THROW(noisy_provider(simple_sample(), TokenNoise{-1, 0, 0}, 0), std::invalid_argument);
}

TEST(BundleFile, RoundTrip) {
  const auto s = simple_sample();
  std::map<std::string, TrajectoryTokenBundle> in{{"a", noisy_provider(s, {0.01, 0.1, 5}, 1)}, {"b", oracle_provider(s)}};
  const auto path = temp_file("roundtrip.jsonl");
  write_bundles(path, in);
  const auto out = file_provider(path);
  ASSERT_EQ(out.bundles.size(), 2u);
  EXPECT_TRUE(out.rejected.empty());
  for (const auto& [id, b] : in) {
    const auto& r = out.bundles.at(id);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(r.waypoints[k].timestamp, b.waypoints[k].timestamp, 1e-8);
      EXPECT_LT((r.waypoints[k].right.position - b.waypoints[k].right.position).norm(), 1e-8);
    }
    ASSERT_EQ(r.act.z.size(), b.act.z.size());
  }
}

TEST(BundleFile, MalformedTimestampNamesLine) {
  const auto s = simple_sample();
  const auto path = temp_file("bad_ts.jsonl");
  {
    std::ofstream out(path);
    out << bundle_json("ok", oracle_provider(s)).dump() << "\n";
    auto j = bundle_json("bad", oracle_provider(s));
    j["waypoints"][1]["timestamp"] = "soon";
    out << j.dump() << "\n";
  }
  try {
    file_provider(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(BundleFile, ContactAfterEndIsSkipped) {
  const auto s = simple_sample();
  const auto path = temp_file("order.jsonl");
  {
    std::ofstream out(path);
    auto bad = oracle_provider(s);
    bad.waypoints[1].timestamp = 0.9;
    bad.waypoints[2].timestamp = 0.4;
    out << bundle_json("bad", bad).dump() << "\n";
    out << bundle_json("good", oracle_provider(s)).dump() << "\n";
    out << bundle_json("good", oracle_provider(s)).dump() << "\n";
  }
  const std::set<std::string> known{"good"};
  const auto f = file_provider(path, &known);
  EXPECT_EQ(f.bundles.size(), 1u);
  EXPECT_EQ(f.bundles.count("good"), 1u);
  EXPECT_EQ(f.rejected.size(), 2u);  // unknown id + duplicate
  const auto g = file_provider(path);
  EXPECT_EQ(g.bundles.count("bad"), 0u);
  ASSERT_GE(g.rejected.size(), 1u);
  EXPECT_NE(g.rejected[0].find("contact"), std::string::npos) << g.rejected[0];
}

TEST(Stages, OnsetAtThreeSeconds) {
  const auto t = step_track(0.0, 4.0, 3.0, Vec3(0.1, 0.1, 0.5));
  const auto a = infer_stages(t);
  EXPECT_NEAR(a.onset, 3.0, 1e-9);
  ASSERT_TRUE(a.has_approach);
  EXPECT_NEAR(a.labels.approach->start, 1.0, 1e-9);
  EXPECT_NEAR(a.labels.approach->end, 2.5, 1e-9);
  EXPECT_NEAR(a.labels.manipulation.start, 3.0, 1e-9);
  EXPECT_NEAR(a.labels.manipulation.end, 4.0, 1e-9);
}

TEST(Stages, StaticObjectHasNoOnset) {
  ObjectTrack t = step_track(0.0, 4.0, 99.0, Vec3(0.1, 0.1, 0.5));
  EXPECT_THROW(infer_stages(t), NoMotionOnset);
  // Sub-threshold jitter does not count as motion.
  for (std::size_t i = 0; i < t.size(); ++i) t.positions[i].x() += (i % 2 ? 0.004 : -0.004);
  EXPECT_THROW(infer_stages(t), NoMotionOnset);
}

TEST(Stages, FarObjectOmitsApproach) {
  const auto t = step_track(0.0, 4.0, 3.0, Vec3(0.0, 0.0, 2.0));
  const auto a = infer_stages(t);
  EXPECT_FALSE(a.has_approach);
  EXPECT_FALSE(a.labels.approach.has_value());
  StageRule strict;
  strict.require_approach = true;
  EXPECT_THROW(infer_stages(t, strict), NoValidApproach);
}

TEST(Stages, VisibilityGapClipsApproach) {
  auto t = step_track(0.0, 4.0, 3.0, Vec3(0.1, 0.1, 0.5));
  // Invisible from 1.8 to 2.0: the latest visible run inside the window
  // starts at 2.1.
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t.timestamps[i] > 1.75 && t.timestamps[i] < 2.05) t.visible[i] = false;
  }
  const auto a = infer_stages(t);
  ASSERT_TRUE(a.has_approach);
  EXPECT_NEAR(a.labels.approach->start, 2.1, 1e-9);
  EXPECT_NEAR(a.labels.approach->end, 2.5, 1e-9);
}

TEST(Stages, TranslationInvariantOnset) {
  const auto a = infer_stages(step_track(0.0, 4.0, 2.4, Vec3(0.1, 0.1, 0.5)));
  const auto b = infer_stages(step_track(0.0, 4.0, 2.4, Vec3(-0.3, 0.2, 0.4)));
  EXPECT_NEAR(a.onset, b.onset, 1e-12);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Stages, RejectsBadTracks) {
  ObjectTrack t = step_track(0.0, 1.0, 0.5, Vec3(0, 0, 0.5));
  t.timestamps[3] = t.timestamps[2];
  EXPECT_THROW(infer_stages(t), BadTimestamp);
  EXPECT_THROW(infer_stages(step_track(0.0, 0.1, 0.5, Vec3(0, 0, 0.5))), TooShort);
}

TEST(Embedding, SharedWordsAcrossHashSeeds) {
  // Without collisions the cosine is shared / sqrt(n_a * n_b) token counts:
  // 3/sqrt(12) for the cup pair and 1/3 for the drawer pair (only "the").
  double near = 0, far = 0;
  const int trials = 100;
  for (int s = 0; s < trials; ++s) {
    const auto a = intent_embedding("grab the cup", kDefaultEmbeddingDim, s);
    near += cosine(a.z, intent_embedding("grab the red cup", kDefaultEmbeddingDim, s).z) / trials;
    far += cosine(a.z, intent_embedding("open the drawer", kDefaultEmbeddingDim, s).z) / trials;
  }
  EXPECT_GT(near, far);
  EXPECT_NEAR(near, 3.0 / std::sqrt(12.0), 0.05);
  EXPECT_NEAR(far, 1.0 / 3.0, 0.05);
}
