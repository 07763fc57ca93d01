#pragma once

// Dataset files, manifest, scene splits, statistics, the synthetic
// reach-then-manipulate generator and template QA generation.
//
// Dataset files are JSON Lines: a schema header record, then one sample per
// line (see docs/dataset_schema.md).

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/embedding.hpp"
#include "egoman/error.hpp"
#include "egoman/geometry.hpp"
#include "egoman/hash.hpp"
#include "egoman/serialize.hpp"
#include "egoman/tokens.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

inline constexpr const char* kSampleSchema = "egoman.samples";
inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// File plumbing

namespace detail {

/// Exclusive advisory lock on `<path>.lock` for the lifetime of the object.
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) {
    const std::string lock = path.string() + ".lock";
    fd_ = ::open(lock.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw Error("cannot create lock file " + lock);
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw Error("cannot lock " + lock);
    }
    lock_path_ = lock;
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
    std::error_code ec;
    std::filesystem::remove(lock_path_, ec);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
  std::string lock_path_;
};

/// Writes `text` to `path` via a temporary file and rename, under the lock.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FileLock lock(path);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string file_hash(const std::filesystem::path& path) { return hex64(fnv1a64(detail::read_text(path))); }

// ---------------------------------------------------------------------------
// Samples

struct RecordViolation {
  std::size_t line = 0;
  std::string sample_id;
  std::vector<Violation> violations;
};

struct SampleFile {
  std::vector<TrajectorySample> samples;
  std::vector<RecordViolation> rejected;
};

inline void write_samples(const std::vector<TrajectorySample>& samples, const std::filesystem::path& path) {
  std::string text = nlohmann::json{{"schema", kSampleSchema}, {"version", kSchemaVersion}, {"count", samples.size()}}.dump();
  text += '\n';
  for (const auto& s : samples) {
    text += io::sample_json(s).dump();
    text += '\n';
  }
  detail::write_text_atomic(path, text);
}

/// Malformed JSON (including a truncated last line) raises ParseError with
/// the byte offset of the offending record. Records that parse but do not fit
/// the schema or fail validate_sample are reported and skipped.
inline SampleFile read_samples(const std::filesystem::path& path) {
  const std::string text = detail::read_text(path);
  SampleFile out;
  std::size_t pos = 0, line = 0;
  bool header = false;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string::npos ? text.size() : nl;
    const std::size_t start = pos;
    const std::string_view rec(text.data() + start, end - start);
    pos = end + 1;
    ++line;
    if (rec.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(rec);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": malformed record at byte offset " + std::to_string(start) + " (line " +
                       std::to_string(line) + "): " + e.what());
    }
    if (!header) {
      if (!j.is_object() || j.value("schema", "") != kSampleSchema) {
        throw ParseError(path.string() + ": missing schema header at byte offset 0");
      }
      if (j.value("version", -1) != kSchemaVersion) {
        throw ParseError(path.string() + ": unsupported schema version " + j.value("version", nlohmann::json()).dump());
      }
      header = true;
      continue;
    }
    RecordViolation bad;
    bad.line = line;
    try {
      TrajectorySample s = io::sample_from(j);
      bad.sample_id = s.sample_id;
      bad.violations = validate_sample(s);
      if (bad.violations.empty()) {
        out.samples.push_back(std::move(s));
        continue;
      }
    } catch (const ParseError& e) {
      if (j.is_object() && j.contains("sample_id") && j["sample_id"].is_string()) bad.sample_id = j["sample_id"];
      bad.violations.push_back({"record", "schema", e.what()});
    } catch (const nlohmann::json::exception& e) {
      bad.violations.push_back({"record", "schema", e.what()});
    }
    out.rejected.push_back(std::move(bad));
  }
  if (!header) throw ParseError(path.string() + ": empty file, expected a schema header");
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double pretrain = 0.64;
  double finetune = 0.31;
  double test = 0.05;

  void validate() const {
    if (pretrain < 0 || finetune < 0 || test < 0 || std::abs(pretrain + finetune + test - 1.0) > 1e-9) {
      throw std::invalid_argument("split fractions must be non-negative and sum to 1");
    }
  }
};

struct SceneSplits {
  std::vector<std::string> pretrain, finetune, test;

  const std::vector<std::string>& get(const std::string& name) const {
    if (name == "pretrain") return pretrain;
    if (name == "finetune") return finetune;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "'");
  }
  friend bool operator==(const SceneSplits&, const SceneSplits&) = default;
};

/// Shuffles the distinct scene ids with the seed and cuts them by
/// largest-remainder rounding of the fractions. Each list comes back sorted.
inline SceneSplits make_splits(std::vector<std::string> scene_ids, const SplitSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::sort(scene_ids.begin(), scene_ids.end());
  scene_ids.erase(std::unique(scene_ids.begin(), scene_ids.end()), scene_ids.end());
  const std::size_t n = scene_ids.size();
  if (n < 3) throw std::invalid_argument("make_splits needs at least 3 scenes");
  std::mt19937_64 rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(scene_ids[i], scene_ids[pick(rng)]);
  }
  const double f[3] = {spec.pretrain, spec.finetune, spec.test};
  std::size_t count[3];
  double rem[3];
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = f[i] * static_cast<double>(n);
    count[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(count[i]);
    used += count[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    ++count[best];
    rem[best] = -1.0;
    ++used;
  }
  SceneSplits out;
  auto it = scene_ids.begin();
  std::vector<std::string>* dst[3] = {&out.pretrain, &out.finetune, &out.test};
  for (int i = 0; i < 3; ++i) {
    dst[i]->assign(it, it + static_cast<std::ptrdiff_t>(count[i]));
    it += static_cast<std::ptrdiff_t>(count[i]);
    std::sort(dst[i]->begin(), dst[i]->end());
  }
  return out;
}

inline std::vector<TrajectorySample> select_scenes(const std::vector<TrajectorySample>& samples,
                                                   const std::vector<std::string>& scenes) {
  const std::set<std::string> keep(scenes.begin(), scenes.end());
  std::vector<TrajectorySample> out;
  for (const auto& s : samples) {
    if (keep.count(s.scene_id)) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct DatasetManifest {
  std::string name;
  std::size_t sample_count = 0;
  std::vector<std::string> scene_ids;
  Vec3 position_mean = Vec3::Zero();
  Vec3 position_std = Vec3::Ones();
  double fps = kFps;
  int schema_version = kSchemaVersion;
  SceneSplits splits;
  std::size_t context_dim = 0;
  std::size_t embedding_dim = kDefaultEmbeddingDim;
  std::uint64_t embedding_seed = kDefaultEmbeddingSeed;

  void validate() const {
    if (fps != kFps) throw ValidationError("manifest fps must be 10");
    for (int i = 0; i < 3; ++i) {
      if (!(position_std[i] > 0)) throw ValidationError("manifest position std must be positive");
    }
  }
};

inline constexpr double kMinPositionStd = 1e-3;

/// Normalization constants come from the finetune split only.
inline DatasetManifest compute_manifest(const std::string& name, const std::vector<TrajectorySample>& samples,
                                        const SceneSplits& splits) {
  DatasetManifest m;
  m.name = name;
  m.sample_count = samples.size();
  std::set<std::string> scenes;
  for (const auto& s : samples) scenes.insert(s.scene_id);
  m.scene_ids.assign(scenes.begin(), scenes.end());
  m.splits = splits;
  if (!samples.empty()) m.context_dim = samples.front().context_features.size();
  const std::set<std::string> fine(splits.finetune.begin(), splits.finetune.end());
  Vec3 sum = Vec3::Zero(), sq = Vec3::Zero();
  double n = 0;
  for (const auto& s : samples) {
    if (!fine.count(s.scene_id)) continue;
    for (const Trajectory* t : {&s.past, &s.future}) {
      for (const auto& st : *t) {
        for (Hand h : kHands) {
          if (!st.valid(h)) continue;
          sum += st.pose(h).position;
          sq += st.pose(h).position.cwiseProduct(st.pose(h).position);
          n += 1;
        }
      }
    }
  }
  if (n > 0) {
    m.position_mean = sum / n;
    const Vec3 var = (sq / n - m.position_mean.cwiseProduct(m.position_mean)).cwiseMax(0.0);
    m.position_std = var.cwiseSqrt().cwiseMax(kMinPositionStd);
  }
  return m;
}

inline nlohmann::ordered_json manifest_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["name"] = m.name;
  j["schema_version"] = m.schema_version;
  j["fps"] = m.fps;
  j["sample_count"] = m.sample_count;
  j["context_dim"] = m.context_dim;
  j["embedding"] = {{"dim", m.embedding_dim}, {"seed", m.embedding_seed}};
  j["position_mean"] = {io::round9(m.position_mean.x()), io::round9(m.position_mean.y()), io::round9(m.position_mean.z())};
  j["position_std"] = {io::round9(m.position_std.x()), io::round9(m.position_std.y()), io::round9(m.position_std.z())};
  j["scene_ids"] = m.scene_ids;
  j["splits"] = {{"pretrain", m.splits.pretrain}, {"finetune", m.splits.finetune}, {"test", m.splits.test}};
  return j;
}

inline DatasetManifest manifest_from(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.schema_version = j.at("schema_version").get<int>();
    m.fps = j.at("fps").get<double>();
    m.sample_count = j.at("sample_count").get<std::size_t>();
    m.context_dim = j.at("context_dim").get<std::size_t>();
    m.embedding_dim = j.at("embedding").at("dim").get<std::size_t>();
    m.embedding_seed = j.at("embedding").at("seed").get<std::uint64_t>();
    for (int i = 0; i < 3; ++i) {
      m.position_mean[i] = j.at("position_mean").at(static_cast<std::size_t>(i)).get<double>();
      m.position_std[i] = j.at("position_std").at(static_cast<std::size_t>(i)).get<double>();
    }
    m.scene_ids = j.at("scene_ids").get<std::vector<std::string>>();
    m.splits.pretrain = j.at("splits").at("pretrain").get<std::vector<std::string>>();
    m.splits.finetune = j.at("splits").at("finetune").get<std::vector<std::string>>();
    m.splits.test = j.at("splits").at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  if (m.schema_version != kSchemaVersion) throw ParseError("manifest: unsupported schema version");
  m.validate();
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  detail::write_text_atomic(path, manifest_json(m).dump(2) + "\n");
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  try {
    return manifest_from(nlohmann::json::parse(detail::read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Statistics

struct Histogram {
  double bin_width = 1.0;
  std::vector<std::size_t> counts;

  void add(double x) {
    const auto bin = static_cast<std::size_t>(std::max(0.0, std::floor(x / bin_width)));
    if (bin >= counts.size()) counts.resize(bin + 1, 0);
    ++counts[bin];
  }
  friend bool operator==(const Histogram&, const Histogram&) = default;
};

struct DatasetStats {
  std::size_t samples = 0;
  double frac_long = 0.0;      ///< future duration > 2 s
  double frac_far = 0.0;       ///< mean hand displacement > 0.2 m
  double frac_rotating = 0.0;  ///< mean hand rotation > 60 degrees
  Histogram duration{0.5, {}};
  Histogram displacement{0.05, {}};
  Histogram rotation{15.0, {}};
};

struct SampleMotion {
  double duration = 0.0;
  double displacement = 0.0;  ///< meters, averaged over hands
  double rotation = 0.0;      ///< degrees, averaged over hands
};

/// Net change from the last observed frame to the final future frame,
/// averaged over hands valid at both ends (0 when there are none).
inline SampleMotion sample_motion(const TrajectorySample& s) {
  SampleMotion m;
  if (s.future.empty()) return m;
  m.duration = s.future.back().timestamp;
  const BiHandState& a = s.past.empty() ? s.future.front() : s.past.back();
  const BiHandState& b = s.future.back();
  int n = 0;
  for (Hand h : kHands) {
    if (!a.valid(h) || !b.valid(h)) continue;
    m.displacement += (b.pose(h).position - a.pose(h).position).norm();
    m.rotation += geodesic_degrees(a.pose(h).rotation_matrix(), b.pose(h).rotation_matrix());
    ++n;
  }
  if (n > 0) {
    m.displacement /= n;
    m.rotation /= n;
  }
  return m;
}

inline DatasetStats dataset_stats(const std::vector<TrajectorySample>& samples) {
  if (samples.empty()) throw std::invalid_argument("dataset_stats needs at least one sample");
  DatasetStats st;
  std::size_t lng = 0, far = 0, rot = 0;
  for (const auto& s : samples) {
    const SampleMotion m = sample_motion(s);
    lng += m.duration > 2.0 ? 1 : 0;
    far += m.displacement > 0.2 ? 1 : 0;
    rot += m.rotation > 60.0 ? 1 : 0;
    st.duration.add(m.duration);
    st.displacement.add(m.displacement);
    st.rotation.add(m.rotation);
  }
  st.samples = samples.size();
  const auto n = static_cast<double>(samples.size());
  st.frac_long = static_cast<double>(lng) / n;
  st.frac_far = static_cast<double>(far) / n;
  st.frac_rotating = static_cast<double>(rot) / n;
  return st;
}

inline std::string stats_to_csv(const DatasetStats& st) {
  std::ostringstream o;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  o << "section,key,bin_start,bin_end,value\n";
  o << "summary,samples,,," << st.samples << "\n";
  o << "summary,frac_duration_gt_2s,,," << num(st.frac_long) << "\n";
  o << "summary,frac_displacement_gt_0.2m,,," << num(st.frac_far) << "\n";
  o << "summary,frac_rotation_gt_60deg,,," << num(st.frac_rotating) << "\n";
  const std::pair<const char*, const Histogram*> hs[] = {
      {"duration_s", &st.duration}, {"displacement_m", &st.displacement}, {"rotation_deg", &st.rotation}};
  for (const auto& [name, h] : hs) {
    for (std::size_t i = 0; i < h->counts.size(); ++i) {
      o << "histogram," << name << "," << num(static_cast<double>(i) * h->bin_width) << ","
        << num(static_cast<double>(i + 1) * h->bin_width) << "," << h->counts[i] << "\n";
    }
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthSpec {
  std::size_t scenes = 200;
  std::size_t goals_per_scene = 1;  ///< 1 or 2
  double jitter = 0.002;            ///< per-frame position noise, meters
  double min_goal_separation = 0.3; ///< meters, two-goal scenes only
  std::size_t past_frames = 10;     ///< including t = 0
  std::uint64_t seed = 0;

  void validate() const {
    if (goals_per_scene != 1 && goals_per_scene != 2) throw std::invalid_argument("goals_per_scene must be 1 or 2");
    if (scenes == 0) throw std::invalid_argument("scenes must be >= 1");
    if (past_frames < 1) throw std::invalid_argument("past_frames must be >= 1");
    if (!(jitter >= 0)) throw std::invalid_argument("jitter must be >= 0");
  }
};

struct SynthDataset {
  std::vector<TrajectorySample> samples;
  std::map<std::string, ObjectTrack> tracks;  ///< target-object track per sample id
};

/// Context features per object: image-normalized projection (u, v), depth,
/// and a one-hot color code.
inline constexpr std::size_t kSynthObjects = 3;
inline constexpr std::size_t kSynthColors = 4;
inline constexpr std::size_t kSynthFeaturesPerObject = 3 + kSynthColors;
inline constexpr std::size_t kSynthContextDim = kSynthObjects * kSynthFeaturesPerObject;

namespace detail {

struct SynthObject {
  std::size_t color = 0;
  std::size_t type = 0;
  Vec3 position = Vec3::Zero();
};

inline constexpr const char* kColors[kSynthColors] = {"red", "green", "blue", "yellow"};
inline constexpr const char* kTypes[4] = {"cup", "bottle", "bowl", "box"};
inline constexpr const char* kIntentVerb[4] = {"pick up", "pour from", "move", "open"};
inline constexpr const char* kActionVerb[4] = {"grasps and lifts", "grasps and tilts", "slides", "lifts the lid of"};

inline double smoothstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

inline Vec3 hermite(const Vec3& p0, const Vec3& m0, const Vec3& p1, const Vec3& m1, double s) {
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * p0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * p1 + (s3 - s2) * m1;
}

}  // namespace detail

/// Reach-then-manipulate scenes. Each scene has three objects and a shared
/// past; each goal yields one sample whose active hand approaches the target
/// along a cubic arc, grasps it at CONTACT and manipulates it until END.
/// Waypoints sit exactly at the stage boundaries on the 10 FPS grid.
inline SynthDataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  using detail::SynthObject;
  SynthDataset out;
  const CameraIntrinsics cam;
  for (std::size_t sc = 0; sc < spec.scenes; ++sc) {
    std::mt19937_64 rng(mix_seed(spec.seed, sc));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> n01(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

    // Objects: distinct (color, type) pairs on a table in front of the camera.
    std::vector<SynthObject> objs;
    std::set<std::pair<std::size_t, std::size_t>> used;
    while (objs.size() < kSynthObjects) {
      SynthObject o;
      o.color = static_cast<std::size_t>(u01(rng) * kSynthColors) % kSynthColors;
      o.type = static_cast<std::size_t>(u01(rng) * 4) % 4;
      if (!used.insert({o.color, o.type}).second) continue;
      objs.push_back(o);
    }
    for (int attempt = 0;; ++attempt) {
      for (auto& o : objs) o.position = Vec3(uni(-0.35, 0.35), uni(0.05, 0.35), uni(0.4, 0.75));
      if (spec.goals_per_scene == 1 ||
          (objs[0].position - objs[1].position).norm() >= spec.min_goal_separation) {
        break;
      }
      if (attempt > 1000) throw Error("generate_synthetic: cannot place goals far enough apart");
    }

    std::vector<double> context;
    for (const auto& o : objs) {
      const Vec2 uv = project(o.position, cam);
      context.push_back(uv.x() / cam.width);
      context.push_back(uv.y() / cam.height);
      context.push_back(o.position.z());
      for (std::size_t c = 0; c < kSynthColors; ++c) context.push_back(c == o.color ? 1.0 : 0.0);
    }

    // Shared past: both hands drift slowly near their rest poses.
    const Vec3 rest[2] = {Vec3(-0.2, 0.35, 0.35) + Vec3(uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-0.05, 0.05)),
                          Vec3(0.2, 0.35, 0.35) + Vec3(uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-0.05, 0.05))};
    const Vec3 drift[2] = {Vec3(uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-0.05, 0.05)),
                           Vec3(uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-0.05, 0.05))};
    const RotationMatrix rest_rot[2] = {RotationMatrix::rot_y(uni(-20, 20)) * RotationMatrix::rot_x(-30),
                                        RotationMatrix::rot_y(uni(-20, 20)) * RotationMatrix::rot_x(-30)};
    Trajectory past;
    for (std::size_t i = 0; i < spec.past_frames; ++i) {
      BiHandState st;
      st.timestamp = -static_cast<double>(spec.past_frames - 1 - i) / kFps;
      for (Hand h : kHands) {
        const auto hi = static_cast<std::size_t>(h);
        st.pose(h).position = rest[hi] + drift[hi] * st.timestamp;
        st.pose(h).rotation = matrix_to_rot6d(rest_rot[hi]);
      }
      past.push_back(st);
    }
    const std::vector<double> past_noise = [&] {
      std::vector<double> v;
      for (std::size_t i = 0; i < past.size() * 6; ++i) v.push_back(spec.jitter * n01(rng));
      return v;
    }();
    for (std::size_t i = 0; i < past.size(); ++i) {
      for (Hand h : kHands) {
        const auto hi = static_cast<std::size_t>(h);
        for (int c = 0; c < 3; ++c) past[i].pose(h).position[c] += past_noise[6 * i + 3 * hi + static_cast<std::size_t>(c)];
      }
    }

    char scene_buf[32];
    std::snprintf(scene_buf, sizeof scene_buf, "scene%05zu", sc);
    for (std::size_t g = 0; g < spec.goals_per_scene; ++g) {
      const SynthObject& target = objs[g];
      const Hand active = target.position.x() >= 0.0 ? Hand::Right : Hand::Left;
      const auto ai = static_cast<std::size_t>(active);
      const auto idle = static_cast<std::size_t>(1 - ai);
      const int contact_frame = 8 + static_cast<int>(u01(rng) * 7) % 7;  // 0.8 .. 1.4 s
      const int manip_frames = 4 + static_cast<int>(u01(rng) * 3) % 3;   // 0.4 .. 0.6 s
      const int end_frame = contact_frame + manip_frames;
      const double tc = contact_frame / kFps;
      const double dur = manip_frames / kFps;

      const Vec3 grasp_offset(0.0, -0.05, -0.08);
      const Vec3 pc = target.position + grasp_offset;
      const double yaw = rad2deg(std::atan2(target.position.x(), target.position.z()));
      const RotationMatrix grasp_rot = RotationMatrix::rot_y(yaw) * RotationMatrix::rot_x(-30);
      const Vec3 p0 = past.back().pose(active).position;
      const RotationMatrix r0 = rot6d_to_matrix(past.back().pose(active).rotation);
      const Vec3 m0 = drift[ai] * tc;
      const double lift = uni(0.03, 0.08);

      TrajectorySample s;
      s.scene_id = scene_buf;
      s.sample_id = std::string(scene_buf) + "_g" + std::to_string(g);
      const std::string object = std::string(detail::kColors[target.color]) + " " + detail::kTypes[target.type];
      s.intent = std::string(detail::kIntentVerb[target.type]) + " the " + object;
      s.action_phrase = std::string(active == Hand::Right ? "right" : "left") + " hand " +
                        detail::kActionVerb[target.type] + " the " + object;
      s.context_features = context;
      s.camera = cam;
      s.past = past;

      ObjectTrack track;
      for (int f = -30; f <= end_frame; ++f) {
        track.timestamps.push_back(f / kFps);
        track.positions.push_back(target.position);
        track.visible.push_back(true);
      }
      for (int f = 1; f <= end_frame; ++f) {
        const double t = f / kFps;
        BiHandState st;
        st.timestamp = t;
        // Idle hand keeps drifting, decaying over 0.5 s.
        st.pose(static_cast<Hand>(idle)).position = rest[idle] + drift[idle] * 0.5 * (1.0 - std::exp(-t / 0.5));
        st.pose(static_cast<Hand>(idle)).rotation = matrix_to_rot6d(rest_rot[idle]);
        Pose6DoF& p = st.pose(active);
        if (f <= contact_frame) {
          const double u = t / tc;
          p.position = detail::hermite(p0, m0, pc, Vec3::Zero(), u) - Vec3(0, lift * std::sin(std::numbers::pi * u), 0);
          p.rotation = matrix_to_rot6d(slerp(r0, grasp_rot, detail::smoothstep(u)));
        } else {
          const double u = detail::smoothstep((t - tc) / dur);
          Vec3 delta;
          RotationMatrix r = grasp_rot;
          switch (target.type) {
            case 0:  // lift
              delta = Vec3(0, -0.10 * u, 0);
              r = grasp_rot * RotationMatrix::rot_x(-15 * u);
              break;
            case 1:  // pour
              delta = Vec3(0, -0.06 * u, 0);
              r = grasp_rot * RotationMatrix::rot_z(70 * u);
              break;
            case 2:  // slide towards the camera
              delta = Vec3(0, 0, -0.12 * u);
              r = grasp_rot * RotationMatrix::rot_y(15 * std::sin(std::numbers::pi * u));
              break;
            default:  // open a lid
              delta = Vec3(0, -0.05 * u, 0.02 * u);
              r = grasp_rot * RotationMatrix::rot_x(40 * u);
              break;
          }
          p.position = pc + delta;
          p.rotation = matrix_to_rot6d(r);
          track.positions[static_cast<std::size_t>(f + 30)] = target.position + delta;
        }
        for (Hand h : kHands) {
          for (int c = 0; c < 3; ++c) st.pose(h).position[c] += spec.jitter * n01(rng);
        }
        s.future.push_back(st);
      }

      auto wp = [](WaypointKind k, const BiHandState& st) {
        Waypoint w;
        w.kind = k;
        w.timestamp = std::max(0.0, st.timestamp);
        w.left = st.left;
        w.right = st.right;
        return w;
      };
      s.waypoints[0] = wp(WaypointKind::Start, s.past.back());
      s.waypoints[1] = wp(WaypointKind::Contact, s.future[static_cast<std::size_t>(contact_frame - 1)]);
      s.waypoints[2] = wp(WaypointKind::End, s.future.back());
      s.stages.approach = Interval{0.0, tc};
      s.stages.manipulation = Interval{tc, end_frame / kFps};
      out.tracks[s.sample_id] = std::move(track);
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

inline nlohmann::json track_json(const std::string& id, const ObjectTrack& t) {
  nlohmann::json pos = nlohmann::json::array();
  for (const auto& p : t.positions) pos.push_back(io::vec(p.data(), 3));
  return {{"sample_id", id}, {"timestamps", io::vec(t.timestamps)}, {"positions", pos}, {"visible", t.visible}};
}

inline ObjectTrack track_from(const nlohmann::json& j) {
  ObjectTrack t;
  t.timestamps = io::get_vec(io::field(j, "timestamps"), "timestamps");
  for (const auto& p : io::field(j, "positions")) {
    const auto v = io::get_vec(p, "positions", 3);
    t.positions.emplace_back(v[0], v[1], v[2]);
  }
  for (const auto& v : io::field(j, "visible")) t.visible.push_back(io::get_bool(v, "visible"));
  return t;
}

// ---------------------------------------------------------------------------
// QA templates

enum class QACategory { Semantic, Spatial, Motion };

inline const char* to_string(QACategory c) {
  switch (c) {
    case QACategory::Semantic: return "semantic";
    case QACategory::Spatial: return "spatial";
    case QACategory::Motion: return "motion";
  }
  return "?";
}

struct QARecord {
  std::string sample_id;
  std::string family;
  QACategory category = QACategory::Semantic;
  std::string question;
  std::string answer;
  friend bool operator==(const QARecord&, const QARecord&) = default;
};

struct QAConfig {
  double motion_fraction = 0.358;  ///< share of questions given the past-motion prefix
  double past_seconds = 0.5;
};

namespace detail {

inline std::string fmt_vec(const Vec3& p) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "(%.2f, %.2f, %.2f)", p.x(), p.y(), p.z());
  return buf;
}

inline std::string fmt_time(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f s", t);
  return buf;
}

/// Hand with the larger displacement over the future, or both when similar.
inline std::string active_hands(const TrajectorySample& s) {
  if (s.future.empty() || s.past.empty()) return "both hands";
  double d[2] = {0, 0};
  for (Hand h : kHands) {
    d[static_cast<std::size_t>(h)] = (s.future.back().pose(h).position - s.past.back().pose(h).position).norm();
  }
  if (d[0] > 2 * d[1]) return "left hand";
  if (d[1] > 2 * d[0]) return "right hand";
  return "both hands";
}

inline std::string object_phrase(const std::string& text) {
  const auto p = text.rfind(" the ");
  return p == std::string::npos ? text : text.substr(p + 1);
}

}  // namespace detail

/// Template questions with answers taken verbatim from the sample. A
/// deterministic (hash-selected) subset is turned into motion questions by
/// prefixing the recent wrist positions.
inline std::vector<QARecord> generate_qa(const TrajectorySample& s, const QAConfig& cfg = {}) {
  using detail::fmt_time;
  using detail::fmt_vec;
  const std::string hands = detail::active_hands(s);
  const Hand main = hands == "left hand" ? Hand::Left : Hand::Right;
  const Waypoint& c = s.waypoint(WaypointKind::Contact);
  const Waypoint& e = s.waypoint(WaypointKind::End);
  const Waypoint& st = s.waypoint(WaypointKind::Start);
  std::vector<QARecord> out;
  auto add = [&](const char* family, QACategory cat, std::string q, std::string a) {
    out.push_back({s.sample_id, family, cat, std::move(q), std::move(a)});
  };
  const auto S = QACategory::Semantic;
  const auto P = QACategory::Spatial;
  add("intention_goal", S, "What is the current intention goal?", s.intent);
  add("hand", S, "Which hand will be used to " + s.intent + "?", hands);
  add("action", S, "What will be the next action to " + s.intent + "?", s.action_phrase);
  add("object", S, "Which object will be interacted with next?", detail::object_phrase(s.intent));
  add("atomic_motion", S, "Describe the next atomic motion.", s.action_phrase);
  add("why", S, "Why will the " + hands + " move next?", "to " + s.intent);
  add("trajectory", P, "How will the wrist move to " + s.intent + "?",
      "from " + fmt_vec(st.pose(main).position) + " to " + fmt_vec(c.pose(main).position) + " then " +
          fmt_vec(e.pose(main).position));
  add("start_time", P, "When will the manipulation start?", fmt_time(c.timestamp));
  add("end_time", P, "When will the manipulation end?", fmt_time(e.timestamp));
  add("start_location", P, "Where will the manipulation start?", fmt_vec(c.pose(main).position));
  add("end_location", P, "Where will the manipulation end?", fmt_vec(e.pose(main).position));
  if (s.stages.approach) {
    add("approach_end_time", P, "When does the approach end?", fmt_time(s.stages.approach->end));
    add("approach_start_location", P, "Where does the approach start?", fmt_vec(st.pose(main).position));
    add("approach_end_location", P, "Where does the approach end?", fmt_vec(c.pose(main).position));
    add("approach_trajectory", P, "What path does the approach follow?",
        "from " + fmt_vec(st.pose(main).position) + " to " + fmt_vec(c.pose(main).position));
  }

  std::string prefix = "Past wrist positions";
  const auto frames = static_cast<std::size_t>(std::lround(cfg.past_seconds * kFps));
  const std::size_t from = s.past.size() > frames ? s.past.size() - frames : 0;
  for (std::size_t i = from; i < s.past.size(); ++i) {
    prefix += (i == from ? ": " : ", ") + fmt_time(s.past[i].timestamp) + " " + fmt_vec(s.past[i].pose(main).position);
  }
  prefix += ". ";
  for (auto& r : out) {
    const std::uint64_t h = fnv1a64(s.sample_id + "/" + r.family);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    if (u < cfg.motion_fraction) {
      r.category = QACategory::Motion;
      r.question = prefix + r.question;
    }
  }
  return out;
}

inline nlohmann::json qa_json(const QARecord& r) {
  return {{"sample_id", r.sample_id}, {"family", r.family}, {"category", to_string(r.category)},
          {"question", r.question}, {"answer", r.answer}};
}

struct QAProportions {
  double semantic = 0.0, spatial = 0.0, motion = 0.0;
};

inline QAProportions qa_proportions(const std::vector<QARecord>& qa) {
  QAProportions p;
  if (qa.empty()) return p;
  for (const auto& r : qa) {
    (r.category == QACategory::Semantic ? p.semantic : r.category == QACategory::Spatial ? p.spatial : p.motion) += 1;
  }
  const auto n = static_cast<double>(qa.size());
  p.semantic /= n;
  p.spatial /= n;
  p.motion /= n;
  return p;
}

// ---------------------------------------------------------------------------
// Predictions

struct PredictionRecord {
  std::string sample_id;
  std::vector<Trajectory> samples;  ///< full-horizon trajectories, one per draw
  std::size_t gt_steps = 0;         ///< ground-truth length used for evaluation
};

inline nlohmann::json prediction_json(const PredictionRecord& p) {
  nlohmann::json trajs = nlohmann::json::array();
  for (const auto& t : p.samples) trajs.push_back(io::trajectory_json(t));
  return {{"sample_id", p.sample_id}, {"gt_steps", p.gt_steps}, {"samples", trajs}};
}

inline void write_predictions(const std::vector<PredictionRecord>& preds, const std::filesystem::path& path) {
  std::string text;
  for (const auto& p : preds) text += prediction_json(p).dump() + "\n";
  detail::write_text_atomic(path, text);
}

inline std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  const std::string text = detail::read_text(path);
  std::vector<PredictionRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PredictionRecord p;
      p.sample_id = io::get_str(io::field(j, "sample_id"), "sample_id");
      p.gt_steps = static_cast<std::size_t>(io::get_num(io::field(j, "gt_steps"), "gt_steps"));
      for (const auto& t : io::field(j, "samples")) p.samples.push_back(io::trajectory_from(t, "samples"));
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace egoman
