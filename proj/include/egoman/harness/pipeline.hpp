#pragma once

// The subcommands as library calls: make-synth, annotate-stages, train,
// sample, eval, stats and report. The CLI in tools/ is a thin wrapper; the
// acceptance suite drives the same functions in-process.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/dataio.hpp"
#include "egoman/flowmatch.hpp"
#include "egoman/harness/config.hpp"
#include "egoman/metrics.hpp"
#include "egoman/nn/checkpoint.hpp"
#include "egoman/tokens.hpp"

namespace egoman::harness {

namespace fs = std::filesystem;
using Scalar = float;

inline const char* version() {
#ifdef EGOMAN_VERSION
  return EGOMAN_VERSION;
#else
  return "unknown";
#endif
}

using LogFn = std::function<void(const std::string&)>;

inline LogFn stderr_log() {
  return [](const std::string& m) { std::fprintf(stderr, "[egoman] %s\n", m.c_str()); };
}

inline LogFn quiet_log() {
  return [](const std::string&) {};
}

/// Default output root: $EGOMAN_OUT, else ./egoman_out.
inline fs::path out_root() {
  const char* env = std::getenv("EGOMAN_OUT");
  return (env != nullptr && *env != '\0') ? fs::path(env) : fs::path("egoman_out");
}

namespace files {
inline constexpr const char* kSamples = "samples.jsonl";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kStats = "stats.csv";
inline constexpr const char* kTracks = "tracks.jsonl";
inline constexpr const char* kQa = "qa.jsonl";
inline constexpr const char* kStages = "stages.jsonl";
inline constexpr const char* kConfig = "config.yaml";
inline constexpr const char* kRunInfo = "run.json";
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kLossLog = "loss.jsonl";
inline constexpr const char* kTrainSummary = "train_summary.json";
inline constexpr const char* kPredictions = "predictions.jsonl";
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kMetricsJson = "metrics.json";
inline constexpr const char* kBaselineCsv = "baseline_metrics.csv";
inline constexpr const char* kBaselineJson = "baseline_metrics.json";
inline constexpr const char* kWaypointsCsv = "waypoints.csv";
inline constexpr const char* kPerSample = "per_sample.jsonl";
inline constexpr const char* kEvalSummary = "eval_summary.json";
}  // namespace files

inline void write_text(const fs::path& path, const std::string& text) { egoman::detail::write_text_atomic(path, text); }

/// Resolved config, code version and dataset manifest hash.
inline void write_run_info(const fs::path& dir, const RunConfig& cfg, const std::string& manifest_hash,
                           const std::string& command) {
  write_text(dir / files::kConfig, to_yaml(cfg));
  nlohmann::ordered_json j;
  j["command"] = command;
  j["version"] = version();
  j["dataset"] = cfg.data.dir;
  j["manifest_hash"] = manifest_hash;
  write_text(dir / files::kRunInfo, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Datasets

struct LoadedDataset {
  std::vector<TrajectorySample> samples;
  DatasetManifest manifest;
  std::string manifest_hash;
  std::size_t rejected = 0;
};

inline LoadedDataset load_dataset(const fs::path& dir, const LogFn& log = stderr_log()) {
  if (!fs::exists(dir / files::kManifest)) throw ValidationError("no dataset manifest in " + dir.string());
  LoadedDataset d;
  d.manifest = read_manifest(dir / files::kManifest);
  d.manifest_hash = file_hash(dir / files::kManifest);
  SampleFile f = read_samples(dir / files::kSamples);
  for (const auto& r : f.rejected) {
    std::string msg = "line " + std::to_string(r.line) + " (" + r.sample_id + ") rejected:";
    for (const auto& v : r.violations) msg += " " + v.field + "/" + v.rule;
    log(msg);
  }
  d.rejected = f.rejected.size();
  d.samples = std::move(f.samples);
  std::sort(d.samples.begin(), d.samples.end(),
            [](const TrajectorySample& a, const TrajectorySample& b) { return a.sample_id < b.sample_id; });
  if (d.samples.empty()) throw ValidationError(dir.string() + ": no valid samples");
  return d;
}

/// Samples whose scene is in any of the named splits, sorted by id.
inline std::vector<TrajectorySample> split_samples(const LoadedDataset& d, const std::vector<std::string>& names) {
  std::vector<std::string> scenes;
  for (const auto& n : names) {
    const auto& v = d.manifest.splits.get(n);
    scenes.insert(scenes.end(), v.begin(), v.end());
  }
  return select_scenes(d.samples, scenes);
}

inline PositionNormalizer normalizer_from(const DatasetManifest& m) {
  PositionNormalizer n;
  for (int i = 0; i < 3; ++i) {
    n.mean[i] = m.position_mean[i];
    n.std[i] = m.position_std[i];
  }
  return n;
}

inline void check_dims(const MotionExpertConfig& model, const DatasetManifest& m) {
  if (m.context_dim != model.visual_dim) {
    throw ValidationError("dataset context features have " + std::to_string(m.context_dim) +
                          " dims, model.visual_dim is " + std::to_string(model.visual_dim));
  }
}

// ---------------------------------------------------------------------------
// make-synth

struct SynthResult {
  std::size_t samples = 0;
  std::size_t scenes = 0;
  DatasetStats stats;
};

inline SynthResult cmd_make_synth(const RunConfig& cfg, const fs::path& out, bool force, const LogFn& log = stderr_log()) {
  cfg.validate();
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw UsageError(out.string() + " exists and is not empty; pass --force to overwrite");
  }
  fs::create_directories(out);
  SynthSpec spec = cfg.synth;
  spec.seed = cfg.seed;
  const SynthDataset d = generate_synthetic(spec);
  std::vector<std::string> scenes;
  for (const auto& s : d.samples) scenes.push_back(s.scene_id);
  const SceneSplits splits = make_splits(scenes, cfg.splits, mix_seed(cfg.seed, 7));
  DatasetManifest m = compute_manifest(cfg.name, d.samples, splits);
  m.embedding_dim = cfg.model.intent_dim;

  write_samples(d.samples, out / files::kSamples);
  write_manifest(m, out / files::kManifest);
  SynthResult r;
  r.stats = dataset_stats(d.samples);
  write_text(out / files::kStats, stats_to_csv(r.stats));
  std::string tracks, qa;
  for (const auto& [id, t] : d.tracks) tracks += track_json(id, t).dump() + "\n";
  for (const auto& s : d.samples) {
    for (const auto& q : generate_qa(s)) qa += qa_json(q).dump() + "\n";
  }
  write_text(out / files::kTracks, tracks);
  write_text(out / files::kQa, qa);
  RunConfig resolved = cfg;
  resolved.data.dir = out.string();
  write_run_info(out, resolved, file_hash(out / files::kManifest), "make-synth");
  r.samples = d.samples.size();
  r.scenes = m.scene_ids.size();
  log("wrote " + std::to_string(r.samples) + " samples from " + std::to_string(r.scenes) + " scenes to " + out.string());
  return r;
}

// ---------------------------------------------------------------------------
// annotate-stages

struct StageSummary {
  std::size_t tracks = 0;
  std::size_t annotated = 0;
  std::size_t no_onset = 0;
  std::size_t no_approach = 0;
  std::size_t agree = 0;  ///< onset within 0.3 s of the sample's manipulation start
};

inline StageSummary cmd_annotate_stages(const fs::path& dataset, const StageRule& rule, const fs::path& out,
                                        const LogFn& log = stderr_log()) {
  std::map<std::string, double> labelled;
  if (fs::exists(dataset / files::kSamples)) {
    for (const auto& s : read_samples(dataset / files::kSamples).samples) labelled[s.sample_id] = s.stages.manipulation.start;
  }
  std::ifstream in(dataset / files::kTracks);
  if (!in) throw ValidationError("no object tracks in " + dataset.string());
  StageSummary sum;
  std::string text, line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string id;
    ObjectTrack track;
    try {
      const auto j = nlohmann::json::parse(line);
      id = io::get_str(io::field(j, "sample_id"), "sample_id");
      track = track_from(j);
    } catch (const std::exception& e) {
      throw ParseError((dataset / files::kTracks).string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ++sum.tracks;
    nlohmann::ordered_json rec;
    rec["sample_id"] = id;
    try {
      const StageAnnotation a = infer_stages(track, rule);
      ++sum.annotated;
      if (!a.has_approach) ++sum.no_approach;
      rec["onset"] = io::num(a.onset);
      rec["approach"] = a.labels.approach ? io::interval_json(*a.labels.approach) : nlohmann::json(nullptr);
      rec["manipulation"] = io::interval_json(a.labels.manipulation);
      const auto it = labelled.find(id);
      if (it != labelled.end() && std::abs(it->second - a.onset) <= 0.3 + 1e-9) ++sum.agree;
    } catch (const NoMotionOnset&) {
      ++sum.no_onset;
      rec["error"] = "no_motion_onset";
    } catch (const NoValidApproach&) {
      ++sum.no_approach;
      rec["error"] = "no_valid_approach";
    }
    text += rec.dump() + "\n";
  }
  write_text(out, text);
  log("annotated " + std::to_string(sum.annotated) + "/" + std::to_string(sum.tracks) + " tracks (" +
      std::to_string(sum.no_onset) + " without onset, " + std::to_string(sum.no_approach) + " without approach)");
  return sum;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  std::size_t steps = 0;
  std::size_t epochs = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;  ///< mean loss over the last epoch
  FlowDiagnostics diagnostics;
};

/// Everything that must match for a checkpoint to be resumable.
inline nlohmann::json training_identity(const RunConfig& cfg, const std::string& manifest_hash) {
  nlohmann::json j;
  j["model"] = cfg.model;
  j["seed"] = cfg.seed;
  j["manifest_hash"] = manifest_hash;
  j["train_splits"] = cfg.data.train_splits;
  j["batch_size"] = cfg.train.batch_size;
  j["epochs"] = cfg.train.epochs;
  j["optim"] = {{"learning_rate", cfg.optim.learning_rate}, {"weight_decay", cfg.optim.weight_decay},
                {"warmup_fraction", cfg.optim.warmup_fraction}, {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2}, {"eps", cfg.optim.eps}, {"max_grad_norm", cfg.optim.max_grad_norm}};
  j["rot_weight_fm"] = cfg.loss.rot_weight_fm;
  return j;
}

/// `halt_after` > 0 stops after that many epochs in total (as if the process
/// were interrupted); a later call with train.resume continues the run.
inline TrainSummary cmd_train(const RunConfig& cfg, const fs::path& run_dir, const LogFn& log = stderr_log(),
                              std::size_t halt_after = 0) {
  cfg.validate();
  const LoadedDataset ds = load_dataset(cfg.data.dir, log);
  check_dims(cfg.model, ds.manifest);
  const std::vector<TrajectorySample> train = split_samples(ds, cfg.data.train_splits);
  if (train.empty()) throw ValidationError("training splits contain no samples");
  fs::create_directories(run_dir);
  write_run_info(run_dir, cfg, ds.manifest_hash, "train");

  const EmbeddingSpec emb{cfg.model.intent_dim, ds.manifest.embedding_seed};
  std::vector<TrajectoryTokenBundle> bundles;
  bundles.reserve(train.size());
  for (const auto& s : train) bundles.push_back(oracle_provider(s, emb));

  MotionExpert<Scalar> model(cfg.model, mix_seed(cfg.seed, 101), normalizer_from(ds.manifest));
  const std::size_t per_epoch = (train.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
  nn::OptimizerConfig opt = cfg.optim;
  opt.total_steps = per_epoch * cfg.train.epochs;
  FlowTrainer<Scalar> trainer(model, opt, mix_seed(cfg.seed, 202));
  const nlohmann::json identity = training_identity(cfg, ds.manifest_hash);

  std::size_t start_epoch = 0;
  std::vector<std::string> log_lines;
  const fs::path ckpt = run_dir / files::kCheckpoint;
  if (cfg.train.resume && fs::exists(ckpt)) {
    const auto header = nn::read_checkpoint_header(ckpt);
    if (header.at("config") != identity) throw UsageError("checkpoint " + ckpt.string() + " was trained with a different config");
    const nn::CheckpointMeta meta = nn::load_checkpoint(ckpt, model.parameters(), &trainer.optimizer());
    start_epoch = meta.epoch;
    trainer.set_step(meta.step);
    std::ifstream old(run_dir / files::kLossLog);
    for (std::string l; log_lines.size() < meta.step && std::getline(old, l);) log_lines.push_back(l);
    log("resuming from epoch " + std::to_string(start_epoch) + ", step " + std::to_string(meta.step));
  }

  TrainSummary sum;
  std::string log_text;
  for (const auto& l : log_lines) log_text += l + "\n";
  if (!log_lines.empty()) sum.first_loss = nlohmann::json::parse(log_lines.front()).at("loss").get<double>();
  std::vector<std::size_t> order(train.size());
  const std::size_t last_epoch = halt_after > 0 ? std::min(halt_after, cfg.train.epochs) : cfg.train.epochs;
  for (std::size_t epoch = start_epoch; epoch < last_epoch; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, 303), epoch));
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(order[i], order[pick(rng)]);
    }
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.train.batch_size) {
      std::vector<const TrajectorySample*> ss;
      std::vector<const TrajectoryTokenBundle*> bb;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + cfg.train.batch_size); ++i) {
        ss.push_back(&train[order[i]]);
        bb.push_back(&bundles[order[i]]);
      }
      TrainStepResult r;
      try {
        r = trainer.train_step(ss, bb, cfg.loss);
      } catch (const NumericalFailure& e) {
        write_text(run_dir / files::kLossLog, log_text);
        log(std::string("aborting: ") + e.what());
        throw;
      }
      nlohmann::ordered_json line;
      line["step"] = r.step;
      line["epoch"] = epoch;
      line["loss"] = io::round9(r.loss);
      line["fm_position"] = io::round9(r.position_mse);
      line["fm_rotation"] = io::round9(r.rotation_mse);
      line["lr"] = io::round9(r.learning_rate);
      log_text += line.dump() + "\n";
      if (r.step == 1) sum.first_loss = r.loss;
      epoch_loss += r.loss;
      ++epoch_steps;
    }
    sum.final_loss = epoch_loss / static_cast<double>(epoch_steps);
    nn::CheckpointMeta meta;
    meta.config = identity;
    meta.step = trainer.step();
    meta.epoch = epoch + 1;
    meta.extra = model.describe();
    nn::save_checkpoint(ckpt, model.parameters(), &trainer.optimizer(), meta);
    write_text(run_dir / files::kLossLog, log_text);
    if ((epoch + 1) % 10 == 0 || epoch + 1 == cfg.train.epochs) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "epoch %zu/%zu  loss %.5f", epoch + 1, cfg.train.epochs, sum.final_loss);
      log(buf);
    }
  }
  sum.steps = trainer.step();
  sum.epochs = std::max(start_epoch, last_epoch);
  sum.diagnostics = trainer.diagnostics();
  nlohmann::ordered_json j;
  j["steps"] = sum.steps;
  j["epochs"] = sum.epochs;
  j["first_loss"] = io::round9(sum.first_loss);
  j["final_epoch_loss"] = io::round9(sum.final_loss);
  j["clamped_waypoints"] = sum.diagnostics.clamped_waypoints;
  j["parameters"] = model.parameters().count();
  write_text(run_dir / files::kTrainSummary, j.dump(2) + "\n");
  return sum;
}

/// Rebuilds the model stored in a run directory's checkpoint.
inline std::unique_ptr<MotionExpert<Scalar>> load_model(const fs::path& run_dir) {
  const fs::path ckpt = run_dir / files::kCheckpoint;
  if (!fs::exists(ckpt)) throw ValidationError("no checkpoint in " + run_dir.string());
  const auto header = nn::read_checkpoint_header(ckpt);
  const auto& extra = header.at("extra");
  auto model = std::make_unique<MotionExpert<Scalar>>(extra.at("model").get<MotionExpertConfig>(), 0,
                                                      extra.at("normalizer").get<PositionNormalizer>());
  nn::load_checkpoint(ckpt, model->parameters(), static_cast<nn::AdamW<Scalar>*>(nullptr));
  return model;
}

// ---------------------------------------------------------------------------
// Predictors

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  virtual std::size_t horizon() const = 0;
  /// `k` full-horizon trajectories.
  virtual std::vector<Trajectory> predict(const TrajectorySample& s, const TrajectoryTokenBundle& b, std::size_t k,
                                          std::uint64_t seed, FlowDiagnostics* diag) const = 0;
};

/// Repeats the last observed pose over the horizon.
class StaticPredictor : public Predictor {
 public:
  explicit StaticPredictor(std::size_t steps) : steps_(steps) {}
  std::string name() const override { return "static"; }
  std::size_t horizon() const override { return steps_; }
  std::vector<Trajectory> predict(const TrajectorySample& s, const TrajectoryTokenBundle&, std::size_t k, std::uint64_t,
                                  FlowDiagnostics*) const override {
    Trajectory t;
    for (std::size_t i = 1; i <= steps_; ++i) {
      BiHandState st = s.past.back();
      st.timestamp = static_cast<double>(i) / kFps;
      t.push_back(st);
    }
    return std::vector<Trajectory>(k, t);
  }

 private:
  std::size_t steps_;
};

/// Debug predictor returning the ground truth, padded with its last state.
class CopyGroundTruth : public Predictor {
 public:
  explicit CopyGroundTruth(std::size_t steps) : steps_(steps) {}
  std::string name() const override { return "copy_gt"; }
  std::size_t horizon() const override { return steps_; }
  std::vector<Trajectory> predict(const TrajectorySample& s, const TrajectoryTokenBundle&, std::size_t k, std::uint64_t,
                                  FlowDiagnostics*) const override {
    Trajectory t(s.future.begin(), s.future.begin() + static_cast<std::ptrdiff_t>(std::min(steps_, s.future.size())));
    while (t.size() < steps_) {
      BiHandState st = t.back();
      st.timestamp = static_cast<double>(t.size() + 1) / kFps;
      t.push_back(st);
    }
    return std::vector<Trajectory>(k, t);
  }

 private:
  std::size_t steps_;
};

class MotionExpertPredictor : public Predictor {
 public:
  explicit MotionExpertPredictor(std::unique_ptr<MotionExpert<Scalar>> m) : model_(std::move(m)) {}
  std::string name() const override { return "motion_expert"; }
  std::size_t horizon() const override { return model_->config().max_future; }
  const MotionExpert<Scalar>& model() const { return *model_; }
  std::vector<Trajectory> predict(const TrajectorySample& s, const TrajectoryTokenBundle& b, std::size_t k,
                                  std::uint64_t seed, FlowDiagnostics* diag) const override {
    std::vector<Trajectory> out;
    for (auto& o : model_->predict_best_of_k(s, b, k, seed, diag)) out.push_back(std::move(o.trajectory));
    return out;
  }

 private:
  std::unique_ptr<MotionExpert<Scalar>> model_;
};

inline std::unique_ptr<Predictor> make_predictor(const RunConfig& cfg, const fs::path& run_dir) {
  if (cfg.eval.predictor == "static") return std::make_unique<StaticPredictor>(cfg.model.max_future);
  if (cfg.eval.predictor == "copy_gt") return std::make_unique<CopyGroundTruth>(cfg.model.max_future);
  return std::make_unique<MotionExpertPredictor>(load_model(run_dir));
}

// ---------------------------------------------------------------------------
// Providers

/// Bundles for the given samples. Samples without one (file provider) are
/// absent from the map.
inline std::map<std::string, TrajectoryTokenBundle> provide_bundles(const RunConfig& cfg,
                                                                     const std::vector<TrajectorySample>& samples,
                                                                     const EmbeddingSpec& emb, const LogFn& log) {
  std::map<std::string, TrajectoryTokenBundle> out;
  if (cfg.provider.kind == "file") {
    std::set<std::string> ids;
    for (const auto& s : samples) ids.insert(s.sample_id);
    BundleFile f = file_provider(cfg.provider.path, &ids);
    for (const auto& r : f.rejected) log(r);
    out = std::move(f.bundles);
    for (auto& [id, b] : out) {
      if (b.act.z.size() != emb.dim) throw ValidationError("bundle for " + id + " has a wrong embedding width");
    }
    return out;
  }
  for (const auto& s : samples) {
    out[s.sample_id] = cfg.provider.kind == "noisy"
                           ? noisy_provider(s, cfg.provider.noise, mix_seed(cfg.provider.seed, fnv1a64(s.sample_id)), emb)
                           : oracle_provider(s, emb);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SampleEval {
  std::string sample_id;
  std::vector<MetricRow> rows;  ///< one per draw, horizon truncated to the ground truth
  MetricRow baseline;
  WaypointReport waypoints;
  bool has_waypoints = false;
};

struct EvalResult {
  std::string method;
  MetricReport report;
  MetricReport baseline;
  WaypointReport waypoints;
  std::size_t waypoint_samples = 0;
  std::size_t skipped = 0;
  FlowDiagnostics diagnostics;
  std::vector<SampleEval> per_sample;  ///< sorted by sample id
  std::vector<PredictionRecord> predictions;
};

inline Trajectory truncate_gt(const Trajectory& gt, std::size_t horizon) {
  return Trajectory(gt.begin(), gt.begin() + static_cast<std::ptrdiff_t>(std::min(horizon, gt.size())));
}

/// Runs `fn(i)` for i in [0, n) on `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Reduces per-sample rows in id order into best-of-K means.
inline MetricReport reduce_rows(const std::vector<SampleEval>& per_sample, const std::vector<std::size_t>& ks,
                                BestOfKMode mode, bool baseline = false) {
  MetricAccumulator acc(ks, mode);
  for (const auto& s : per_sample) {
    if (baseline) {
      const std::vector<MetricRow> rows(*std::max_element(ks.begin(), ks.end()), s.baseline);
      acc.add(rows);
    } else {
      acc.add(s.rows);
    }
  }
  return acc.report();
}

/// Metrics of stored predictions against the samples they name.
inline MetricReport evaluate_predictions(const std::vector<TrajectorySample>& samples,
                                         const std::vector<PredictionRecord>& preds, const std::vector<std::size_t>& ks,
                                         BestOfKMode mode = BestOfKMode::PerMetric) {
  std::map<std::string, const TrajectorySample*> by_id;
  for (const auto& s : samples) by_id[s.sample_id] = &s;
  std::vector<SampleEval> per;
  for (const auto& p : preds) {
    const auto it = by_id.find(p.sample_id);
    if (it == by_id.end()) throw ValidationError("prediction for unknown sample " + p.sample_id);
    SampleEval e;
    e.sample_id = p.sample_id;
    const Trajectory gt = truncate_gt(it->second->future, p.gt_steps);
    for (const auto& t : p.samples) e.rows.push_back(evaluate_prediction(t, gt));
    per.push_back(std::move(e));
  }
  std::sort(per.begin(), per.end(), [](const SampleEval& a, const SampleEval& b) { return a.sample_id < b.sample_id; });
  return reduce_rows(per, ks, mode);
}

inline EvalResult run_eval(const RunConfig& cfg, const Predictor& predictor, const std::vector<TrajectorySample>& samples,
                           const std::map<std::string, TrajectoryTokenBundle>& bundles, const LogFn& log = stderr_log()) {
  const std::size_t kmax = *std::max_element(cfg.eval.ks.begin(), cfg.eval.ks.end());
  const std::size_t horizon = predictor.horizon();
  const StaticPredictor baseline(horizon);
  EvalResult res;
  res.method = cfg.name + "/" + predictor.name();
  std::vector<const TrajectorySample*> todo;
  for (const auto& s : samples) {
    if (bundles.count(s.sample_id)) {
      todo.push_back(&s);
    } else {
      ++res.skipped;
    }
  }
  if (res.skipped > 0) log(std::to_string(res.skipped) + " samples have no token bundle and are skipped");
  if (todo.empty()) throw ValidationError("nothing to evaluate");
  std::sort(todo.begin(), todo.end(), [](auto* a, auto* b) { return a->sample_id < b->sample_id; });

  res.per_sample.resize(todo.size());
  res.predictions.resize(todo.size());
  std::vector<FlowDiagnostics> diags(todo.size());
  parallel_for(todo.size(), cfg.eval.workers, [&](std::size_t i) {
    const TrajectorySample& s = *todo[i];
    const TrajectoryTokenBundle& b = bundles.at(s.sample_id);
    const Trajectory gt = truncate_gt(s.future, horizon);
    const auto draws = predictor.predict(s, b, kmax, mix_seed(cfg.eval.seed, fnv1a64(s.sample_id)), &diags[i]);
    SampleEval& e = res.per_sample[i];
    e.sample_id = s.sample_id;
    for (const auto& t : draws) e.rows.push_back(evaluate_prediction(t, gt));
    e.baseline = evaluate_prediction(baseline.predict(s, b, 1, 0, nullptr).front(), gt);
    try {
      e.waypoints = waypoint_report(b.waypoints, s);
      e.has_waypoints = true;
    } catch (const MissingWaypoint&) {
    }
    res.predictions[i] = PredictionRecord{s.sample_id, draws, gt.size()};
  });

  res.report = reduce_rows(res.per_sample, cfg.eval.ks, cfg.best_of_k_mode());
  res.baseline = reduce_rows(res.per_sample, cfg.eval.ks, cfg.best_of_k_mode(), true);
  for (std::size_t i = 0; i < todo.size(); ++i) {
    res.diagnostics.clamped_waypoints += diags[i].clamped_waypoints;
    res.diagnostics.degenerate_rotations += diags[i].degenerate_rotations;
    const auto& e = res.per_sample[i];
    if (!e.has_waypoints) continue;
    res.waypoints.contact += e.waypoints.contact;
    res.waypoints.traj += e.waypoints.traj;
    res.waypoints.loc += e.waypoints.loc;
    res.waypoints.time += e.waypoints.time;
    res.waypoints.rot += e.waypoints.rot;
    ++res.waypoint_samples;
  }
  if (res.waypoint_samples > 0) {
    const auto n = static_cast<double>(res.waypoint_samples);
    res.waypoints = {res.waypoints.contact / n, res.waypoints.traj / n, res.waypoints.loc / n, res.waypoints.time / n,
                     res.waypoints.rot / n};
  }
  return res;
}

inline void write_eval(const EvalResult& r, const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  write_text(out / files::kMetricsCsv, report_to_csv(r.report));
  write_text(out / files::kMetricsJson, report_to_json(r.report).dump(2) + "\n");
  write_text(out / files::kBaselineCsv, report_to_csv(r.baseline));
  write_text(out / files::kBaselineJson, report_to_json(r.baseline).dump(2) + "\n");
  write_text(out / files::kWaypointsCsv, waypoint_report_to_csv(r.waypoints, r.waypoint_samples));
  std::string per;
  for (const auto& e : r.per_sample) {
    nlohmann::ordered_json j;
    j["sample_id"] = e.sample_id;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& m : e.rows) rows.push_back({m.ade, m.fde, m.dtw, m.rot});
    j["draws"] = rows;
    j["baseline"] = {e.baseline.ade, e.baseline.fde, e.baseline.dtw, e.baseline.rot};
    if (e.has_waypoints) {
      j["waypoints"] = {{"contact", e.waypoints.contact}, {"traj", e.waypoints.traj}, {"loc", e.waypoints.loc},
                        {"time", e.waypoints.time}, {"rot", e.waypoints.rot}};
    }
    per += j.dump() + "\n";
  }
  write_text(out / files::kPerSample, per);
  write_predictions(r.predictions, out / files::kPredictions);
  nlohmann::ordered_json s;
  s["method"] = r.method;
  s["predictor"] = cfg.eval.predictor;
  s["provider"] = cfg.provider.kind;
  s["provider_noise"] = {{"sigma_pos", cfg.provider.noise.sigma_pos}, {"sigma_time", cfg.provider.noise.sigma_time},
                         {"sigma_rot", cfg.provider.noise.sigma_rot}, {"seed", cfg.provider.seed}};
  s["split"] = cfg.data.eval_split;
  s["n_samples"] = r.report.n_samples;
  s["skipped"] = r.skipped;
  s["clamped_waypoints"] = r.diagnostics.clamped_waypoints;
  s["degenerate_rotations"] = r.diagnostics.degenerate_rotations;
  s["best_of_k"] = cfg.eval.best_of_k;
  write_text(out / files::kEvalSummary, s.dump(2) + "\n");
}

/// Evaluates the run's checkpoint (or a baseline predictor) on the eval
/// split and writes reports to `out`.
inline EvalResult cmd_eval(const RunConfig& cfg, const fs::path& run_dir, const fs::path& out,
                           const LogFn& log = stderr_log()) {
  cfg.validate();
  const LoadedDataset ds = load_dataset(cfg.data.dir, log);
  const auto samples = split_samples(ds, {cfg.data.eval_split});
  if (samples.empty()) throw ValidationError("split '" + cfg.data.eval_split + "' has no samples");
  const auto predictor = make_predictor(cfg, run_dir);
  std::size_t intent_dim = cfg.model.intent_dim;
  if (const auto* me = dynamic_cast<const MotionExpertPredictor*>(predictor.get())) {
    check_dims(me->model().config(), ds.manifest);
    intent_dim = me->model().config().intent_dim;
  }
  const auto bundles = provide_bundles(cfg, samples, {intent_dim, ds.manifest.embedding_seed}, log);
  EvalResult r = run_eval(cfg, *predictor, samples, bundles, log);
  if (cfg.eval.predictor == "motion_expert" && !run_dir.filename().empty()) {
    r.method = run_dir.filename().string() + "/" + predictor->name();
  }
  fs::create_directories(out);
  write_run_info(out, cfg, ds.manifest_hash, "eval");
  write_eval(r, cfg, out);
  char buf[160];
  const auto& top = r.report.by_k.rbegin()->second;
  std::snprintf(buf, sizeof buf, "%s: best-of-%zu ADE %.4f m  FDE %.4f m  (static %.4f m) on %zu samples", r.method.c_str(),
                r.report.by_k.rbegin()->first, top.ade, top.fde, r.baseline.by_k.rbegin()->second.ade, r.report.n_samples);
  log(buf);
  return r;
}

/// Writes full-horizon draws for the eval split without scoring them.
inline std::size_t cmd_sample(const RunConfig& cfg, const fs::path& run_dir, const fs::path& out,
                              const LogFn& log = stderr_log()) {
  cfg.validate();
  const LoadedDataset ds = load_dataset(cfg.data.dir, log);
  const auto samples = split_samples(ds, {cfg.data.eval_split});
  const auto predictor = make_predictor(cfg, run_dir);
  const auto bundles = provide_bundles(cfg, samples, {cfg.model.intent_dim, ds.manifest.embedding_seed}, log);
  const std::size_t kmax = *std::max_element(cfg.eval.ks.begin(), cfg.eval.ks.end());
  std::vector<PredictionRecord> preds;
  for (const auto& s : samples) {
    const auto it = bundles.find(s.sample_id);
    if (it == bundles.end()) continue;
    preds.push_back({s.sample_id,
                     predictor->predict(s, it->second, kmax, mix_seed(cfg.eval.seed, fnv1a64(s.sample_id)), nullptr),
                     std::min(predictor->horizon(), s.future.size())});
  }
  write_predictions(preds, out);
  log("wrote " + std::to_string(preds.size()) + " prediction records to " + out.string());
  return preds.size();
}

// ---------------------------------------------------------------------------
// stats / report

inline DatasetStats cmd_stats(const fs::path& dataset, const fs::path& out, const LogFn& log = stderr_log()) {
  const LoadedDataset ds = load_dataset(dataset, log);
  const DatasetStats st = dataset_stats(ds.samples);
  write_text(out, stats_to_csv(st));
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu samples: %.1f%% longer than 2 s, %.1f%% move > 0.2 m, %.1f%% rotate > 60 deg",
                st.samples, 100 * st.frac_long, 100 * st.frac_far, 100 * st.frac_rotating);
  log(buf);
  return st;
}

struct ComparisonTable {
  std::vector<std::string> columns;  ///< "ade@1", ...
  std::vector<std::pair<std::string, std::vector<std::string>>> rows;
};

inline std::string table_to_csv(const ComparisonTable& t) {
  std::string out = "method";
  for (const auto& c : t.columns) out += "," + c;
  out += "\n";
  for (const auto& [name, vals] : t.rows) {
    out += name;
    for (const auto& v : vals) out += "," + v;
    out += "\n";
  }
  return out;
}

inline std::string table_to_text(const ComparisonTable& t) {
  std::vector<std::size_t> w(t.columns.size() + 1, std::string("method").size());
  for (const auto& r : t.rows) w[0] = std::max(w[0], r.first.size());
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    w[c + 1] = t.columns[c].size();
    for (const auto& r : t.rows) w[c + 1] = std::max(w[c + 1], r.second[c].size());
  }
  auto pad = [](const std::string& s, std::size_t n, bool left) {
    const std::string sp(n > s.size() ? n - s.size() : 0, ' ');
    return left ? s + sp : sp + s;
  };
  std::string out = pad("method", w[0], true);
  for (std::size_t c = 0; c < t.columns.size(); ++c) out += "  " + pad(t.columns[c], w[c + 1], false);
  out += "\n";
  for (const auto& [name, vals] : t.rows) {
    out += pad(name, w[0], true);
    for (std::size_t c = 0; c < vals.size(); ++c) out += "  " + pad(vals[c], w[c + 1], false);
    out += "\n";
  }
  return out;
}

/// Merges eval directories into one method x metric x K table. The first
/// directory's static baseline is added as a reference row.
inline ComparisonTable cmd_report(const std::vector<fs::path>& eval_dirs, const fs::path& out_prefix) {
  if (eval_dirs.empty()) throw UsageError("report needs at least one eval directory");
  std::vector<std::pair<std::string, MetricReport>> reports;
  fs::path reference;
  auto load = [](const fs::path& p) {
    try {
      return report_from_json(nlohmann::json::parse(egoman::detail::read_text(p)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(p.string() + ": " + e.what());
    }
  };
  for (const auto& d0 : eval_dirs) {
    fs::path d = d0;
    if (!fs::exists(d / files::kMetricsJson) && fs::exists(d / "eval" / files::kMetricsJson)) d = d / "eval";
    if (!fs::exists(d / files::kMetricsJson)) throw ValidationError("no " + std::string(files::kMetricsJson) + " in " + d0.string());
    std::string name = d0.filename().string();
    if (fs::exists(d / files::kEvalSummary)) {
      name = nlohmann::json::parse(egoman::detail::read_text(d / files::kEvalSummary)).value("method", name);
    }
    reports.emplace_back(name, load(d / files::kMetricsJson));
    if (reference.empty() && fs::exists(d / files::kBaselineJson)) reference = d / files::kBaselineJson;
  }
  // The first run's static baseline goes last as a fixed point of comparison.
  if (!reference.empty()) reports.emplace_back("static (reference)", load(reference));
  std::set<std::size_t> ks;
  for (const auto& [_, r] : reports) {
    for (const auto& [k, row] : r.by_k) ks.insert(k);
  }
  ComparisonTable t;
  for (const char* m : kMetricNames) {
    for (std::size_t k : ks) t.columns.push_back(std::string(m) + "@" + std::to_string(k));
  }
  for (const auto& [name, r] : reports) {
    std::vector<std::string> vals;
    for (const char* m : kMetricNames) {
      for (std::size_t k : ks) {
        const auto it = r.by_k.find(k);
        if (it == r.by_k.end()) {
          vals.push_back("n/a");
        } else {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.4f", metric_value(it->second, m));
          vals.push_back(buf);
        }
      }
    }
    t.rows.emplace_back(name, std::move(vals));
  }
  if (!out_prefix.empty()) {
    write_text(out_prefix.string() + ".csv", table_to_csv(t));
    write_text(out_prefix.string() + ".txt", table_to_text(t));
  }
  return t;
}

}  // namespace egoman::harness
