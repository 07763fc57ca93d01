// egoman command-line interface.
//
// Exit codes: 0 success, 1 usage or config error, 2 data validation failure,
// 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "egoman/harness/config.hpp"
#include "egoman/harness/pipeline.hpp"

namespace fs = std::filesystem;
using namespace egoman;
using namespace egoman::harness;

namespace {

struct Common {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--preset", c.preset, "Base configuration: desk or full")->check(CLI::IsMember({"desk", "full"}));
  cmd->add_option("-c,--config", c.config, "YAML run configuration");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set train.epochs=20")->take_all();
  cmd->add_flag("-q,--quiet", c.quiet, "Only print errors");
}

RunConfig resolve(const Common& c, const std::vector<std::string>& extra) {
  RunConfig cfg = c.preset == "full" ? RunConfig::full() : RunConfig::desk();
  if (!c.config.empty()) merge_yaml_file(cfg, c.config);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  for (const auto& o : extra) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

template <typename T>
void flag_override(std::vector<std::string>& out, const char* key, const T& value, bool given) {
  if (given) out.push_back(std::string(key) + "=" + CLI::detail::to_string(value));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stage-aware bi-hand 6-DoF trajectory generation: data, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));

  Common common;

  auto* synth = app.add_subcommand("make-synth", "Generate a synthetic reach-then-manipulate dataset");
  add_common(synth, common);
  std::string synth_out;
  bool force = false;
  std::size_t scenes = 0, goals = 0;
  std::uint64_t seed = 0;
  synth->add_option("-o,--out", synth_out, "Dataset directory (default $EGOMAN_OUT/data/<name>)");
  synth->add_flag("--force", force, "Overwrite a non-empty output directory");
  auto* o_scenes = synth->add_option("--scenes", scenes, "Number of scenes");
  auto* o_goals = synth->add_option("--goals", goals, "Goals per scene (1 or 2)");
  auto* o_seed = synth->add_option("--seed", seed, "Master seed");

  auto* annotate = app.add_subcommand("annotate-stages", "Infer approach/manipulation stages from object tracks");
  add_common(annotate, common);
  std::string ann_data, ann_out;
  StageRule rule;
  annotate->add_option("-d,--data", ann_data, "Dataset directory holding tracks.jsonl")->required();
  annotate->add_option("-o,--out", ann_out, "Output JSONL (default <data>/stages.jsonl)");
  annotate->add_option("--motion-eps", rule.motion_eps, "Displacement counted as motion, meters");
  annotate->add_option("--max-dist", rule.max_dist, "Maximum object distance for the approach, meters");
  annotate->add_flag("--require-approach", rule.require_approach, "Fail tracks without a valid approach window");

  auto* train = app.add_subcommand("train", "Train the motion expert");
  add_common(train, common);
  std::string train_data, train_run;
  bool resume = false;
  std::size_t epochs = 0;
  train->add_option("-d,--data", train_data, "Dataset directory");
  train->add_option("-r,--run", train_run, "Run directory (default $EGOMAN_OUT/runs/<name>)");
  train->add_flag("--resume", resume, "Continue from the run's checkpoint");
  auto* o_epochs = train->add_option("--epochs", epochs, "Training epochs");
  auto* o_train_seed = train->add_option("--seed", seed, "Master seed");

  auto* sample = app.add_subcommand("sample", "Write K trajectories per eval-split sample");
  add_common(sample, common);
  std::string sample_data, sample_run, sample_out;
  sample->add_option("-d,--data", sample_data, "Dataset directory");
  sample->add_option("-r,--run", sample_run, "Run directory with a checkpoint");
  sample->add_option("-o,--out", sample_out, "Prediction JSONL (default <run>/predictions.jsonl)");

  auto* eval = app.add_subcommand("eval", "Best-of-K evaluation with waypoint metrics");
  add_common(eval, common);
  std::string eval_data, eval_run, eval_out, predictor, provider;
  double sigma_pos = 0.0;
  std::size_t workers = 0;
  eval->add_option("-d,--data", eval_data, "Dataset directory");
  eval->add_option("-r,--run", eval_run, "Run directory with a checkpoint");
  eval->add_option("-o,--out", eval_out, "Report directory (default <run>/eval)");
  auto* o_pred = eval->add_option("--predictor", predictor, "motion_expert, static or copy_gt");
  auto* o_prov = eval->add_option("--provider", provider, "oracle, noisy or file");
  auto* o_sigma = eval->add_option("--sigma-pos", sigma_pos, "Noisy provider position sigma, meters");
  auto* o_workers = eval->add_option("--workers", workers, "Evaluation threads");

  auto* stats = app.add_subcommand("stats", "Dataset duration/displacement/rotation statistics");
  add_common(stats, common);
  std::string stats_data, stats_out;
  stats->add_option("-d,--data", stats_data, "Dataset directory")->required();
  stats->add_option("-o,--out", stats_out, "CSV output (default <data>/stats.csv)");

  auto* report = app.add_subcommand("report", "Merge eval directories into one comparison table");
  add_common(report, common);
  std::vector<std::string> report_dirs;
  std::string report_out;
  report->add_option("dirs", report_dirs, "Eval (or run) directories")->required();
  report->add_option("-o,--out", report_out, "Output prefix; writes .csv and .txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const LogFn log = common.quiet ? quiet_log() : stderr_log();
    std::vector<std::string> extra;
    if (*synth) {
      flag_override(extra, "synth.scenes", scenes, o_scenes->count() > 0);
      flag_override(extra, "synth.goals_per_scene", goals, o_goals->count() > 0);
      flag_override(extra, "seed", seed, o_seed->count() > 0);
      const RunConfig cfg = resolve(common, extra);
      const fs::path out = synth_out.empty() ? out_root() / "data" / cfg.name : fs::path(synth_out);
      cmd_make_synth(cfg, out, force, log);
    } else if (*annotate) {
      const fs::path data(ann_data);
      cmd_annotate_stages(data, rule, ann_out.empty() ? data / files::kStages : fs::path(ann_out), log);
    } else if (*train) {
      flag_override(extra, "data.dir", train_data, !train_data.empty());
      flag_override(extra, "train.epochs", epochs, o_epochs->count() > 0);
      flag_override(extra, "seed", seed, o_train_seed->count() > 0);
      if (resume) extra.push_back("train.resume=true");
      const RunConfig cfg = resolve(common, extra);
      const fs::path run = train_run.empty() ? out_root() / "runs" / cfg.name : fs::path(train_run);
      const TrainSummary s = cmd_train(cfg, run, log);
      if (!common.quiet) std::printf("trained %zu steps, final epoch loss %.6f\n", s.steps, s.final_loss);
    } else if (*sample) {
      flag_override(extra, "data.dir", sample_data, !sample_data.empty());
      const RunConfig cfg = resolve(common, extra);
      const fs::path run = sample_run.empty() ? out_root() / "runs" / cfg.name : fs::path(sample_run);
      cmd_sample(cfg, run, sample_out.empty() ? run / files::kPredictions : fs::path(sample_out), log);
    } else if (*eval) {
      flag_override(extra, "data.dir", eval_data, !eval_data.empty());
      flag_override(extra, "eval.predictor", predictor, o_pred->count() > 0);
      flag_override(extra, "provider.kind", provider, o_prov->count() > 0);
      flag_override(extra, "provider.sigma_pos", sigma_pos, o_sigma->count() > 0);
      flag_override(extra, "eval.workers", workers, o_workers->count() > 0);
      const RunConfig cfg = resolve(common, extra);
      const fs::path run = eval_run.empty() ? out_root() / "runs" / cfg.name : fs::path(eval_run);
      const fs::path out = eval_out.empty() ? run / "eval" : fs::path(eval_out);
      const EvalResult r = cmd_eval(cfg, run, out, log);
      if (!common.quiet) std::fputs(report_to_csv(r.report).c_str(), stdout);
    } else if (*stats) {
      const fs::path data(stats_data);
      cmd_stats(data, stats_out.empty() ? data / files::kStats : fs::path(stats_out), log);
    } else if (*report) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      const ComparisonTable t = cmd_report(dirs, report_out.empty() ? fs::path() : fs::path(report_out));
      std::fputs(table_to_text(t).c_str(), stdout);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericalFailure& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const egoman::Error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
