#pragma once

// Run configuration: one YAML file per run, dotted-path overrides from the
// command line, strict key checking, and a resolved copy written back.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "egoman/dataio.hpp"
#include "egoman/error.hpp"
#include "egoman/flowmatch.hpp"
#include "egoman/losses.hpp"
#include "egoman/metrics.hpp"
#include "egoman/nn/optim.hpp"
#include "egoman/tokens.hpp"

namespace egoman::harness {

/// Bad command line or configuration (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

struct DataConfig {
  std::string dir = "data";
  std::vector<std::string> train_splits{"pretrain", "finetune"};
  std::string eval_split = "test";
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  bool resume = false;
};

struct ProviderConfig {
  std::string kind = "oracle";  ///< oracle | noisy | file
  TokenNoise noise;
  std::uint64_t seed = 0;
  std::string path;  ///< bundle JSONL for kind = file
};

struct EvalConfig {
  std::vector<std::size_t> ks{1, 5, 10};
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  std::string predictor = "motion_expert";  ///< motion_expert | static | copy_gt
  std::string best_of_k = "per_metric";     ///< per_metric | joint_by_ade
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  DataConfig data;
  MotionExpertConfig model = MotionExpertConfig::desk();
  LossWeights loss;
  nn::OptimizerConfig optim;
  TrainConfig train;
  ProviderConfig provider;
  EvalConfig eval;
  SynthSpec synth;
  SplitSpec splits;

  RunConfig() {
    optim.learning_rate = 1e-3;
    optim.weight_decay = 1e-4;
    optim.warmup_fraction = 0.05;
    optim.max_grad_norm = 1.0;
  }

  /// Desk scale: trains in minutes on one CPU core.
  static RunConfig desk() { return {}; }

  /// Full-size model trained with batch 256, 60 epochs, lr 1e-4 and no clipping.
  static RunConfig full() {
    RunConfig c;
    c.model = MotionExpertConfig{};
    c.train.batch_size = 256;
    c.train.epochs = 60;
    c.optim.learning_rate = 1e-4;
    c.optim.max_grad_norm = 0.0;
    return c;
  }

  BestOfKMode best_of_k_mode() const {
    return eval.best_of_k == "joint_by_ade" ? BestOfKMode::JointByAde : BestOfKMode::PerMetric;
  }

  void validate() const {
    try {
      model.validate();
      loss.validate();
      synth.validate();
      splits.validate();
      nn::OptimizerConfig o = optim;
      o.total_steps = 1;
      o.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (train.batch_size == 0 || train.epochs == 0) throw UsageError("train.batch_size and train.epochs must be >= 1");
    if (eval.ks.empty()) throw UsageError("eval.ks must list at least one K");
    for (std::size_t k : eval.ks) {
      if (k == 0) throw UsageError("eval.ks entries must be >= 1");
    }
    if (eval.workers == 0) throw UsageError("eval.workers must be >= 1");
    if (provider.kind != "oracle" && provider.kind != "noisy" && provider.kind != "file") {
      throw UsageError("provider.kind must be oracle, noisy or file");
    }
    if (provider.kind == "file" && provider.path.empty()) throw UsageError("provider.path is required for kind = file");
    if (eval.predictor != "motion_expert" && eval.predictor != "static" && eval.predictor != "copy_gt") {
      throw UsageError("eval.predictor must be motion_expert, static or copy_gt");
    }
    if (eval.best_of_k != "per_metric" && eval.best_of_k != "joint_by_ade") {
      throw UsageError("eval.best_of_k must be per_metric or joint_by_ade");
    }
    for (const auto& s : data.train_splits) {
      if (s != "pretrain" && s != "finetune" && s != "test") throw UsageError("unknown split '" + s + "'");
    }
    if (data.eval_split != "pretrain" && data.eval_split != "finetune" && data.eval_split != "test") {
      throw UsageError("unknown split '" + data.eval_split + "'");
    }
  }
};

namespace detail {

struct Field {
  std::string path;
  std::function<YAML::Node()> get;
  std::function<void(const YAML::Node&)> set;
};

template <typename T>
Field bind_field(std::string path, T& ref) {
  return {path,
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) {
              // Shortest text that parses back to the same double.
              char buf[32];
              for (int prec = 6; prec <= 17; ++prec) {
                std::snprintf(buf, sizeof buf, "%.*g", prec, static_cast<double>(ref));
                if (std::strtod(buf, nullptr) == static_cast<double>(ref)) break;
              }
              return YAML::Node(std::string(buf));
            } else {
              return YAML::Node(ref);
            }
          },
          [&ref, path](const YAML::Node& n) {
            try {
              ref = n.as<T>();
            } catch (const YAML::Exception&) {
              throw UsageError("config key '" + path + "': cannot parse '" + YAML::Dump(n) + "'");
            }
          }};
}

/// Every configurable key, in output order.
inline std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  f.push_back(bind_field("name", c.name));
  f.push_back(bind_field("seed", c.seed));
  f.push_back(bind_field("data.dir", c.data.dir));
  f.push_back(bind_field("data.train_splits", c.data.train_splits));
  f.push_back(bind_field("data.eval_split", c.data.eval_split));
  auto& m = c.model;
  f.push_back(bind_field("model.hidden_dim", m.hidden_dim));
  f.push_back(bind_field("model.enc_layers", m.enc_layers));
  f.push_back(bind_field("model.pre_dec_layers", m.pre_dec_layers));
  f.push_back(bind_field("model.dec_layers", m.dec_layers));
  f.push_back(bind_field("model.heads", m.heads));
  f.push_back(bind_field("model.mlp_ratio", m.mlp_ratio));
  f.push_back(bind_field("model.time_embed_dim", m.time_embed_dim));
  f.push_back(bind_field("model.past_len", m.past_len));
  f.push_back(bind_field("model.max_future", m.max_future));
  f.push_back(bind_field("model.euler_steps", m.euler_steps));
  f.push_back(bind_field("model.intent_dim", m.intent_dim));
  f.push_back(bind_field("model.visual_dim", m.visual_dim));
  f.push_back(bind_field("model.use_waypoints", m.use_waypoints));
  auto& l = c.loss;
  f.push_back(bind_field("loss.rot_weight_fm", l.rot_weight_fm));
  f.push_back(bind_field("loss.wp", l.wp));
  f.push_back(bind_field("loss.act", l.act));
  f.push_back(bind_field("loss.time", l.time));
  f.push_back(bind_field("loss.pos3d", l.pos3d));
  f.push_back(bind_field("loss.pos2d", l.pos2d));
  f.push_back(bind_field("loss.rot6d", l.rot6d));
  f.push_back(bind_field("loss.geo", l.geo));
  f.push_back(bind_field("loss.beta_rot6d", l.beta_rot6d));
  f.push_back(bind_field("loss.beta_3d", l.beta_3d));
  f.push_back(bind_field("loss.beta_2d", l.beta_2d));
  f.push_back(bind_field("loss.beta_time", l.beta_time));
  f.push_back(bind_field("loss.sigma_time", l.sigma_time));
  f.push_back(bind_field("loss.kappa", l.kappa));
  auto& o = c.optim;
  f.push_back(bind_field("optim.learning_rate", o.learning_rate));
  f.push_back(bind_field("optim.weight_decay", o.weight_decay));
  f.push_back(bind_field("optim.warmup_fraction", o.warmup_fraction));
  f.push_back(bind_field("optim.beta1", o.beta1));
  f.push_back(bind_field("optim.beta2", o.beta2));
  f.push_back(bind_field("optim.eps", o.eps));
  f.push_back(bind_field("optim.max_grad_norm", o.max_grad_norm));
  f.push_back(bind_field("train.epochs", c.train.epochs));
  f.push_back(bind_field("train.batch_size", c.train.batch_size));
  f.push_back(bind_field("train.resume", c.train.resume));
  f.push_back(bind_field("provider.kind", c.provider.kind));
  f.push_back(bind_field("provider.sigma_pos", c.provider.noise.sigma_pos));
  f.push_back(bind_field("provider.sigma_time", c.provider.noise.sigma_time));
  f.push_back(bind_field("provider.sigma_rot", c.provider.noise.sigma_rot));
  f.push_back(bind_field("provider.seed", c.provider.seed));
  f.push_back(bind_field("provider.path", c.provider.path));
  f.push_back(bind_field("eval.ks", c.eval.ks));
  f.push_back(bind_field("eval.workers", c.eval.workers));
  f.push_back(bind_field("eval.seed", c.eval.seed));
  f.push_back(bind_field("eval.predictor", c.eval.predictor));
  f.push_back(bind_field("eval.best_of_k", c.eval.best_of_k));
  f.push_back(bind_field("synth.scenes", c.synth.scenes));
  f.push_back(bind_field("synth.goals_per_scene", c.synth.goals_per_scene));
  f.push_back(bind_field("synth.jitter", c.synth.jitter));
  f.push_back(bind_field("synth.min_goal_separation", c.synth.min_goal_separation));
  f.push_back(bind_field("synth.past_frames", c.synth.past_frames));
  f.push_back(bind_field("splits.pretrain", c.splits.pretrain));
  f.push_back(bind_field("splits.finetune", c.splits.finetune));
  f.push_back(bind_field("splits.test", c.splits.test));
  return f;
}

inline void flatten(const YAML::Node& n, const std::string& prefix, std::vector<std::pair<std::string, YAML::Node>>& out) {
  if (n.IsMap()) {
    for (const auto& kv : n) {
      const std::string key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
  } else if (!n.IsNull() || !prefix.empty()) {
    out.emplace_back(prefix, n);
  }
}

inline void apply(RunConfig& c, const std::string& path, const YAML::Node& value) {
  for (auto& f : fields(c)) {
    if (f.path == path) {
      f.set(value);
      return;
    }
  }
  throw UsageError("unknown config key '" + path + "'");
}

}  // namespace detail

/// Applies every key of a YAML document; unknown keys are errors.
inline void merge_yaml(RunConfig& c, const YAML::Node& doc) {
  std::vector<std::pair<std::string, YAML::Node>> flat;
  detail::flatten(doc, "", flat);
  for (const auto& [path, value] : flat) detail::apply(c, path, value);
}

inline void merge_yaml_text(RunConfig& c, const std::string& text) {
  try {
    merge_yaml(c, YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

inline void merge_yaml_file(RunConfig& c, const std::filesystem::path& path) {
  try {
    merge_yaml(c, YAML::LoadFile(path.string()));
  } catch (const YAML::BadFile&) {
    throw UsageError("cannot read config file " + path.string());
  } catch (const YAML::Exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

/// `key.path=value`, where value is parsed as a YAML scalar or flow sequence.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key.path=value: " + assignment);
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw UsageError("override " + assignment + ": " + e.what());
  }
  detail::apply(c, assignment.substr(0, eq), value);
}

inline std::string to_yaml(const RunConfig& cfg) {
  RunConfig c = cfg;
  YAML::Node root(YAML::NodeType::Map);
  for (auto& f : detail::fields(c)) {
    std::vector<std::string> parts;
    std::stringstream ss(f.path);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    // Node assignment copies values into the referenced node; reset() rebinds.
    YAML::Node cur = root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!cur[parts[i]]) cur[parts[i]] = YAML::Node(YAML::NodeType::Map);
      YAML::Node next = cur[parts[i]];
      cur.reset(next);
    }
    cur[parts.back()] = f.get();
  }
  YAML::Emitter out;
  out << root;
  return std::string(out.c_str()) + "\n";
}

inline RunConfig from_yaml_text(const std::string& text, RunConfig base = {}) {
  merge_yaml_text(base, text);
  return base;
}

}  // namespace egoman::harness
