#pragma once

// Motion Expert: a transformer encoder over past motion, waypoint and context
// tokens, and a FiLM-conditioned decoder that predicts the flow-matching
// velocity of the future trajectory. Sampling integrates the velocity field
// with explicit Euler steps.
//
// Future states are rows of 18 values: both hands' positions (standardized
// with the dataset normalizer) followed by both hands' raw 6D rotations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/error.hpp"
#include "egoman/geometry.hpp"
#include "egoman/hash.hpp"
#include "egoman/losses.hpp"
#include "egoman/nn/layers.hpp"
#include "egoman/nn/optim.hpp"
#include "egoman/nn/tensor.hpp"
#include "egoman/tokens.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

struct MotionExpertConfig {
  std::size_t hidden_dim = 768;
  std::size_t enc_layers = 6;
  std::size_t dec_layers = 6;
  std::size_t heads = 8;
  std::size_t time_embed_dim = 256;
  std::size_t past_len = 5;      ///< H
  std::size_t max_future = 50;   ///< T
  std::size_t euler_steps = 150; ///< N
  double fps = kFps;
  std::size_t pre_dec_layers = 2;
  std::size_t mlp_ratio = 4;
  std::size_t intent_dim = 512;  ///< action embedding width
  std::size_t visual_dim = 256;  ///< per-token visual context width
  bool use_waypoints = true;

  /// Small configuration that trains on a CPU in minutes.
  static MotionExpertConfig desk() {
    MotionExpertConfig c;
    c.hidden_dim = 64;
    c.enc_layers = 2;
    c.dec_layers = 2;
    c.heads = 4;
    c.time_embed_dim = 32;
    c.past_len = 5;
    c.max_future = 20;
    c.euler_steps = 50;
    c.intent_dim = kDefaultEmbeddingDim;
    c.visual_dim = 21;
    return c;
  }

  void validate() const {
    if (past_len < 1) throw std::invalid_argument("past_len must be >= 1");
    if (max_future < 1 || max_future > kMaxFutureSteps) throw std::invalid_argument("max_future must be in [1, 50]");
    if (euler_steps < 1) throw std::invalid_argument("euler_steps must be >= 1");
    if (fps != kFps) throw std::invalid_argument("fps must be 10");
    if (hidden_dim == 0 || heads == 0 || hidden_dim % heads != 0) {
      throw std::invalid_argument("hidden_dim must be a positive multiple of heads");
    }
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw std::invalid_argument("time_embed_dim must be even");
    if (mlp_ratio == 0) throw std::invalid_argument("mlp_ratio must be >= 1");
  }

  /// Horizon covered by the T future slots, in seconds.
  double horizon() const { return static_cast<double>(max_future) / fps; }
};

inline void to_json(nlohmann::json& j, const MotionExpertConfig& c) {
  j = {{"hidden_dim", c.hidden_dim},   {"enc_layers", c.enc_layers},     {"dec_layers", c.dec_layers},
       {"heads", c.heads},             {"time_embed_dim", c.time_embed_dim}, {"past_len", c.past_len},
       {"max_future", c.max_future},   {"euler_steps", c.euler_steps},   {"fps", c.fps},
       {"pre_dec_layers", c.pre_dec_layers}, {"mlp_ratio", c.mlp_ratio}, {"intent_dim", c.intent_dim},
       {"visual_dim", c.visual_dim},   {"use_waypoints", c.use_waypoints}};
}

inline void from_json(const nlohmann::json& j, MotionExpertConfig& c) {
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.enc_layers = j.at("enc_layers").get<std::size_t>();
  c.dec_layers = j.at("dec_layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
  c.past_len = j.at("past_len").get<std::size_t>();
  c.max_future = j.at("max_future").get<std::size_t>();
  c.euler_steps = j.at("euler_steps").get<std::size_t>();
  c.fps = j.at("fps").get<double>();
  c.pre_dec_layers = j.at("pre_dec_layers").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.intent_dim = j.at("intent_dim").get<std::size_t>();
  c.visual_dim = j.at("visual_dim").get<std::size_t>();
  c.use_waypoints = j.at("use_waypoints").get<bool>();
}

/// Per-axis standardization of positions; rotations are left untouched.
struct PositionNormalizer {
  Vec3 mean = Vec3::Zero();
  Vec3 std = Vec3::Ones();

  double forward(double x, int axis) const { return (x - mean[axis]) / std[axis]; }
  double inverse(double x, int axis) const { return x * std[axis] + mean[axis]; }
  friend bool operator==(const PositionNormalizer&, const PositionNormalizer&) = default;
};

inline void to_json(nlohmann::json& j, const PositionNormalizer& n) {
  j = {{"mean", {n.mean.x(), n.mean.y(), n.mean.z()}}, {"std", {n.std.x(), n.std.y(), n.std.z()}}};
}

inline void from_json(const nlohmann::json& j, PositionNormalizer& n) {
  for (int i = 0; i < 3; ++i) {
    n.mean[i] = j.at("mean").at(static_cast<std::size_t>(i)).get<double>();
    n.std[i] = j.at("std").at(static_cast<std::size_t>(i)).get<double>();
  }
}

struct FlowDiagnostics {
  std::size_t clamped_waypoints = 0;     ///< waypoint timestamps beyond the horizon
  std::size_t degenerate_rotations = 0;  ///< sampled rotations replaced by the previous step's
};

// ---------------------------------------------------------------------------
// Token layout

enum class TokenType : int { Past = 0, WaypointStart, WaypointContact, WaypointEnd, Intent, Visual, Query };
inline constexpr Eigen::Index kTokenTypes = 7;

/// 18 state values, two per-hand flags and the timestamp relative to the horizon.
inline constexpr std::size_t kTemporalFeatures = kStateDim + 3;

struct EncoderToken {
  TokenType type = TokenType::Past;
  std::vector<double> features;
  Eigen::Index position = 0;  ///< 0 for non-temporal tokens
};

using EncoderInput = std::vector<EncoderToken>;

inline bool is_temporal(TokenType t) { return t != TokenType::Intent && t != TokenType::Visual; }

/// Position ID H + round(fps * t), clamped to the future slots [H+1, H+T].
/// Timestamps more than 1 s past the horizon, or negative, are rejected.
inline Eigen::Index waypoint_position_id(double t, const MotionExpertConfig& cfg, bool* clamped = nullptr) {
  if (!std::isfinite(t) || t < 0.0) throw BadTimestamp("waypoint timestamp must be finite and >= 0");
  if (t > cfg.horizon() + 1.0 + 1e-9) {
    throw BadTimestamp("waypoint timestamp " + std::to_string(t) + " s is beyond the horizon by more than 1 s");
  }
  const auto h = static_cast<Eigen::Index>(cfg.past_len);
  const auto hi = h + static_cast<Eigen::Index>(cfg.max_future);
  const Eigen::Index raw = h + static_cast<Eigen::Index>(std::lround(cfg.fps * t));
  if (clamped) *clamped = raw > hi;
  return std::clamp(raw, h + 1, hi);
}

namespace detail {

inline std::vector<double> temporal_features(const Pose6DoF& left, const Pose6DoF& right, bool lv, bool rv, double t,
                                             const MotionExpertConfig& cfg, const PositionNormalizer& norm) {
  std::vector<double> f(kTemporalFeatures, 0.0);
  const Pose6DoF* poses[2] = {&left, &right};
  const bool valid[2] = {lv, rv};
  for (std::size_t h = 0; h < 2; ++h) {
    if (!valid[h]) continue;
    for (int c = 0; c < 3; ++c) f[3 * h + static_cast<std::size_t>(c)] = norm.forward(poses[h]->position[c], c);
    for (std::size_t c = 0; c < 6; ++c) f[kPosDim + 6 * h + c] = poses[h]->rotation[c];
  }
  f[kStateDim] = lv ? 1.0 : 0.0;
  f[kStateDim + 1] = rv ? 1.0 : 0.0;
  f[kStateDim + 2] = t / cfg.horizon();
  return f;
}

inline std::vector<double> context_vector(const std::vector<double>& v, std::size_t dim, const char* what) {
  if (v.empty()) return std::vector<double>(dim, 0.0);
  if (v.size() != dim) {
    throw ShapeMismatch(std::string(what) + " has " + std::to_string(v.size()) + " values, model expects " +
                        std::to_string(dim));
  }
  return v;
}

}  // namespace detail

/// Past tokens (oldest first, left-padded with empty tokens when fewer than
/// H frames exist), then START/CONTACT/END waypoint tokens, then the intent
/// and visual context tokens.
inline EncoderInput build_encoder_input(const TrajectorySample& s, const TrajectoryTokenBundle& b,
                                        const MotionExpertConfig& cfg, const PositionNormalizer& norm,
                                        FlowDiagnostics* diag = nullptr) {
  EncoderInput in;
  const std::size_t h = cfg.past_len;
  const std::size_t have = std::min(h, s.past.size());
  for (std::size_t i = 0; i < h; ++i) {
    EncoderToken tok;
    tok.type = TokenType::Past;
    tok.position = static_cast<Eigen::Index>(i + 1);
    if (i + have < h) {
      tok.features.assign(kTemporalFeatures, 0.0);
      tok.features[kStateDim + 2] = -static_cast<double>(h - 1 - i) / cfg.fps / cfg.horizon();
    } else {
      const BiHandState& st = s.past[s.past.size() - (h - i)];
      tok.features = detail::temporal_features(st.left, st.right, st.left_valid, st.right_valid, st.timestamp, cfg, norm);
    }
    in.push_back(std::move(tok));
  }
  if (cfg.use_waypoints) {
    for (std::size_t k = 0; k < 3; ++k) {
      const Waypoint& w = b.waypoints[k];
      bool clamped = false;
      EncoderToken tok;
      tok.type = static_cast<TokenType>(static_cast<int>(TokenType::WaypointStart) + static_cast<int>(k));
      tok.position = waypoint_position_id(w.timestamp, cfg, &clamped);
      if (clamped && diag) ++diag->clamped_waypoints;
      tok.features = detail::temporal_features(w.left, w.right, w.left_visible, w.right_visible,
                                               std::min(w.timestamp, cfg.horizon()), cfg, norm);
      in.push_back(std::move(tok));
    }
  }
  in.push_back({TokenType::Intent, detail::context_vector(b.act.z, cfg.intent_dim, "action embedding"), 0});
  in.push_back({TokenType::Visual, detail::context_vector(s.context_features, cfg.visual_dim, "context features"), 0});
  return in;
}

/// Flow target x1 (T x 18, normalized) and its loss mask: steps beyond the
/// sample's future and hands that are not valid are masked out.
template <typename T>
void flow_target(const TrajectorySample& s, const MotionExpertConfig& cfg, const PositionNormalizer& norm,
                 nn::Mat<T>& x1, nn::Mat<T>& mask) {
  const auto steps = static_cast<Eigen::Index>(cfg.max_future);
  x1.setZero(steps, kStateDim);
  mask.setZero(steps, kStateDim);
  for (Eigen::Index i = 0; i < steps && static_cast<std::size_t>(i) < s.future.size(); ++i) {
    const BiHandState& st = s.future[static_cast<std::size_t>(i)];
    for (Hand hand : kHands) {
      if (!st.valid(hand)) continue;
      const auto h = static_cast<Eigen::Index>(hand);
      const Pose6DoF& p = st.pose(hand);
      for (int c = 0; c < 3; ++c) {
        x1(i, 3 * h + c) = static_cast<T>(norm.forward(p.position[c], c));
        mask(i, 3 * h + c) = T(1);
      }
      for (Eigen::Index c = 0; c < 6; ++c) {
        x1(i, static_cast<Eigen::Index>(kPosDim) + 6 * h + c) = static_cast<T>(p.rotation[static_cast<std::size_t>(c)]);
        mask(i, static_cast<Eigen::Index>(kPosDim) + 6 * h + c) = T(1);
      }
    }
  }
}

/// Explicit Euler from t = 0 to 1 in `steps` equal increments of the field
/// `field(x, t)`.
template <typename M, typename Field>
M euler_integrate(M x, std::size_t steps, Field&& field) {
  if (steps < 1) throw std::invalid_argument("euler_integrate: steps must be >= 1");
  using S = typename M::Scalar;
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    x += static_cast<S>(dt) * field(static_cast<const M&>(x), t);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct Memory {
  nn::Tensor<T> tokens;  ///< batch * per_sample rows
  Eigen::Index batch = 0;
  Eigen::Index per_sample = 0;
  std::vector<nn::Tensor<T>> keys;    ///< cross-attention keys per decoder layer
  std::vector<nn::Tensor<T>> values;  ///< cross-attention values per decoder layer
};

struct SampleOutput {
  Trajectory trajectory;  ///< all T slots, timestamps 0.1 .. T/fps
  std::size_t degenerate_rotations = 0;
};

template <typename T>
class MotionExpert {
 public:
  using Tensor = nn::Tensor<T>;
  using Mat = nn::Mat<T>;

  MotionExpert(const MotionExpertConfig& cfg, std::uint64_t seed, PositionNormalizer norm = {})
      : cfg_(cfg), norm_(norm), ps_(seed) {
    cfg_.validate();
    const auto d = static_cast<Eigen::Index>(cfg_.hidden_dim);
    const auto heads = static_cast<Eigen::Index>(cfg_.heads);
    const auto mlp = d * static_cast<Eigen::Index>(cfg_.mlp_ratio);
    temporal_in_ = nn::Linear<T>(ps_, "in.temporal", static_cast<Eigen::Index>(kTemporalFeatures), d);
    intent_in_ = nn::Linear<T>(ps_, "in.intent", static_cast<Eigen::Index>(cfg_.intent_dim), d);
    visual_in_ = nn::Linear<T>(ps_, "in.visual", static_cast<Eigen::Index>(cfg_.visual_dim), d);
    query_in_ = nn::Linear<T>(ps_, "in.query", static_cast<Eigen::Index>(kStateDim), d);
    position_ = nn::Embedding<T>(ps_, "embed.position",
                                 static_cast<Eigen::Index>(cfg_.past_len + cfg_.max_future + 1), d);
    type_ = nn::Embedding<T>(ps_, "embed.type", kTokenTypes, d);
    for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
      const std::string n = "enc." + std::to_string(l);
      encoder_.push_back({nn::LayerNorm<T>(ps_, n + ".ln1", d), nn::MultiHeadAttention<T>(ps_, n + ".attn", d, heads),
                          nn::LayerNorm<T>(ps_, n + ".ln2", d), nn::Mlp<T>(ps_, n + ".mlp", d, mlp)});
    }
    enc_norm_ = nn::LayerNorm<T>(ps_, "enc.norm", d);
    time1_ = nn::Linear<T>(ps_, "time.fc1", static_cast<Eigen::Index>(cfg_.time_embed_dim), d);
    time2_ = nn::Linear<T>(ps_, "time.fc2", d, d);
    std::size_t site = 0;
    for (std::size_t l = 0; l < cfg_.pre_dec_layers; ++l) {
      const std::string n = "pre." + std::to_string(l);
      DecoderBlock b;
      b.ln_self = nn::LayerNorm<T>(ps_, n + ".ln_self", d);
      b.self_attn = nn::MultiHeadAttention<T>(ps_, n + ".self", d, heads);
      b.ln_mlp = nn::LayerNorm<T>(ps_, n + ".ln_mlp", d);
      b.mlp = nn::Mlp<T>(ps_, n + ".mlp", d, mlp);
      b.site = site;
      site += 2;
      pre_.push_back(std::move(b));
    }
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      const std::string n = "dec." + std::to_string(l);
      DecoderBlock b;
      b.ln_self = nn::LayerNorm<T>(ps_, n + ".ln_self", d);
      b.self_attn = nn::MultiHeadAttention<T>(ps_, n + ".self", d, heads);
      b.ln_cross = nn::LayerNorm<T>(ps_, n + ".ln_cross", d);
      b.cross_attn = nn::MultiHeadAttention<T>(ps_, n + ".cross", d, heads);
      b.ln_mlp = nn::LayerNorm<T>(ps_, n + ".ln_mlp", d);
      b.mlp = nn::Mlp<T>(ps_, n + ".mlp", d, mlp);
      b.cross = true;
      b.site = site;
      site += 3;
      decoder_.push_back(std::move(b));
    }
    out_norm_ = nn::LayerNorm<T>(ps_, "out.norm", d);
    out_site_ = site++;
    film_sites_ = site;
    // Zero-initialized so every FiLM starts as the identity.
    film_.weight = ps_.zeros("film.weight", d, 2 * d * static_cast<Eigen::Index>(film_sites_));
    film_.bias = ps_.zeros("film.bias", 1, 2 * d * static_cast<Eigen::Index>(film_sites_));
    out_ = nn::Linear<T>(ps_, "out.proj", d, static_cast<Eigen::Index>(kStateDim));
  }

  MotionExpert(const MotionExpert&) = delete;
  MotionExpert& operator=(const MotionExpert&) = delete;

  const MotionExpertConfig& config() const { return cfg_; }
  const PositionNormalizer& normalizer() const { return norm_; }
  void set_normalizer(const PositionNormalizer& n) { norm_ = n; }
  nn::ParameterStore<T>& parameters() { return ps_; }
  const nn::ParameterStore<T>& parameters() const { return ps_; }

  EncoderInput input_for(const TrajectorySample& s, const TrajectoryTokenBundle& b, FlowDiagnostics* diag = nullptr) const {
    return build_encoder_input(s, b, cfg_, norm_, diag);
  }

  /// Encodes a batch of inputs that share one token layout.
  Memory<T> encode(std::span<const EncoderInput> batch) const {
    if (batch.empty()) throw std::invalid_argument("encode: empty batch");
    const EncoderInput& first = batch.front();
    const auto m = static_cast<Eigen::Index>(first.size());
    for (const auto& in : batch) {
      if (in.size() != first.size()) throw ShapeMismatch("encode: inputs differ in token count");
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i].type != first[i].type) throw ShapeMismatch("encode: inputs differ in token layout");
      }
    }
    // Project each feature family, then scatter rows back into sequence order.
    std::vector<std::vector<double>> rows[3];
    std::vector<Eigen::Index> family_of, index_in_family;
    std::vector<Eigen::Index> positions, types;
    for (const auto& in : batch) {
      for (const auto& tok : in) {
        const int fam = is_temporal(tok.type) ? 0 : (tok.type == TokenType::Intent ? 1 : 2);
        const std::size_t want = fam == 0 ? kTemporalFeatures : (fam == 1 ? cfg_.intent_dim : cfg_.visual_dim);
        if (tok.features.size() != want) throw ShapeMismatch("encode: token feature width mismatch");
        family_of.push_back(fam);
        index_in_family.push_back(static_cast<Eigen::Index>(rows[fam].size()));
        rows[fam].push_back(tok.features);
        positions.push_back(is_temporal(tok.type) ? tok.position : 0);
        types.push_back(static_cast<Eigen::Index>(tok.type));
      }
    }
    const nn::Linear<T>* proj[3] = {&temporal_in_, &intent_in_, &visual_in_};
    std::vector<Tensor> parts;
    Eigen::Index offsets[3] = {0, 0, 0};
    Eigen::Index total = 0;
    for (int f = 0; f < 3; ++f) {
      offsets[f] = total;
      if (rows[f].empty()) continue;
      Mat x(static_cast<Eigen::Index>(rows[f].size()), static_cast<Eigen::Index>(rows[f].front().size()));
      for (std::size_t r = 0; r < rows[f].size(); ++r) {
        for (std::size_t c = 0; c < rows[f][r].size(); ++c) {
          x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<T>(rows[f][r][c]);
        }
      }
      parts.push_back((*proj[f])(Tensor::constant(std::move(x))));
      total += parts.back().rows();
    }
    std::vector<Eigen::Index> order(family_of.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = offsets[family_of[i]] + index_in_family[i];
    Tensor h = nn::gather_rows(parts.size() == 1 ? parts.front() : nn::concat_rows(parts), std::move(order));
    h = nn::add(h, nn::add(position_(std::move(positions)), type_(std::move(types))));
    for (const auto& blk : encoder_) {
      h = nn::add(h, blk.attn.self(blk.ln1(h), m));
      h = nn::add(h, blk.mlp(blk.ln2(h)));
    }
    Memory<T> mem;
    mem.tokens = enc_norm_(h);
    mem.batch = static_cast<Eigen::Index>(batch.size());
    mem.per_sample = m;
    for (const auto& blk : decoder_) {
      mem.keys.push_back(blk.cross_attn.k(mem.tokens));
      mem.values.push_back(blk.cross_attn.v(mem.tokens));
    }
    return mem;
  }

  Memory<T> encode(const TrajectorySample& s, const TrajectoryTokenBundle& b, FlowDiagnostics* diag = nullptr) const {
    const EncoderInput in = input_for(s, b, diag);
    return encode(std::span<const EncoderInput>(&in, 1));
  }

  /// Velocity for states `x` (batch * T rows of 18) at flow times `t` (one
  /// per batch element).
  Tensor velocity(const Memory<T>& mem, const Tensor& x, std::span<const double> t) const {
    const auto steps = static_cast<Eigen::Index>(cfg_.max_future);
    const auto d = static_cast<Eigen::Index>(cfg_.hidden_dim);
    const auto heads = static_cast<Eigen::Index>(cfg_.heads);
    if (static_cast<Eigen::Index>(t.size()) != mem.batch || x.rows() != mem.batch * steps ||
        x.cols() != static_cast<Eigen::Index>(kStateDim)) {
      throw ShapeMismatch("velocity: state must be (batch * T) x 18 with one time per batch element");
    }
    const auto e = static_cast<Eigen::Index>(cfg_.time_embed_dim);
    Mat se(mem.batch, e);
    for (Eigen::Index b = 0; b < mem.batch; ++b) {
      const auto emb = nn::sinusoidal_time_embedding(t[static_cast<std::size_t>(b)], cfg_.time_embed_dim);
      for (Eigen::Index c = 0; c < e; ++c) se(b, c) = static_cast<T>(emb[static_cast<std::size_t>(c)]);
    }
    const Tensor cond = nn::gelu(time2_(nn::gelu(time1_(Tensor::constant(std::move(se))))));
    const Tensor film = film_(cond);
    auto modulate = [&](const nn::LayerNorm<T>& ln, const Tensor& h, std::size_t site) {
      const auto off = static_cast<Eigen::Index>(2 * site) * d;
      const Tensor gamma = nn::add_scalar(nn::slice_cols(film, off, d), T(1));
      const Tensor beta = nn::slice_cols(film, off + d, d);
      return nn::film(ln(h), gamma, beta, steps);
    };

    std::vector<Eigen::Index> pos_ids, type_ids;
    for (Eigen::Index b = 0; b < mem.batch; ++b) {
      for (Eigen::Index i = 0; i < steps; ++i) {
        pos_ids.push_back(static_cast<Eigen::Index>(cfg_.past_len) + 1 + i);
        type_ids.push_back(static_cast<Eigen::Index>(TokenType::Query));
      }
    }
    Tensor h = nn::add(query_in_(x), nn::add(position_(std::move(pos_ids)), type_(std::move(type_ids))));
    for (const auto& blk : pre_) {
      h = nn::add(h, blk.self_attn.self(modulate(blk.ln_self, h, blk.site), steps));
      h = nn::add(h, blk.mlp(modulate(blk.ln_mlp, h, blk.site + 1)));
    }
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      const auto& blk = decoder_[l];
      h = nn::add(h, blk.self_attn.self(modulate(blk.ln_self, h, blk.site), steps));
      const Tensor q = blk.cross_attn.q(modulate(blk.ln_cross, h, blk.site + 1));
      h = nn::add(h, blk.cross_attn.o(nn::attention(q, mem.keys[l], mem.values[l], heads, steps, mem.per_sample)));
      h = nn::add(h, blk.mlp(modulate(blk.ln_mlp, h, blk.site + 2)));
    }
    return out_(modulate(out_norm_, h, out_site_));
  }

  /// Integrates from seeded standard-normal noise; returns normalized T x 18.
  Mat sample_flat(const Memory<T>& mem, std::uint64_t seed) const {
    if (mem.batch != 1) throw ShapeMismatch("sample: memory must hold a single conditioning input");
    nn::NoGradGuard<T> guard;
    const auto steps = static_cast<Eigen::Index>(cfg_.max_future);
    Mat x0(steps, static_cast<Eigen::Index>(kStateDim));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = static_cast<T>(n(rng));
    return euler_integrate(std::move(x0), cfg_.euler_steps, [&](const Mat& x, double t) {
      const double tt[1] = {t};
      return velocity(mem, Tensor::constant(x), tt).value();
    });
  }

  /// Converts normalized rows back to poses. Rotations that cannot be
  /// orthonormalized take the previous step's rotation (or `fallback`'s for
  /// the first step) and are counted.
  SampleOutput decode(const Mat& flat, const BiHandState* fallback = nullptr) const {
    SampleOutput out;
    Rotation6D prev[2];
    if (fallback) {
      prev[0] = fallback->left.rotation;
      prev[1] = fallback->right.rotation;
    }
    for (Eigen::Index i = 0; i < flat.rows(); ++i) {
      BiHandState st;
      st.timestamp = static_cast<double>(i + 1) / cfg_.fps;
      for (Hand hand : kHands) {
        const auto h = static_cast<Eigen::Index>(hand);
        Pose6DoF& p = st.pose(hand);
        for (int c = 0; c < 3; ++c) p.position[c] = norm_.inverse(static_cast<double>(flat(i, 3 * h + c)), c);
        Rotation6D r;
        for (std::size_t c = 0; c < 6; ++c) {
          r[c] = static_cast<double>(flat(i, static_cast<Eigen::Index>(kPosDim) + 6 * h + static_cast<Eigen::Index>(c)));
        }
        try {
          p.rotation = matrix_to_rot6d(rot6d_to_matrix(r));
        } catch (const DegenerateRotation&) {
          p.rotation = prev[static_cast<std::size_t>(h)];
          ++out.degenerate_rotations;
        }
        prev[static_cast<std::size_t>(h)] = p.rotation;
      }
      out.trajectory.push_back(st);
    }
    return out;
  }

  SampleOutput sample(const Memory<T>& mem, std::uint64_t seed, const BiHandState* last_observed = nullptr) const {
    return decode(sample_flat(mem, seed), last_observed);
  }

  /// K trajectories from sub-seeds mix_seed(master, i), i = 0..K-1.
  std::vector<SampleOutput> predict_best_of_k(const TrajectorySample& s, const TrajectoryTokenBundle& b, std::size_t k,
                                              std::uint64_t master_seed, FlowDiagnostics* diag = nullptr) const {
    if (k < 1) throw std::invalid_argument("predict_best_of_k: k must be >= 1");
    nn::NoGradGuard<T> guard;
    const Memory<T> mem = encode(s, b, diag);
    const BiHandState* last = s.past.empty() ? nullptr : &s.past.back();
    std::vector<SampleOutput> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      out.push_back(sample(mem, mix_seed(master_seed, i), last));
      if (diag) diag->degenerate_rotations += out.back().degenerate_rotations;
    }
    return out;
  }

  nlohmann::json describe() const {
    nlohmann::json j;
    j["model"] = cfg_;
    j["normalizer"] = norm_;
    return j;
  }

 private:
  struct EncoderBlock {
    nn::LayerNorm<T> ln1;
    nn::MultiHeadAttention<T> attn;
    nn::LayerNorm<T> ln2;
    nn::Mlp<T> mlp;
  };
  struct DecoderBlock {
    nn::LayerNorm<T> ln_self, ln_cross, ln_mlp;
    nn::MultiHeadAttention<T> self_attn, cross_attn;
    nn::Mlp<T> mlp;
    bool cross = false;
    std::size_t site = 0;
  };

  MotionExpertConfig cfg_;
  PositionNormalizer norm_;
  nn::ParameterStore<T> ps_;
  nn::Linear<T> temporal_in_, intent_in_, visual_in_, query_in_;
  nn::Embedding<T> position_, type_;
  std::vector<EncoderBlock> encoder_;
  nn::LayerNorm<T> enc_norm_;
  nn::Linear<T> time1_, time2_, film_;
  std::vector<DecoderBlock> pre_, decoder_;
  nn::LayerNorm<T> out_norm_;
  nn::Linear<T> out_;
  std::size_t out_site_ = 0;
  std::size_t film_sites_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct TrainStepResult {
  double loss = 0.0;
  double position_mse = 0.0;
  double rotation_mse = 0.0;
  double learning_rate = 0.0;
  std::size_t step = 0;
};

/// One optimizer step per call. The noise and flow times of step s come from
/// mix_seed(seed, s), so a resumed run replays the same draws.
template <typename T>
class FlowTrainer {
 public:
  FlowTrainer(MotionExpert<T>& model, nn::OptimizerConfig opt, std::uint64_t seed)
      : model_(model), opt_(opt), seed_(seed) {}

  std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }
  nn::AdamW<T>& optimizer() { return opt_; }
  const FlowDiagnostics& diagnostics() const { return diag_; }

  TrainStepResult train_step(std::span<const TrajectorySample* const> samples,
                             std::span<const TrajectoryTokenBundle* const> bundles, const LossWeights& w) {
    if (samples.empty() || samples.size() != bundles.size()) {
      throw std::invalid_argument("train_step: need a non-empty batch with one bundle per sample");
    }
    const MotionExpertConfig& cfg = model_.config();
    const auto steps = static_cast<Eigen::Index>(cfg.max_future);
    const auto b = static_cast<Eigen::Index>(samples.size());
    const auto width = static_cast<Eigen::Index>(kStateDim);
    ++step_;
    std::mt19937_64 rng(mix_seed(seed_, step_));
    std::uniform_real_distribution<double> ut(0.0, 1.0);
    std::normal_distribution<double> nz(0.0, 1.0);

    std::vector<EncoderInput> inputs;
    inputs.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) inputs.push_back(model_.input_for(*samples[i], *bundles[i], &diag_));

    std::vector<double> t(samples.size());
    for (double& x : t) x = ut(rng);
    nn::Mat<T> x0(b * steps, width), x1(b * steps, width), mask(b * steps, width), xt(b * steps, width);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = static_cast<T>(nz(rng));
    for (Eigen::Index i = 0; i < b; ++i) {
      nn::Mat<T> tgt, m;
      flow_target<T>(*samples[static_cast<std::size_t>(i)], cfg, model_.normalizer(), tgt, m);
      x1.middleRows(i * steps, steps) = tgt;
      mask.middleRows(i * steps, steps) = m;
      const T ti = static_cast<T>(t[static_cast<std::size_t>(i)]);
      xt.middleRows(i * steps, steps) = (T(1) - ti) * x0.middleRows(i * steps, steps) + ti * tgt;
    }

    nn::reset_tape<T>();
    model_.parameters().zero_grad();
    const Memory<T> mem = model_.encode(inputs);
    const nn::Tensor<T> v = model_.velocity(mem, nn::Tensor<T>::constant(std::move(xt)), t);
    const auto n = static_cast<std::size_t>(v.value().size());
    const FmLossResult<T> fm = fm_loss<T>(std::span<const T>(v.value().data(), n), std::span<const T>(x0.data(), n),
                                          std::span<const T>(x1.data(), n), std::span<const T>(mask.data(), n),
                                          static_cast<T>(w.rot_weight_fm));
    if (!std::isfinite(static_cast<double>(fm.value))) {
      throw NumericalFailure("non-finite flow-matching loss at step " + std::to_string(step_));
    }
    nn::Mat<T> grad(v.rows(), v.cols());
    std::copy(fm.grad.begin(), fm.grad.end(), grad.data());
    nn::backward(nn::external_loss(v, fm.value, std::move(grad)));
    TrainStepResult r;
    r.learning_rate = opt_.step(model_.parameters(), step_);
    nn::reset_tape<T>();
    r.loss = static_cast<double>(fm.value);
    r.position_mse = static_cast<double>(fm.position_mse);
    r.rotation_mse = static_cast<double>(fm.rotation_mse);
    r.step = step_;
    return r;
  }

 private:
  MotionExpert<T>& model_;
  nn::AdamW<T> opt_;
  std::uint64_t seed_;
  std::size_t step_ = 0;
  FlowDiagnostics diag_;
};

}  // namespace egoman
