#pragma once

// Self-describing binary checkpoints.
//
//   "EGOMANCK"            8-byte magic
//   uint64 (LE)           length of the JSON header
//   JSON header           format, version, scalar type, parameter names and
//                         shapes, step, epoch, config and its hash
//   raw scalars           parameter values, then (optionally) the Adam first
//                         and second moments, all in header order

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "egoman/error.hpp"
#include "egoman/hash.hpp"
#include "egoman/nn/optim.hpp"

namespace egoman::nn {

inline constexpr char kCheckpointMagic[8] = {'E', 'G', 'O', 'M', 'A', 'N', 'C', 'K'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  nlohmann::json config = nlohmann::json::object();
  std::size_t step = 0;
  std::size_t epoch = 0;
  nlohmann::json extra = nlohmann::json::object();

  std::string config_hash() const { return hex64(fnv1a64(config.dump())); }
};

template <typename T>
constexpr const char* scalar_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& ps, const AdamW<T>* opt,
                     const CheckpointMeta& meta) {
  const bool with_opt = opt != nullptr && opt->first_moment().size() == ps.entries().size();
  nlohmann::json header;
  header["format"] = "egoman-checkpoint";
  header["version"] = kCheckpointVersion;
  header["scalar"] = scalar_name<T>();
  header["step"] = meta.step;
  header["epoch"] = meta.epoch;
  header["config"] = meta.config;
  header["config_hash"] = meta.config_hash();
  header["extra"] = meta.extra;
  header["has_optimizer_state"] = with_opt;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : ps.entries()) params.push_back({{"name", e.name}, {"shape", {e.tensor.rows(), e.tensor.cols()}}});
  header["params"] = params;
  const std::string text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t len = text.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto dump = [&out](const Mat<T>& m) {
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(T) * m.size()));
    };
    for (const auto& e : ps.entries()) dump(e.tensor.value());
    if (with_opt) {
      for (const auto& m : opt->first_moment()) dump(m);
      for (const auto& v : opt->second_moment()) dump(v);
    }
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads values into an already-constructed store with matching names and
/// shapes; restores optimizer moments when `opt` is given and present.
template <typename T>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, ParameterStore<T>& ps, AdamW<T>* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ParseError(path.string() + ": not an egoman checkpoint");
  unsigned char lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lenbuf[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path.string() + ": truncated checkpoint header");
  const nlohmann::json header = nlohmann::json::parse(text);
  if (header.at("scalar").get<std::string>() != scalar_name<T>()) {
    throw ParseError(path.string() + ": scalar type mismatch");
  }
  const auto& params = header.at("params");
  if (params.size() != ps.entries().size()) throw ParseError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = ps.entries()[i];
    if (params[i].at("name").get<std::string>() != e.name ||
        params[i].at("shape")[0].get<Eigen::Index>() != e.tensor.rows() ||
        params[i].at("shape")[1].get<Eigen::Index>() != e.tensor.cols()) {
      throw ParseError(path.string() + ": parameter layout differs at " + e.name);
    }
  }
  auto fill = [&in, &path](Mat<T>& m) {
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(T) * m.size()));
    if (!in) throw ParseError(path.string() + ": truncated checkpoint data");
  };
  for (auto& e : ps.entries()) fill(e.tensor.mutable_value());
  if (opt != nullptr && header.at("has_optimizer_state").get<bool>()) {
    auto& m = opt->first_moment();
    auto& v = opt->second_moment();
    m.clear();
    v.clear();
    for (const auto& e : ps.entries()) m.push_back(Mat<T>(e.tensor.rows(), e.tensor.cols()));
    for (const auto& e : ps.entries()) v.push_back(Mat<T>(e.tensor.rows(), e.tensor.cols()));
    for (auto& x : m) fill(x);
    for (auto& x : v) fill(x);
  }
  CheckpointMeta meta;
  meta.config = header.at("config");
  meta.step = header.at("step").get<std::size_t>();
  meta.epoch = header.at("epoch").get<std::size_t>();
  meta.extra = header.value("extra", nlohmann::json::object());
  if (header.at("config_hash").get<std::string>() != meta.config_hash()) {
    throw ParseError(path.string() + ": config hash does not match stored config");
  }
  return meta;
}

/// Reads only the JSON header.
inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ParseError(path.string() + ": not an egoman checkpoint");
  unsigned char lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lenbuf[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path.string() + ": truncated checkpoint header");
  return nlohmann::json::parse(text);
}

}  // namespace egoman::nn
