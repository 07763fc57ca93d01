#pragma once

// Deterministic text embedding used in place of a learned text encoder:
// a signed hashed bag of lowercase word tokens, L2-normalized.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "egoman/hash.hpp"
#include "egoman/trajectory.hpp"

namespace egoman {

inline constexpr std::size_t kDefaultEmbeddingDim = 64;
inline constexpr std::uint64_t kDefaultEmbeddingSeed = 0x45474f4d414eULL;

inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Each token adds +-1 to one bucket chosen by its hash.
inline ActionEmbedding intent_embedding(std::string_view text, std::size_t dim = kDefaultEmbeddingDim,
                                        std::uint64_t seed = kDefaultEmbeddingSeed) {
  if (dim == 0) throw std::invalid_argument("intent_embedding: dim must be positive");
  const auto tokens = word_tokens(text);
  if (tokens.empty()) throw std::invalid_argument("intent_embedding: text has no word tokens");
  ActionEmbedding e;
  e.z.assign(dim, 0.0);
  for (const auto& t : tokens) {
    const std::uint64_t h = fnv1a64(t, seed);
    e.z[static_cast<std::size_t>(h % dim)] += (h >> 63) != 0 ? 1.0 : -1.0;
  }
  double n = 0.0;
  for (double x : e.z) n += x * x;
  n = std::sqrt(n);
  // Colliding tokens with opposite signs can cancel out entirely.
  if (n == 0.0) {
    e.z[static_cast<std::size_t>(fnv1a64(text, seed) % dim)] = 1.0;
    return e;
  }
  for (double& x : e.z) x /= n;
  return e;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
}

}  // namespace egoman
