#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace loopdet {

// All randomness flows through explicitly derived streams so that every
// replica / band / study owns an independent generator addressed by
// (seed, tag, indices...).  Results assembled in index order are therefore
// bitwise-reproducible for a fixed seed, independent of the worker count.
using Rng = std::mt19937_64;

// Stable stream tags.  Values are part of the reproducibility contract:
// changing them changes every derived stream.
namespace stream {
inline constexpr std::uint64_t soup_replica = 1;
inline constexpr std::uint64_t pilot = 2;
inline constexpr std::uint64_t bridge_study = 3;
inline constexpr std::uint64_t gff = 4;
inline constexpr std::uint64_t campbell = 5;
inline constexpr std::uint64_t tail_fit = 6;
inline constexpr std::uint64_t conformal = 7;
inline constexpr std::uint64_t ladder = 8;
}  // namespace stream

inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  // seed_seq wants 32-bit words; feed both halves of every 64-bit id.
  std::vector<std::uint32_t> words;
  words.reserve(2 * (path.size() + 1));
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (std::uint64_t id : path) push(id);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

}  // namespace loopdet
