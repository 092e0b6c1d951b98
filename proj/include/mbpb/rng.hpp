#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mbpb {

using Rng = std::mt19937_64;

/// Named sub-streams fanned out from one master seed.
enum class Stream : std::uint64_t {
  kData = 1,
  kInit = 2,
  kNoise = 3,
  kPairing = 4,
  kShuffle = 5,
  kEval = 6,
  kInference = 7,
  kRct = 8,
  kHeldout = 9,
  kDiagnostic = 10,
};

std::uint64_t splitmix64(std::uint64_t x);

/// Deterministic seed for (master, stream, index); distinct triples give
/// statistically independent generators.
std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

}  // namespace mbpb
