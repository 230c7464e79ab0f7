#pragma once

#include <cstdint>
#include <random>

namespace agnofed {

using Rng = std::mt19937_64;

// Independent stream tags derived from one master seed.
enum class StreamTag : std::uint64_t {
  kParticipation = 1,
  kMinibatch = 2,
  kData = 3,
  kConstants = 4,
  kVerify = 5,
  kMarginals = 6,
};

// Derives a reproducible stream from (master seed, tag, index). Distinct
// (tag, index) pairs give statistically independent streams.
inline Rng make_stream(std::uint64_t master, StreamTag tag, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

}  // namespace agnofed
