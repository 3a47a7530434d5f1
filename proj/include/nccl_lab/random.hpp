// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace nccl_lab {

using Rng = std::mt19937_64;

// Independent, reproducible stream for a named purpose within one run. Keeping
// streams separate means that turning a feature off never shifts the draws of
// any other component.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return Rng(mix(mix(seed) ^ (stream * 0xd1b54a32d192ed03ULL)));
}

enum Stream : std::uint64_t {
  kStreamData = 1,
  kStreamInit = 2,
  kStreamBatch = 3,
  kStreamMix = 4,
  kStreamBuffer = 5,
  kStreamProbe = 6,
  kStreamEtf = 7,
};

}  // namespace nccl_lab
