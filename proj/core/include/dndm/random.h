#ifndef DNDM_RANDOM_H_
#define DNDM_RANDOM_H_

#include <cstdint>
#include <random>
#include <string_view>

namespace dndm {

using Rng = std::mt19937_64;

// Mixes a master seed, a stream name and an index into an independent seed,
// so that e.g. the deep branch init never shares a stream with batching.
uint64_t DeriveSeed(uint64_t seed, std::string_view stream, uint64_t index = 0);

inline Rng MakeRng(uint64_t seed, std::string_view stream, uint64_t index = 0) {
  return Rng(DeriveSeed(seed, stream, index));
}

}  // namespace dndm

#endif  // DNDM_RANDOM_H_
