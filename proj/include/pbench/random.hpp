#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "pbench/types.hpp"

namespace pbench {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; mixes a stream of integers into an independent seed.
inline Seed derive_seed(Seed base, std::initializer_list<std::uint64_t> stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  Seed s = mix(base);
  for (auto v : stream) s = mix(s ^ mix(v));
  return s;
}

}  // namespace pbench
