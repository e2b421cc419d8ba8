#pragma once

#include <cstdint>
#include <random>

namespace twophase {

// The project-wide generator is std::mt19937_64. Every randomized routine
// takes an explicit engine; nothing draws from hidden global state. Runs are
// reproducible for a fixed build (stdlib distributions are deterministic for
// a given standard library, cross-toolchain bit equality is not promised).
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from (master, stream). Used to give
// each simulation replication its own engine so that results do not depend
// on scheduling or thread count.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream + 0x51ED270B27F5E0ull));
}

inline Rng make_rng(std::uint64_t master, std::uint64_t stream) {
  return Rng(derive_seed(master, stream));
}

}  // namespace twophase
