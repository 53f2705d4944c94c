#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace stainshift::rng {

// splitmix64-style mixer for deriving independent seed streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::string serialize(const std::mt19937_64& engine) {
  std::ostringstream out;
  out << engine;
  return out.str();
}

inline std::mt19937_64 deserialize(const std::string& state) {
  std::mt19937_64 engine;
  std::istringstream in(state);
  in >> engine;
  if (in.fail()) {
    throw std::runtime_error("rng: corrupt engine state");
  }
  return engine;
}

}  // namespace stainshift::rng
