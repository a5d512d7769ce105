#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace cwd {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// FNV-1a, used to name random streams.
inline std::uint64_t stream_tag(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of a named sub-stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept {
  return splitmix64(seed ^ splitmix64(stream_tag(name)));
}

/// Independent engine for a named purpose ("init", "noise", "mask", ...) derived
/// from one run seed, so variants of a run can share some streams exactly.
inline std::mt19937_64 named_stream(std::uint64_t seed, std::string_view name) {
  return std::mt19937_64(derive_seed(seed, name));
}

/// Uniform in (0, 1) from a 64-bit hash; 52 bits keep the top value below 1.
inline double hash_uniform(std::uint64_t h) noexcept {
  return (static_cast<double>(h >> 12) + 0.5) * 0x1.0p-52;
}

/// Standard normal from two hashes (Box-Muller).
inline double hash_normal(std::uint64_t h1, std::uint64_t h2) noexcept {
  const double u1 = hash_uniform(h1);
  const double u2 = hash_uniform(h2);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace cwd
