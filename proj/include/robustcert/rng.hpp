#ifndef ROBUSTCERT_RNG_HPP
#define ROBUSTCERT_RNG_HPP

#include <cstdint>
#include <random>
#include <string_view>

namespace robustcert {

using Rng = std::mt19937_64;

/// Independent generator for a named purpose ("data", "init", "attack", ...)
/// derived from one run seed.
inline Rng substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

}  // namespace robustcert

#endif  // ROBUSTCERT_RNG_HPP
