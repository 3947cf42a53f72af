#pragma once

#include <cstdint>
#include <initializer_list>

namespace ribtoy {

// splitmix64: tiny stateless mixer, used to derive independent RNG streams
// from (seed, tag, index) tuples so results never depend on execution order.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Chains splitmix64 over a tuple of words; order-sensitive by design.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t w : words) h = splitmix64(h ^ w);
  return h;
}

}  // namespace ribtoy
