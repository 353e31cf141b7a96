#pragma once

#include <cstdint>
#include <initializer_list>

namespace mssr {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive hash of a seed and a path of indices. Streams keyed by
// (seed, epoch, track, ...) are independent of the order they are drawn in.
template <typename... Parts>
constexpr std::uint64_t derive_seed(std::uint64_t seed, Parts... parts) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t p : std::initializer_list<std::uint64_t>{static_cast<std::uint64_t>(parts)...}) {
    h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  }
  return h;
}

}  // namespace mssr
