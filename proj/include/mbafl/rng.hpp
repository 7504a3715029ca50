#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mbafl {

// Independent random streams. Every draw in a run comes from a generator
// seeded by (run seed, stream, coordinates), so results never depend on
// the order in which clients are processed and a resumed run needs no saved
// generator state.
enum class Stream : std::uint64_t {
  selection = 1,
  training = 2,
  noise = 3,
  partition = 4,
  poison = 5,
  trigger = 6,
  init = 7,
  detector = 8,
  subset = 9,
  embedding = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream,
                                 std::initializer_list<std::uint64_t> coords = {}) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream)));
  for (auto c : coords) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, Stream stream,
                                std::initializer_list<std::uint64_t> coords = {}) {
  return std::mt19937_64(derive_seed(seed, stream, coords));
}

}  // namespace mbafl
