#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <initializer_list>

namespace rswap {

// splitmix64 finalizer; used to derive independent stream seeds.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
  uint64_t h = 0x6a09e667f3bcc908ULL;
  for (uint64_t p : parts) h = mix_seed(h ^ mix_seed(p));
  return h;
}

torch::Generator make_generator(uint64_t seed);

}  // namespace rswap
