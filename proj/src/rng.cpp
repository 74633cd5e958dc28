#include "tqlab/rng.hpp"

#include <cmath>

namespace tqlab {
namespace {

// splitmix64 finalizer; also used as the per-draw state transition.
std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

std::uint64_t RngStream::next_u64() {
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double RngStream::u01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::exponential() {
  // 1 - u01() is in (0, 1], so the log is finite.
  return -std::log(1.0 - u01());
}

StreamKey::StreamKey(std::uint64_t root_seed) : hash_(mix(root_seed ^ 0xa5a5a5a5a5a5a5a5ull)) {}

StreamKey StreamKey::with(std::string_view component) const {
  StreamKey out = *this;
  out.hash_ = mix(fnv1a(component, hash_ ^ 0xcbf29ce484222325ull));
  return out;
}

StreamKey StreamKey::with(std::uint64_t component) const {
  StreamKey out = *this;
  out.hash_ = mix(hash_ ^ mix(component ^ 0x9e3779b97f4a7c15ull));
  return out;
}

}  // namespace tqlab
