// Deterministic splittable RNG. Streams are derived from a root seed plus a
// key path (prompt id, decoder, step, candidate, ...); equal keys always
// reproduce the same stream, distinct keys give independent streams. No
// std::random distributions are used anywhere so output is identical across
// standard-library implementations.
#pragma once

#include <cstdint>
#include <string_view>

namespace tqlab {

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double u01();

  // Exponential(1) via inversion; building block for Dirichlet sampling.
  double exponential();

 private:
  std::uint64_t state_;
};

// Key-path hashing: fold components into a 64-bit seed.
class StreamKey {
 public:
  explicit StreamKey(std::uint64_t root_seed);
  StreamKey with(std::string_view component) const;
  StreamKey with(std::uint64_t component) const;
  RngStream stream() const { return RngStream(hash_); }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_;
};

}  // namespace tqlab
