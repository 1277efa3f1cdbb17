#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "ominictl/tensor.hpp"

namespace omini {

// Portable random source. std::mt19937_64 is bit-specified by the standard;
// the distributions below are implemented here so streams are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  // Uniform on the open interval (0, 1).
  double uniform_open();
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();
  Tensor normal_tensor(std::vector<std::size_t> shape, double stddev);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Deterministic seed derivation for independent streams.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

}  // namespace omini
