#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace movelab {

/// Deterministic xoshiro256** generator seeded through splitmix64.
/// Integer draws are reproducible across platforms; floating-point draws are
/// reproducible on a given platform (they go through libm).
class Rng {
 public:
  explicit Rng(uint64_t seed);

  /// Independent stream derived from (seed, name). Used for per-tensor
  /// parameter init so that adding tensors to a model never shifts the
  /// streams of existing ones.
  static Rng for_name(uint64_t seed, std::string_view name);

  uint64_t next_u64();
  /// Uniform in [0, n) by rejection; n > 0.
  int64_t uniform_int(int64_t n);
  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();

  void shuffle(std::span<int64_t> values);

 private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace movelab
