#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "decontext/tensor.hpp"

namespace decontext {

/// Counter-based generator: draw i is a pure function of (seed, tag, i).
///
/// Streams with different purpose tags are independent, so consumers that
/// need randomness (noise draws, prompt sampling, initialisation) each derive
/// their own stream instead of sharing one sequence.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view tag, std::uint64_t counter = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& tag() const noexcept { return tag_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform double in [0, 1).
  double uniform();
  /// Uniform integer in [lo, hi], inclusive.
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi);
  /// Standard normal via Box-Muller; consumes two counters per draw.
  double normal();

  Tensor normal_tensor(const Shape& shape);
  TensorD normal_tensor_d(const Shape& shape);

  /// Independent stream keyed by this stream's seed and `tag/sub`.
  Rng derive(std::string_view sub) const;
  Rng derive(std::string_view sub, std::uint64_t index) const;

 private:
  std::uint64_t seed_;
  std::string tag_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace decontext
