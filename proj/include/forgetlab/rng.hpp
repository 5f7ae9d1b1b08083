#pragma once

#include <cstdint>
#include <string_view>

namespace forgetlab::numerics {

/// Counter-based generator: draw i is splitmix64(key + i * golden).
///
/// The whole state is (key, counter), so a generator can be checkpointed as
/// two integers and replayed exactly on any platform. `split(label)` derives
/// a child key from the parent key and a label hash without advancing the
/// parent; distinct labels give unrelated streams.
class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  static std::uint64_t mix(std::uint64_t z) noexcept;
  static std::uint64_t hash_label(std::string_view label) noexcept;

  Rng split(std::string_view label) const noexcept;
  Rng split(std::uint64_t index) const noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  bool coin() noexcept { return (next_u64() >> 63) != 0; }
  /// Standard normal via Box-Muller (one draw per pair of uniforms, no caching).
  double normal() noexcept;
  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  bool operator==(const Rng&) const = default;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace forgetlab::numerics
