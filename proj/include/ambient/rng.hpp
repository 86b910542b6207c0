#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ambient {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);
/// Order-sensitive combination of seeds, e.g. mix_seeds(root, round, client).
std::uint64_t mix_seeds(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seeds(std::uint64_t a, std::uint64_t b, std::uint64_t c);

/// Deterministic generator. std::mt19937_64's output sequence is fixed by the
/// standard; the conversions to doubles below are done by hand so results do
/// not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ambient
