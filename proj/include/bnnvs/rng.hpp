#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace bnnvs {

// SplitMix64 finalizer. Used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

/// Reproducible random stream: mt19937_64 keyed by (seed, stream id).
///
/// Uniforms use the top 53 bits of one engine output and normals use the
/// Box-Muller transform (cached pair), so results are identical across
/// standard libraries, unlike std::normal_distribution.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : engine_(derive_seed(seed, stream)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace bnnvs
