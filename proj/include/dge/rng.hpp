#pragma once

#include <cmath>
#include <cstdint>

namespace dge {

// SplitMix64 step. Small state, full 64-bit period, no platform-dependent
// behavior, so sequences are bit-identical across runs.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Uniform draws feeding log-transforms are clamped away from {0, 1} so the
// transforms stay finite.
inline constexpr double kUniformFloor = 1e-9;

inline double gumbel_from_uniform(double u) {
  if (u < kUniformFloor) u = kUniformFloor;
  if (u > 1.0 - kUniformFloor) u = 1.0 - kUniformFloor;
  return -std::log(-std::log(u));
}

// Deterministic random stream identified by a (seed, stream) pair.
// Equal pairs yield equal sequences; distinct stream ids give streams that
// are independent for practical purposes.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}

  RngStream(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed;
    const std::uint64_t a = splitmix64(s);
    s = stream ^ 0xD1B54A32D192ED03ULL;
    const std::uint64_t b = splitmix64(s);
    state_ = a ^ (b + 0x9E3779B97F4A7C15ULL);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double gumbel() { return gumbel_from_uniform(uniform()); }

  // Box-Muller; the second member of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < kUniformFloor) u1 = kUniformFloor;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n), n > 0. Fixed-point multiply avoids modulo bias.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

 private:
  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dge
