#pragma once

#include <cstdint>

namespace dge {

// Multiply-accumulate tally for the matrix kernels. Off by default; the
// complexity report cross-check enables it around an inference pass.
struct MacCounter {
  static std::uint64_t& total() {
    thread_local std::uint64_t v = 0;
    return v;
  }
  static bool& enabled() {
    thread_local bool on = false;
    return on;
  }
  static void add(std::uint64_t n) {
    if (enabled()) total() += n;
  }
};

class MacCountGuard {
 public:
  MacCountGuard() {
    MacCounter::total() = 0;
    MacCounter::enabled() = true;
  }
  ~MacCountGuard() { MacCounter::enabled() = false; }
  MacCountGuard(const MacCountGuard&) = delete;
  MacCountGuard& operator=(const MacCountGuard&) = delete;

  std::uint64_t count() const { return MacCounter::total(); }
};

}  // namespace dge
