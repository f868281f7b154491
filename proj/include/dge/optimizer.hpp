#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dge/tensor.hpp"

namespace dge {

// Named parameter slot. The optimizer and checkpoint code iterate these in
// registration order, which therefore must be deterministic.
template <class T>
struct Param {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
class AdamW {
 public:
  struct Options {
    T lr = T(3e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0.05);
  };

  explicit AdamW(Options opt) : opt_(opt) {}

  std::size_t step_count() const { return step_; }
  Options& options() { return opt_; }

  // Applies one update to every parameter that has a gradient. Parameters
  // whose grad was never populated this step are skipped.
  void step(std::vector<Param<T>>& params) {
    ++step_;
    if (moments_.size() != params.size()) moments_.resize(params.size());
    const T bc1 = T(1) - std::pow(opt_.beta1, T(step_));
    const T bc2 = T(1) - std::pow(opt_.beta2, T(step_));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      if (!p.tensor.has_grad()) continue;
      const auto& g = p.tensor.grad();
      auto& w = p.tensor.raw_value();
      auto& m = moments_[pi];
      if (m.m.size() != w.size()) {
        m.m.assign(w.size(), T(0));
        m.v.assign(w.size(), T(0));
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(static_cast<double>(g[i])))
          throw std::runtime_error("optimizer: non-finite gradient in " +
                                   p.name);
        m.m[i] = opt_.beta1 * m.m[i] + (T(1) - opt_.beta1) * g[i];
        m.v[i] = opt_.beta2 * m.v[i] + (T(1) - opt_.beta2) * g[i] * g[i];
        const T mhat = m.m[i] / bc1;
        const T vhat = m.v[i] / bc2;
        // Decoupled weight decay: shrink first, then apply the Adam step.
        w[i] -= opt_.lr * opt_.weight_decay * w[i];
        w[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }

  void zero_grad(std::vector<Param<T>>& params) {
    for (auto& p : params) p.tensor.drop_grad();
  }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  Options opt_;
  std::vector<Moments> moments_;
  std::size_t step_ = 0;
};

}  // namespace dge
