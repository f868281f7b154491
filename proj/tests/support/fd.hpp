#pragma once

// Central finite-difference oracle for gradient checks. Losses are rebuilt
// from scratch on every evaluation so perturbed leaf values propagate.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dge/tensor.hpp"

namespace fd {

// rel = |a - n| / max(|a|, |n|, 1): absolute comparison for small gradients,
// relative for large ones.
inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1.0});
}

struct Report {
  double max_rel = 0;
  std::string where;
};

// make_loss() must rebuild the full forward graph reading the leaves' current
// values. Returns the worst relative error across every element of every leaf.
inline Report check(std::vector<dge::Tensor<double>> leaves,
                    const std::function<dge::Tensor<double>()>& make_loss,
                    double h = 1e-5) {
  dge::Tensor<double> loss = make_loss();
  for (auto& l : leaves) l.zero_grad();
  dge::backward(loss);

  Report rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::vector<double> analytic = leaf.grad();
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double keep = leaf.raw_value()[i];
      double fplus, fminus;
      {
        dge::NoGradGuard ng;
        leaf.raw_value()[i] = keep + h;
        fplus = make_loss().item();
        leaf.raw_value()[i] = keep - h;
        fminus = make_loss().item();
        leaf.raw_value()[i] = keep;
      }
      const double numeric = (fplus - fminus) / (2 * h);
      const double e = rel_err(analytic[i], numeric);
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.where = "leaf " + std::to_string(li) + " element " +
                    std::to_string(i) + ": analytic " +
                    std::to_string(analytic[i]) + " vs fd " +
                    std::to_string(numeric);
      }
    }
  }
  return rep;
}

// Deterministic filler for test inputs.
inline std::vector<double> ramp(std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = lo + (hi - lo) * (n == 1 ? 0.5 : double(i) / double(n - 1));
  return v;
}

}  // namespace fd
