#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dge/partition.hpp"
#include "dge/tensor.hpp"

namespace dge {

// One granularity decision per region. In inference mode only theta is
// populated; the p path exists solely to carry gradients during training.
template <class T>
struct GatingDecision {
  Tensor<T> logits;              // R x K
  Tensor<T> noise;               // R x K, detached; undefined in inference
  std::vector<std::size_t> theta;  // chosen candidate per region
  Tensor<T> p;                   // soft score per region; undefined in inference
  T tau = T(1);
  bool training = false;
};

template <class T>
struct SparseQuerySet {
  Tensor<T> q;                                  // N x C
  std::vector<std::size_t> region_of_query;     // N
  std::vector<std::vector<std::size_t>> origin;  // N: valid token indices
  std::vector<std::size_t> n_per_region;        // R
  std::vector<long> assign;                     // H*W: token -> query, -1 if none
};

// Region means of the valid tokens, projected to K logits.
template <class T>
Tensor<T> gating_logits(const Tensor<T>& tokens, const RegionPartition& part,
                        const Tensor<T>& W, const Tensor<T>& b) {
  if (tokens.rows() != part.H * part.W || tokens.cols() != part.C)
    throw std::invalid_argument("gating_logits: tokens " +
                                shape_str(tokens.shape()) +
                                " do not match partition " +
                                std::to_string(part.H) + "x" +
                                std::to_string(part.W) + "x" +
                                std::to_string(part.C));
  if (W.rows() != part.C || W.cols() != part.gran.K())
    throw std::invalid_argument("gating_logits: weight " +
                                shape_str(W.shape()) + " does not match CxK");
  Tensor<T> means = pool_rows(tokens, part.region_tokens);
  return add_rowvec(matmul(means, W), b);
}

template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& m) {
  const std::size_t R = m.rows(), K = m.cols();
  std::vector<std::size_t> out(R);
  for (std::size_t i = 0; i < R; ++i) {
    const T* row = m.value().data() + i * K;
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (row[k] > row[best]) best = k;  // ties keep the smallest index
    out[i] = best;
  }
  return out;
}

// Plain argmax per region. No sampling, no exponentials.
template <class T>
std::vector<std::size_t> select_inference(const Tensor<T>& logits) {
  return argmax_rows(logits);
}

// Noisy argmax plus the soft score of the winner. The noise tensor is
// detached: gradients reach the logits only through the softmax.
template <class T>
GatingDecision<T> select_training_with_noise(const Tensor<T>& logits,
                                             const Tensor<T>& noise, T tau) {
  if (tau <= T(0))
    throw std::invalid_argument("select_training: temperature must be positive");
  if (noise.shape() != logits.shape())
    throw std::invalid_argument("select_training: noise shape " +
                                shape_str(noise.shape()) +
                                " does not match logits " +
                                shape_str(logits.shape()));
  GatingDecision<T> d;
  d.logits = logits;
  d.noise = noise;
  d.tau = tau;
  d.training = true;
  Tensor<T> y = scale(add(logits, noise), T(1) / tau);
  d.theta = argmax_rows(y);
  d.p = gather_per_row(softmax(y, 1), d.theta);
  return d;
}

template <class T>
GatingDecision<T> select_training(const Tensor<T>& logits, RngStream& rng,
                                  T tau = T(1)) {
  Tensor<T> g = gumbel_sample<T>(rng, logits.shape());
  return select_training_with_noise(logits, g, tau);
}

// One query per selected patch, mean over its valid origin tokens.
// Queries are ordered region-major, then patch-row-major.
template <class T>
SparseQuerySet<T> pool_queries(const Tensor<T>& tokens,
                               const RegionPartition& part,
                               const std::vector<std::size_t>& theta) {
  if (theta.size() != part.R)
    throw std::invalid_argument("pool_queries: need one decision per region");
  SparseQuerySet<T> s;
  s.n_per_region.assign(part.R, 0);
  s.assign.assign(part.H * part.W, -1);
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < part.R; ++r) {
    const std::size_t k = theta[r];
    if (k >= part.gran.K())
      throw std::invalid_argument("pool_queries: decision " +
                                  std::to_string(k) + " out of range");
    for (const auto& patch : part.patches[k][r]) {
      const long qi = static_cast<long>(groups.size());
      for (std::size_t t : patch) s.assign[t] = qi;
      s.region_of_query.push_back(r);
      s.origin.push_back(patch);
      groups.push_back(patch);
      ++s.n_per_region[r];
    }
  }
  s.q = groups.empty() ? Tensor<T>::zeros({0, part.C})
                       : pool_rows(tokens, groups);
  return s;
}

// Broadcast each query back over its origin tokens. Skip-mode regions stay
// zero, so the caller's residual is the only signal there.
template <class T>
Tensor<T> unpool_restore(const Tensor<T>& yhat, const SparseQuerySet<T>& s,
                         const RegionPartition& part) {
  if (yhat.rows() != s.origin.size())
    throw std::invalid_argument("unpool_restore: " +
                                std::to_string(yhat.rows()) +
                                " rows for " + std::to_string(s.origin.size()) +
                                " queries");
  if (yhat.rows() == 0) return Tensor<T>::zeros({part.H * part.W, part.C});
  return unpool_rows(yhat, s.assign);
}

// Straight-through gate (training only): identity forward, p-scaled backward.
template <class T>
Tensor<T> ste_scale(const Tensor<T>& yhat, const GatingDecision<T>& d,
                    const SparseQuerySet<T>& s) {
  if (!d.training)
    throw std::runtime_error("ste_scale: decision was made in inference mode");
  return ste_scale_rows(yhat, d.p, s.region_of_query);
}

}  // namespace dge
