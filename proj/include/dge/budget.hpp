#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dge/encoder.hpp"
#include "dge/partition.hpp"
#include "dge/router.hpp"
#include "dge/tensor.hpp"

namespace dge {

// Per-layer cost split. per_query covers {q projection, attention scores,
// attention-weighted sum, output projection, FFN} in FLOPs (2 per
// multiply-accumulate); static_flops covers everything query-independent.
struct LayerCost {
  double per_query = 0;
  double static_flops = 0;
  std::size_t H = 0, W = 0;
};

inline LayerCost layer_cost(std::size_t H, std::size_t W, std::size_t C,
                            std::size_t ffn_ratio, std::size_t E,
                            std::size_t R, std::size_t K) {
  LayerCost lc;
  lc.H = H;
  lc.W = W;
  const double M = static_cast<double>(H * W + E);
  const double Cd = static_cast<double>(C);
  const double per_query_mac = (2.0 + 2.0 * ffn_ratio) * Cd * Cd + 2.0 * M * Cd;
  lc.per_query = 2.0 * per_query_mac;
  const double static_mac = 2.0 * M * Cd * Cd                 // k/v projections
                            + static_cast<double>(R * K) * Cd  // gating
                            + static_cast<double>(E) * per_query_mac;
  lc.static_flops = 2.0 * static_mac;
  return lc;
}

// Realized query count: patches with at least one valid token at the chosen
// granularity. Skip-mode regions contribute nothing.
inline std::size_t query_count(const std::vector<std::size_t>& theta,
                               const RegionPartition& part) {
  if (theta.size() != part.R)
    throw std::invalid_argument("query_count: need one decision per region");
  std::size_t psi = 0;
  for (std::size_t r = 0; r < part.R; ++r) {
    if (theta[r] >= part.gran.K())
      throw std::invalid_argument("query_count: decision out of range");
    psi += part.patches[theta[r]][r].size();
  }
  return psi;
}

inline std::vector<std::size_t> region_counts(
    const std::vector<std::size_t>& theta, const RegionPartition& part) {
  std::vector<std::size_t> counts(part.R);
  for (std::size_t r = 0; r < part.R; ++r)
    counts[r] = part.patches[theta[r]][r].size();
  return counts;
}

// One layer's contribution to the ratio.
template <class T>
struct LayerRouting {
  LayerCost cost;
  std::vector<std::size_t> counts;  // realized per-region patch counts
  Tensor<T> p;                      // soft scores; undefined in inference
};

template <class T>
LayerRouting<T> layer_routing(const LayerCost& cost,
                              const GatingDecision<T>& d,
                              const RegionPartition& part) {
  LayerRouting<T> lr;
  lr.cost = cost;
  lr.counts = region_counts(d.theta, part);
  if (d.training) lr.p = d.p;
  return lr;
}

// Used complexity ratio over the dynamic cost. Forward uses the realized
// query counts; the backward pass substitutes the soft relaxation
// sum_i p_i * N_i per layer, so gradients reach the gating logits.
template <class T>
Tensor<T> complexity_ratio(const std::vector<LayerRouting<T>>& layers) {
  if (layers.empty())
    throw std::invalid_argument("complexity_ratio: no layers");
  double num = 0, den = 0;
  for (const auto& l : layers) {
    std::size_t psi = 0;
    for (std::size_t c : l.counts) psi += c;
    num += l.cost.per_query * static_cast<double>(psi);
    den += l.cost.per_query * static_cast<double>(l.cost.H * l.cost.W);
  }
  if (den <= 0) throw std::invalid_argument("complexity_ratio: empty grid");

  Tensor<T> out = Tensor<T>::zeros({1});
  out.raw_value()[0] = static_cast<T>(num / den);

  bool wants = false;
  if (detail::grad_mode())
    for (const auto& l : layers)
      if (l.p.defined() && l.p.requires_grad()) wants = true;
  if (!wants) return out;

  out.node()->requires_grad = true;
  out.node()->leaf = false;
  std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
  std::vector<std::vector<std::size_t>> counts;
  std::vector<double> costs;
  for (const auto& l : layers) {
    if (!l.p.defined()) continue;
    out.node()->parents.push_back(l.p.node());
    pnodes.push_back(l.p.node());
    counts.push_back(l.counts);
    costs.push_back(l.cost.per_query);
  }
  out.node()->backward = [pnodes, counts, costs, den](TensorNode<T>& o) {
    const T g = o.grad[0];
    for (std::size_t li = 0; li < pnodes.size(); ++li) {
      auto& pn = *pnodes[li];
      if (!pn.requires_grad) continue;
      detail::ensure_grad(pn);
      const double w = costs[li] / den;
      for (std::size_t i = 0; i < counts[li].size(); ++i)
        pn.grad[i] += g * static_cast<T>(w * counts[li][i]);
    }
  };
  return out;
}

template <class T>
Tensor<T> budget_loss(const Tensor<T>& beta, T gamma, T lambda) {
  if (gamma < T(0) || gamma > T(1))
    throw std::invalid_argument("budget_loss: budget must lie in [0,1]");
  return scale(square(add_const(beta, -gamma)), lambda);
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& task, const Tensor<T>& beta, T gamma,
                     T lambda) {
  return add(task, budget_loss(beta, gamma, lambda));
}

// Mean of scalar tensors, differentiable; used to average beta over a batch.
template <class T>
Tensor<T> mean_scalars(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_scalars: empty input");
  Tensor<T> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, T(1) / T(xs.size()));
}

struct BudgetReport {
  std::vector<std::size_t> psi;       // per layer
  std::vector<double> per_query;      // C^l per layer
  double beta = 0;
  double dynamic_flops = 0;
  double static_flops = 0;
  double total_flops = 0;
};

template <class T>
std::vector<LayerCost> model_layer_costs(const VitModel<T>& m) {
  const std::size_t G = m.cfg.tokens_per_axis();
  std::vector<LayerCost> out(m.cfg.layers,
                             layer_cost(G, G, m.cfg.channels, m.cfg.ffn_ratio,
                                        1 /*class token*/, m.part.R,
                                        m.part.gran.K()));
  return out;
}

// Query-independent cost outside the encoder layers.
template <class T>
double model_static_flops(const VitModel<T>& m) {
  const std::size_t G = m.cfg.tokens_per_axis();
  const double embed = static_cast<double>(G * G) * m.cfg.patch * m.cfg.patch *
                       m.cfg.channels;
  const double head = static_cast<double>(m.cfg.channels) * m.cfg.classes;
  return 2.0 * (embed + head);
}

// Closed-form report for one recorded routing trace.
template <class T>
BudgetReport flops_report(const VitModel<T>& m,
                          const std::vector<std::vector<std::size_t>>& theta) {
  if (theta.size() != m.cfg.layers)
    throw std::invalid_argument("flops_report: trace has " +
                                std::to_string(theta.size()) +
                                " layers, model has " +
                                std::to_string(m.cfg.layers));
  const std::vector<LayerCost> costs = model_layer_costs(m);
  BudgetReport rep;
  rep.static_flops = model_static_flops(m);
  double num = 0, den = 0;
  for (std::size_t l = 0; l < costs.size(); ++l) {
    const std::size_t psi = query_count(theta[l], m.part);
    rep.psi.push_back(psi);
    rep.per_query.push_back(costs[l].per_query);
    rep.dynamic_flops += costs[l].per_query * static_cast<double>(psi);
    rep.static_flops += costs[l].static_flops;
    num += costs[l].per_query * static_cast<double>(psi);
    den += costs[l].per_query * static_cast<double>(costs[l].H * costs[l].W);
  }
  rep.beta = num / den;
  rep.total_flops = rep.dynamic_flops + rep.static_flops;
  return rep;
}

}  // namespace dge
