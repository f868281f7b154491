#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dge/budget.hpp"
#include "dge/checkpoint.hpp"
#include "dge/config.hpp"
#include "dge/dataset.hpp"
#include "dge/encoder.hpp"
#include "dge/metrics.hpp"
#include "dge/optimizer.hpp"
#include "dge/rng.hpp"
#include "dge/tensor.hpp"

namespace dge {

inline nlohmann::ordered_json arch_json(const VitConfig& cfg) {
  nlohmann::ordered_json a;
  a["image"] = cfg.image;
  a["patch"] = cfg.patch;
  a["channels"] = cfg.channels;
  a["heads"] = cfg.heads;
  a["layers"] = cfg.layers;
  a["ffn_ratio"] = cfg.ffn_ratio;
  a["classes"] = cfg.classes;
  a["phi"] = cfg.phi;
  a["region"] = cfg.region;
  a["gamma"] = cfg.gamma;
  a["lambda"] = cfg.lambda;
  a["tau"] = cfg.tau;
  return a;
}

inline VitConfig config_from_arch(const nlohmann::ordered_json& a) {
  VitConfig cfg;
  cfg.image = a.at("image");
  cfg.patch = a.at("patch");
  cfg.channels = a.at("channels");
  cfg.heads = a.at("heads");
  cfg.layers = a.at("layers");
  cfg.ffn_ratio = a.at("ffn_ratio");
  cfg.classes = a.at("classes");
  cfg.phi = a.at("phi").get<std::vector<int>>();
  cfg.region = a.at("region");
  cfg.gamma = a.at("gamma");
  cfg.lambda = a.at("lambda");
  cfg.tau = a.at("tau");
  cfg.validate();
  return cfg;
}

// Rebuilds the architecture recorded in the manifest and fills in the
// stored weights.
template <class T>
VitModel<T> model_from_checkpoint(const std::string& json_path,
                                  const std::string& bin_path) {
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("checkpoint: cannot read " + json_path);
  nlohmann::ordered_json manifest;
  js >> manifest;
  VitConfig cfg = config_from_arch(manifest.at("arch"));
  VitModel<T> m = make_model<T>(cfg, 0);
  auto params = m.params();
  load_checkpoint<T>(json_path, bin_path, params);
  return m;
}

struct EvalResult {
  double accuracy = 0;
  double task_loss = 0;
  double mean_beta = 0;
  std::vector<double> mean_psi;   // per layer
  double dynamic_flops = 0;       // mean per image
  double static_flops = 0;
  double total_flops = 0;
  std::size_t count = 0;
};

template <class T>
EvalResult evaluate(const VitModel<T>& m, const std::vector<Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
  NoGradGuard ng;
  EvalResult ev;
  ev.count = examples.size();
  ev.mean_psi.assign(m.cfg.layers, 0.0);
  for (const auto& ex : examples) {
    std::vector<T> img(ex.pixels.begin(), ex.pixels.end());
    auto out = vit_classifier(m, img, Mode::infer);
    const auto& lv = out.logits.value();
    std::size_t best = 0;
    for (std::size_t k = 1; k < lv.size(); ++k)
      if (lv[k] > lv[best]) best = k;
    if (best == ex.label) ev.accuracy += 1;
    ev.task_loss +=
        static_cast<double>(cross_entropy_logits(out.logits, ex.label).item());

    std::vector<std::vector<std::size_t>> theta;
    for (const auto& tr : out.layers) theta.push_back(tr.decision.theta);
    BudgetReport rep = flops_report(m, theta);
    ev.mean_beta += rep.beta;
    ev.dynamic_flops += rep.dynamic_flops;
    ev.static_flops += rep.static_flops;
    ev.total_flops += rep.total_flops;
    for (std::size_t l = 0; l < rep.psi.size(); ++l)
      ev.mean_psi[l] += static_cast<double>(rep.psi[l]);
  }
  const double n = static_cast<double>(ev.count);
  ev.accuracy /= n;
  ev.task_loss /= n;
  ev.mean_beta /= n;
  ev.dynamic_flops /= n;
  ev.static_flops /= n;
  ev.total_flops /= n;
  for (auto& v : ev.mean_psi) v /= n;
  return ev;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n,
                                                 RngStream& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct TrainResult {
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0;
  double final_val_accuracy = 0;
  double final_val_beta = 0;
};

// Single-image forwards, batched loss. Checkpoints land in out_dir as
// best.{json,bin} and final.{json,bin}; metrics.jsonl carries the
// deterministic trace, timing.jsonl the wall clock.
template <class T>
TrainResult train_model(VitModel<T>& m, const RunConfig& cfg,
                        const Dataset& data, const std::string& out_dir,
                        bool verbose = false) {
  if (data.train.empty()) throw std::invalid_argument("train: empty dataset");
  auto params = m.params();
  typename AdamW<T>::Options opt_cfg;
  opt_cfg.lr = static_cast<T>(cfg.train.lr);
  opt_cfg.weight_decay = static_cast<T>(cfg.train.weight_decay);
  AdamW<T> opt(opt_cfg);

  MetricsWriter metrics(out_dir + "/metrics.jsonl");
  TimingWriter timing(out_dir + "/timing.jsonl");
  std::ofstream epochs_out(out_dir + "/epochs.jsonl", std::ios::trunc);
  if (!epochs_out)
    throw std::runtime_error("train: cannot write " + out_dir + "/epochs.jsonl");

  const auto costs = model_layer_costs(m);
  const auto arch = arch_json(m.cfg);
  const T gamma = static_cast<T>(m.cfg.gamma);
  const T lambda = static_cast<T>(m.cfg.lambda);

  TrainResult res;
  std::size_t gstep = 0;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    RngStream order_rng(cfg.train.seed, 200 + epoch);
    RngStream route_rng(cfg.train.seed, 300 + epoch);
    const auto order = shuffled_indices(data.train.size(), order_rng);

    for (std::size_t start = 0; start < order.size();
         start += cfg.train.batch) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t n =
          std::min(cfg.train.batch, order.size() - start);
      std::vector<Tensor<T>> task_losses, betas;
      std::vector<double> psi_mean(m.cfg.layers, 0.0);
      std::size_t correct = 0;

      for (std::size_t i = 0; i < n; ++i) {
        const Example& ex = data.train[order[start + i]];
        std::vector<T> img(ex.pixels.begin(), ex.pixels.end());
        auto out = vit_classifier(m, img, Mode::train, &route_rng);
        task_losses.push_back(cross_entropy_logits(out.logits, ex.label));
        std::vector<LayerRouting<T>> lr;
        for (std::size_t l = 0; l < m.cfg.layers; ++l) {
          lr.push_back(layer_routing(costs[l], out.layers[l].decision, m.part));
          psi_mean[l] += static_cast<double>(out.layers[l].psi) / n;
        }
        betas.push_back(complexity_ratio(lr));
        const auto& lv = out.logits.value();
        std::size_t best = 0;
        for (std::size_t k = 1; k < lv.size(); ++k)
          if (lv[k] > lv[best]) best = k;
        if (best == ex.label) ++correct;
      }

      Tensor<T> task = mean_scalars(task_losses);
      Tensor<T> beta = mean_scalars(betas);
      Tensor<T> bloss = budget_loss(beta, gamma, lambda);
      Tensor<T> loss = add(task, bloss);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        save_checkpoint(out_dir + "/abort.json", out_dir + "/abort.bin",
                        params, arch);
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(gstep) +
                                 ", last good weights in " + out_dir +
                                 "/abort.json");
      }
      backward(loss);
      opt.step(params);
      opt.zero_grad(params);

      MetricsRecord rec;
      rec.step = gstep;
      rec.task_loss = static_cast<double>(task.item());
      rec.budget_loss = static_cast<double>(bloss.item());
      rec.beta = static_cast<double>(beta.item());
      rec.accuracy = static_cast<double>(correct) / n;
      rec.psi = psi_mean;
      metrics.write(rec);
      timing.write(gstep, std::chrono::duration<double>(
                              std::chrono::steady_clock::now() - t0)
                              .count());
      ++gstep;
    }

    EvalResult ev = evaluate(m, data.val);
    nlohmann::ordered_json ej;
    ej["epoch"] = epoch;
    ej["val_accuracy"] = ev.accuracy;
    ej["val_task_loss"] = ev.task_loss;
    ej["val_beta"] = ev.mean_beta;
    epochs_out << ej.dump() << "\n";
    epochs_out.flush();
    if (verbose)
      std::fprintf(stderr, "epoch %zu: val acc %.4f beta %.4f loss %.4f\n",
                   epoch, ev.accuracy, ev.mean_beta, ev.task_loss);

    if (ev.accuracy >= res.best_val_accuracy) {
      res.best_val_accuracy = ev.accuracy;
      res.best_epoch = epoch;
      save_checkpoint(out_dir + "/best.json", out_dir + "/best.bin", params,
                      arch);
    }
    res.final_val_accuracy = ev.accuracy;
    res.final_val_beta = ev.mean_beta;
  }
  res.steps = gstep;
  save_checkpoint(out_dir + "/final.json", out_dir + "/final.bin", params,
                  arch);
  return res;
}

struct BenchResult {
  double routed_median_s = 0;
  double routed_p95_s = 0;
  double dense_median_s = 0;
  double dense_p95_s = 0;
  double mean_beta = 0;        // routed dynamic cost over dense dynamic cost
  double flops_routed = 0;     // mean per image, static included
  double flops_dense = 0;
  std::size_t images = 0;
};

namespace detail {

inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) return 0;
  std::sort(xs.begin(), xs.end());
  const double pos = q * (xs.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return xs[lo] * (1 - frac) + xs[hi] * frac;
}

}  // namespace detail

// Wall-clock per image, routed versus forced-finest. The forced pass pins
// every region to the finest granularity, so it is the dense reference on
// the same weights.
template <class T>
BenchResult bench_model(const VitModel<T>& m,
                        const std::vector<Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("bench: no examples");
  NoGradGuard ng;
  std::size_t finest = 0;
  int best_phi = 0;
  for (std::size_t k = 0; k < m.part.gran.K(); ++k) {
    const int phi = m.part.gran.phi[k];
    if (phi > 0 && (best_phi == 0 || phi < best_phi)) {
      best_phi = phi;
      finest = k;
    }
  }
  const std::vector<std::size_t> force(m.part.R, finest);
  std::vector<RouteCtl<T>> ctl(m.cfg.layers);
  for (auto& c : ctl) c.force_theta = &force;

  BenchResult br;
  br.images = examples.size();
  std::vector<double> routed_s, dense_s;
  const std::vector<std::vector<std::size_t>> dense_theta(m.cfg.layers, force);
  for (const auto& ex : examples) {
    std::vector<T> img(ex.pixels.begin(), ex.pixels.end());

    auto t0 = std::chrono::steady_clock::now();
    auto out = vit_classifier(m, img, Mode::infer);
    routed_s.push_back(std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - t0)
                           .count());

    t0 = std::chrono::steady_clock::now();
    vit_classifier(m, img, Mode::infer, nullptr, &ctl);
    dense_s.push_back(std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count());

    std::vector<std::vector<std::size_t>> theta;
    for (const auto& tr : out.layers) theta.push_back(tr.decision.theta);
    const BudgetReport rep = flops_report(m, theta);
    br.mean_beta += rep.beta;
    br.flops_routed += rep.total_flops;
    br.flops_dense += flops_report(m, dense_theta).total_flops;
  }
  const double n = static_cast<double>(br.images);
  br.mean_beta /= n;
  br.flops_routed /= n;
  br.flops_dense /= n;
  br.routed_median_s = detail::percentile(routed_s, 0.5);
  br.routed_p95_s = detail::percentile(routed_s, 0.95);
  br.dense_median_s = detail::percentile(dense_s, 0.5);
  br.dense_p95_s = detail::percentile(dense_s, 0.95);
  return br;
}

}  // namespace dge
