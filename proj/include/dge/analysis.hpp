#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dge/budget.hpp"
#include "dge/dataset.hpp"
#include "dge/encoder.hpp"
#include "dge/tensor.hpp"

namespace dge {

// Pearson correlation over channel entries. Constant vectors get the
// limiting values: both constant -> 1, exactly one constant -> 0.
inline double pcc(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("pcc: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) throw std::invalid_argument("pcc: need at least two entries");
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  const bool ca = saa == 0, cb = sbb == 0;
  if (ca && cb) return 1.0;
  if (ca || cb) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline constexpr std::size_t kPccBins = 50;

struct LayerHistogram {
  std::vector<std::size_t> counts = std::vector<std::size_t>(kPccBins, 0);
  double mean = 0;
  double var = 0;
  std::size_t total = 0;
};

struct RedundancyProfile {
  std::vector<LayerHistogram> layers;
};

namespace detail {

inline std::size_t pcc_bin(double p) {
  // 50 uniform bins over [-1, 1]; p == 1 folds into the last bin.
  double t = (p + 1.0) * 0.5 * kPccBins;
  long b = static_cast<long>(std::floor(t));
  if (b < 0) b = 0;
  if (b >= static_cast<long>(kPccBins)) b = kPccBins - 1;
  return static_cast<std::size_t>(b);
}

template <class T>
std::vector<double> token_row(const Tensor<T>& tokens, std::size_t row) {
  const std::size_t C = tokens.cols();
  std::vector<double> out(C);
  for (std::size_t j = 0; j < C; ++j)
    out[j] = static_cast<double>(tokens.value()[row * C + j]);
  return out;
}

// Per 2x2-style group: member rows and their average vector.
template <class T, class Fn>
void for_each_probe_group(const Tensor<T>& tokens, std::size_t H,
                          std::size_t W, std::size_t patch, Fn fn) {
  const std::size_t C = tokens.cols();
  const std::size_t GH = H / patch, GW = W / patch;
  std::vector<std::size_t> members(patch * patch);
  std::vector<double> avg(C);
  for (std::size_t gi = 0; gi < GH; ++gi) {
    for (std::size_t gj = 0; gj < GW; ++gj) {
      std::size_t at = 0;
      for (std::size_t di = 0; di < patch; ++di)
        for (std::size_t dj = 0; dj < patch; ++dj)
          members[at++] = (gi * patch + di) * W + (gj * patch + dj);
      std::fill(avg.begin(), avg.end(), 0.0);
      for (std::size_t r : members)
        for (std::size_t j = 0; j < C; ++j)
          avg[j] += static_cast<double>(tokens.value()[r * C + j]);
      for (double& v : avg) v /= members.size();
      fn(members, avg);
    }
  }
}

}  // namespace detail

// PCC of every token against its probe-patch average, per encoder layer
// input, aggregated over the given images. Extra tokens are excluded.
template <class T>
RedundancyProfile redundancy_profile(const VitModel<T>& m,
                                     const std::vector<Example>& images,
                                     std::size_t patch = 2) {
  if (patch < 1) throw std::invalid_argument("redundancy_profile: bad patch");
  const std::size_t G = m.cfg.tokens_per_axis();
  if (G % patch != 0)
    std::fprintf(stderr,
                 "redundancy_profile: %zux%zu grid not tileable by %zu, "
                 "truncating bottom-right\n",
                 G, G, patch);
  NoGradGuard ng;
  RedundancyProfile prof;
  prof.layers.resize(m.cfg.layers);
  std::vector<double> sum(m.cfg.layers, 0), sumsq(m.cfg.layers, 0);

  for (const auto& ex : images) {
    std::vector<T> img(ex.pixels.begin(), ex.pixels.end());
    TokenTap<T> tap = [&](const Tensor<T>& tokens, std::size_t layer) {
      detail::for_each_probe_group(
          tokens, G, G, patch,
          [&](const std::vector<std::size_t>& members,
              const std::vector<double>& avg) {
            for (std::size_t r : members) {
              const double p = pcc(detail::token_row(tokens, r), avg);
              auto& hist = prof.layers[layer];
              hist.counts[detail::pcc_bin(p)]++;
              hist.total++;
              sum[layer] += p;
              sumsq[layer] += p * p;
            }
          });
      return tokens;
    };
    vit_classifier<T>(m, img, Mode::infer, nullptr, nullptr, tap);
  }
  for (std::size_t l = 0; l < prof.layers.size(); ++l) {
    auto& h = prof.layers[l];
    if (h.total > 0) {
      h.mean = sum[l] / h.total;
      h.var = sumsq[l] / h.total - h.mean * h.mean;
    }
  }
  return prof;
}

struct SweepRow {
  double threshold = 0;
  double replaced_frac = 0;
  double complexity_ratio = 0;
  double accuracy = 0;
};

// Inference with per-patch average replacement at every layer input.
// Tokens whose PCC against their patch average reaches the threshold are
// replaced; each touched patch then costs one query's worth for all its
// replaced members.
template <class T>
std::vector<SweepRow> threshold_sweep(const VitModel<T>& m,
                                      const std::vector<Example>& images,
                                      const std::vector<double>& thresholds,
                                      std::size_t patch = 2) {
  NoGradGuard ng;
  const std::size_t G = m.cfg.tokens_per_axis();
  const std::size_t HW = G * G;
  const std::vector<LayerCost> costs = model_layer_costs(m);
  std::vector<SweepRow> rows;

  for (double thr : thresholds) {
    std::size_t replaced_total = 0, token_total = 0, correct = 0;
    std::vector<double> psi_sum(m.cfg.layers, 0);

    for (const auto& ex : images) {
      std::vector<T> img(ex.pixels.begin(), ex.pixels.end());
      TokenTap<T> tap = [&](const Tensor<T>& tokens, std::size_t layer) {
        Tensor<T> out = tokens.detach();
        std::size_t replaced = 0, touched = 0;
        const std::size_t C = tokens.cols();
        detail::for_each_probe_group(
            tokens, G, G, patch,
            [&](const std::vector<std::size_t>& members,
                const std::vector<double>& avg) {
              bool any = false;
              for (std::size_t r : members) {
                if (pcc(detail::token_row(tokens, r), avg) >= thr) {
                  for (std::size_t j = 0; j < C; ++j)
                    out.raw_value()[r * C + j] = static_cast<T>(avg[j]);
                  ++replaced;
                  any = true;
                }
              }
              if (any) ++touched;
            });
        replaced_total += replaced;
        token_total += HW;
        psi_sum[layer] += static_cast<double>(HW - replaced + touched);
        return out;
      };
      auto out = vit_classifier<T>(m, img, Mode::infer, nullptr, nullptr, tap);
      const auto& lv = out.logits.value();
      std::size_t best = 0;
      for (std::size_t k = 1; k < lv.size(); ++k)
        if (lv[k] > lv[best]) best = k;
      if (best == ex.label) ++correct;
    }

    double num = 0, den = 0;
    for (std::size_t l = 0; l < m.cfg.layers; ++l) {
      num += costs[l].per_query * psi_sum[l];
      den += costs[l].per_query * static_cast<double>(HW) * images.size();
    }
    SweepRow row;
    row.threshold = thr;
    row.replaced_frac =
        token_total ? static_cast<double>(replaced_total) / token_total : 0;
    row.complexity_ratio = num / den;
    row.accuracy =
        images.empty() ? 0 : static_cast<double>(correct) / images.size();
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Heat-map export
// ---------------------------------------------------------------------------

inline std::size_t heatmap_value_scale(std::size_t K) {
  return 255 / std::max<std::size_t>(K - 1, 1);
}

inline void write_pgm(const std::string& path, std::size_t rows,
                      std::size_t cols, const std::vector<std::size_t>& gray) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("heatmap: cannot write " + path);
  out << "P2\n" << cols << " " << rows << "\n255\n";
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (j) out << " ";
      out << gray[i * cols + j];
    }
    out << "\n";
  }
  out.close();
  if (!out) throw std::runtime_error("heatmap: write failed for " + path);
}

// Per image: one PGM per layer (theta indices scaled to gray) plus a JSON
// sidecar with the gating decisions and the region geometry.
template <class T>
std::vector<std::string> export_heatmaps(const VitModel<T>& m,
                                         const std::vector<Example>& images,
                                         const std::string& out_dir,
                                         std::size_t count,
                                         std::size_t window) {
  NoGradGuard ng;
  std::vector<std::string> written;
  const std::size_t K = m.part.gran.K();
  const std::size_t q = heatmap_value_scale(K);
  const std::size_t px = m.cfg.patch;
  count = std::min(count, images.size());

  for (std::size_t i = 0; i < count; ++i) {
    const auto& ex = images[i];
    std::vector<T> img(ex.pixels.begin(), ex.pixels.end());
    auto out = vit_classifier(m, img, Mode::infer);

    char tag[32];
    std::snprintf(tag, sizeof(tag), "%03zu", i);
    nlohmann::ordered_json side;
    side["image"] = i;
    side["label"] = ex.label;
    side["window"] = {ex.win_r, ex.win_c, window};
    side["grid"] = {m.part.RH, m.part.RW};
    side["region"] = m.part.S;
    side["phi"] = m.cfg.phi;
    side["patch_px"] = px;
    side["value_scale"] = q;
    nlohmann::ordered_json rects = nlohmann::ordered_json::array();
    for (const auto& r : m.part.rects)
      rects.push_back({r.row0 * px, r.col0 * px, r.row1 * px, r.col1 * px});
    side["rects_px"] = rects;

    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      const auto& tr = out.layers[l];
      std::vector<std::size_t> gray(m.part.R);
      for (std::size_t r = 0; r < m.part.R; ++r) gray[r] = tr.decision.theta[r] * q;
      const std::string pgm =
          out_dir + "/heatmap_" + tag + "_layer" + std::to_string(l) + ".pgm";
      write_pgm(pgm, m.part.RH, m.part.RW, gray);
      written.push_back(pgm);

      nlohmann::ordered_json lj;
      lj["layer"] = l;
      lj["theta"] = tr.decision.theta;
      lj["psi"] = tr.psi;
      nlohmann::ordered_json logits = nlohmann::ordered_json::array();
      for (std::size_t r = 0; r < m.part.R; ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (std::size_t k = 0; k < K; ++k)
          row.push_back(tr.decision.logits.value()[r * K + k]);
        logits.push_back(row);
      }
      lj["logits"] = logits;
      lj["p"] = nullptr;  // inference stores no soft scores
      layers.push_back(lj);
    }
    side["layers"] = layers;

    const std::string js = out_dir + "/heatmap_" + tag + ".json";
    std::ofstream sf(js, std::ios::trunc);
    if (!sf) throw std::runtime_error("heatmap: cannot write " + js);
    sf << side.dump(2) << "\n";
    sf.close();
    if (!sf) throw std::runtime_error("heatmap: write failed for " + js);
    written.push_back(js);
  }
  return written;
}

struct LocalizationStats {
  double frac_in = 0;
  double frac_out = 0;
  double margin = 0;
};

// Fraction of finest-granularity decisions among regions intersecting the
// signal window versus the rest, over all layers and images.
template <class T>
LocalizationStats routing_localization(const VitModel<T>& m,
                                       const std::vector<Example>& images,
                                       std::size_t window) {
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
  const std::size_t px = m.cfg.patch;
  std::size_t in_total = 0, in_fine = 0, out_total = 0, out_fine = 0;
  for (const auto& ex : images) {
    std::vector<T> img(ex.pixels.begin(), ex.pixels.end());
    auto out = vit_classifier(m, img, Mode::infer);
    for (const auto& tr : out.layers) {
      for (std::size_t r = 0; r < m.part.R; ++r) {
        const auto& rect = m.part.rects[r];
        const bool hit = rect.row0 * px < ex.win_r + window &&
                         ex.win_r < rect.row1 * px &&
                         rect.col0 * px < ex.win_c + window &&
                         ex.win_c < rect.col1 * px;
        const bool fine = tr.decision.theta[r] == finest;
        if (hit) {
          ++in_total;
          in_fine += fine;
        } else {
          ++out_total;
          out_fine += fine;
        }
      }
    }
  }
  LocalizationStats st;
  st.frac_in = in_total ? static_cast<double>(in_fine) / in_total : 0;
  st.frac_out = out_total ? static_cast<double>(out_fine) / out_total : 0;
  st.margin = st.frac_in - st.frac_out;
  return st;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline void write_histogram_csv(const LayerHistogram& h,
                                const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("analysis: cannot write " + path);
  out << "bin_low,bin_high,count\n";
  for (std::size_t b = 0; b < kPccBins; ++b) {
    const double lo = -1.0 + 2.0 * b / kPccBins;
    const double hi = -1.0 + 2.0 * (b + 1) / kPccBins;
    out << lo << "," << hi << "," << h.counts[b] << "\n";
  }
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows,
                            const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("analysis: cannot write " + path);
  out << "threshold,replaced_frac,complexity_ratio,accuracy\n";
  for (const auto& r : rows)
    out << r.threshold << "," << r.replaced_frac << "," << r.complexity_ratio
        << "," << r.accuracy << "\n";
}

}  // namespace dge
