#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dge {

// Candidate patch side lengths, strictly increasing. A leading 0 is the
// skip-mode candidate: the region contributes no queries at all.
struct GranularitySet {
  std::vector<int> phi;
  int S = 0;

  GranularitySet() = default;
  GranularitySet(std::vector<int> phi_in, int S_in = -1) : phi(std::move(phi_in)) {
    if (phi.empty())
      throw std::invalid_argument("granularity: candidate set is empty");
    int mx = 0;
    for (std::size_t k = 0; k < phi.size(); ++k) {
      if (phi[k] < 0)
        throw std::invalid_argument("granularity: negative candidate " +
                                    std::to_string(phi[k]));
      if (k > 0 && phi[k] <= phi[k - 1])
        throw std::invalid_argument("granularity: candidates must increase");
      mx = phi[k];
    }
    if (mx == 0)
      throw std::invalid_argument("granularity: need at least one positive candidate");
    S = (S_in < 0) ? mx : S_in;
    if (S < mx)
      throw std::invalid_argument("granularity: region size " +
                                  std::to_string(S) +
                                  " is smaller than the coarsest candidate " +
                                  std::to_string(mx));
  }

  std::size_t K() const { return phi.size(); }
  bool skip_mode(std::size_t k) const { return phi[k] == 0; }

  // Patches per region axis at candidate k; 0 in skip mode.
  std::size_t patches_per_axis(std::size_t k) const {
    if (skip_mode(k)) return 0;
    return (static_cast<std::size_t>(S) + phi[k] - 1) / phi[k];
  }
};

struct RegionRect {
  std::size_t row0, col0, row1, col1;  // half-open, in token coordinates
};

// Token index maps of the S x S window decomposition. Tokens are row-major
// indices into the H x W grid; padded positions have no index and never
// appear in any list.
struct RegionPartition {
  std::size_t H = 0, W = 0, C = 0;
  int S = 0;
  std::size_t RH = 0, RW = 0, R = 0;
  GranularitySet gran;

  // patches[k][r]: patch token lists, patch-row-major within the region,
  // patches with no valid token dropped.
  std::vector<std::vector<std::vector<std::vector<std::size_t>>>> patches;
  std::vector<std::vector<std::size_t>> region_tokens;  // valid tokens per region
  std::vector<RegionRect> rects;                        // clipped to H x W
};

inline RegionPartition partition(std::size_t H, std::size_t W, std::size_t C,
                                 const GranularitySet& gran) {
  if (H < 1 || W < 1)
    throw std::invalid_argument("partition: empty grid " + std::to_string(H) +
                                "x" + std::to_string(W));
  RegionPartition part;
  part.H = H;
  part.W = W;
  part.C = C;
  part.S = gran.S;
  part.gran = gran;
  const std::size_t S = static_cast<std::size_t>(gran.S);
  part.RH = (H + S - 1) / S;
  part.RW = (W + S - 1) / S;
  part.R = part.RH * part.RW;
  const std::size_t K = gran.K();

  part.region_tokens.resize(part.R);
  part.rects.resize(part.R);
  part.patches.assign(K, {});
  for (std::size_t k = 0; k < K; ++k) part.patches[k].resize(part.R);

  for (std::size_t rr = 0; rr < part.RH; ++rr) {
    for (std::size_t rc = 0; rc < part.RW; ++rc) {
      const std::size_t r = rr * part.RW + rc;
      const std::size_t row0 = rr * S, col0 = rc * S;
      const std::size_t row1 = std::min(row0 + S, H);
      const std::size_t col1 = std::min(col0 + S, W);
      part.rects[r] = {row0, col0, row1, col1};
      for (std::size_t i = row0; i < row1; ++i)
        for (std::size_t j = col0; j < col1; ++j)
          part.region_tokens[r].push_back(i * W + j);

      for (std::size_t k = 0; k < K; ++k) {
        if (gran.skip_mode(k)) continue;
        const std::size_t phi = static_cast<std::size_t>(gran.phi[k]);
        const std::size_t P = gran.patches_per_axis(k);
        for (std::size_t pr = 0; pr < P; ++pr) {
          for (std::size_t pc = 0; pc < P; ++pc) {
            std::vector<std::size_t> toks;
            const std::size_t i0 = row0 + pr * phi, j0 = col0 + pc * phi;
            for (std::size_t i = i0; i < std::min(i0 + phi, row1); ++i)
              for (std::size_t j = j0; j < std::min(j0 + phi, col1); ++j)
                toks.push_back(i * W + j);
            if (!toks.empty()) part.patches[k][r].push_back(std::move(toks));
          }
        }
      }
    }
  }
  return part;
}

}  // namespace dge
