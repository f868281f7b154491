#pragma once

// Plain-double reference implementations, loop-by-loop, no tensor machinery.
// Forward values only; used as independent oracles.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ref {

using Mat = std::vector<double>;  // row-major, dims passed alongside

template <class T>
Mat of(const T& tensor) {
  return Mat(tensor.value().begin(), tensor.value().end());
}

inline Mat matmul(const Mat& a, std::size_t m, std::size_t k, const Mat& b,
                  std::size_t n) {
  if (a.size() != m * k || b.size() != k * n)
    throw std::invalid_argument("ref::matmul: bad dims");
  Mat c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j)
        c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline Mat add_row(Mat a, std::size_t m, std::size_t n, const Mat& b) {
  if (b.size() != n) throw std::invalid_argument("ref::add_row: bad dims");
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] += b[j];
  return a;
}

inline Mat softmax_rows(Mat a, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[i * n + j]);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      a[i * n + j] = std::exp(a[i * n + j] - mx);
      z += a[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= z;
  }
  return a;
}

inline Mat layer_norm(const Mat& a, std::size_t m, std::size_t n, const Mat& g,
                      const Mat& b, double eps = 1e-5) {
  Mat out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += a[i * n + j];
    mean /= n;
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a[i * n + j] - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = (a[i * n + j] - mean) * inv * g[j] + b[j];
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

struct Attn {
  Mat wq, bq, wk, bk, wv, bv, wo, bo;
};

inline Mat attention(const Mat& q, std::size_t nq, const Mat& kv,
                     std::size_t nkv, std::size_t C, std::size_t heads,
                     const Attn& p) {
  const Mat Q = add_row(matmul(q, nq, C, p.wq, C), nq, C, p.bq);
  const Mat K = add_row(matmul(kv, nkv, C, p.wk, C), nkv, C, p.bk);
  const Mat V = add_row(matmul(kv, nkv, C, p.wv, C), nkv, C, p.bv);
  const std::size_t dh = C / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat cat(nq * C, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    Mat scores(nq * nkv, 0.0);
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nkv; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < dh; ++d)
          s += Q[i * C + h * dh + d] * K[j * C + h * dh + d];
        scores[i * nkv + j] = s * inv_scale;
      }
    scores = softmax_rows(std::move(scores), nq, nkv);
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nkv; ++j)
        for (std::size_t d = 0; d < dh; ++d)
          cat[i * C + h * dh + d] += scores[i * nkv + j] * V[j * C + h * dh + d];
  }
  return add_row(matmul(cat, nq, C, p.wo, C), nq, C, p.bo);
}

struct Block {
  Mat ln1_g, ln1_b, lnkv_g, lnkv_b;
  Attn attn;
  Mat ln2_g, ln2_b;
  Mat ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  std::size_t hidden = 0;
};

inline Mat encoder(const Mat& q, std::size_t nq, const Mat& kv,
                   std::size_t nkv, std::size_t C, std::size_t heads,
                   const Block& p) {
  const Mat qn = layer_norm(q, nq, C, p.ln1_g, p.ln1_b);
  const Mat kvn = layer_norm(kv, nkv, C, p.lnkv_g, p.lnkv_b);
  Mat u = q;
  const Mat at = attention(qn, nq, kvn, nkv, C, heads, p.attn);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] += at[i];
  const Mat un = layer_norm(u, nq, C, p.ln2_g, p.ln2_b);
  Mat hz = add_row(matmul(un, nq, C, p.ffn_w1, p.hidden), nq, p.hidden, p.ffn_b1);
  for (double& v : hz) v = gelu(v);
  const Mat f =
      add_row(matmul(hz, nq, p.hidden, p.ffn_w2, C), nq, C, p.ffn_b2);
  Mat out = u;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += f[i];
  return out;
}

// Averaging pool matrix (num_groups x rows) from explicit index groups.
inline Mat pool_matrix(const std::vector<std::vector<std::size_t>>& groups,
                       std::size_t rows) {
  Mat P(groups.size() * rows, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t t : groups[g])
      P[g * rows + t] = 1.0 / static_cast<double>(groups[g].size());
  return P;
}

}  // namespace ref
