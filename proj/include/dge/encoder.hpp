#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dge/optimizer.hpp"
#include "dge/partition.hpp"
#include "dge/router.hpp"
#include "dge/tensor.hpp"

namespace dge {

enum class Mode { train, infer };

template <class T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct EncoderBlockParams {
  Tensor<T> ln1_g, ln1_b;    // query branch norm
  Tensor<T> lnkv_g, lnkv_b;  // key/value source norm
  AttentionParams<T> attn;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Token sequence with a 2D spatial interpretation plus optional extra
// tokens (class embedding). Extra tokens never enter the router.
template <class T>
struct FeatureMap {
  Tensor<T> tokens;  // (H*W) x C
  std::size_t H = 0, W = 0;
  Tensor<T> extra;   // E x C; undefined when E = 0
  std::size_t extra_count() const { return extra.defined() ? extra.rows() : 0; }
};

// Scaled dot-product multi-head attention. Residuals are the caller's job.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionParams<T>& p, std::size_t heads) {
  const std::size_t C = q.cols();
  if (C % heads != 0)
    throw std::invalid_argument("attention: " + std::to_string(C) +
                                " channels not divisible by " +
                                std::to_string(heads) + " heads");
  if (k.rows() == 0)
    throw std::invalid_argument("attention: empty key/value sequence");
  if (k.rows() != v.rows() || k.cols() != C || v.cols() != C)
    throw std::invalid_argument("attention: k " + shape_str(k.shape()) +
                                " / v " + shape_str(v.shape()) +
                                " inconsistent with q " +
                                shape_str(q.shape()));
  Tensor<T> Q = add_rowvec(matmul(q, p.wq), p.bq);
  Tensor<T> K = add_rowvec(matmul(k, p.wk), p.bk);
  Tensor<T> V = add_rowvec(matmul(v, p.wv), p.bv);
  const std::size_t dh = C / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> Qh = slice_cols(Q, h * dh, (h + 1) * dh);
    Tensor<T> Kh = slice_cols(K, h * dh, (h + 1) * dh);
    Tensor<T> Vh = slice_cols(V, h * dh, (h + 1) * dh);
    Tensor<T> A = softmax(scale(matmul_nt(Qh, Kh), inv_scale), 1);
    outs.push_back(matmul(A, Vh));
  }
  Tensor<T> cat = heads == 1 ? outs[0] : concat_cols(outs);
  return add_rowvec(matmul(cat, p.wo), p.bo);
}

// Pre-norm encoder block. The attention residual adds the query sequence;
// keys and values come from a separately normalized source sequence.
template <class T>
Tensor<T> vanilla_encoder(const Tensor<T>& q, const Tensor<T>& kv,
                          const EncoderBlockParams<T>& p, std::size_t heads) {
  Tensor<T> qn = layer_norm(q, p.ln1_g, p.ln1_b);
  Tensor<T> kvn = layer_norm(kv, p.lnkv_g, p.lnkv_b);
  Tensor<T> u = add(q, attention(qn, kvn, kvn, p.attn, heads));
  Tensor<T> un = layer_norm(u, p.ln2_g, p.ln2_b);
  Tensor<T> f = add_rowvec(matmul(gelu(add_rowvec(matmul(un, p.ffn_w1), p.ffn_b1)),
                                  p.ffn_w2),
                           p.ffn_b2);
  return add(u, f);
}

template <class T>
struct DgeBlockParams {
  Tensor<T> gate_w, gate_b;
  EncoderBlockParams<T> enc;
};

template <class T>
struct DgeLayerOutput {
  FeatureMap<T> y;
  GatingDecision<T> decision;
  SparseQuerySet<T> queries;
  std::size_t psi = 0;  // realized query count, extra tokens excluded
};

// Per-layer routing overrides, used by tests and the dense-forced benchmark.
template <class T>
struct RouteCtl {
  const Tensor<T>* noise = nullptr;             // training: fixed Gumbel noise
  const std::vector<std::size_t>* force_theta = nullptr;
};

namespace detail {

template <class T>
GatingDecision<T> route(const Tensor<T>& logits, Mode mode, RngStream* rng,
                        T tau, const RouteCtl<T>* ctl) {
  if (mode == Mode::infer) {
    GatingDecision<T> d;
    d.logits = logits;
    d.tau = tau;
    d.training = false;
    d.theta = (ctl && ctl->force_theta) ? *ctl->force_theta
                                        : select_inference(logits);
    return d;
  }
  Tensor<T> noise = (ctl && ctl->noise)
                        ? *ctl->noise
                        : gumbel_sample<T>(*rng, logits.shape());
  GatingDecision<T> d = select_training_with_noise(logits, noise, tau);
  if (ctl && ctl->force_theta) {
    d.theta = *ctl->force_theta;
    Tensor<T> y = scale(add(logits, noise), T(1) / tau);
    d.p = gather_per_row(softmax(y, 1), d.theta);
  }
  return d;
}

}  // namespace detail

// Route, pool, encode with dense keys/values, un-pool, outer residual.
// Extra tokens ride along both sequences and bypass routing entirely.
template <class T>
DgeLayerOutput<T> dge_block(const FeatureMap<T>& x, const RegionPartition& part,
                            const DgeBlockParams<T>& p, std::size_t heads,
                            Mode mode, RngStream* rng = nullptr, T tau = T(1),
                            const RouteCtl<T>* ctl = nullptr) {
  if (mode == Mode::train && rng == nullptr && !(ctl && ctl->noise))
    throw std::invalid_argument("dge_block: training mode needs an rng stream");
  const std::size_t E = x.extra_count();

  DgeLayerOutput<T> out;
  Tensor<T> logits = gating_logits(x.tokens, part, p.gate_w, p.gate_b);
  out.decision = detail::route(logits, mode, rng, tau, ctl);
  out.queries = pool_queries(x.tokens, part, out.decision.theta);
  out.psi = out.queries.origin.size();
  const std::size_t N = out.psi;

  Tensor<T> qfull = E > 0 ? concat_rows<T>({out.queries.q, x.extra})
                          : out.queries.q;
  Tensor<T> kv = E > 0 ? concat_rows<T>({x.extra, x.tokens}) : x.tokens;
  Tensor<T> yfull = vanilla_encoder(qfull, kv, p.enc, heads);

  Tensor<T> ysp = E > 0 ? slice_rows(yfull, 0, N) : yfull;
  if (mode == Mode::train) ysp = ste_scale(ysp, out.decision, out.queries);
  Tensor<T> restored = unpool_restore(ysp, out.queries, part);

  out.y.tokens = add(restored, x.tokens);
  out.y.H = x.H;
  out.y.W = x.W;
  if (E > 0) out.y.extra = slice_rows(yfull, N, N + E);
  return out;
}

// ---------------------------------------------------------------------------
// Toy classifier
// ---------------------------------------------------------------------------

struct VitConfig {
  std::size_t image = 32;
  std::size_t patch = 4;
  std::size_t channels = 64;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t ffn_ratio = 4;
  std::size_t classes = 4;
  std::vector<int> phi = {1, 2, 4};
  int region = -1;  // region side; -1 means max(phi)
  double gamma = 0.5;
  double lambda = 1.0;
  double tau = 1.0;

  std::size_t tokens_per_axis() const { return image / patch; }

  void validate() const {
    if (image < 1 || patch < 1 || image % patch != 0)
      throw std::invalid_argument("config: image " + std::to_string(image) +
                                  " not divisible by patch " +
                                  std::to_string(patch));
    if (channels % heads != 0)
      throw std::invalid_argument("config: channels " +
                                  std::to_string(channels) +
                                  " not divisible by heads " +
                                  std::to_string(heads));
    if (layers < 1) throw std::invalid_argument("config: need at least one layer");
    if (classes < 2) throw std::invalid_argument("config: need at least two classes");
    if (gamma < 0 || gamma > 1)
      throw std::invalid_argument("config: budget must lie in [0,1]");
    if (lambda <= 0) throw std::invalid_argument("config: lambda must be positive");
    if (tau <= 0) throw std::invalid_argument("config: tau must be positive");
    (void)GranularitySet(phi, region);  // validates phi and region
  }
};

template <class T>
struct VitModel {
  VitConfig cfg;
  RegionPartition part;

  Tensor<T> patch_w, patch_b, pos, cls;
  struct Block {
    DgeBlockParams<T> p;
  };
  std::vector<Block> blocks;
  Tensor<T> lnf_g, lnf_b, head_w, head_b;

  std::size_t token_count() const { return part.H * part.W; }

  std::vector<Param<T>> params() {
    std::vector<Param<T>> out;
    out.push_back({"patch.w", patch_w});
    out.push_back({"patch.b", patch_b});
    out.push_back({"pos", pos});
    out.push_back({"cls", cls});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string pre = "blocks." + std::to_string(l) + ".";
      auto& b = blocks[l].p;
      out.push_back({pre + "gate.w", b.gate_w});
      out.push_back({pre + "gate.b", b.gate_b});
      out.push_back({pre + "ln1.g", b.enc.ln1_g});
      out.push_back({pre + "ln1.b", b.enc.ln1_b});
      out.push_back({pre + "lnkv.g", b.enc.lnkv_g});
      out.push_back({pre + "lnkv.b", b.enc.lnkv_b});
      out.push_back({pre + "attn.wq", b.enc.attn.wq});
      out.push_back({pre + "attn.bq", b.enc.attn.bq});
      out.push_back({pre + "attn.wk", b.enc.attn.wk});
      out.push_back({pre + "attn.bk", b.enc.attn.bk});
      out.push_back({pre + "attn.wv", b.enc.attn.wv});
      out.push_back({pre + "attn.bv", b.enc.attn.bv});
      out.push_back({pre + "attn.wo", b.enc.attn.wo});
      out.push_back({pre + "attn.bo", b.enc.attn.bo});
      out.push_back({pre + "ln2.g", b.enc.ln2_g});
      out.push_back({pre + "ln2.b", b.enc.ln2_b});
      out.push_back({pre + "ffn.w1", b.enc.ffn_w1});
      out.push_back({pre + "ffn.b1", b.enc.ffn_b1});
      out.push_back({pre + "ffn.w2", b.enc.ffn_w2});
      out.push_back({pre + "ffn.b2", b.enc.ffn_b2});
    }
    out.push_back({"lnf.g", lnf_g});
    out.push_back({"lnf.b", lnf_b});
    out.push_back({"head.w", head_w});
    out.push_back({"head.b", head_b});
    return out;
  }
};

namespace detail {

template <class T>
Tensor<T> normal_init(RngStream& rng, Shape shape, T stddev) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.raw_value()) v = static_cast<T>(rng.normal()) * stddev;
  return t;
}

template <class T>
Tensor<T> const_init(Shape shape, T v) {
  return Tensor<T>::filled(std::move(shape), v, true);
}

}  // namespace detail

template <class T>
VitModel<T> make_model(const VitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  VitModel<T> m;
  m.cfg = cfg;
  const std::size_t G = cfg.tokens_per_axis();
  GranularitySet gran(cfg.phi, cfg.region);
  m.part = partition(G, G, cfg.channels, gran);
  const std::size_t C = cfg.channels, K = gran.K(), HW = G * G;
  const std::size_t F = cfg.ffn_ratio * C;

  RngStream rng(seed, 1);
  const T w0 = T(0.02);
  m.patch_w = detail::normal_init<T>(rng, {cfg.patch * cfg.patch, C}, w0);
  m.patch_b = detail::const_init<T>({1, C}, T(0));
  m.pos = detail::normal_init<T>(rng, {HW, C}, w0);
  m.cls = detail::normal_init<T>(rng, {1, C}, w0);
  const T gate0 = std::sqrt(T(2) / T(C + K));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    typename VitModel<T>::Block b;
    b.p.gate_w = detail::normal_init<T>(rng, {C, K}, gate0);
    b.p.gate_b = detail::const_init<T>({1, K}, T(0));
    b.p.enc.ln1_g = detail::const_init<T>({1, C}, T(1));
    b.p.enc.ln1_b = detail::const_init<T>({1, C}, T(0));
    b.p.enc.lnkv_g = detail::const_init<T>({1, C}, T(1));
    b.p.enc.lnkv_b = detail::const_init<T>({1, C}, T(0));
    b.p.enc.attn.wq = detail::normal_init<T>(rng, {C, C}, w0);
    b.p.enc.attn.bq = detail::const_init<T>({1, C}, T(0));
    b.p.enc.attn.wk = detail::normal_init<T>(rng, {C, C}, w0);
    b.p.enc.attn.bk = detail::const_init<T>({1, C}, T(0));
    b.p.enc.attn.wv = detail::normal_init<T>(rng, {C, C}, w0);
    b.p.enc.attn.bv = detail::const_init<T>({1, C}, T(0));
    b.p.enc.attn.wo = detail::normal_init<T>(rng, {C, C}, w0);
    b.p.enc.attn.bo = detail::const_init<T>({1, C}, T(0));
    b.p.enc.ln2_g = detail::const_init<T>({1, C}, T(1));
    b.p.enc.ln2_b = detail::const_init<T>({1, C}, T(0));
    b.p.enc.ffn_w1 = detail::normal_init<T>(rng, {C, F}, w0);
    b.p.enc.ffn_b1 = detail::const_init<T>({1, F}, T(0));
    b.p.enc.ffn_w2 = detail::normal_init<T>(rng, {F, C}, w0);
    b.p.enc.ffn_b2 = detail::const_init<T>({1, C}, T(0));
    m.blocks.push_back(std::move(b));
  }
  m.lnf_g = detail::const_init<T>({1, C}, T(1));
  m.lnf_b = detail::const_init<T>({1, C}, T(0));
  m.head_w = detail::normal_init<T>(rng, {C, cfg.classes}, w0);
  m.head_b = detail::const_init<T>({1, cfg.classes}, T(0));
  return m;
}

template <class T>
struct LayerTrace {
  GatingDecision<T> decision;
  SparseQuerySet<T> queries;
  std::size_t psi = 0;
};

template <class T>
struct VitOutput {
  Tensor<T> logits;  // 1 x classes
  std::vector<LayerTrace<T>> layers;
};

// Hook applied to the spatial tokens entering each layer; the analysis
// module uses it to record or rewrite features. Must preserve shape.
template <class T>
using TokenTap = std::function<Tensor<T>(const Tensor<T>&, std::size_t)>;

// Rows of the patch-pixel matrix follow token order; pixels within a patch
// are row-major.
template <class T>
Tensor<T> patch_matrix(const VitConfig& cfg, const std::vector<T>& image) {
  const std::size_t px = cfg.patch, G = cfg.tokens_per_axis();
  if (image.size() != cfg.image * cfg.image)
    throw std::invalid_argument("vit_classifier: image has " +
                                std::to_string(image.size()) +
                                " pixels, expected " +
                                std::to_string(cfg.image * cfg.image));
  std::vector<T> data(G * G * px * px);
  std::size_t at = 0;
  for (std::size_t ti = 0; ti < G; ++ti)
    for (std::size_t tj = 0; tj < G; ++tj)
      for (std::size_t pi = 0; pi < px; ++pi)
        for (std::size_t pj = 0; pj < px; ++pj)
          data[at++] = image[(ti * px + pi) * cfg.image + (tj * px + pj)];
  return Tensor<T>::from({G * G, px * px}, std::move(data));
}

template <class T>
VitOutput<T> vit_classifier(const VitModel<T>& m, const std::vector<T>& image,
                            Mode mode, RngStream* rng = nullptr,
                            const std::vector<RouteCtl<T>>* ctl = nullptr,
                            const TokenTap<T>& tap = nullptr) {
  if (ctl && ctl->size() != m.blocks.size())
    throw std::invalid_argument("vit_classifier: need one route control per layer");
  const std::size_t G = m.cfg.tokens_per_axis();
  Tensor<T> x = patch_matrix(m.cfg, image);
  FeatureMap<T> fm;
  fm.tokens = add(add_rowvec(matmul(x, m.patch_w), m.patch_b), m.pos);
  fm.H = G;
  fm.W = G;
  fm.extra = m.cls;

  VitOutput<T> out;
  const T tau = static_cast<T>(m.cfg.tau);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    if (tap) fm.tokens = tap(fm.tokens, l);
    DgeLayerOutput<T> lo =
        dge_block(fm, m.part, m.blocks[l].p, m.cfg.heads, mode, rng, tau,
                  ctl ? &(*ctl)[l] : nullptr);
    fm = lo.y;
    out.layers.push_back({std::move(lo.decision), std::move(lo.queries), lo.psi});
  }
  Tensor<T> h = layer_norm(fm.extra, m.lnf_g, m.lnf_b);
  out.logits = add_rowvec(matmul(h, m.head_w), m.head_b);
  return out;
}

}  // namespace dge
