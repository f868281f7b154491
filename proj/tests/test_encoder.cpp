#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "dge/encoder.hpp"
#include "dge/rng.hpp"
#include "dge/tensor.hpp"
#include "support/fd.hpp"
#include "support/reference.hpp"

using dge::GranularitySet;
using dge::Mode;
using dge::NoGradGuard;
using dge::RngStream;
using dge::Tensor;

namespace {

template <class T>
Tensor<T> randn(RngStream& rng, const dge::Shape& shape,
                bool requires_grad = false, T scale = T(1)) {
  Tensor<T> t = Tensor<T>::zeros(shape, requires_grad);
  for (auto& v : t.raw_value()) v = static_cast<T>(rng.normal()) * scale;
  return t;
}

template <class T>
dge::AttentionParams<T> random_attention(RngStream& rng, std::size_t C,
                                         bool rg = false) {
  dge::AttentionParams<T> p;
  p.wq = randn<T>(rng, {C, C}, rg, T(0.4));
  p.bq = randn<T>(rng, {C}, rg, T(0.1));
  p.wk = randn<T>(rng, {C, C}, rg, T(0.4));
  p.bk = randn<T>(rng, {C}, rg, T(0.1));
  p.wv = randn<T>(rng, {C, C}, rg, T(0.4));
  p.bv = randn<T>(rng, {C}, rg, T(0.1));
  p.wo = randn<T>(rng, {C, C}, rg, T(0.4));
  p.bo = randn<T>(rng, {C}, rg, T(0.1));
  return p;
}

template <class T>
dge::EncoderBlockParams<T> random_block(RngStream& rng, std::size_t C,
                                        std::size_t hidden, bool rg = false) {
  dge::EncoderBlockParams<T> p;
  p.ln1_g = randn<T>(rng, {C}, rg, T(0.2));
  for (auto& v : p.ln1_g.raw_value()) v += T(1);
  p.ln1_b = randn<T>(rng, {C}, rg, T(0.1));
  p.lnkv_g = randn<T>(rng, {C}, rg, T(0.2));
  for (auto& v : p.lnkv_g.raw_value()) v += T(1);
  p.lnkv_b = randn<T>(rng, {C}, rg, T(0.1));
  p.attn = random_attention<T>(rng, C, rg);
  p.ln2_g = randn<T>(rng, {C}, rg, T(0.2));
  for (auto& v : p.ln2_g.raw_value()) v += T(1);
  p.ln2_b = randn<T>(rng, {C}, rg, T(0.1));
  p.ffn_w1 = randn<T>(rng, {C, hidden}, rg, T(0.4));
  p.ffn_b1 = randn<T>(rng, {hidden}, rg, T(0.1));
  p.ffn_w2 = randn<T>(rng, {hidden, C}, rg, T(0.4));
  p.ffn_b2 = randn<T>(rng, {C}, rg, T(0.1));
  return p;
}

ref::Attn ref_attention(const dge::AttentionParams<double>& p) {
  return {ref::of(p.wq), ref::of(p.bq), ref::of(p.wk), ref::of(p.bk),
          ref::of(p.wv), ref::of(p.bv), ref::of(p.wo), ref::of(p.bo)};
}

ref::Block ref_block(const dge::EncoderBlockParams<double>& p,
                     std::size_t hidden) {
  ref::Block b;
  b.ln1_g = ref::of(p.ln1_g);
  b.ln1_b = ref::of(p.ln1_b);
  b.lnkv_g = ref::of(p.lnkv_g);
  b.lnkv_b = ref::of(p.lnkv_b);
  b.attn = ref_attention(p.attn);
  b.ln2_g = ref::of(p.ln2_g);
  b.ln2_b = ref::of(p.ln2_b);
  b.ffn_w1 = ref::of(p.ffn_w1);
  b.ffn_b1 = ref::of(p.ffn_b1);
  b.ffn_w2 = ref::of(p.ffn_w2);
  b.ffn_b2 = ref::of(p.ffn_b2);
  b.hidden = hidden;
  return b;
}

std::vector<dge::Param<double>> block_leaves(dge::EncoderBlockParams<double>& p) {
  return {{"ln1.g", p.ln1_g},   {"ln1.b", p.ln1_b},   {"lnkv.g", p.lnkv_g},
          {"lnkv.b", p.lnkv_b}, {"wq", p.attn.wq},    {"bq", p.attn.bq},
          {"wk", p.attn.wk},    {"bk", p.attn.bk},    {"wv", p.attn.wv},
          {"bv", p.attn.bv},    {"wo", p.attn.wo},    {"bo", p.attn.bo},
          {"ln2.g", p.ln2_g},   {"ln2.b", p.ln2_b},   {"w1", p.ffn_w1},
          {"b1", p.ffn_b1},     {"w2", p.ffn_w2},     {"b2", p.ffn_b2}};
}

Tensor<double> probe_sum(const Tensor<double>& t, const Tensor<double>& g) {
  return dge::sum_all(dge::mul(t, g));
}

}  // namespace

TEST_CASE("attention with one key reduces to a value projection") {
  // A single key makes the softmax weight exactly 1, so the output is the
  // value row pushed through the output projection.
  auto q = Tensor<double>::from({1, 2}, {3.0, -1.0});
  auto kv = Tensor<double>::from({1, 2}, {0.5, 2.0});
  dge::AttentionParams<double> p;
  p.wq = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  p.bq = Tensor<double>::zeros({2});
  p.wk = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  p.bk = Tensor<double>::zeros({2});
  p.wv = Tensor<double>::from({2, 2}, {2, 0, 0, 3});
  p.bv = Tensor<double>::from({2}, {0.25, -0.5});
  p.wo = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  p.bo = Tensor<double>::from({2}, {1.0, 1.0});
  auto out = dge::attention(q, kv, kv, p, 1);
  CHECK(out.value()[0] == doctest::Approx(0.5 * 2 + 0.25 + 1.0));
  CHECK(out.value()[1] == doctest::Approx(2.0 * 3 - 0.5 + 1.0));
}

TEST_CASE("attention matches the loop reference") {
  RngStream rng(31, 0);
  for (std::size_t heads : {1, 2, 4}) {
    auto q = randn<double>(rng, {3, 4});
    auto kv = randn<double>(rng, {5, 4});
    auto p = random_attention<double>(rng, 4);
    auto got = dge::attention(q, kv, kv, p, heads);
    auto want = ref::attention(ref::of(q), 3, ref::of(kv), 5, 4, heads,
                               ref_attention(p));
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(got.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention rejects inconsistent inputs") {
  RngStream rng(32, 0);
  auto q = randn<double>(rng, {2, 4});
  auto kv = randn<double>(rng, {3, 4});
  auto p = random_attention<double>(rng, 4);
  CHECK_THROWS_AS(dge::attention(q, kv, kv, p, 3), std::invalid_argument);
  CHECK_THROWS_AS(dge::attention(q, Tensor<double>::zeros({0, 4}),
                                 Tensor<double>::zeros({0, 4}), p, 2),
                  std::invalid_argument);
  CHECK_THROWS_AS(dge::attention(q, kv, randn<double>(rng, {4, 4}), p, 2),
                  std::invalid_argument);
}

TEST_CASE("encoder block matches the loop reference") {
  RngStream rng(33, 0);
  auto q = randn<double>(rng, {3, 4});
  auto kv = randn<double>(rng, {6, 4});
  auto p = random_block<double>(rng, 4, 8);
  auto got = dge::vanilla_encoder(q, kv, p, 2);
  auto want =
      ref::encoder(ref::of(q), 3, ref::of(kv), 6, 4, 2, ref_block(p, 8));
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(got.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("encoder block passes a finite-difference check") {
  RngStream rng(34, 0);
  auto q = randn<double>(rng, {2, 4}, true);
  auto kv = randn<double>(rng, {3, 4}, true);
  auto p = random_block<double>(rng, 4, 8, true);
  auto g = randn<double>(rng, {2, 4});
  std::vector<Tensor<double>> leaves = {q, kv};
  for (auto& pr : block_leaves(p)) leaves.push_back(pr.tensor);
  auto rep = fd::check(leaves, [&] {
    return probe_sum(dge::vanilla_encoder(q, kv, p, 2), g);
  });
  INFO(rep.where);
  CHECK(rep.max_rel < 1e-6);
}

TEST_CASE("single-candidate routing is the vanilla encoder plus residual") {
  RngStream rng(35, 0);
  const auto part = dge::partition(3, 3, 4, GranularitySet({1}));
  auto p = random_block<double>(rng, 4, 8);
  dge::DgeBlockParams<double> bp;
  bp.gate_w = randn<double>(rng, {4, 1}, false, 0.3);
  bp.gate_b = Tensor<double>::zeros({1});
  bp.enc = p;

  for (int trial = 0; trial < 5; ++trial) {
    dge::FeatureMap<double> x;
    x.tokens = randn<double>(rng, {9, 4});
    x.H = 3;
    x.W = 3;
    x.extra = randn<double>(rng, {1, 4});
    auto out = dge::dge_block(x, part, bp, 2, Mode::infer);

    auto qfull = dge::concat_rows<double>({x.tokens, x.extra});
    auto kv = dge::concat_rows<double>({x.extra, x.tokens});
    auto enc = dge::vanilla_encoder(qfull, kv, p, 2);
    auto want_tokens = dge::add(dge::slice_rows(enc, 0, 9), x.tokens);
    auto want_extra = dge::slice_rows(enc, 9, 10);

    for (std::size_t i = 0; i < 36; ++i)
      CHECK(out.y.tokens.value()[i] ==
            doctest::Approx(want_tokens.value()[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(out.y.extra.value()[i] ==
            doctest::Approx(want_extra.value()[i]).epsilon(1e-12));
    CHECK(out.psi == 9);
  }
}

TEST_CASE("forced routing matches an explicit pooling-matrix composition") {
  // 4x4 grid, 2x2 regions, theta = (pool, fine, pool, fine). The oracle
  // builds the averaging matrix by hand and runs the loop reference.
  RngStream rng(36, 0);
  const std::size_t C = 4, HW = 16;
  const auto part = dge::partition(4, 4, C, GranularitySet({1, 2}));
  auto p = random_block<double>(rng, C, 8);
  dge::DgeBlockParams<double> bp;
  bp.gate_w = randn<double>(rng, {C, 2}, false, 0.3);
  bp.gate_b = Tensor<double>::zeros({2});
  bp.enc = p;

  dge::FeatureMap<double> x;
  x.tokens = randn<double>(rng, {HW, C});
  x.H = 4;
  x.W = 4;
  x.extra = randn<double>(rng, {1, C});

  const std::vector<std::size_t> theta = {1, 0, 1, 0};
  dge::RouteCtl<double> ctl;
  ctl.force_theta = &theta;
  std::vector<dge::RouteCtl<double>> ignored;
  auto out = dge::dge_block(x, part, bp, 2, Mode::infer, nullptr, 1.0, &ctl);
  CHECK(out.decision.theta == theta);
  CHECK(out.psi == 1 + 4 + 1 + 4);

  // query groups in region-major, patch-row-major order
  const std::vector<std::vector<std::size_t>> groups = {
      {0, 1, 4, 5},          // region 0 pooled
      {2}, {3}, {6}, {7},    // region 1 token queries
      {8, 9, 12, 13},        // region 2 pooled
      {10}, {11}, {14}, {15}};
  const std::size_t N = groups.size();
  const ref::Mat P = ref::pool_matrix(groups, HW);
  const ref::Mat xt = ref::of(x.tokens);
  const ref::Mat ex = ref::of(x.extra);

  ref::Mat pooled = ref::matmul(P, N, HW, xt, C);
  ref::Mat qfull = pooled;
  qfull.insert(qfull.end(), ex.begin(), ex.end());
  ref::Mat kv = ex;
  kv.insert(kv.end(), xt.begin(), xt.end());
  ref::Mat enc = ref::encoder(qfull, N + 1, kv, HW + 1, C, 2, ref_block(p, 8));

  ref::Mat want_tokens = xt;
  for (std::size_t g = 0; g < N; ++g)
    for (std::size_t t : groups[g])
      for (std::size_t j = 0; j < C; ++j)
        want_tokens[t * C + j] += enc[g * C + j];

  for (std::size_t i = 0; i < HW * C; ++i)
    CHECK(out.y.tokens.value()[i] ==
          doctest::Approx(want_tokens[i]).epsilon(1e-10));
  for (std::size_t j = 0; j < C; ++j)
    CHECK(out.y.extra.value()[j] ==
          doctest::Approx(enc[N * C + j]).epsilon(1e-10));
}

TEST_CASE("zero noise makes training and inference forwards identical") {
  RngStream rng(37, 0);
  const std::size_t C = 4;
  const auto part = dge::partition(4, 4, C, GranularitySet({0, 1, 2}));
  dge::DgeBlockParams<double> bp;
  bp.gate_w = randn<double>(rng, {C, 3}, false, 0.5);
  bp.gate_b = Tensor<double>::zeros({3});
  bp.enc = random_block<double>(rng, C, 8);

  dge::FeatureMap<double> x;
  x.tokens = randn<double>(rng, {16, C});
  x.H = 4;
  x.W = 4;
  x.extra = randn<double>(rng, {1, C});

  auto zero = Tensor<double>::zeros({part.R, 3});
  dge::RouteCtl<double> ctl;
  ctl.noise = &zero;
  auto trained = dge::dge_block(x, part, bp, 2, Mode::train, nullptr, 1.0, &ctl);
  auto infer = dge::dge_block(x, part, bp, 2, Mode::infer);

  CHECK(trained.decision.theta == infer.decision.theta);
  CHECK(std::memcmp(trained.y.tokens.value().data(),
                    infer.y.tokens.value().data(),
                    sizeof(double) * 16 * C) == 0);
  CHECK(std::memcmp(trained.y.extra.value().data(),
                    infer.y.extra.value().data(), sizeof(double) * C) == 0);
}

TEST_CASE("training mode without noise source is rejected") {
  const auto part = dge::partition(2, 2, 2, GranularitySet({1, 2}));
  dge::DgeBlockParams<double> bp;
  bp.gate_w = Tensor<double>::zeros({2, 2});
  bp.gate_b = Tensor<double>::zeros({2});
  RngStream rng(1, 0);
  bp.enc = random_block<double>(rng, 2, 4);
  dge::FeatureMap<double> x;
  x.tokens = Tensor<double>::zeros({4, 2});
  x.H = 2;
  x.W = 2;
  CHECK_THROWS_AS(dge::dge_block(x, part, bp, 1, Mode::train),
                  std::invalid_argument);
}

TEST_CASE("dge_block gradients match the soft surrogate composition") {
  // Hard-forward engine gradients against finite differences of the
  // manually recomposed surrogate (rows scaled by the soft score) under a
  // linear probe. Fixed noise keeps the winners stable.
  RngStream rng(38, 0);
  const std::size_t C = 4, HW = 16;
  const auto part = dge::partition(4, 4, C, GranularitySet({0, 1, 2}));
  auto x = randn<double>(rng, {HW, C}, true);
  auto extra = randn<double>(rng, {1, C}, true);
  dge::DgeBlockParams<double> bp;
  bp.gate_w = randn<double>(rng, {C, 3}, true, 0.3);
  bp.gate_b = randn<double>(rng, {3}, true, 0.1);
  bp.enc = random_block<double>(rng, C, 8, true);
  auto noise = randn<double>(rng, {part.R, 3}, false, 0.5);
  auto probe_t = randn<double>(rng, {HW, C});
  auto probe_e = randn<double>(rng, {1, C});

  // the winners must be stable under the finite-difference steps
  {
    NoGradGuard ng;
    auto logits = dge::gating_logits(x, part, bp.gate_w, bp.gate_b);
    auto y = dge::add(logits, noise);
    for (std::size_t r = 0; r < part.R; ++r) {
      std::vector<double> row(y.value().begin() + r * 3,
                              y.value().begin() + (r + 1) * 3);
      std::sort(row.begin(), row.end());
      REQUIRE(row[2] - row[1] > 1e-3);
    }
  }

  auto forward = [&](bool surrogate) {
    auto logits = dge::gating_logits(x, part, bp.gate_w, bp.gate_b);
    auto d = dge::select_training_with_noise(logits, noise, 1.0);
    auto s = dge::pool_queries(x, part, d.theta);
    const std::size_t N = s.origin.size();
    auto qfull = dge::concat_rows<double>({s.q, extra});
    auto kv = dge::concat_rows<double>({extra, x});
    auto enc = dge::vanilla_encoder(qfull, kv, bp.enc, 2);
    auto ysp = dge::slice_rows(enc, 0, N);
    ysp = surrogate ? dge::row_scale(ysp, d.p, s.region_of_query)
                    : dge::ste_scale(ysp, d, s);
    auto tokens = dge::add(dge::unpool_restore(ysp, s, part), x);
    auto e_out = dge::slice_rows(enc, N, N + 1);
    return dge::add(probe_sum(tokens, probe_t), probe_sum(e_out, probe_e));
  };

  auto loss = forward(false);
  dge::backward(loss);

  std::vector<dge::Param<double>> leaves = {{"x", x},
                                            {"extra", extra},
                                            {"gate.w", bp.gate_w},
                                            {"gate.b", bp.gate_b}};
  for (auto& pr : block_leaves(bp.enc)) leaves.push_back(pr);
  const double h = 1e-6;
  for (auto& leaf : leaves) {
    const auto analytic = leaf.tensor.grad();
    NoGradGuard ng;
    for (std::size_t i = 0; i < leaf.tensor.size(); ++i) {
      const double keep = leaf.tensor.raw_value()[i];
      leaf.tensor.raw_value()[i] = keep + h;
      const double up = forward(true).item();
      leaf.tensor.raw_value()[i] = keep - h;
      const double dn = forward(true).item();
      leaf.tensor.raw_value()[i] = keep;
      const double numeric = (up - dn) / (2 * h);
      INFO(leaf.name, " element ", i);
      CHECK(fd::rel_err(analytic[i], numeric) < 5e-5);
    }
  }
}

TEST_CASE("model construction is deterministic and fully named") {
  dge::VitConfig cfg;
  cfg.image = 16;
  cfg.patch = 4;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.ffn_ratio = 2;
  cfg.classes = 4;
  cfg.phi = {1, 2, 4};
  cfg.validate();

  auto a = dge::make_model<double>(cfg, 5);
  auto b = dge::make_model<double>(cfg, 5);
  auto c = dge::make_model<double>(cfg, 6);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  REQUIRE(pa.size() == 4 + 20 * cfg.layers + 4);
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.value() == pb[i].tensor.value());
    if (pa[i].tensor.value() != pc[i].tensor.value()) any_diff = true;
  }
  CHECK(any_diff);

  CHECK(a.pos.shape() == dge::Shape{16, 8});
  CHECK(a.cls.shape() == dge::Shape{1, 8});
  for (double v : a.blocks[0].p.gate_b.value()) CHECK(v == 0.0);
  for (double v : a.blocks[0].p.enc.ln1_g.value()) CHECK(v == 1.0);
  for (double v : a.lnf_b.value()) CHECK(v == 0.0);
}

TEST_CASE("classifier produces one logit row per class") {
  dge::VitConfig cfg;
  cfg.image = 16;
  cfg.patch = 4;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.ffn_ratio = 2;
  cfg.classes = 3;
  cfg.phi = {0, 1, 2};
  auto m = dge::make_model<double>(cfg, 9);

  RngStream rng(40, 0);
  std::vector<double> image(16 * 16);
  for (auto& v : image) v = rng.normal() * 0.2;

  NoGradGuard ng;
  auto out1 = dge::vit_classifier(m, image, Mode::infer);
  auto out2 = dge::vit_classifier(m, image, Mode::infer);
  CHECK(out1.logits.shape() == dge::Shape{1, 3});
  CHECK(out1.logits.value() == out2.logits.value());
  REQUIRE(out1.layers.size() == 2);
  for (const auto& tr : out1.layers) {
    CHECK(tr.decision.theta.size() == m.part.R);
    CHECK(tr.psi <= 16);
  }

  std::vector<double> wrong(10);
  CHECK_THROWS_AS(dge::vit_classifier(m, wrong, Mode::infer),
                  std::invalid_argument);
  std::vector<dge::RouteCtl<double>> ctl(1);
  CHECK_THROWS_AS(dge::vit_classifier(m, image, Mode::infer, nullptr, &ctl),
                  std::invalid_argument);
}

TEST_CASE("training forward consumes rng deterministically") {
  dge::VitConfig cfg;
  cfg.image = 16;
  cfg.patch = 4;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.ffn_ratio = 2;
  cfg.classes = 3;
  cfg.phi = {1, 2, 4};
  auto m = dge::make_model<double>(cfg, 9);
  RngStream img_rng(41, 0);
  std::vector<double> image(16 * 16);
  for (auto& v : image) v = img_rng.normal() * 0.2;

  NoGradGuard ng;
  RngStream r1(7, 3), r2(7, 3);
  auto a = dge::vit_classifier(m, image, Mode::train, &r1);
  auto b = dge::vit_classifier(m, image, Mode::train, &r2);
  CHECK(a.logits.value() == b.logits.value());
  for (std::size_t l = 0; l < 2; ++l)
    CHECK(a.layers[l].decision.theta == b.layers[l].decision.theta);
}
