#include <gtest/gtest.h>
#include <torch/torch.h>

#include "oracles.hpp"
#include "refsr/core/errors.hpp"
#include "refsr/core/rng.hpp"
#include "refsr/global/attention.hpp"
#include "refsr/global/global_fusion.hpp"
#include "refsr/local/local_fusion.hpp"

using namespace refsr;
using namespace refsr::global;
using namespace refsr::local;

// --- masked attention ----------------------------------------------------

TEST(MaskedAttention, MatchesRetainedKeyOracle) {
  Rng rng(11);
  torch::manual_seed(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t L = rng.between(1, 8), M = rng.between(1, 12), C = rng.between(1, 16);
    auto q = torch::randn({L, C}), k = torch::randn({M, C}), v = torch::randn({M, C});
    std::vector<bool> keep(M);
    auto mask = torch::zeros({M});
    for (int64_t j = 0; j < M; ++j) {
      keep[j] = rng.bernoulli(0.6);
      mask[j] = keep[j] ? 1.0 : 0.0;
    }
    if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; })) {
      keep[0] = true;
      mask[0] = 1.0;
    }
    auto got = masked_attention(q, k, v, mask);
    auto want = oracle::retained_attention(q, k, v, keep);
    EXPECT_LE((got.to(torch::kFloat64) - want).abs().max().item<double>(), 1e-5);
  }
}

TEST(MaskedAttention, AllZeroMaskGivesZeroTerm) {
  auto q = torch::randn({3, 4}), k = torch::randn({5, 4});
  auto out = masked_attention(q, k, k, torch::zeros({5}));
  EXPECT_EQ(out.abs().max().item<float>(), 0.0f);
}

TEST(MaskedAttention, RowsSumToOne) {
  auto q = torch::randn({2, 6, 8}), k = torch::randn({2, 9, 8});
  auto mask = (torch::rand({2, 9}) > 0.3).to(torch::kFloat32);
  mask.select(1, 0).fill_(1.0);
  auto ones = torch::ones({2, 9, 1});
  auto rows = masked_attention(q, k, ones, mask);
  EXPECT_LE((rows - 1.0).abs().max().item<float>(), 1e-6);
}

TEST(MaskedAttention, ShapeErrors) {
  auto q = torch::randn({3, 4}), k = torch::randn({5, 4});
  EXPECT_THROW(masked_attention(q, k, k, torch::ones({4})), ShapeError);
  EXPECT_THROW(masked_attention(q, torch::randn({5, 3}), k), ShapeError);
  EXPECT_THROW(masked_attention(torch::randn({3, 0}), torch::randn({5, 0}), k), ParameterError);
}

TEST(MaskedCrossAttention, ZeroStrengthIsIdentity) {
  auto q = torch::randn({3, 4}), k = torch::randn({5, 4});
  EXPECT_TRUE(torch::equal(masked_cross_attention(q, k, k, std::nullopt, 0.0), q));
  EXPECT_THROW(masked_cross_attention(q, k, k, std::nullopt, 1.5), ParameterError);
  auto full = masked_cross_attention(q, k, k, std::nullopt, 1.0);
  EXPECT_TRUE(torch::allclose(full, q + masked_attention(q, k, k)));
}

TEST(Flops, TokenReduction) {
  EXPECT_NEAR(flops_reduction(900, 96), 1.0 - 96.0 / 900.0, 1e-15);
  EXPECT_EQ(std::round(flops_reduction(900, 96) * 1000) / 10, 89.3);
  EXPECT_EQ(flops_cross_attention(1, 4, 10, 0, 64), 0);
  EXPECT_EQ(flops_cross_attention(2, 4, 10, 96, 64), 2 * flops_cross_attention(1, 4, 10, 96, 64));
  EXPECT_THROW(flops_cross_attention(-1, 1, 1, 1, 1), ParameterError);
}

// --- global branch -------------------------------------------------------

TEST(PatchEncoder, TokenCountAndDeterminism) {
  PatchGlobalEncoder enc(480, 16, 8);
  torch::NoGradGuard ng;
  auto img = torch::rand({1, 3, 480, 480}) * 2 - 1;
  auto a = enc.encode(img), b = enc.encode(img);
  EXPECT_EQ(a.count(), 900);
  EXPECT_EQ(a.gh * a.gw, 900);
  EXPECT_TRUE(torch::equal(a.tokens, b.tokens));
  EXPECT_THROW(enc.encode(torch::zeros({1, 3, 64, 64})), ShapeError);
}

TEST(PatchEncoder, TokensTrackTheirPatch) {
  PatchGlobalEncoder enc(64, 8, 16);
  torch::NoGradGuard ng;
  auto img = torch::rand({1, 3, 64, 64}) * 2 - 1;
  auto base = enc.encode(img).tokens[0];
  const int64_t pi = 3, pj = 5;
  auto bump = img.clone();
  bump.narrow(2, pi * 8, 8).narrow(3, pj * 8, 8).add_(0.5);
  auto diff = (enc.encode(bump).tokens[0] - base).norm(2, 1);
  EXPECT_EQ(diff.argmax().item<int64_t>(), pi * 8 + pj);
}

TEST(EncoderRegistry, UnknownNameIsConfigError) {
  EXPECT_THROW(EncoderRegistry::instance().create("dinov2", 64, 8, 16), ConfigError);
  EXPECT_NE(EncoderRegistry::instance().create("patch", 64, 8, 16), nullptr);
}

TEST(Projector, ZeroInZeroOut) {
  Projector p(8, 16);
  torch::NoGradGuard ng;
  p->fc1->bias.zero_();
  p->fc2->bias.zero_();
  auto out = p->forward(torch::zeros({2, 7, 8}));
  EXPECT_EQ(out.sizes(), torch::IntArrayRef({2, 7, 16}));
  EXPECT_EQ(out.abs().max().item<float>(), 0.0f);
}

TEST(Aggregator, QueryCountIndependentOfTokens) {
  SemanticAggregator agg(6, 16, 4);
  torch::NoGradGuard ng;
  for (int64_t M : {1, 10, 900}) EXPECT_EQ(agg->forward(torch::randn({2, M, 16})).sizes(), torch::IntArrayRef({2, 6, 16}));
  EXPECT_THROW(agg->forward(torch::randn({2, 5, 8})), ShapeError);
}

TEST(Aggregator, PermutationInvariantOverTokens) {
  SemanticAggregator agg(4, 16, 2);
  torch::NoGradGuard ng;
  auto f = torch::randn({1, 12, 16});
  auto perm = torch::randperm(12);
  auto a = agg->forward(f), b = agg->forward(f.index_select(1, perm));
  EXPECT_LE((a - b).abs().max().item<float>(), 1e-5);
}

TEST(Aggregator, MaskedTokensAreIgnored) {
  SemanticAggregator agg(4, 16, 2);
  torch::NoGradGuard ng;
  auto f = torch::randn({1, 10, 16});
  auto mask = torch::ones({1, 10});
  mask.narrow(1, 5, 5).zero_();
  auto g = f.clone();
  g.narrow(1, 5, 5).copy_(torch::randn({1, 5, 16}));
  EXPECT_LE((agg->forward(f, mask) - agg->forward(g, mask)).abs().max().item<float>(), 1e-6);
}

TEST(Aggregator, GradCheckDouble) {
  SemanticAggregator agg(3, 8, 2);
  agg->to(torch::kFloat64);
  auto f = torch::randn({1, 5, 8}, torch::kFloat64);
  EXPECT_LE(oracle::grad_check([&](const torch::Tensor& x) { return agg->forward(x); }, f, 1e-6), 1e-5);
}

// --- windows -------------------------------------------------------------

TEST(Windows, SmallRoundTrip) {
  auto f = torch::arange(16, torch::kFloat32).view({1, 4, 4});
  auto w = unfold_windows(f, {2, 2});
  EXPECT_EQ(w.size(0), 4);
  EXPECT_TRUE(torch::equal(w[1][0], torch::tensor({{2.f, 3.f}, {6.f, 7.f}})));
  EXPECT_TRUE(torch::equal(fold_windows(w, 1, 4, 4)[0], f));
}

TEST(Windows, FullSizeWindowIsInput) {
  auto f = torch::randn({2, 3, 6, 5});
  auto w = unfold_windows(f, {6, 5});
  EXPECT_TRUE(torch::equal(w, f));
}

TEST(Windows, RandomRoundTripExact) {
  auto f = torch::randn({3, 16, 24});
  auto w = unfold_windows(f, {8, 8});
  EXPECT_EQ(w.size(0), 6);
  EXPECT_EQ((fold_windows(w, 1, 16, 24)[0] - f).abs().max().item<float>(), 0.0f);
}

TEST(Windows, Errors) {
  EXPECT_THROW(unfold_windows(torch::zeros({1, 4, 4}), {0, 2}), ParameterError);
  EXPECT_THROW(unfold_windows(torch::zeros({1, 5, 4}), {2, 2}), ShapeError);
  EXPECT_THROW(fold_windows(torch::zeros({3, 1, 2, 2}), 1, 4, 4), ShapeError);
}

TEST(Windows, PaddingCropsBack) {
  auto x = torch::randn({1, 2, 5, 7});
  auto p = pad_to_window(x, {4, 4});
  EXPECT_EQ(p.size(2), 8);
  EXPECT_EQ(p.size(3), 8);
  EXPECT_TRUE(torch::equal(p.narrow(2, 0, 5).narrow(3, 0, 7), x));
}

// --- local cross-attention -----------------------------------------------

namespace {

/// Brute force: loop over windows and positions using the module's own
/// projections, softmax by hand.
torch::Tensor brute_window_attention(LocalCrossAttention& m, const torch::Tensor& f_lr, const torch::Tensor& f_ref) {
  const auto win = m->window;
  auto lr = pad_to_window(f_lr, win), rf = pad_to_window(f_ref, win);
  const int64_t B = f_lr.size(0), C = f_lr.size(1), H = f_lr.size(2), W = f_lr.size(3);
  const int64_t Hp = lr.size(2), Wp = lr.size(3);
  auto out = torch::zeros({B, C, Hp, Wp}, torch::kFloat64);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t wy = 0; wy < Hp; wy += win.h)
      for (int64_t wx = 0; wx < Wp; wx += win.w) {
        auto ql = lr[b].narrow(1, wy, win.h).narrow(2, wx, win.w).reshape({C, -1}).t();
        auto kr = rf[b].narrow(1, wy, win.h).narrow(2, wx, win.w).reshape({C, -1}).t();
        auto q = m->to_q(m->norm_lr(ql)), kv = m->norm_ref(kr);
        auto k = m->to_k(kv), v = m->to_v(kv);
        std::vector<bool> keep(k.size(0), true);
        auto o = oracle::retained_attention(q, k, v, keep);  // (hw, C)
        out[b].narrow(1, wy, win.h).narrow(2, wx, win.w).copy_(o.t().reshape({C, win.h, win.w}));
      }
  return out.narrow(2, 0, H).narrow(3, 0, W);
}

}  // namespace

TEST(LocalCrossAttention, MatchesPerWindowOracle) {
  Rng rng(3);
  torch::manual_seed(3);
  torch::NoGradGuard ng;
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t C = rng.between(1, 8), H = rng.between(2, 12), W = rng.between(2, 12);
    const WindowSize win{rng.between(1, 4), rng.between(1, 4)};
    LocalCrossAttention m(C, win);
    auto a = torch::randn({2, C, H, W}), b = torch::randn({2, C, H, W});
    auto got = m->attend(a, b);
    EXPECT_LE((got.to(torch::kFloat64) - brute_window_attention(m, a, b)).abs().max().item<double>(), 1e-5);
  }
}

TEST(LocalCrossAttention, SaturatedKeyPicksItsValue) {
  // Two-position window where one key aligns strongly with the query.
  LocalCrossAttention m(2, WindowSize{1, 2});
  torch::NoGradGuard ng;
  for (auto* l : {&m->to_q, &m->to_k, &m->to_v}) (*l)->weight.copy_(torch::eye(2) * 40.0);
  m->norm_lr->weight.fill_(1.0), m->norm_lr->bias.zero_();
  m->norm_ref->weight.fill_(1.0), m->norm_ref->bias.zero_();
  auto lr = torch::tensor({1.f, 1.f, -1.f, -1.f}).view({1, 2, 1, 2});   // both positions normalize to (1,-1)
  auto ref = torch::tensor({1.f, -1.f, -1.f, 1.f}).view({1, 2, 1, 2});  // position 0 -> (1,-1), 1 -> (-1,1)
  auto o = m->attend(lr, ref);
  auto kr = m->norm_ref(ref.flatten(2).transpose(1, 2))[0];
  auto v0 = m->to_v(kr[0]);
  // hand-computed softmax weight of the matching key
  auto q = m->to_q(m->norm_lr(lr.flatten(2).transpose(1, 2))[0][0]);
  const double s0 = (q * m->to_k(kr[0])).sum().item<double>() / std::sqrt(2.0);
  const double s1 = (q * m->to_k(kr[1])).sum().item<double>() / std::sqrt(2.0);
  const double w0 = 1.0 / (1.0 + std::exp(s1 - s0));
  EXPECT_GT(w0, 1.0 - 1e-12);
  EXPECT_NEAR(o[0][0][0][0].item<double>(), v0[0].item<double>(), 1e-4);
  EXPECT_NEAR(o[0][1][0][0].item<double>(), v0[1].item<double>(), 1e-4);
}

TEST(LocalCrossAttention, IdenticalFeaturesGiveUnitCosine) {
  LocalCrossAttention m(4, WindowSize{2, 2});
  torch::NoGradGuard ng;
  auto f = torch::randn({1, 4, 6, 6});
  auto out = m->forward(f, f);
  EXPECT_LE((out.m_lca - 1.0).abs().max().item<float>(), 1e-6);
  EXPECT_THROW(LocalCrossAttention(0, WindowSize{2, 2}), ParameterError);
}

// --- mask attention / CAA -------------------------------------------------

TEST(MaskAttention, GateEndpoints) {
  MaskAttention m(3);
  torch::NoGradGuard ng;
  auto a = torch::randn({1, 3, 5, 5}), b = torch::randn({1, 3, 5, 5});
  auto zero = m->forward(a, b, torch::zeros({1, 1, 5, 5}));
  EXPECT_TRUE(torch::equal(zero.out, zero.f_lr_hat));
  m->conv_mask->weight.zero_();
  m->conv_mask->bias.fill_(1e4);
  auto one = m->forward(a, b);
  EXPECT_TRUE(torch::equal(one.out, m->conv_ref(b)));
}

TEST(MaskAttention, OutputIsConvexBlend) {
  MaskAttention m(4);
  torch::NoGradGuard ng;
  auto a = torch::randn({2, 4, 6, 6}), b = torch::randn({2, 4, 6, 6});
  auto o = m->forward(a, b);
  auto ra = m->conv_lr(a), rb = m->conv_ref(b);
  EXPECT_TRUE((o.out >= torch::minimum(ra, rb) - 1e-6).all().item<bool>());
  EXPECT_TRUE((o.out <= torch::maximum(ra, rb) + 1e-6).all().item<bool>());
  EXPECT_GE(o.m_ma.min().item<float>(), 0.0f);
  EXPECT_LE(o.m_ma.max().item<float>(), 1.0f);
}

TEST(CAABlock, ZeroGateIsLrOnly) {
  CAABlock blk(4, WindowSize{4, 4});
  torch::NoGradGuard ng;
  auto a = torch::randn({1, 4, 8, 8}), b = torch::randn({1, 4, 8, 8});
  auto [out, maps] = blk->forward(a, b, torch::zeros({1, 1, 8, 8}));
  EXPECT_TRUE(torch::equal(out, blk->mask_attn->conv_lr(a) + a));
  EXPECT_EQ(maps.effective_ma().abs().max().item<float>(), 0.0f);
}

TEST(CAABlock, HalfMaskRegions) {
  CAABlock blk(4, WindowSize{4, 4});
  torch::NoGradGuard ng;
  auto a = torch::randn({1, 4, 8, 8}), b = torch::randn({1, 4, 8, 8});
  auto gate = torch::zeros({1, 1, 8, 8});
  gate.narrow(3, 4, 4).fill_(1.0);
  auto mixed = blk->forward(a, b, gate).first;
  auto lr_only = blk->forward(a, b, torch::zeros({1, 1, 8, 8})).first;
  auto full = blk->forward(a, b, torch::ones({1, 1, 8, 8})).first;
  EXPECT_TRUE(torch::equal(mixed.narrow(3, 0, 4), lr_only.narrow(3, 0, 4)));
  EXPECT_TRUE(torch::equal(mixed.narrow(3, 4, 4), full.narrow(3, 4, 4)));
}

TEST(CAABlock, GradCheckDouble) {
  CAABlock blk(2, WindowSize{2, 2});
  blk->to(torch::kFloat64);
  auto a = torch::randn({1, 2, 4, 4}, torch::kFloat64), b = torch::randn({1, 2, 4, 4}, torch::kFloat64);
  auto x = torch::cat({a, b}, 1);
  auto fn = [&](const torch::Tensor& in) { return blk->forward(in.narrow(1, 0, 2), in.narrow(1, 2, 2)).first; };
  EXPECT_LE(oracle::grad_check(fn, x, 1e-6), 1e-5);
}

TEST(CAABlock, ShapeMismatch) {
  CAABlock blk(2, WindowSize{2, 2});
  EXPECT_THROW(blk->forward(torch::randn({1, 2, 4, 4}), torch::randn({1, 2, 4, 6})), ShapeError);
  EXPECT_THROW(blk->forward(torch::randn({1, 2, 4, 4}), torch::randn({1, 2, 4, 4}), torch::ones({1, 1, 2, 2})),
               ShapeError);
}

// --- LT encoder / adapter --------------------------------------------------

TEST(LTEncoder, ZeroStrengthIgnoresReference) {
  LTEncoder enc(LTEncoderConfig{{4, 8, 8}, {4, 4}});
  torch::NoGradGuard ng;
  auto lr = torch::rand({1, 3, 16, 16}) * 2 - 1;
  ControlSpec c;
  c.s = 0.0;
  auto ctl = ControlMaps::from_spec(c, 16, 16);
  auto a = enc->forward(lr, torch::rand({1, 3, 16, 16}) * 2 - 1, ctl);
  auto b = enc->forward(lr, torch::rand({1, 3, 16, 16}) * 2 - 1, ctl);
  EXPECT_TRUE(torch::equal(a.f_local, b.f_local));
  EXPECT_EQ(a.f_local.sizes(), torch::IntArrayRef({1, 8, 4, 4}));
  EXPECT_EQ(a.maps.size(), 3u);
}

TEST(LTEncoder, DeterministicAndMapsInRange) {
  LTEncoder enc(LTEncoderConfig{{4, 8}, {4, 4}});
  torch::NoGradGuard ng;
  auto lr = torch::rand({2, 3, 8, 8}) * 2 - 1, ref = torch::rand({2, 3, 8, 8}) * 2 - 1;
  auto a = enc->forward(lr, ref, ControlMaps::full(2)), b = enc->forward(lr, ref, ControlMaps::full(2));
  EXPECT_TRUE(torch::equal(a.f_local, b.f_local));
  for (const auto& m : a.maps) {
    EXPECT_GE(m.m_ma.min().item<float>(), 0.0f);
    EXPECT_LE(m.m_lca.max().item<float>(), 1.0f);
    EXPECT_GE(m.m_lca.min().item<float>(), -1.0f);
  }
  EXPECT_THROW(enc->forward(lr, torch::zeros({2, 3, 8, 10}), ControlMaps::full(2)), ShapeError);
}

TEST(LTEncoder, IdenticalFirstScaleFeaturesGiveUnitCosine) {
  LTEncoder enc(LTEncoderConfig{{4, 8}, {4, 4}});
  torch::NoGradGuard ng;
  // share the branch weights so identical images give identical features
  auto& lrp = enc->lr_in, &rfp = enc->ref_in;
  rfp->weight.copy_(lrp->weight), rfp->bias.copy_(lrp->bias);
  for (const auto& kv : enc->named_parameters()) {
    const auto& k = kv.key();
    if (k.rfind("ref_", 0) == 0 && k.rfind("ref_in", 0) != 0) {
      auto twin = "lr_" + k.substr(4);
      kv.value().copy_(enc->named_parameters()[twin]);
    }
  }
  auto x = torch::rand({1, 3, 8, 8}) * 2 - 1;
  ControlSpec c;
  c.s = 0.0;
  auto out = enc->forward(x, x, ControlMaps::from_spec(c, 8, 8));
  EXPECT_LE((out.maps[0].m_lca - 1.0).abs().max().item<float>(), 1e-5);
}

TEST(Adapter, HalvingLevelsAndZeroInit) {
  Adapter ad(8, std::vector<int64_t>{8, 16, 16, 16});
  torch::NoGradGuard ng;
  auto out = ad->forward(torch::randn({1, 8, 40, 40}));
  ASSERT_EQ(out.size(), 4u);
  const int64_t want[4] = {40, 20, 10, 5};
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(out[k].size(2), want[k]);
    EXPECT_EQ(out[k].abs().max().item<float>(), 0.0f);
  }
  EXPECT_THROW(ad->forward(torch::randn({1, 8, 36, 36})), ShapeError);
  EXPECT_THROW(Adapter(8, std::vector<int64_t>{}), ConfigError);
}
