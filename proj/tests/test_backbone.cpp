#include <gtest/gtest.h>

#include "hybridroi/backbone.hpp"
#include "test_util.hpp"

using namespace hybridroi;
using hrtest::expect_bitwise_equal;
using hrtest::random_array;

namespace {

// center-tap identity kernel, out == in channels
void set_identity_conv(DiffArray& w) {
  auto d = w.mutable_data();
  std::fill(d.begin(), d.end(), 0.0f);
  const int64_t O = w.dim(0), C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  for (int64_t o = 0; o < O && o < C; ++o)
    d[static_cast<size_t>(((o * C + o) * kh + kh / 2) * kw + kw / 2)] = 1.0f;
}

void zero_all(ParamStore& ps) {
  for (auto& [name, p] : ps.items())
    std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0f);
}

}  // namespace

// ---------------------------------------------------------------------------
// se_block
// ---------------------------------------------------------------------------

TEST(SeBlock, ZeroedGateWeightsHalveInput) {
  ParamStore ps;
  Rng rng(1);
  detail::add_se_params(ps, "se", 4, 0.25f, rng);
  for (auto& [name, p] : ps.items())
    std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0f);
  auto x = random_array({2, 4, 3, 3}, 5);
  Tape t(false);
  auto y = se_block(t, x, ps, "se");
  for (size_t i = 0; i < x.data().size(); ++i) ASSERT_FLOAT_EQ(y.data()[i], x.data()[i] * 0.5f);
}

TEST(SeBlock, ConstantChannelGivesUniformGate) {
  ParamStore ps;
  Rng rng(2);
  detail::add_se_params(ps, "se", 3, 0.5f, rng);
  // constant per channel -> GAP(x) == the constant -> one gate per channel
  auto x = DiffArray::zeros({1, 3, 4, 4});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 16; ++i)
      x.mutable_data()[static_cast<size_t>(c * 16 + i)] = 0.3f * static_cast<float>(c + 1);
  Tape t(false);
  auto y = se_block(t, x, ps, "se");
  for (int64_t c = 0; c < 3; ++c) {
    const float ratio0 = y.data()[static_cast<size_t>(c * 16)] / x.data()[static_cast<size_t>(c * 16)];
    for (int64_t i = 1; i < 16; ++i)
      ASSERT_FLOAT_EQ(y.data()[static_cast<size_t>(c * 16 + i)] / x.data()[static_cast<size_t>(c * 16 + i)],
                      ratio0);
    ASSERT_GT(ratio0, 0.0f);
    ASSERT_LT(ratio0, 1.0f);  // sigmoid gate in (0,1)
  }
}

TEST(SeBlock, MatchesPrimitiveComposition) {
  ParamStore ps;
  Rng rng(3);
  detail::add_se_params(ps, "se", 6, 0.25f, rng);
  auto x = random_array({2, 6, 5, 5}, 7);
  Tape t(false);
  auto got = se_block(t, x, ps, "se");
  // independent composition from primitives
  auto pooled = reduce_mean(t, x, {2, 3});
  auto h = silu(t, add(t, matmul(t, pooled, ps.at("se.fc1.w")), ps.at("se.fc1.b")));
  auto gate = sigmoid(t, add(t, matmul(t, h, ps.at("se.fc2.w")), ps.at("se.fc2.b")));
  auto want = mul(t, x, reshape(t, gate, {2, 6, 1, 1}));
  for (size_t i = 0; i < got.data().size(); ++i)
    ASSERT_NEAR(got.data()[i], want.data()[i], 1e-6);
}

TEST(SeBlock, ReducedWidthRule) {
  EXPECT_EQ(detail::se_reduced_width(0.25f, 16), 4);
  EXPECT_EQ(detail::se_reduced_width(0.25f, 2), 1);   // floor at 1
  EXPECT_EQ(detail::se_reduced_width(0.0f, 16), 1);   // never zero-width
}

// ---------------------------------------------------------------------------
// fused_mbconv
// ---------------------------------------------------------------------------

TEST(FusedMbconv, IdentityConvsDoubleLargeInputs) {
  // expansion 1, identity 3x3 kernel, stride 1: out = x + silu(x) ~ 2x for
  // large positive x (silu(10) = 9.99955)
  ParamStore ps;
  Rng rng(4);
  BlockShape s{4, 4, 1, 1.0f, 0.0f};
  init_fused_mbconv_params(ps, "blk", s, rng);
  set_identity_conv(ps.at("blk.conv.w"));
  auto x = DiffArray::filled({1, 4, 6, 6}, 10.0f);
  Tape t(false);
  auto y = fused_mbconv(t, x, ps, "blk", s);
  for (float v : y.data()) ASSERT_NEAR(v, 20.0f, 20.0f * 1e-3f);
}

TEST(FusedMbconv, StrideTwoHalvesSpatialDims) {
  ParamStore ps;
  Rng rng(5);
  BlockShape s{4, 8, 2, 2.0f, 0.0f};
  init_fused_mbconv_params(ps, "blk", s, rng);
  auto x = random_array({2, 4, 8, 8}, 6);
  Tape t(false);
  auto y = fused_mbconv(t, x, ps, "blk", s);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 4, 4}));
}

TEST(FusedMbconv, MatchesPrimitiveComposition) {
  ParamStore ps;
  Rng rng(7);
  BlockShape s{3, 5, 1, 2.0f, 0.25f};
  init_fused_mbconv_params(ps, "blk", s, rng);
  auto x = random_array({2, 3, 6, 6}, 8);
  Tape t(false);
  auto got = fused_mbconv(t, x, ps, "blk", s);
  auto h = conv2d(t, x, ps.at("blk.conv.w"), 1, 1, 1);
  h = silu(t, add(t, mul(t, h, ps.at("blk.norm1.gamma")), ps.at("blk.norm1.beta")));
  h = se_block(t, h, ps, "blk.se");
  h = conv2d(t, h, ps.at("blk.project.w"), 1, 0, 1);
  h = add(t, mul(t, h, ps.at("blk.norm2.gamma")), ps.at("blk.norm2.beta"));
  for (size_t i = 0; i < got.data().size(); ++i) ASSERT_NEAR(got.data()[i], h.data()[i], 1e-5);
}

TEST(FusedMbconv, ZeroWeightsGiveExactResidualIdentity) {
  ParamStore ps;
  Rng rng(9);
  BlockShape s{4, 4, 1, 2.0f, 0.25f};
  init_fused_mbconv_params(ps, "blk", s, rng);
  zero_all(ps);  // main branch contributes exactly 0, residual passes x through
  auto x = random_array({1, 4, 5, 5}, 10);
  Tape t(false);
  auto y = fused_mbconv(t, x, ps, "blk", s);
  expect_bitwise_equal(y.data(), x.data());
}

// ---------------------------------------------------------------------------
// mbconv
// ---------------------------------------------------------------------------

TEST(Mbconv, IdentityWeightsResidualDoubling) {
  // expand/dw/project all identity, se off: out = x + silu(silu(x)) ~ 2x at
  // large positive x
  ParamStore ps;
  Rng rng(11);
  BlockShape s{4, 4, 1, 1.0f, 0.0f};
  init_mbconv_params(ps, "blk", s, rng);
  set_identity_conv(ps.at("blk.expand.w"));
  set_identity_conv(ps.at("blk.project.w"));
  {
    auto& dw = ps.at("blk.dw.w");
    auto d = dw.mutable_data();
    std::fill(d.begin(), d.end(), 0.0f);
    for (int64_t c = 0; c < 4; ++c) d[static_cast<size_t>(c * 9 + 4)] = 1.0f;  // center tap
  }
  auto x = DiffArray::filled({1, 4, 6, 6}, 10.0f);
  Tape t(false);
  auto y = mbconv(t, x, ps, "blk", s);
  for (float v : y.data()) ASSERT_NEAR(v, 20.0f, 20.0f * 1e-3f);
}

TEST(Mbconv, StrideTwoHalvesSpatialDims) {
  ParamStore ps;
  Rng rng(12);
  BlockShape s{6, 12, 2, 4.0f, 0.25f};
  init_mbconv_params(ps, "blk", s, rng);
  auto x = random_array({1, 6, 10, 10}, 13);
  Tape t(false);
  auto y = mbconv(t, x, ps, "blk", s);
  EXPECT_EQ(y.shape(), (Shape{1, 12, 5, 5}));
}

TEST(Mbconv, MatchesPrimitiveComposition) {
  ParamStore ps;
  Rng rng(14);
  BlockShape s{4, 4, 1, 2.0f, 0.25f};
  init_mbconv_params(ps, "blk", s, rng);
  auto x = random_array({2, 4, 6, 6}, 15);
  Tape t(false);
  auto got = mbconv(t, x, ps, "blk", s);
  auto h = conv2d(t, x, ps.at("blk.expand.w"), 1, 0, 1);
  h = silu(t, add(t, mul(t, h, ps.at("blk.norm1.gamma")), ps.at("blk.norm1.beta")));
  h = conv2d(t, h, ps.at("blk.dw.w"), 1, 1, 8);
  h = silu(t, add(t, mul(t, h, ps.at("blk.norm2.gamma")), ps.at("blk.norm2.beta")));
  h = se_block(t, h, ps, "blk.se");
  h = conv2d(t, h, ps.at("blk.project.w"), 1, 0, 1);
  h = add(t, mul(t, h, ps.at("blk.norm3.gamma")), ps.at("blk.norm3.beta"));
  h = add(t, h, x);
  for (size_t i = 0; i < got.data().size(); ++i) ASSERT_NEAR(got.data()[i], h.data()[i], 1e-5);
}

TEST(Mbconv, ZeroWeightsGiveExactResidualIdentity) {
  ParamStore ps;
  Rng rng(16);
  BlockShape s{4, 4, 1, 2.0f, 0.25f};
  init_mbconv_params(ps, "blk", s, rng);
  zero_all(ps);
  auto x = random_array({1, 4, 5, 5}, 17);
  Tape t(false);
  auto y = mbconv(t, x, ps, "blk", s);
  expect_bitwise_equal(y.data(), x.data());
}

// ---------------------------------------------------------------------------
// backbone_forward
// ---------------------------------------------------------------------------

TEST(Backbone, TinyShapeContract) {
  auto cfg = BackboneConfig::preset("tiny");
  EXPECT_EQ(cfg.total_stride(), 16);
  ParamStore ps;
  Rng rng(18);
  init_backbone_params(ps, cfg, rng);
  auto x = random_array({2, 3, 64, 64}, 19);
  Tape t(false);
  auto y = backbone_forward(t, x, ps, cfg);
  EXPECT_EQ(y.shape(), (Shape{2, 128, 4, 4}));
}

TEST(Backbone, MLikeShapeContractTruncated) {
  // full stage widths, repeats truncated to 1 for unit-test speed; stride and
  // head width are unaffected by truncation
  auto cfg = BackboneConfig::preset("m-like", 1);
  EXPECT_EQ(cfg.total_stride(), 32);
  ParamStore ps;
  Rng rng(20);
  init_backbone_params(ps, cfg, rng);
  auto x = random_array({1, 3, 224, 224}, 21);
  Tape t(false);
  auto y = backbone_forward(t, x, ps, cfg);
  EXPECT_EQ(y.shape(), (Shape{1, 1280, 7, 7}));
}

TEST(Backbone, ZeroInputZeroBiasesGiveZeroFeatureMap) {
  auto cfg = BackboneConfig::preset("tiny");
  ParamStore ps;
  Rng rng(22);
  init_backbone_params(ps, cfg, rng);  // betas and SE biases init to zero
  auto x = DiffArray::zeros({1, 3, 32, 32});
  Tape t(false);
  auto y = backbone_forward(t, x, ps, cfg);
  for (float v : y.data()) ASSERT_EQ(v, 0.0f);
}

TEST(Backbone, IndivisibleInputThrows) {
  auto cfg = BackboneConfig::preset("tiny");
  ParamStore ps;
  Rng rng(23);
  init_backbone_params(ps, cfg, rng);
  auto x = random_array({1, 3, 50, 50}, 24);
  Tape t(false);
  EXPECT_THROW(backbone_forward(t, x, ps, cfg), DimError);
}

TEST(Backbone, ParamCountIsPureFunctionOfConfig) {
  const int64_t a = backbone_param_count(BackboneConfig::preset("tiny"));
  const int64_t b = backbone_param_count(BackboneConfig::preset("tiny"));
  EXPECT_EQ(a, b);
  EXPECT_GT(a, 0);
  // different config -> different count
  EXPECT_NE(a, backbone_param_count(BackboneConfig::preset("m-like", 1)));
}

TEST(Backbone, OutputSpatialDimsFollowStride) {
  auto cfg = BackboneConfig::preset("tiny");
  ParamStore ps;
  Rng rng(25);
  init_backbone_params(ps, cfg, rng);
  for (int64_t hw : {32, 48, 80}) {
    auto x = random_array({1, 3, hw, hw}, 26);
    Tape t(false);
    auto y = backbone_forward(t, x, ps, cfg);
    EXPECT_EQ(y.dim(2), hw / 16);
    EXPECT_EQ(y.dim(3), hw / 16);
  }
}

TEST(Backbone, GradCheckSmallComposite) {
  // composite bar is 1e-2
  ParamStore ps;
  Rng rng(27);
  BlockShape s{3, 3, 1, 2.0f, 0.25f};
  init_fused_mbconv_params(ps, "blk", s, rng);
  auto x = random_array({1, 3, 4, 4}, 28, 0.1f, 1.0f);
  double err = grad_check(
      [&](Tape& t, const DiffArray& a) {
        auto y = fused_mbconv(t, a, ps, "blk", s);
        return reduce_mean(t, mul(t, y, y), {0, 1, 2, 3});
      },
      x, 5e-3f);
  EXPECT_LT(err, 1e-2);
}
