#include <gtest/gtest.h>

#include "hybridroi/model.hpp"
#include "test_util.hpp"

using namespace hybridroi;
using hrtest::expect_bitwise_equal;
using hrtest::random_array;

static void randomize_out_proj(ParamStore& ps, uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, p] : ps.items())
    if (name.find(".out_proj.w") != std::string::npos)
      he_uniform_fill(p, p.dim(0), rng);
}

static ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.backbone_preset = "tiny";
  cfg.patch_size = 1;
  cfg.token_dim = 32;
  cfg.scan.state_dim = 4;
  cfg.scan.conv_width = 3;
  cfg.scan.blocks = 2;
  return cfg;
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

TEST(Patchify, TwelveByTwelveGrid) {
  Tape t(false);
  auto fm = random_array({1, 1280, 12, 12}, 1);
  auto p1 = patchify(t, fm, 1);
  EXPECT_EQ(p1.shape(), (Shape{1, 144, 1280}));
  auto p2 = patchify(t, fm, 2);
  EXPECT_EQ(p2.shape(), (Shape{1, 36, 5120}));
}

TEST(Patchify, FullGridSingleToken) {
  Tape t(false);
  auto fm = random_array({1, 2, 3, 3}, 2);
  auto p = patchify(t, fm, 3);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 18}));
  // channel-first flatten: feature index = (c*P + pi)*P + pj
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t pi = 0; pi < 3; ++pi)
      for (int64_t pj = 0; pj < 3; ++pj)
        ASSERT_EQ(p.data()[static_cast<size_t>((c * 3 + pi) * 3 + pj)],
                  fm.data()[static_cast<size_t>((c * 3 + pi) * 3 + pj)]);
}

TEST(Patchify, IndexOracle) {
  Tape t(false);
  auto fm = random_array({2, 3, 4, 4}, 3);
  auto p = patchify(t, fm, 2);
  EXPECT_EQ(p.shape(), (Shape{2, 4, 12}));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t gi = 0; gi < 2; ++gi)
      for (int64_t gj = 0; gj < 2; ++gj)
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t pi = 0; pi < 2; ++pi)
            for (int64_t pj = 0; pj < 2; ++pj) {
              const int64_t tok = gi * 2 + gj;
              const int64_t f = (c * 2 + pi) * 2 + pj;
              ASSERT_EQ(p.data()[static_cast<size_t>((b * 4 + tok) * 12 + f)],
                        fm.data()[static_cast<size_t>(((b * 3 + c) * 4 + gi * 2 + pi) * 4 +
                                                      gj * 2 + pj)]);
            }
}

TEST(Patchify, IndivisibleGridThrows) {
  Tape t(false);
  auto fm = random_array({1, 2, 5, 5}, 4);
  EXPECT_THROW(patchify(t, fm, 2), DimError);
}

TEST(Patchify, GradCheck) {
  auto fm = random_array({1, 2, 4, 4}, 5);
  double err = grad_check(
      [](Tape& t, const DiffArray& a) {
        auto p = patchify(t, a, 2);
        return reduce_sum(t, mul(t, p, p), {0, 1, 2});
      },
      fm, 5e-3f);
  EXPECT_LT(err, 1e-2);
}

// ---------------------------------------------------------------------------
// project_tokens / add_positional
// ---------------------------------------------------------------------------

TEST(ProjectTokens, IdentityAndZero) {
  Tape t(false);
  auto tokens = random_array({2, 3, 4}, 6);
  auto eye = DiffArray::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.mutable_data()[static_cast<size_t>(i * 4 + i)] = 1.0f;
  auto projected = project_tokens(t, tokens, eye);
  expect_bitwise_equal(projected.data(), tokens.data());
  auto zero = DiffArray::zeros({4, 5});
  auto zeros_out = project_tokens(t, tokens, zero);
  for (float v : zeros_out.data()) ASSERT_EQ(v, 0.0f);
}

TEST(ProjectTokens, MatmulOracle) {
  Tape t(false);
  auto tokens = random_array({2, 3, 4}, 7);
  auto w = random_array({4, 6}, 8);
  auto got = project_tokens(t, tokens, w);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t tok = 0; tok < 3; ++tok)
      for (int64_t d = 0; d < 6; ++d) {
        double acc = 0.0;
        for (int64_t k = 0; k < 4; ++k)
          acc += static_cast<double>(tokens.data()[static_cast<size_t>((b * 3 + tok) * 4 + k)]) *
                 w.data()[static_cast<size_t>(k * 6 + d)];
        ASSERT_NEAR(got.data()[static_cast<size_t>((b * 3 + tok) * 6 + d)], acc, 1e-6);
      }
}

TEST(AddPositional, ZeroTableIsIdentity) {
  Tape t(false);
  auto tokens = random_array({2, 5, 3}, 9);
  auto got = add_positional(t, tokens, DiffArray::zeros({5, 3}));
  expect_bitwise_equal(got.data(), tokens.data());
}

TEST(AddPositional, ZeroTokensYieldBroadcastTable) {
  Tape t(false);
  auto pos = random_array({4, 3}, 10);
  auto got = add_positional(t, DiffArray::zeros({2, 4, 3}), pos);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 12; ++i)
      ASSERT_EQ(got.data()[static_cast<size_t>(b * 12 + i)], pos.data()[static_cast<size_t>(i)]);
}

TEST(AddPositional, TokenCountMismatchThrows) {
  Tape t(false);
  auto tokens = random_array({1, 5, 3}, 11);
  EXPECT_THROW(add_positional(t, tokens, DiffArray::zeros({4, 3})), DimError);
}

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

TEST(Model, TokenCountFormula) {
  auto cfg = tiny_model();
  EXPECT_EQ(cfg.token_count(64), 16);  // 64/16 = 4 -> 4x4 tokens at P=1
  cfg.patch_size = 2;
  EXPECT_EQ(cfg.token_count(64), 4);
  ModelConfig m;
  m.backbone_preset = "m-like";
  EXPECT_EQ(m.token_count(224), 49);  // 224/32 = 7
  m.variant = "vim_only";
  m.raw_patch_size = 16;
  EXPECT_EQ(m.token_count(224), 196);
}

TEST(Model, ZeroWeightsGiveExactlyHalfProbability) {
  auto cfg = tiny_model();
  ParamStore ps;
  Rng rng(13);
  init_model_params(ps, cfg, 32, rng);
  for (auto& [name, p] : ps.items())
    std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0f);
  auto x = random_array({2, 3, 32, 32}, 14);
  Tape t(false);
  auto logits = logits_forward(t, x, ps, cfg);
  for (float v : logits.data()) ASSERT_EQ(v, 0.0f);
  auto probs = model_forward(t, x, ps, cfg);
  for (float v : probs.data()) ASSERT_EQ(v, 0.5f);
}

TEST(Model, TinyShapesAndProbabilityRange) {
  auto cfg = tiny_model();
  ParamStore ps;
  Rng rng(15);
  init_model_params(ps, cfg, 64, rng);
  auto x = random_array({3, 3, 64, 64}, 16);
  Tape t(false);
  auto probs = model_forward(t, x, ps, cfg);
  EXPECT_EQ(probs.shape(), (Shape{3}));
  for (float v : probs.data()) {
    ASSERT_GT(v, 0.0f);
    ASSERT_LT(v, 1.0f);
    ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Model, SigmoidOfLogitsMatchesForward) {
  auto cfg = tiny_model();
  ParamStore ps;
  Rng rng(17);
  init_model_params(ps, cfg, 32, rng);
  auto x = random_array({2, 3, 32, 32}, 18);
  Tape t(false);
  auto logits = logits_forward(t, x, ps, cfg);
  auto probs = model_forward(t, x, ps, cfg);
  for (int64_t i = 0; i < 2; ++i) {
    const double want = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data()[static_cast<size_t>(i)])));
    ASSERT_NEAR(probs.data()[static_cast<size_t>(i)], want, 1e-7);
  }
}

TEST(Model, IdenticalInputsIdenticalOutputs) {
  auto cfg = tiny_model();
  ParamStore ps;
  Rng rng(19);
  init_model_params(ps, cfg, 32, rng);
  auto one = random_array({1, 3, 32, 32}, 20);
  auto batch = DiffArray::zeros({2, 3, 32, 32});
  for (int b = 0; b < 2; ++b)
    std::copy(one.data().begin(), one.data().end(),
              batch.mutable_data().begin() + b * one.size());
  Tape t(false);
  auto probs = model_forward(t, batch, ps, cfg);
  ASSERT_EQ(probs.data()[0], probs.data()[1]);
}

TEST(Model, BatchPermutationEquivariance) {
  auto cfg = tiny_model();
  ParamStore ps;
  Rng rng(21);
  init_model_params(ps, cfg, 32, rng);
  auto batch = random_array({3, 3, 32, 32}, 22);
  // swap items 0 and 2
  auto swapped = DiffArray::zeros({3, 3, 32, 32});
  const int64_t stride = 3 * 32 * 32;
  auto src = batch.data();
  auto dst = swapped.mutable_data();
  const int perm[3] = {2, 1, 0};
  for (int b = 0; b < 3; ++b)
    std::copy(src.begin() + perm[b] * stride, src.begin() + (perm[b] + 1) * stride,
              dst.begin() + b * stride);
  Tape t(false);
  auto p1 = model_forward(t, batch, ps, cfg);
  auto p2 = model_forward(t, swapped, ps, cfg);
  for (int b = 0; b < 3; ++b)
    ASSERT_EQ(p1.data()[static_cast<size_t>(perm[b])], p2.data()[static_cast<size_t>(b)]);
}

TEST(Model, BackboneOnlyAndVimOnlyVariants) {
  ModelConfig cfg = tiny_model();
  cfg.variant = "backbone_only";
  {
    ParamStore ps;
    Rng rng(23);
    init_model_params(ps, cfg, 32, rng);
    EXPECT_FALSE(ps.has("model.pos.table"));
    auto x = random_array({2, 3, 32, 32}, 24);
    Tape t(false);
    auto probs = model_forward(t, x, ps, cfg);
    EXPECT_EQ(probs.shape(), (Shape{2}));
  }
  cfg = tiny_model();
  cfg.variant = "vim_only";
  cfg.raw_patch_size = 8;
  {
    ParamStore ps;
    Rng rng(25);
    init_model_params(ps, cfg, 32, rng);
    EXPECT_FALSE(ps.has("backbone.stem.conv.w"));
    EXPECT_EQ(ps.at("model.pos.table").dim(0), 16);  // (32/8)^2
    auto x = random_array({2, 3, 32, 32}, 26);
    Tape t(false);
    auto probs = model_forward(t, x, ps, cfg);
    EXPECT_EQ(probs.shape(), (Shape{2}));
    for (float v : probs.data()) {
      ASSERT_GT(v, 0.0f);
      ASSERT_LT(v, 1.0f);
    }
  }
}

TEST(Model, NoProjectionRequiresMatchingWidth) {
  ModelConfig cfg = tiny_model();
  cfg.use_projection = false;
  cfg.token_dim = cfg.token_feature_dim();  // 128 at P=1
  ParamStore ps;
  Rng rng(27);
  init_model_params(ps, cfg, 32, rng);
  EXPECT_FALSE(ps.has("model.patch_proj.w"));
  auto x = random_array({1, 3, 32, 32}, 28);
  Tape t(false);
  auto probs = model_forward(t, x, ps, cfg);
  EXPECT_EQ(probs.shape(), (Shape{1}));
}

TEST(Model, EndToEndGradCheckOnInput) {
  // composite bar 1e-2; tiny spatial size keeps the finite-difference loop
  // tractable
  ModelConfig cfg = tiny_model();
  cfg.token_dim = 16;
  cfg.scan.blocks = 1;
  ParamStore ps;
  Rng rng(29);
  init_model_params(ps, cfg, 16, rng);
  randomize_out_proj(ps, 290);
  auto x = random_array({1, 3, 16, 16}, 30, 0.0f, 1.0f);
  double err = grad_check(
      [&](Tape& t, const DiffArray& a) {
        auto logits = logits_forward(t, a, ps, cfg);
        return reduce_mean(t, mul(t, logits, logits), {0});
      },
      x, 5e-3f);
  EXPECT_LT(err, 1e-2);
}

TEST(Model, GradReachesEveryParameter) {
  ModelConfig cfg = tiny_model();
  ParamStore ps;
  Rng rng(31);
  init_model_params(ps, cfg, 32, rng);
  randomize_out_proj(ps, 310);  // identity-initialized blocks pass no gradient inward
  auto x = random_array({2, 3, 32, 32}, 32);
  Tape t;
  auto logits = logits_forward(t, x, ps, cfg);
  auto loss = reduce_mean(t, mul(t, logits, logits), {0});
  t.backward(loss);
  for (auto& [name, p] : ps.items()) {
    float mag = 0.0f;
    for (float v : p.grad()) mag += std::fabs(v);
    EXPECT_GT(mag, 0.0f) << name << " received no gradient";
  }
}
