#pragma once

// EfficientNetV2-style feature extractor: stem -> fused-MBConv stages ->
// MBConv stages -> 1x1 head conv. Normalization is a per-channel learnable
// scale+bias (no batch statistics), activation is SiLU throughout.

#include <cmath>
#include <string>
#include <vector>

#include "hybridroi/tensor.hpp"

namespace hybridroi {

enum class BlockKind { kFusedMbconv, kMbconv };

struct StageSpec {
  BlockKind kind{BlockKind::kFusedMbconv};
  int repeats{1};
  int64_t out_channels{16};
  int stride{1};  // applied by the first block of the stage only
  float expansion{1.0f};
  float se_ratio{0.0f};  // 0 disables squeeze-excitation
};

struct BackboneConfig {
  std::string name;
  int64_t stem_channels{24};
  std::vector<StageSpec> stages;
  int64_t head_channels{1280};

  int64_t total_stride() const {
    int64_t s = 2;  // stem
    for (const auto& st : stages) s *= st.stride;
    return s;
  }

  // "m-like" mirrors the published EfficientNetV2-M stage table (total stride
  // 32, head width 1280); "tiny" is a 4-stage miniature for CI (stride 16,
  // head width 128). max_repeats > 0 truncates per-stage repeats.
  static BackboneConfig preset(const std::string& name, int max_repeats = 0) {
    BackboneConfig cfg;
    cfg.name = name;
    if (name == "m-like") {
      cfg.stem_channels = 24;
      cfg.head_channels = 1280;
      cfg.stages = {
          {BlockKind::kFusedMbconv, 3, 24, 1, 1.0f, 0.0f},
          {BlockKind::kFusedMbconv, 5, 48, 2, 4.0f, 0.0f},
          {BlockKind::kFusedMbconv, 5, 80, 2, 4.0f, 0.0f},
          {BlockKind::kMbconv, 7, 160, 2, 4.0f, 0.25f},
          {BlockKind::kMbconv, 14, 176, 1, 6.0f, 0.25f},
          {BlockKind::kMbconv, 18, 304, 2, 6.0f, 0.25f},
          {BlockKind::kMbconv, 5, 512, 1, 6.0f, 0.25f},
      };
    } else if (name == "tiny") {
      cfg.stem_channels = 8;
      cfg.head_channels = 128;
      cfg.stages = {
          {BlockKind::kFusedMbconv, 1, 8, 1, 1.0f, 0.0f},
          {BlockKind::kFusedMbconv, 2, 16, 2, 2.0f, 0.0f},
          {BlockKind::kMbconv, 2, 32, 2, 2.0f, 0.25f},
          {BlockKind::kMbconv, 2, 64, 2, 2.0f, 0.25f},
      };
    } else {
      throw Error("backbone: unknown preset '" + name + "'");
    }
    if (max_repeats > 0)
      for (auto& st : cfg.stages) st.repeats = std::min(st.repeats, max_repeats);
    return cfg;
  }
};

namespace detail {

inline int64_t se_reduced_width(float ratio, int64_t channels) {
  return std::max<int64_t>(1, static_cast<int64_t>(std::lround(static_cast<double>(ratio) *
                                                               static_cast<double>(channels))));
}

inline void add_norm_params(ParamStore& ps, const std::string& prefix, int64_t channels) {
  ps.add(prefix + ".gamma", DiffArray::filled({channels, 1, 1}, 1.0f, true));
  ps.add(prefix + ".beta", DiffArray::zeros({channels, 1, 1}, true));
}

inline void add_conv_params(ParamStore& ps, const std::string& name, int64_t out, int64_t in_per_group,
                            int64_t kh, int64_t kw, Rng& rng) {
  auto& w = ps.add(name, DiffArray::zeros({out, in_per_group, kh, kw}, true));
  he_uniform_fill(w, in_per_group * kh * kw, rng);
}

inline void add_se_params(ParamStore& ps, const std::string& prefix, int64_t channels, float ratio,
                          Rng& rng) {
  const int64_t reduced = se_reduced_width(ratio, channels);
  auto& w1 = ps.add(prefix + ".fc1.w", DiffArray::zeros({channels, reduced}, true));
  he_uniform_fill(w1, channels, rng);
  ps.add(prefix + ".fc1.b", DiffArray::zeros({reduced}, true));
  auto& w2 = ps.add(prefix + ".fc2.w", DiffArray::zeros({reduced, channels}, true));
  he_uniform_fill(w2, reduced, rng);
  ps.add(prefix + ".fc2.b", DiffArray::zeros({channels}, true));
}

}  // namespace detail

// y = x * gamma_c + beta_c
inline DiffArray channel_affine(Tape& tape, const DiffArray& x, const ParamStore& ps,
                                const std::string& prefix) {
  return add(tape, mul(tape, x, ps.at(prefix + ".gamma")), ps.at(prefix + ".beta"));
}

// out = x (.) sigmoid(W2 silu(W1 GAP(x) + b1) + b2), gate broadcast over H,W
inline DiffArray se_block(Tape& tape, const DiffArray& x, const ParamStore& ps,
                          const std::string& prefix) {
  const int64_t B = x.dim(0), C = x.dim(1);
  DiffArray pooled = reduce_mean(tape, x, {2, 3});  // [B, C]
  DiffArray h = add(tape, matmul(tape, pooled, ps.at(prefix + ".fc1.w")), ps.at(prefix + ".fc1.b"));
  h = silu(tape, h);
  DiffArray gate = add(tape, matmul(tape, h, ps.at(prefix + ".fc2.w")), ps.at(prefix + ".fc2.b"));
  gate = sigmoid(tape, gate);
  gate = reshape(tape, gate, {B, C, 1, 1});
  return mul(tape, x, gate);
}

struct BlockShape {
  int64_t in_channels;
  int64_t out_channels;
  int stride;
  float expansion;
  float se_ratio;
};

inline void init_fused_mbconv_params(ParamStore& ps, const std::string& prefix,
                                     const BlockShape& s, Rng& rng) {
  const auto expanded = static_cast<int64_t>(std::lround(s.expansion * static_cast<double>(s.in_channels)));
  if (s.expansion > 1.0f) {
    detail::add_conv_params(ps, prefix + ".conv.w", expanded, s.in_channels, 3, 3, rng);
    detail::add_norm_params(ps, prefix + ".norm1", expanded);
    if (s.se_ratio > 0.0f) detail::add_se_params(ps, prefix + ".se", expanded, s.se_ratio, rng);
    detail::add_conv_params(ps, prefix + ".project.w", s.out_channels, expanded, 1, 1, rng);
    detail::add_norm_params(ps, prefix + ".norm2", s.out_channels);
  } else {
    // single 3x3 conv straight to the output width
    detail::add_conv_params(ps, prefix + ".conv.w", s.out_channels, s.in_channels, 3, 3, rng);
    detail::add_norm_params(ps, prefix + ".norm1", s.out_channels);
    if (s.se_ratio > 0.0f) detail::add_se_params(ps, prefix + ".se", s.out_channels, s.se_ratio, rng);
  }
}

inline DiffArray fused_mbconv(Tape& tape, const DiffArray& x, const ParamStore& ps,
                              const std::string& prefix, const BlockShape& s) {
  check_dim(x.dim(1) == s.in_channels, "fused_mbconv: channel mismatch at " + prefix);
  const bool residual = s.stride == 1 && s.in_channels == s.out_channels;
  DiffArray h;
  if (s.expansion > 1.0f) {
    h = conv2d(tape, x, ps.at(prefix + ".conv.w"), s.stride, 1, 1);
    h = silu(tape, channel_affine(tape, h, ps, prefix + ".norm1"));
    if (s.se_ratio > 0.0f) h = se_block(tape, h, ps, prefix + ".se");
    h = conv2d(tape, h, ps.at(prefix + ".project.w"), 1, 0, 1);
    h = channel_affine(tape, h, ps, prefix + ".norm2");  // no activation after projection
  } else {
    h = conv2d(tape, x, ps.at(prefix + ".conv.w"), s.stride, 1, 1);
    h = silu(tape, channel_affine(tape, h, ps, prefix + ".norm1"));
    if (s.se_ratio > 0.0f) h = se_block(tape, h, ps, prefix + ".se");
  }
  return residual ? add(tape, h, x) : h;
}

inline void init_mbconv_params(ParamStore& ps, const std::string& prefix, const BlockShape& s,
                               Rng& rng) {
  const auto expanded = static_cast<int64_t>(std::lround(s.expansion * static_cast<double>(s.in_channels)));
  detail::add_conv_params(ps, prefix + ".expand.w", expanded, s.in_channels, 1, 1, rng);
  detail::add_norm_params(ps, prefix + ".norm1", expanded);
  detail::add_conv_params(ps, prefix + ".dw.w", expanded, 1, 3, 3, rng);
  detail::add_norm_params(ps, prefix + ".norm2", expanded);
  if (s.se_ratio > 0.0f) detail::add_se_params(ps, prefix + ".se", expanded, s.se_ratio, rng);
  detail::add_conv_params(ps, prefix + ".project.w", s.out_channels, expanded, 1, 1, rng);
  detail::add_norm_params(ps, prefix + ".norm3", s.out_channels);
}

inline DiffArray mbconv(Tape& tape, const DiffArray& x, const ParamStore& ps,
                        const std::string& prefix, const BlockShape& s) {
  check_dim(x.dim(1) == s.in_channels, "mbconv: channel mismatch at " + prefix);
  const bool residual = s.stride == 1 && s.in_channels == s.out_channels;
  const auto expanded = static_cast<int64_t>(std::lround(s.expansion * static_cast<double>(s.in_channels)));
  DiffArray h = conv2d(tape, x, ps.at(prefix + ".expand.w"), 1, 0, 1);
  h = silu(tape, channel_affine(tape, h, ps, prefix + ".norm1"));
  h = conv2d(tape, h, ps.at(prefix + ".dw.w"), s.stride, 1, expanded);  // depthwise
  h = silu(tape, channel_affine(tape, h, ps, prefix + ".norm2"));
  if (s.se_ratio > 0.0f) h = se_block(tape, h, ps, prefix + ".se");
  h = conv2d(tape, h, ps.at(prefix + ".project.w"), 1, 0, 1);
  h = channel_affine(tape, h, ps, prefix + ".norm3");
  return residual ? add(tape, h, x) : h;
}

inline BlockShape block_shape(const BackboneConfig& cfg, size_t stage, int block_in_stage) {
  const auto& st = cfg.stages[stage];
  BlockShape s;
  s.out_channels = st.out_channels;
  s.stride = block_in_stage == 0 ? st.stride : 1;
  s.expansion = st.expansion;
  s.se_ratio = st.se_ratio;
  if (block_in_stage == 0)
    s.in_channels = stage == 0 ? cfg.stem_channels : cfg.stages[stage - 1].out_channels;
  else
    s.in_channels = st.out_channels;
  return s;
}

inline void init_backbone_params(ParamStore& ps, const BackboneConfig& cfg, Rng& rng,
                                 const std::string& root = "backbone") {
  detail::add_conv_params(ps, root + ".stem.conv.w", cfg.stem_channels, 3, 3, 3, rng);
  detail::add_norm_params(ps, root + ".stem.norm", cfg.stem_channels);
  for (size_t si = 0; si < cfg.stages.size(); ++si)
    for (int bi = 0; bi < cfg.stages[si].repeats; ++bi) {
      const auto shape = block_shape(cfg, si, bi);
      const std::string prefix =
          root + ".stage" + std::to_string(si) + ".block" + std::to_string(bi);
      if (cfg.stages[si].kind == BlockKind::kFusedMbconv)
        init_fused_mbconv_params(ps, prefix, shape, rng);
      else
        init_mbconv_params(ps, prefix, shape, rng);
    }
  const int64_t last = cfg.stages.back().out_channels;
  detail::add_conv_params(ps, root + ".head.conv.w", cfg.head_channels, last, 1, 1, rng);
  detail::add_norm_params(ps, root + ".head.norm", cfg.head_channels);
}

// images [B,3,H,W] -> feature map [B, head_channels, H/s, W/s]
inline DiffArray backbone_forward(Tape& tape, const DiffArray& images, const ParamStore& ps,
                                  const BackboneConfig& cfg, const std::string& root = "backbone") {
  check_dim(images.rank() == 4 && images.dim(1) == 3,
            "backbone: input must be Bx3xHxW, got " + shape_str(images.shape()));
  const int64_t s = cfg.total_stride();
  check_dim(images.dim(2) % s == 0 && images.dim(3) % s == 0,
            "backbone: input " + shape_str(images.shape()) + " not divisible by total stride " +
                std::to_string(s));
  DiffArray h = conv2d(tape, images, ps.at(root + ".stem.conv.w"), 2, 1, 1);
  h = silu(tape, channel_affine(tape, h, ps, root + ".stem.norm"));
  for (size_t si = 0; si < cfg.stages.size(); ++si)
    for (int bi = 0; bi < cfg.stages[si].repeats; ++bi) {
      const auto shape = block_shape(cfg, si, bi);
      const std::string prefix =
          root + ".stage" + std::to_string(si) + ".block" + std::to_string(bi);
      h = cfg.stages[si].kind == BlockKind::kFusedMbconv
              ? fused_mbconv(tape, h, ps, prefix, shape)
              : mbconv(tape, h, ps, prefix, shape);
    }
  h = conv2d(tape, h, ps.at(root + ".head.conv.w"), 1, 0, 1);
  h = silu(tape, channel_affine(tape, h, ps, root + ".head.norm"));
  return h;
}

inline int64_t backbone_param_count(const BackboneConfig& cfg) {
  ParamStore ps;
  Rng rng(0);
  init_backbone_params(ps, cfg, rng);
  return ps.total_size();
}

}  // namespace hybridroi
