#pragma once

// The classifier: backbone feature map -> non-overlapping patch tokens ->
// learnable positional embedding -> bidirectional scan stack -> GAP -> linear
// head -> sigmoid. Variants: "hybrid" (full pipeline), "backbone_only" (GAP
// directly on the feature map), "vim_only" (raw-pixel patch tokens, no CNN).

#include <string>

#include "hybridroi/backbone.hpp"
#include "hybridroi/ssm.hpp"

namespace hybridroi {

struct ModelConfig {
  std::string variant{"hybrid"};
  std::string backbone_preset{"tiny"};
  int max_stage_repeats{0};   // 0 = full preset depth
  int64_t patch_size{1};      // P over the feature grid
  int64_t token_dim{64};      // D
  bool use_projection{true};  // project C*P^2 -> D (required when they differ)
  int64_t raw_patch_size{16}; // vim_only tokenization of the raw image
  ScanConfig scan;

  BackboneConfig backbone() const {
    return BackboneConfig::preset(backbone_preset, max_stage_repeats);
  }

  void validate() const {
    check(variant == "hybrid" || variant == "backbone_only" || variant == "vim_only",
          "model: unknown variant '" + variant + "'");
    check(patch_size >= 1, "model: patch_size must be >= 1");
    check(raw_patch_size >= 1, "model: raw_patch_size must be >= 1");
    scan.validate();
  }

  // tokens per image at a given input size
  int64_t token_count(int64_t image_size) const {
    if (variant == "vim_only") {
      check_dim(image_size % raw_patch_size == 0, "model: image size not divisible by raw patch");
      const int64_t g = image_size / raw_patch_size;
      return g * g;
    }
    const int64_t s = backbone().total_stride();
    check_dim(image_size % s == 0, "model: image size not divisible by backbone stride");
    const int64_t grid = image_size / s;
    check_dim(grid % patch_size == 0, "model: feature grid " + std::to_string(grid) +
                                          " not divisible by patch size " +
                                          std::to_string(patch_size));
    return (grid / patch_size) * (grid / patch_size);
  }

  int64_t token_feature_dim() const {
    if (variant == "vim_only") return 3 * raw_patch_size * raw_patch_size;
    return backbone().head_channels * patch_size * patch_size;
  }

  int64_t head_input_dim() const {
    if (variant == "backbone_only") return backbone().head_channels;
    return use_projection ? token_dim : token_feature_dim();
  }
};

// [B,C,h,w] -> [B, (h/P)*(w/P), C*P^2]; patches row-major, features
// channel-first within each patch
inline DiffArray patchify(Tape& tape, const DiffArray& fm, int64_t P) {
  check_dim(fm.rank() == 4, "patchify: want BxCxhxw, got " + shape_str(fm.shape()));
  const int64_t B = fm.dim(0), C = fm.dim(1), h = fm.dim(2), w = fm.dim(3);
  check_dim(P >= 1 && h % P == 0 && w % P == 0,
            "patchify: grid " + std::to_string(h) + "x" + std::to_string(w) +
                " not divisible by P = " + std::to_string(P));
  const int64_t gh = h / P, gw = w / P, T = gh * gw, F = C * P * P;

  DiffArray out = DiffArray::zeros({B, T, F});
  auto od = out.mutable_data();
  auto xd = fm.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t gi = 0; gi < gh; ++gi)
      for (int64_t gj = 0; gj < gw; ++gj) {
        const int64_t tok = gi * gw + gj;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t pi = 0; pi < P; ++pi)
            for (int64_t pj = 0; pj < P; ++pj)
              od[static_cast<size_t>((b * T + tok) * F + (c * P + pi) * P + pj)] =
                  xd[static_cast<size_t>(((b * C + c) * h + gi * P + pi) * w + gj * P + pj)];
      }

  if (detail::wants_grad(tape, {&fm})) {
    out.set_requires_grad(true);
    tape.record([fm, out, B, C, h, w, P, gh, gw, T, F]() mutable {
      auto g = out.grad();
      auto xg = fm.grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t gi = 0; gi < gh; ++gi)
          for (int64_t gj = 0; gj < gw; ++gj) {
            const int64_t tok = gi * gw + gj;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t pi = 0; pi < P; ++pi)
                for (int64_t pj = 0; pj < P; ++pj)
                  xg[static_cast<size_t>(((b * C + c) * h + gi * P + pi) * w + gj * P + pj)] +=
                      g[static_cast<size_t>((b * T + tok) * F + (c * P + pi) * P + pj)];
          }
    });
  }
  return out;
}

// per-token linear map [B,T,F] x [F,D] -> [B,T,D]
inline DiffArray project_tokens(Tape& tape, const DiffArray& tokens, const DiffArray& w) {
  return linear3(tape, tokens, w);
}

// broadcast add of the [T,D] table over the batch; no interpolation on
// mismatch, just an error
inline DiffArray add_positional(Tape& tape, const DiffArray& tokens, const DiffArray& pos) {
  check_dim(tokens.rank() == 3 && pos.rank() == 2, "add_positional: want [B,T,D] + [T,D]");
  check_dim(tokens.dim(1) == pos.dim(0) && tokens.dim(2) == pos.dim(1),
            "add_positional: token grid " + shape_str(tokens.shape()) +
                " does not match table " + shape_str(pos.shape()));
  return add(tape, tokens, pos);
}

inline void init_model_params(ParamStore& ps, const ModelConfig& cfg, int64_t image_size,
                              Rng& rng) {
  cfg.validate();
  if (cfg.variant != "vim_only") init_backbone_params(ps, cfg.backbone(), rng);
  if (cfg.variant != "backbone_only") {
    const int64_t F = cfg.token_feature_dim();
    const int64_t T = cfg.token_count(image_size);
    const int64_t D = cfg.use_projection ? cfg.token_dim : F;
    if (cfg.use_projection) {
      auto& w = ps.add("model.patch_proj.w", DiffArray::zeros({F, cfg.token_dim}, true));
      he_uniform_fill(w, F, rng);
    } else {
      check_dim(F == cfg.token_dim || cfg.token_dim == 0,
                "model: use_projection=false requires token_dim == C*P^2");
    }
    {
      auto& pos = ps.add("model.pos.table", DiffArray::zeros({T, D}, true));
      for (auto& v : pos.mutable_data()) v = rng.normal_f(0.0f, 0.02f);
    }
    ScanConfig scan = cfg.scan;
    scan.model_dim = D;
    init_ssm_stack_params(ps, scan, rng);
  }
  {
    const int64_t in = cfg.head_input_dim();
    auto& w = ps.add("model.head.w", DiffArray::zeros({in, 1}, true));
    he_uniform_fill(w, in, rng);
    ps.add("model.head.b", DiffArray::zeros({1}, true));
  }
}

// pre-sigmoid scores, [B]
inline DiffArray logits_forward(Tape& tape, const DiffArray& images, const ParamStore& ps,
                                const ModelConfig& cfg) {
  cfg.validate();
  const int64_t B = images.dim(0);
  DiffArray pooled;  // [B, head_input_dim]
  if (cfg.variant == "backbone_only") {
    DiffArray fm = backbone_forward(tape, images, ps, cfg.backbone());
    pooled = reduce_mean(tape, fm, {2, 3});
  } else {
    DiffArray tokens;
    if (cfg.variant == "vim_only") {
      tokens = patchify(tape, images, cfg.raw_patch_size);
    } else {
      DiffArray fm = backbone_forward(tape, images, ps, cfg.backbone());
      tokens = patchify(tape, fm, cfg.patch_size);
    }
    if (cfg.use_projection) tokens = project_tokens(tape, tokens, ps.at("model.patch_proj.w"));
    tokens = add_positional(tape, tokens, ps.at("model.pos.table"));
    ScanConfig scan = cfg.scan;
    scan.model_dim = tokens.dim(2);
    tokens = ssm_stack_forward(tape, tokens, ps, scan);
    pooled = reduce_mean(tape, tokens, {1});  // GAP over the token axis
  }
  DiffArray logits = add(tape, matmul(tape, pooled, ps.at("model.head.w")), ps.at("model.head.b"));
  return reshape(tape, logits, {B});
}

// malignancy probabilities in (0,1), [B]
inline DiffArray model_forward(Tape& tape, const DiffArray& images, const ParamStore& ps,
                               const ModelConfig& cfg) {
  return sigmoid(tape, logits_forward(tape, images, ps, cfg));
}

inline bool is_backbone_param(const std::string& name) {
  return name.rfind("backbone.", 0) == 0;
}

}  // namespace hybridroi
