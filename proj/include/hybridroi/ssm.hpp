#pragma once

// Selective state-space scan and the bidirectional Mamba-style block.
// Recurrence (per channel c, state n, step t):
//   h_t = Abar_t (.) h_{t-1} + Bbar_t (.) x_t
//   y_t = <C_t, h_t> + D_skip (.) x_t
// with Abar = exp(delta (x) A) (zero-order hold) and Bbar = delta (x) B
// (Euler). The scan is sequential in t by contract; live state is one C*N
// buffer regardless of L.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hybridroi/tensor.hpp"

namespace hybridroi {

struct ScanConfig {
  int64_t model_dim{64};    // D
  int64_t expansion{2};     // E
  int64_t state_dim{16};    // N
  int64_t conv_width{4};    // kw
  int64_t delta_rank{0};    // r; 0 means ceil(D/16)
  int64_t blocks{2};

  int64_t inner_dim() const { return expansion * model_dim; }
  int64_t rank() const {
    return delta_rank > 0 ? delta_rank : (model_dim + 15) / 16;
  }
  void validate() const {
    check(model_dim > 0 && expansion > 0 && state_dim > 0 && conv_width > 0 && blocks > 0,
          "ScanConfig: all dimensions must be positive");
  }
};

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

// h is the C*N live state (in/out, pass zeros for h0 = 0); y is L*C.
// The kernel allocates nothing.
inline void selective_scan_kernel(int64_t L, int64_t C, int64_t N, const float* x,
                                  const float* abar, const float* bbar, const float* cseq,
                                  const float* d_skip, float* h, float* y) {
  for (int64_t t = 0; t < L; ++t) {
    const float* at = abar + t * C * N;
    const float* bt = bbar + t * C * N;
    const float* ct = cseq + t * N;
    for (int64_t c = 0; c < C; ++c) {
      const float xt = x[t * C + c];
      float* hc = h + c * N;
      const float* ac = at + c * N;
      const float* bc = bt + c * N;
      float acc = 0.0f;
      for (int64_t n = 0; n < N; ++n) {
        hc[n] = ac[n] * hc[n] + bc[n] * xt;
        acc += ct[n] * hc[n];
      }
      y[t * C + c] = acc + d_skip[c] * xt;
    }
  }
}

// 5 flops per (t,c,n) for the state update + readout, 2 per (t,c) for the
// skip path; exact, used by the operation-counting test
inline int64_t selective_scan_flops(int64_t L, int64_t C, int64_t N) {
  return L * C * (5 * N + 2);
}

// scratch floats beyond inputs and output: the live state only
inline int64_t selective_scan_workspace_floats(int64_t C, int64_t N) { return C * N; }

// ---------------------------------------------------------------------------
// tape ops (accept [L,...] or a leading batch axis [B,L,...])
// ---------------------------------------------------------------------------

namespace detail {

struct ScanDims {
  int64_t B, L, C, N;
  bool batched;
};

inline ScanDims scan_dims(const DiffArray& x, const DiffArray& abar, const DiffArray& bbar,
                          const DiffArray& cseq, const DiffArray& d_skip) {
  ScanDims d{};
  d.batched = x.rank() == 3;
  check_dim(x.rank() == 2 || x.rank() == 3, "selective_scan: x must be [L,C] or [B,L,C]");
  d.B = d.batched ? x.dim(0) : 1;
  d.L = x.dim(d.batched ? 1 : 0);
  d.C = x.dim(d.batched ? 2 : 1);
  check_dim(abar.rank() == x.rank() + 1 && bbar.shape() == abar.shape(),
            "selective_scan: Abar/Bbar rank mismatch");
  d.N = abar.dim(abar.rank() - 1);
  Shape want_ab = d.batched ? Shape{d.B, d.L, d.C, d.N} : Shape{d.L, d.C, d.N};
  check_dim(abar.shape() == want_ab, "selective_scan: Abar shape " + shape_str(abar.shape()) +
                                         " != " + shape_str(want_ab));
  Shape want_c = d.batched ? Shape{d.B, d.L, d.N} : Shape{d.L, d.N};
  check_dim(cseq.shape() == want_c, "selective_scan: C sequence shape mismatch");
  check_dim(d_skip.shape() == Shape{d.C}, "selective_scan: D_skip must be [C]");
  return d;
}

}  // namespace detail

inline DiffArray selective_scan(Tape& tape, const DiffArray& x, const DiffArray& abar,
                                const DiffArray& bbar, const DiffArray& cseq,
                                const DiffArray& d_skip) {
  const auto dims = detail::scan_dims(x, abar, bbar, cseq, d_skip);
  const int64_t B = dims.B, L = dims.L, C = dims.C, N = dims.N;

  DiffArray y = DiffArray::zeros(x.shape());
  {
    std::vector<float> h(static_cast<size_t>(C * N));
    for (int64_t b = 0; b < B; ++b) {
      std::fill(h.begin(), h.end(), 0.0f);
      selective_scan_kernel(L, C, N, x.data().data() + b * L * C,
                            abar.data().data() + b * L * C * N,
                            bbar.data().data() + b * L * C * N, cseq.data().data() + b * L * N,
                            d_skip.data().data(), h.data(), y.mutable_data().data() + b * L * C);
    }
  }

  if (detail::wants_grad(tape, {&x, &abar, &bbar, &cseq, &d_skip})) {
    y.set_requires_grad(true);
    tape.record([x, abar, bbar, cseq, d_skip, y, B, L, C, N]() mutable {
      auto g = y.grad();
      auto xd = x.data();
      auto ad = abar.data();
      auto bd = bbar.data();
      auto cd = cseq.data();
      auto dd = d_skip.data();
      const bool need_x = x.requires_grad();
      const bool need_a = abar.requires_grad();
      const bool need_b = bbar.requires_grad();
      const bool need_c = cseq.requires_grad();
      const bool need_d = d_skip.requires_grad();
      std::span<float> xg, ag, bg, cg, dg;
      if (need_x) xg = x.grad();
      if (need_a) ag = abar.grad();
      if (need_b) bg = bbar.grad();
      if (need_c) cg = cseq.grad();
      if (need_d) dg = d_skip.grad();

      std::vector<float> hs(static_cast<size_t>(L * C * N));  // full trajectory, backward only
      std::vector<float> dh(static_cast<size_t>(C * N));
      for (int64_t b = 0; b < B; ++b) {
        const float* xb = xd.data() + b * L * C;
        const float* ab = ad.data() + b * L * C * N;
        const float* bb = bd.data() + b * L * C * N;
        const float* cb = cd.data() + b * L * N;
        const float* gb = g.data() + b * L * C;
        // recompute the hidden trajectory
        {
          std::vector<float> h(static_cast<size_t>(C * N), 0.0f);
          for (int64_t t = 0; t < L; ++t)
            for (int64_t c = 0; c < C; ++c) {
              const float xt = xb[t * C + c];
              for (int64_t n = 0; n < N; ++n) {
                const int64_t i = (c * N) + n;
                h[static_cast<size_t>(i)] = ab[(t * C + c) * N + n] * h[static_cast<size_t>(i)] +
                                            bb[(t * C + c) * N + n] * xt;
                hs[static_cast<size_t>((t * C + c) * N + n)] = h[static_cast<size_t>(i)];
              }
            }
        }
        std::fill(dh.begin(), dh.end(), 0.0f);
        for (int64_t t = L - 1; t >= 0; --t)
          for (int64_t c = 0; c < C; ++c) {
            const float gy = gb[t * C + c];
            const float xt = xb[t * C + c];
            if (need_d) dg[c] += gy * xt;
            float dx_acc = need_x ? gy * dd[c] : 0.0f;
            float* dhc = dh.data() + c * N;
            for (int64_t n = 0; n < N; ++n) {
              const int64_t tcn = (t * C + c) * N + n;
              dhc[n] += gy * cb[t * N + n];
              if (need_c) cg[b * L * N + t * N + n] += gy * hs[static_cast<size_t>(tcn)];
              const float h_prev =
                  t > 0 ? hs[static_cast<size_t>(((t - 1) * C + c) * N + n)] : 0.0f;
              if (need_a) ag[b * L * C * N + tcn] += dhc[n] * h_prev;
              if (need_b) bg[b * L * C * N + tcn] += dhc[n] * xt;
              if (need_x) dx_acc += dhc[n] * bb[tcn];
              dhc[n] *= ab[tcn];
            }
            if (need_x) xg[b * L * C + t * C + c] += dx_acc;
          }
      }
    });
  }
  return y;
}

// Abar = exp(delta (x) A), Bbar = delta (x) B. delta: [(B,)L,C], A: [C,N],
// B sequence: [(B,)L,N]. Throws on nonpositive delta.
inline std::pair<DiffArray, DiffArray> discretize(Tape& tape, const DiffArray& delta,
                                                  const DiffArray& a_mat, const DiffArray& b_seq) {
  const bool batched = delta.rank() == 3;
  check_dim(delta.rank() == 2 || delta.rank() == 3, "discretize: delta must be [L,C] or [B,L,C]");
  const int64_t B = batched ? delta.dim(0) : 1;
  const int64_t L = delta.dim(batched ? 1 : 0);
  const int64_t C = delta.dim(batched ? 2 : 1);
  check_dim(a_mat.rank() == 2 && a_mat.dim(0) == C, "discretize: A must be [C,N]");
  const int64_t N = a_mat.dim(1);
  check_dim(b_seq.shape() == (batched ? Shape{B, L, N} : Shape{L, N}),
            "discretize: B sequence shape mismatch");
  for (float v : delta.data())
    check(v > 0.0f, "discretize: delta must be strictly positive");

  Shape out_shape = batched ? Shape{B, L, C, N} : Shape{L, C, N};
  DiffArray abar = DiffArray::zeros(out_shape);
  DiffArray bbar = DiffArray::zeros(out_shape);
  {
    auto deltad = delta.data();
    auto ad = a_mat.data();
    auto bd = b_seq.data();
    auto abard = abar.mutable_data();
    auto bbard = bbar.mutable_data();
    for (int64_t bl = 0; bl < B * L; ++bl)
      for (int64_t c = 0; c < C; ++c) {
        const float dv = deltad[bl * C + c];
        for (int64_t n = 0; n < N; ++n) {
          abard[(bl * C + c) * N + n] = std::exp(dv * ad[c * N + n]);
          bbard[(bl * C + c) * N + n] = dv * bd[bl * N + n];
        }
      }
  }

  if (detail::wants_grad(tape, {&delta, &a_mat, &b_seq})) {
    abar.set_requires_grad(true);
    bbar.set_requires_grad(true);
    tape.record([delta, a_mat, b_seq, abar, bbar, B, L, C, N]() mutable {
      auto ga = abar.grad();
      auto gb = bbar.grad();
      auto deltad = delta.data();
      auto ad = a_mat.data();
      auto bd = b_seq.data();
      auto abard = abar.data();
      const bool need_delta = delta.requires_grad();
      const bool need_a = a_mat.requires_grad();
      const bool need_b = b_seq.requires_grad();
      std::span<float> dg, ag2, bg2;
      if (need_delta) dg = delta.grad();
      if (need_a) ag2 = a_mat.grad();
      if (need_b) bg2 = b_seq.grad();
      for (int64_t bl = 0; bl < B * L; ++bl)
        for (int64_t c = 0; c < C; ++c) {
          const float dv = deltad[bl * C + c];
          float ddelta = 0.0f;
          for (int64_t n = 0; n < N; ++n) {
            const int64_t i = (bl * C + c) * N + n;
            const float gexp = ga[i] * abard[i];
            ddelta += gexp * ad[c * N + n] + gb[i] * bd[bl * N + n];
            if (need_a) ag2[c * N + n] += gexp * dv;
            if (need_b) bg2[bl * N + n] += gb[i] * dv;
          }
          if (need_delta) dg[bl * C + c] += ddelta;
        }
    });
  }
  return {abar, bbar};
}

// ---------------------------------------------------------------------------
// block parameters
// ---------------------------------------------------------------------------

inline void init_ssm_block_params(ParamStore& ps, const std::string& prefix,
                                  const ScanConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t D = cfg.model_dim, ED = cfg.inner_dim(), N = cfg.state_dim, kw = cfg.conv_width,
                r = cfg.rank();
  {
    auto& w = ps.add(prefix + ".in_proj.w", DiffArray::zeros({D, 2 * ED}, true));
    he_uniform_fill(w, D, rng);
  }
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string p = prefix + "." + dir;
    auto& conv = ps.add(p + ".conv.w", DiffArray::zeros({ED, kw}, true));
    he_uniform_fill(conv, kw, rng);
    ps.add(p + ".conv.b", DiffArray::zeros({ED, 1}, true));
    auto& down = ps.add(p + ".delta.down.w", DiffArray::zeros({ED, r}, true));
    he_uniform_fill(down, ED, rng);
    auto& up = ps.add(p + ".delta.up.w", DiffArray::zeros({r, ED}, true));
    he_uniform_fill(up, r, rng);
    {
      // softplus(bias) lands log-uniformly in [1e-3, 1e-1]
      auto& bias = ps.add(p + ".delta.bias", DiffArray::zeros({ED}, true));
      for (auto& v : bias.mutable_data()) {
        const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        v = static_cast<float>(std::log(std::expm1(dt)));
      }
    }
    auto& bw = ps.add(p + ".B.w", DiffArray::zeros({ED, N}, true));
    he_uniform_fill(bw, ED, rng);
    auto& cw = ps.add(p + ".C.w", DiffArray::zeros({ED, N}, true));
    he_uniform_fill(cw, ED, rng);
    {
      // S4D-real: -A columns are 1..N
      auto& a_log = ps.add(p + ".A_log", DiffArray::zeros({ED, N}, true));
      auto d = a_log.mutable_data();
      for (int64_t c = 0; c < ED; ++c)
        for (int64_t n = 0; n < N; ++n)
          d[static_cast<size_t>(c * N + n)] = std::log(static_cast<float>(n + 1));
    }
    ps.add(p + ".D_skip", DiffArray::filled({ED}, 1.0f, true));
  }
  // zero-init: the residual branch contributes nothing until trained, so a
  // freshly built stack is an exact identity and logits start bounded
  ps.add(prefix + ".out_proj.w", DiffArray::zeros({ED, D}, true));
}

// per-token linear map for [B,L,K] inputs
inline DiffArray linear3(Tape& tape, const DiffArray& x, const DiffArray& w) {
  check_dim(x.rank() == 3 && w.rank() == 2, "linear3: want [B,L,K] x [K,M]");
  const int64_t B = x.dim(0), L = x.dim(1), K = x.dim(2);
  DiffArray flat = reshape(tape, x, {B * L, K});
  DiffArray out = matmul(tape, flat, w);
  return reshape(tape, out, {B, L, w.dim(1)});
}

// One scan direction: causal conv + silu, then the selective SSM over the
// (already direction-ordered) sequence. x: [B,L,ED] -> y: [B,L,ED].
inline DiffArray ssm_direction(Tape& tape, const DiffArray& x, const ParamStore& ps,
                               const std::string& dir_prefix) {
  const int64_t ED = x.dim(2);
  DiffArray xc = permute(tape, x, {0, 2, 1});  // [B,ED,L]
  xc = conv1d_causal(tape, xc, ps.at(dir_prefix + ".conv.w"));
  xc = add(tape, xc, ps.at(dir_prefix + ".conv.b"));
  DiffArray u = silu(tape, permute(tape, xc, {0, 2, 1}));  // [B,L,ED]

  DiffArray delta = linear3(tape, u, ps.at(dir_prefix + ".delta.down.w"));
  delta = linear3(tape, delta, ps.at(dir_prefix + ".delta.up.w"));
  delta = softplus(tape, add(tape, delta, ps.at(dir_prefix + ".delta.bias")));
  DiffArray b_seq = linear3(tape, u, ps.at(dir_prefix + ".B.w"));
  DiffArray c_seq = linear3(tape, u, ps.at(dir_prefix + ".C.w"));
  DiffArray a_mat = neg(tape, exp(tape, ps.at(dir_prefix + ".A_log")));
  auto [abar, bbar] = discretize(tape, delta, a_mat, b_seq);
  (void)ED;
  return selective_scan(tape, u, abar, bbar, c_seq, ps.at(dir_prefix + ".D_skip"));
}

// tokens [B,L,D] -> [B,L,D]; bidirectional fusion is the arithmetic mean of
// the two direction outputs, then gated projection plus residual.
inline DiffArray mamba_block_forward(Tape& tape, const DiffArray& tokens, const ParamStore& ps,
                                     const std::string& prefix, const ScanConfig& cfg) {
  check_dim(tokens.rank() == 3 && tokens.dim(2) == cfg.model_dim,
            "mamba_block: tokens must be [B,L,D] with D = " + std::to_string(cfg.model_dim));
  const int64_t ED = cfg.inner_dim();
  DiffArray xz = linear3(tape, tokens, ps.at(prefix + ".in_proj.w"));
  DiffArray x = slice(tape, xz, 2, 0, ED);
  DiffArray z = slice(tape, xz, 2, ED, ED);

  DiffArray y_fwd = ssm_direction(tape, x, ps, prefix + ".fwd");
  DiffArray x_rev = reverse_axis(tape, x, 1);
  DiffArray y_bwd = ssm_direction(tape, x_rev, ps, prefix + ".bwd");
  y_bwd = reverse_axis(tape, y_bwd, 1);

  DiffArray y = scale(tape, add(tape, y_fwd, y_bwd), 0.5f);
  DiffArray gated = mul(tape, y, silu(tape, z));
  DiffArray out = linear3(tape, gated, ps.at(prefix + ".out_proj.w"));
  return add(tape, out, tokens);
}

inline void init_ssm_stack_params(ParamStore& ps, const ScanConfig& cfg, Rng& rng,
                                  const std::string& root = "vim") {
  for (int64_t i = 0; i < cfg.blocks; ++i)
    init_ssm_block_params(ps, root + ".block" + std::to_string(i), cfg, rng);
}

inline DiffArray ssm_stack_forward(Tape& tape, DiffArray tokens, const ParamStore& ps,
                                   const ScanConfig& cfg, const std::string& root = "vim") {
  for (int64_t i = 0; i < cfg.blocks; ++i)
    tokens = mamba_block_forward(tape, tokens, ps, root + ".block" + std::to_string(i), cfg);
  return tokens;
}

}  // namespace hybridroi
