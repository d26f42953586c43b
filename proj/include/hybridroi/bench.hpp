#pragma once

// Complexity probe behind the linear-time claim: times the selective scan
// against a naive full-attention reference (softmax(QK^T/sqrt(d)) V) over a
// grid of sequence lengths and fits log(time) ~ slope * log(L).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "hybridroi/rng.hpp"
#include "hybridroi/ssm.hpp"

namespace hybridroi {

// O(L^2 d) reference: two-pass softmax rows over QK^T, then weighted sum of V
inline void naive_attention_forward(int64_t L, int64_t d, const float* q, const float* k,
                                    const float* v, float* scores /*L*L*/, float* out /*L*d*/) {
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
  for (int64_t i = 0; i < L; ++i) {
    float* row = scores + i * L;
    float max_s = -1e30f;
    for (int64_t j = 0; j < L; ++j) {
      float acc = 0.0f;
      const float* qi = q + i * d;
      const float* kj = k + j * d;
      for (int64_t t = 0; t < d; ++t) acc += qi[t] * kj[t];
      row[j] = acc * inv_sqrt_d;
      max_s = std::max(max_s, row[j]);
    }
    float denom = 0.0f;
    for (int64_t j = 0; j < L; ++j) {
      row[j] = std::exp(row[j] - max_s);
      denom += row[j];
    }
    const float inv_denom = 1.0f / denom;
    float* oi = out + i * d;
    std::fill(oi, oi + d, 0.0f);
    for (int64_t j = 0; j < L; ++j) {
      const float w = row[j] * inv_denom;
      const float* vj = v + j * d;
      for (int64_t t = 0; t < d; ++t) oi[t] += w * vj[t];
    }
  }
}

struct ProbeConfig {
  int64_t channels{64};   // C for the scan
  int64_t state_dim{16};  // N
  int64_t head_dim{64};   // d for the attention reference
  int repeats{5};
  uint64_t seed{12345};
};

struct ProbeRow {
  int64_t length;
  double scan_median_s;
  double attention_median_s;
};

struct ProbeResult {
  std::vector<ProbeRow> rows;
  double scan_slope{0.0};
  double attention_slope{0.0};
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double loglog_slope(const std::vector<ProbeRow>& rows, bool attention) {
  const size_t n = rows.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rows) {
    const double x = std::log(static_cast<double>(r.length));
    const double y = std::log(attention ? r.attention_median_s : r.scan_median_s);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double dn = static_cast<double>(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

}  // namespace detail

inline ProbeResult complexity_probe(const std::vector<int64_t>& lengths, const ProbeConfig& cfg) {
  check(lengths.size() >= 3, "complexity_probe: need at least 3 lengths");
  check(cfg.repeats >= 1, "complexity_probe: repeats must be >= 1");
  using clock = std::chrono::steady_clock;
  const int64_t C = cfg.channels, N = cfg.state_dim, d = cfg.head_dim;
  Rng rng(cfg.seed);

  ProbeResult result;
  for (int64_t L : lengths) {
    // scan inputs (Abar in (0,1) as training would produce)
    std::vector<float> x(static_cast<size_t>(L * C)), abar(static_cast<size_t>(L * C * N)),
        bbar(static_cast<size_t>(L * C * N)), cseq(static_cast<size_t>(L * N)),
        dskip(static_cast<size_t>(C)), h(static_cast<size_t>(C * N)),
        y(static_cast<size_t>(L * C));
    for (auto& v : x) v = rng.uniform_f(-1.0f, 1.0f);
    for (auto& v : abar) v = rng.uniform_f(0.5f, 0.999f);
    for (auto& v : bbar) v = rng.uniform_f(-0.1f, 0.1f);
    for (auto& v : cseq) v = rng.uniform_f(-1.0f, 1.0f);
    for (auto& v : dskip) v = 1.0f;

    std::vector<float> q(static_cast<size_t>(L * d)), k(static_cast<size_t>(L * d)),
        v(static_cast<size_t>(L * d)), scores(static_cast<size_t>(L * L)),
        attn_out(static_cast<size_t>(L * d));
    for (auto& w : q) w = rng.uniform_f(-1.0f, 1.0f);
    for (auto& w : k) w = rng.uniform_f(-1.0f, 1.0f);
    for (auto& w : v) w = rng.uniform_f(-1.0f, 1.0f);

    auto time_scan = [&] {
      std::fill(h.begin(), h.end(), 0.0f);
      const auto start = clock::now();
      selective_scan_kernel(L, C, N, x.data(), abar.data(), bbar.data(), cseq.data(),
                            dskip.data(), h.data(), y.data());
      return std::chrono::duration<double>(clock::now() - start).count();
    };
    auto time_attn = [&] {
      const auto start = clock::now();
      naive_attention_forward(L, d, q.data(), k.data(), v.data(), scores.data(), attn_out.data());
      return std::chrono::duration<double>(clock::now() - start).count();
    };

    time_scan();  // warm-up, excluded
    time_attn();
    std::vector<double> scan_times, attn_times;
    for (int r = 0; r < cfg.repeats; ++r) {
      scan_times.push_back(time_scan());
      attn_times.push_back(time_attn());
    }
    result.rows.push_back({L, detail::median(scan_times), detail::median(attn_times)});
  }
  result.scan_slope = detail::loglog_slope(result.rows, false);
  result.attention_slope = detail::loglog_slope(result.rows, true);
  return result;
}

inline void write_probe_csv(const ProbeResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("bench: cannot write " + path);
  out << "length,scan_median_s,attention_median_s\n";
  char buf[128];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g\n", static_cast<long long>(r.length),
                  r.scan_median_s, r.attention_median_s);
    out << buf;
  }
}

}  // namespace hybridroi
