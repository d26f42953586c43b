#pragma once

// Dense float32 arrays on a reverse-mode tape. Ops are free functions taking
// the tape first; backward closures run in reverse recorded order, so every
// node is visited after all of its consumers. Accumulation order inside each
// kernel is fixed (row-major, ascending index) to keep results bitwise
// reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "hybridroi/common.hpp"
#include "hybridroi/rng.hpp"

namespace hybridroi {

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad{false};

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

class DiffArray {
 public:
  DiffArray() = default;

  static DiffArray zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0f, requires_grad);
  }

  static DiffArray filled(Shape shape, float value, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(numel(n->shape)), value);
    n->requires_grad = requires_grad;
    return DiffArray(std::move(n));
  }

  static DiffArray from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
    check_dim(numel(shape) == static_cast<int64_t>(data.size()),
              "DiffArray: data length " + std::to_string(data.size()) + " does not match shape " +
                  shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return DiffArray(std::move(n));
  }

  static DiffArray scalar_of(float v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(n_->data.size()); }

  // span accessors are lvalue-only: a span into an expiring temporary would
  // dangle before a range-for body runs
  std::span<const float> data() const& { return n_->data; }
  std::span<const float> data() && = delete;
  std::span<float> mutable_data() & { return n_->data; }
  std::span<float> mutable_data() && = delete;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return !n_->grad.empty(); }
  // zero-filled on first access; constness is shallow (the node is shared
  // state), so backward closures can accumulate through const handles
  std::span<float> grad() const& {
    n_->ensure_grad();
    return n_->grad;
  }
  std::span<float> grad() && = delete;
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
  }

  float item() const {
    check_dim(size() == 1, "item(): array is not scalar, shape " + shape_str(shape()));
    return n_->data[0];
  }

  DiffArray detached_copy() const {
    auto n = std::make_shared<detail::Node>();
    n->shape = n_->shape;
    n->data = n_->data;
    n->requires_grad = false;
    return DiffArray(std::move(n));
  }

  bool same_node(const DiffArray& o) const { return n_ == o.n_; }

  detail::Node* node() const { return n_.get(); }

 private:
  explicit DiffArray(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
};

// Ordered record of backward closures. backward() replays it in reverse.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  void record(std::function<void()> backward_fn) {
    if (recording_) entries_.push_back(std::move(backward_fn));
  }

  size_t size() const { return entries_.size(); }

  void backward(DiffArray loss) {
    check_dim(loss.size() == 1, "backward(): loss must be scalar");
    check(loss.requires_grad(), "backward(): loss does not require grad");
    loss.grad()[0] = 1.0f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  void clear() { entries_.clear(); }

 private:
  bool recording_{true};
  std::vector<std::function<void()>> entries_;
};

namespace detail {

inline bool wants_grad(const Tape& tape, std::initializer_list<const DiffArray*> inputs) {
  if (!tape.recording()) return false;
  for (const auto* a : inputs)
    if (a->requires_grad()) return true;
  return false;
}

// ---------------------------------------------------------------------------
// raw kernels (fixed loop order, no allocation beyond explicit scratch)
// ---------------------------------------------------------------------------

// C[MxN] = A[MxK] * B[KxN]   (+= when accumulate)
inline void gemm_nn(const float* a, const float* b, float* c, int64_t M, int64_t K, int64_t N,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + M * N, 0.0f);
  for (int64_t i = 0; i < M; ++i) {
    const float* arow = a + i * K;
    float* crow = c + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const float av = arow[k];
      const float* brow = b + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[MxK] = G[MxN] * B[KxN]^T
inline void gemm_nt(const float* g, const float* b, float* c, int64_t M, int64_t N, int64_t K,
                    bool accumulate) {
  for (int64_t i = 0; i < M; ++i) {
    const float* grow = g + i * N;
    float* crow = c + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const float* brow = b + k * N;
      float acc = 0.0f;
      for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
      crow[k] = accumulate ? crow[k] + acc : acc;
    }
  }
}

// C[KxN] = A[MxK]^T * G[MxN]
inline void gemm_tn(const float* a, const float* g, float* c, int64_t M, int64_t K, int64_t N,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + K * N, 0.0f);
  for (int64_t i = 0; i < M; ++i) {
    const float* arow = a + i * K;
    const float* grow = g + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const float av = arow[k];
      if (av == 0.0f) continue;
      float* crow = c + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += av * grow[j];
    }
  }
}

// Right-aligned broadcast of `small` against `big`: every axis must match or
// be 1 on the smaller side. Returns per-axis strides into `small` for
// iteration over `big` (0 where broadcast).
inline std::vector<int64_t> broadcast_strides(const Shape& big, const Shape& small) {
  check_dim(small.size() <= big.size(),
            "broadcast: rank " + std::to_string(small.size()) + " exceeds " +
                std::to_string(big.size()));
  std::vector<int64_t> strides(big.size(), 0);
  int64_t s = 1;
  for (int i = static_cast<int>(small.size()) - 1, j = static_cast<int>(big.size()) - 1; i >= 0;
       --i, --j) {
    if (small[static_cast<size_t>(i)] == big[static_cast<size_t>(j)]) {
      strides[static_cast<size_t>(j)] = s;
    } else if (small[static_cast<size_t>(i)] == 1) {
      strides[static_cast<size_t>(j)] = 0;
    } else {
      throw DimError("broadcast: incompatible shapes " + shape_str(big) + " vs " +
                     shape_str(small));
    }
    s *= small[static_cast<size_t>(i)];
  }
  return strides;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline DiffArray matmul(Tape& tape, const DiffArray& a, const DiffArray& b) {
  check_dim(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 operands, got " +
                                                shape_str(a.shape()) + " and " +
                                                shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  check_dim(b.dim(0) == K, "matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
  DiffArray out = DiffArray::zeros({M, N});
  detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), M, K, N, false);
  if (detail::wants_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([a, b, out, M, K, N]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        detail::gemm_nt(g.data(), b.data().data(), a.grad().data(), M, N, K, true);
      if (b.requires_grad())
        detail::gemm_tn(a.data().data(), g.data(), b.grad().data(), M, K, N, true);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

namespace detail {

inline float sigmoid_f(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

template <class Fwd, class Bwd>
DiffArray unary_op(Tape& tape, const DiffArray& x, Fwd fwd, Bwd bwd_factor) {
  DiffArray out = DiffArray::zeros(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  if (detail::wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, bwd_factor]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      auto xd = x.data();
      auto od = out.data();
      for (size_t i = 0; i < xd.size(); ++i) xg[i] += g[i] * bwd_factor(xd[i], od[i]);
    });
  }
  return out;
}

}  // namespace detail

inline DiffArray sigmoid(Tape& tape, const DiffArray& x) {
  return detail::unary_op(
      tape, x, [](float v) { return detail::sigmoid_f(v); },
      [](float, float y) { return y * (1.0f - y); });
}

inline DiffArray silu(Tape& tape, const DiffArray& x) {
  return detail::unary_op(
      tape, x, [](float v) { return v * detail::sigmoid_f(v); },
      [](float v, float) {
        const float s = detail::sigmoid_f(v);
        return s * (1.0f + v * (1.0f - s));
      });
}

inline DiffArray softplus(Tape& tape, const DiffArray& x) {
  return detail::unary_op(
      tape, x,
      [](float v) { return std::max(v, 0.0f) + std::log1p(std::exp(-std::fabs(v))); },
      [](float v, float) { return detail::sigmoid_f(v); });
}

inline DiffArray exp(Tape& tape, const DiffArray& x) {
  return detail::unary_op(
      tape, x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline DiffArray neg(Tape& tape, const DiffArray& x) {
  return detail::unary_op(
      tape, x, [](float v) { return -v; }, [](float, float) { return -1.0f; });
}

inline DiffArray scale(Tape& tape, const DiffArray& x, float s) {
  return detail::unary_op(
      tape, x, [s](float v) { return s * v; }, [s](float, float) { return s; });
}

inline DiffArray add_scalar(Tape& tape, const DiffArray& x, float s) {
  return detail::unary_op(
      tape, x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

// ---------------------------------------------------------------------------
// elementwise binary with right-aligned size-1 broadcasting
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { kAdd, kMul };

inline DiffArray binary_op(Tape& tape, const DiffArray& a, const DiffArray& b, BinKind kind) {
  // the higher-rank (or equal) operand fixes the output shape
  const bool a_big = a.rank() >= b.rank();
  const DiffArray& big = a_big ? a : b;
  const DiffArray& small = a_big ? b : a;
  const Shape out_shape = big.shape();
  auto sm_strides = broadcast_strides(out_shape, small.shape());
  // the larger operand must match the output shape exactly
  check_dim(big.shape() == out_shape, "binary: internal");
  for (size_t i = 0; i < out_shape.size(); ++i) {
    (void)i;
  }

  DiffArray out = DiffArray::zeros(out_shape);
  auto od = out.mutable_data();
  auto bd = big.data();
  auto sd = small.data();
  const auto out_strides = row_major_strides(out_shape);
  const int64_t n = numel(out_shape);
  const int rank = static_cast<int>(out_shape.size());

  auto small_index = [&](int64_t flat) {
    int64_t idx = 0;
    for (int ax = 0; ax < rank; ++ax) {
      const int64_t coord = (flat / out_strides[static_cast<size_t>(ax)]) %
                            out_shape[static_cast<size_t>(ax)];
      idx += coord * sm_strides[static_cast<size_t>(ax)];
    }
    return idx;
  };

  const bool same_shape = big.shape() == small.shape();
  if (kind == BinKind::kAdd) {
    if (same_shape)
      for (int64_t i = 0; i < n; ++i) od[i] = bd[i] + sd[i];
    else
      for (int64_t i = 0; i < n; ++i) od[i] = bd[i] + sd[small_index(i)];
  } else {
    if (same_shape)
      for (int64_t i = 0; i < n; ++i) od[i] = bd[i] * sd[i];
    else
      for (int64_t i = 0; i < n; ++i) od[i] = bd[i] * sd[small_index(i)];
  }

  if (detail::wants_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape.record([big, small, out, kind, sm_strides, out_strides, n, rank]() mutable {
      auto g = out.grad();
      auto bd = big.data();
      auto sd = small.data();
      const Shape& oshape = out.shape();
      auto small_index = [&](int64_t flat) {
        int64_t idx = 0;
        for (int ax = 0; ax < rank; ++ax) {
          const int64_t coord = (flat / out_strides[static_cast<size_t>(ax)]) %
                                oshape[static_cast<size_t>(ax)];
          idx += coord * sm_strides[static_cast<size_t>(ax)];
        }
        return idx;
      };
      const bool same_shape = big.shape() == small.shape();
      if (big.requires_grad()) {
        auto bg = big.grad();
        if (kind == BinKind::kAdd)
          for (int64_t i = 0; i < n; ++i) bg[i] += g[i];
        else if (same_shape)
          for (int64_t i = 0; i < n; ++i) bg[i] += g[i] * sd[i];
        else
          for (int64_t i = 0; i < n; ++i) bg[i] += g[i] * sd[small_index(i)];
      }
      if (small.requires_grad()) {
        auto sg = small.grad();
        if (kind == BinKind::kAdd) {
          if (same_shape)
            for (int64_t i = 0; i < n; ++i) sg[i] += g[i];
          else
            for (int64_t i = 0; i < n; ++i) sg[small_index(i)] += g[i];
        } else {
          if (same_shape)
            for (int64_t i = 0; i < n; ++i) sg[i] += g[i] * bd[i];
          else
            for (int64_t i = 0; i < n; ++i) sg[small_index(i)] += g[i] * bd[i];
        }
      }
    });
  }
  return out;
}

}  // namespace detail

inline DiffArray add(Tape& tape, const DiffArray& a, const DiffArray& b) {
  return detail::binary_op(tape, a, b, detail::BinKind::kAdd);
}

inline DiffArray mul(Tape& tape, const DiffArray& a, const DiffArray& b) {
  return detail::binary_op(tape, a, b, detail::BinKind::kMul);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

inline DiffArray reduce(Tape& tape, const DiffArray& x, std::vector<int> axes, bool mean) {
  const int rank = x.rank();
  check_dim(!axes.empty(), "reduce: axes must be non-empty");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (int ax : axes)
    check_dim(ax >= 0 && ax < rank, "reduce: axis " + std::to_string(ax) + " out of range for " +
                                        shape_str(x.shape()));
  std::vector<bool> reduced(static_cast<size_t>(rank), false);
  for (int ax : axes) reduced[static_cast<size_t>(ax)] = true;

  Shape out_shape;
  int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    if (reduced[static_cast<size_t>(i)])
      count *= x.dim(i);
    else
      out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  check_dim(count > 0, "reduce: empty reduction extent");

  const auto in_strides = row_major_strides(x.shape());
  // stride into the output for each input axis (0 on reduced axes)
  std::vector<int64_t> out_axis_stride(static_cast<size_t>(rank), 0);
  {
    int64_t s = 1;
    for (int i = rank - 1; i >= 0; --i) {
      if (!reduced[static_cast<size_t>(i)]) {
        out_axis_stride[static_cast<size_t>(i)] = s;
        s *= x.dim(i);
      }
    }
  }

  DiffArray out = DiffArray::zeros(out_shape);
  auto od = out.mutable_data();
  auto xd = x.data();
  const int64_t n = x.size();
  auto out_index = [&](int64_t flat) {
    int64_t idx = 0;
    for (int ax = 0; ax < rank; ++ax) {
      const int64_t coord = (flat / in_strides[static_cast<size_t>(ax)]) % x.dim(ax);
      idx += coord * out_axis_stride[static_cast<size_t>(ax)];
    }
    return idx;
  };
  for (int64_t i = 0; i < n; ++i) od[out_index(i)] += xd[i];
  const float inv = mean ? 1.0f / static_cast<float>(count) : 1.0f;
  if (mean)
    for (auto& v : od) v *= inv;

  if (detail::wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, in_strides, out_axis_stride, n, inv, rank]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      auto out_index = [&](int64_t flat) {
        int64_t idx = 0;
        for (int ax = 0; ax < rank; ++ax) {
          const int64_t coord = (flat / in_strides[static_cast<size_t>(ax)]) % x.dim(ax);
          idx += coord * out_axis_stride[static_cast<size_t>(ax)];
        }
        return idx;
      };
      for (int64_t i = 0; i < n; ++i) xg[i] += g[out_index(i)] * inv;
    });
  }
  return out;
}

}  // namespace detail

inline DiffArray reduce_mean(Tape& tape, const DiffArray& x, std::vector<int> axes) {
  return detail::reduce(tape, x, std::move(axes), true);
}

inline DiffArray reduce_sum(Tape& tape, const DiffArray& x, std::vector<int> axes) {
  return detail::reduce(tape, x, std::move(axes), false);
}

// ---------------------------------------------------------------------------
// shape plumbing: reshape / permute / slice / reverse / concat-free helpers
// ---------------------------------------------------------------------------

inline DiffArray reshape(Tape& tape, const DiffArray& x, Shape new_shape) {
  check_dim(numel(new_shape) == x.size(), "reshape: element count mismatch, " +
                                              shape_str(x.shape()) + " -> " +
                                              shape_str(new_shape));
  DiffArray out = DiffArray::from_data(std::move(new_shape),
                                       std::vector<float>(x.data().begin(), x.data().end()));
  if (detail::wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape.record([x, out]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += g[i];
    });
  }
  return out;
}

inline DiffArray permute(Tape& tape, const DiffArray& x, std::vector<int> perm) {
  const int rank = x.rank();
  check_dim(static_cast<int>(perm.size()) == rank, "permute: perm size mismatch");
  Shape out_shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  const auto in_strides = detail::row_major_strides(x.shape());
  const auto out_strides = detail::row_major_strides(out_shape);
  // map: out flat -> in flat
  std::vector<int64_t> in_axis_stride(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i)
    in_axis_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  DiffArray out = DiffArray::zeros(out_shape);
  auto od = out.mutable_data();
  auto xd = x.data();
  const int64_t n = x.size();
  auto in_index = [&](int64_t flat) {
    int64_t idx = 0;
    for (int ax = 0; ax < rank; ++ax) {
      const int64_t coord = (flat / out_strides[static_cast<size_t>(ax)]) %
                            out_shape[static_cast<size_t>(ax)];
      idx += coord * in_axis_stride[static_cast<size_t>(ax)];
    }
    return idx;
  };
  for (int64_t i = 0; i < n; ++i) od[i] = xd[in_index(i)];

  if (detail::wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, out_strides, in_axis_stride, n, rank]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      const Shape& oshape = out.shape();
      auto in_index = [&](int64_t flat) {
        int64_t idx = 0;
        for (int ax = 0; ax < rank; ++ax) {
          const int64_t coord = (flat / out_strides[static_cast<size_t>(ax)]) %
                                oshape[static_cast<size_t>(ax)];
          idx += coord * in_axis_stride[static_cast<size_t>(ax)];
        }
        return idx;
      };
      for (int64_t i = 0; i < n; ++i) xg[in_index(i)] += g[i];
    });
  }
  return out;
}

inline DiffArray slice(Tape& tape, const DiffArray& x, int axis, int64_t start, int64_t len) {
  const int rank = x.rank();
  check_dim(axis >= 0 && axis < rank, "slice: bad axis");
  check_dim(start >= 0 && len > 0 && start + len <= x.dim(axis), "slice: bad range");
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  const int64_t in_axis = x.dim(axis);

  DiffArray out = DiffArray::zeros(out_shape);
  auto od = out.mutable_data();
  auto xd = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      std::memcpy(od.data() + (o * len + j) * inner,
                  xd.data() + (o * in_axis + start + j) * inner,
                  static_cast<size_t>(inner) * sizeof(float));

  if (detail::wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, outer, inner, len, in_axis, start]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j) {
          float* dst = xg.data() + (o * in_axis + start + j) * inner;
          const float* src = g.data() + (o * len + j) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

inline DiffArray reverse_axis(Tape& tape, const DiffArray& x, int axis) {
  const int rank = x.rank();
  check_dim(axis >= 0 && axis < rank, "reverse_axis: bad axis");
  int64_t outer = 1, inner = 1;
  const int64_t n_ax = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);

  DiffArray out = DiffArray::zeros(x.shape());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n_ax; ++j)
      std::memcpy(od.data() + (o * n_ax + j) * inner,
                  xd.data() + (o * n_ax + (n_ax - 1 - j)) * inner,
                  static_cast<size_t>(inner) * sizeof(float));

  if (detail::wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    tape.record([x, out, outer, inner, n_ax]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n_ax; ++j) {
          float* dst = xg.data() + (o * n_ax + (n_ax - 1 - j)) * inner;
          const float* src = g.data() + (o * n_ax + j) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, im2col + gemm, groups in {1 .. C}
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const float* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, float* col) {
  // col: [C*kh*kw, Ho*Wo]
  const int64_t Q = Ho * Wo;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        float* crow = col + ((c * kh + ki) * kw + kj) * Q;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) {
            std::fill(crow + oy * Wo, crow + (oy + 1) * Wo, 0.0f);
            continue;
          }
          const float* xrow = x + (c * H + iy) * W;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t ix = ox * stride - pad + kj;
            crow[oy * Wo + ox] = (ix < 0 || ix >= W) ? 0.0f : xrow[ix];
          }
        }
      }
}

inline void col2im_accum(const float* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                         int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, float* dx) {
  const int64_t Q = Ho * Wo;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const float* crow = col + ((c * kh + ki) * kw + kj) * Q;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          float* xrow = dx + (c * H + iy) * W;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) xrow[ix] += crow[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

inline DiffArray conv2d(Tape& tape, const DiffArray& x, const DiffArray& k, int64_t stride,
                        int64_t pad, int64_t groups) {
  check_dim(x.rank() == 4, "conv2d: input must be BxCxHxW, got " + shape_str(x.shape()));
  check_dim(k.rank() == 4, "conv2d: kernel must be Ox(C/g)xkhxkw, got " + shape_str(k.shape()));
  check_dim(stride >= 1, "conv2d: stride must be >= 1");
  check_dim(pad >= 0, "conv2d: padding must be >= 0");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = k.dim(0), Cg = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  check_dim(groups >= 1 && C % groups == 0 && O % groups == 0,
            "conv2d: channels not divisible by groups");
  check_dim(Cg == C / groups, "conv2d: kernel channel dim " + std::to_string(Cg) +
                                  " != C/groups = " + std::to_string(C / groups));
  check_dim(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  const int64_t Og = O / groups;
  const int64_t R = Cg * kh * kw;
  const int64_t Q = Ho * Wo;

  DiffArray out = DiffArray::zeros({B, O, Ho, Wo});
  {
    std::vector<float> col(static_cast<size_t>(R * Q));
    auto xd = x.data();
    auto kd = k.data();
    auto od = out.mutable_data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t g = 0; g < groups; ++g) {
        detail::im2col(xd.data() + (b * C + g * Cg) * H * W, Cg, H, W, kh, kw, stride, pad, Ho, Wo,
                       col.data());
        detail::gemm_nn(kd.data() + g * Og * R, col.data(), od.data() + (b * O + g * Og) * Q, Og,
                        R, Q, false);
      }
  }

  if (detail::wants_grad(tape, {&x, &k})) {
    out.set_requires_grad(true);
    tape.record([x, k, out, B, C, H, W, O, Cg, kh, kw, stride, pad, groups, Ho, Wo, Og, R,
                 Q]() mutable {
      auto g = out.grad();
      auto xd = x.data();
      auto kd = k.data();
      std::vector<float> col(static_cast<size_t>(R * Q));
      std::vector<float> dcol(static_cast<size_t>(R * Q));
      const bool need_dx = x.requires_grad();
      const bool need_dk = k.requires_grad();
      std::span<float> xg, kg;
      if (need_dx) xg = x.grad();
      if (need_dk) kg = k.grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t gi = 0; gi < groups; ++gi) {
          const float* gmat = g.data() + (b * O + gi * Og) * Q;
          if (need_dk) {
            detail::im2col(xd.data() + (b * C + gi * Cg) * H * W, Cg, H, W, kh, kw, stride, pad,
                           Ho, Wo, col.data());
            detail::gemm_nt(gmat, col.data(), kg.data() + gi * Og * R, Og, Q, R, true);
          }
          if (need_dx) {
            detail::gemm_tn(kd.data() + gi * Og * R, gmat, dcol.data(), Og, R, Q, false);
            detail::col2im_accum(dcol.data(), Cg, H, W, kh, kw, stride, pad, Ho, Wo,
                                 xg.data() + (b * C + gi * Cg) * H * W);
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv1d_causal: depthwise, left-padded with kw-1 zeros; position t sees
// inputs <= t only. Kernel tap k[d, kw-1] multiplies the current sample.
// ---------------------------------------------------------------------------

inline DiffArray conv1d_causal(Tape& tape, const DiffArray& x, const DiffArray& k) {
  check_dim(x.rank() == 3, "conv1d_causal: input must be BxDxL, got " + shape_str(x.shape()));
  check_dim(k.rank() == 2, "conv1d_causal: kernel must be Dxkw, got " + shape_str(k.shape()));
  const int64_t B = x.dim(0), D = x.dim(1), L = x.dim(2), kw = k.dim(1);
  check_dim(k.dim(0) == D, "conv1d_causal: kernel channel count mismatch");
  check_dim(kw >= 1, "conv1d_causal: kw must be >= 1");

  DiffArray out = DiffArray::zeros({B, D, L});
  auto xd = x.data();
  auto kd = k.data();
  auto od = out.mutable_data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t d = 0; d < D; ++d) {
      const float* xs = xd.data() + (b * D + d) * L;
      const float* ks = kd.data() + d * kw;
      float* os = od.data() + (b * D + d) * L;
      for (int64_t t = 0; t < L; ++t) {
        float acc = 0.0f;
        for (int64_t j = 0; j < kw; ++j) {
          const int64_t src = t - (kw - 1) + j;
          if (src >= 0) acc += ks[j] * xs[src];
        }
        os[t] = acc;
      }
    }

  if (detail::wants_grad(tape, {&x, &k})) {
    out.set_requires_grad(true);
    tape.record([x, k, out, B, D, L, kw]() mutable {
      auto g = out.grad();
      auto xd = x.data();
      auto kd = k.data();
      const bool need_dx = x.requires_grad();
      const bool need_dk = k.requires_grad();
      std::span<float> xg, kg;
      if (need_dx) xg = x.grad();
      if (need_dk) kg = k.grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t d = 0; d < D; ++d) {
          const float* gs = g.data() + (b * D + d) * L;
          const float* xs = xd.data() + (b * D + d) * L;
          const float* ks = kd.data() + d * kw;
          for (int64_t t = 0; t < L; ++t)
            for (int64_t j = 0; j < kw; ++j) {
              const int64_t src = t - (kw - 1) + j;
              if (src < 0) continue;
              if (need_dx) xg[(b * D + d) * L + src] += gs[t] * ks[j];
              if (need_dk) kg[d * kw + j] += gs[t] * xs[src];
            }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// grad_check: tape gradient vs central differences
// ---------------------------------------------------------------------------

// f: (Tape&, const DiffArray&) -> scalar DiffArray. Returns the worst
// relative error, with a 1e-6 absolute floor in the denominator.
template <class F>
double grad_check(F f, const DiffArray& x0, float eps = 1e-3f) {
  check(eps > 0.0f, "grad_check: eps must be positive");
  DiffArray x = x0.detached_copy();
  x.set_requires_grad(true);
  Tape tape;
  DiffArray y = f(tape, x);
  check_dim(y.size() == 1, "grad_check: f must be scalar-valued");
  tape.backward(y);
  std::vector<float> analytic(x.grad().begin(), x.grad().end());

  double max_rel = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    DiffArray xp = x0.detached_copy();
    DiffArray xm = x0.detached_copy();
    xp.mutable_data()[static_cast<size_t>(i)] += eps;
    xm.mutable_data()[static_cast<size_t>(i)] -= eps;
    Tape tp(false), tm(false);
    const double fp = f(tp, xp).item();
    const double fm = f(tm, xm).item();
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
    const double a = analytic[static_cast<size_t>(i)];
    const double denom = std::max({std::fabs(numeric), std::fabs(a), 1e-6});
    max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// named parameter store (insertion-ordered; order defines checkpoint layout)
// ---------------------------------------------------------------------------

class ParamStore {
 public:
  DiffArray& add(const std::string& name, DiffArray p) {
    check(index_.find(name) == index_.end(), "ParamStore: duplicate name " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(p));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  DiffArray& at(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), "ParamStore: unknown name " + name);
    return items_[it->second].second;
  }

  const DiffArray& at(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "ParamStore: unknown name " + name);
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, DiffArray>>& items() const { return items_; }
  std::vector<std::pair<std::string, DiffArray>>& items() { return items_; }

  size_t count() const { return items_.size(); }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [_, p] : items_) n += p.size();
    return n;
  }

  void zero_grad_all() {
    for (auto& [_, p] : items_) p.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, DiffArray>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// He-uniform fill, the default init for conv / projection weights here.
inline void he_uniform_fill(DiffArray& p, int64_t fan_in, Rng& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  for (auto& v : p.mutable_data()) v = rng.uniform_f(-limit, limit);
}

}  // namespace hybridroi
