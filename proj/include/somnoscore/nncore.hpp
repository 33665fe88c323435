#pragma once

// Minimal differentiable operator set for 1D separable convolution networks:
// depthwise / pointwise convolution, max pooling, dense, ReLU, softmax,
// cross-entropy and inverted dropout, each with an explicit backward pass.
//
// Operators are templated on the scalar type. float is the production
// storage type; the finite-difference checks instantiate the same code at
// double. Reductions accumulate in double regardless of storage type.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "somnoscore/errors.hpp"
#include "somnoscore/rng.hpp"

namespace somnoscore::nncore {

enum class Mode { Train, Eval };

template <typename T>
struct Tensor2 {
  int channels = 0;
  int length = 0;
  std::vector<T> data;  // row-major: data[c * length + i]

  Tensor2() = default;
  Tensor2(int ch, int len, T fill = T{})
      : channels(ch),
        length(len),
        data(static_cast<std::size_t>(ch) * static_cast<std::size_t>(len), fill) {}

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Tensor2 t;
    t.channels = static_cast<int>(rows.size());
    t.length = rows.size() ? static_cast<int>(rows.begin()->size()) : 0;
    t.data.reserve(static_cast<std::size_t>(t.channels) * t.length);
    for (const auto& r : rows) t.data.insert(t.data.end(), r.begin(), r.end());
    return t;
  }

  T& at(int c, int i) { return data[static_cast<std::size_t>(c) * length + i]; }
  T at(int c, int i) const { return data[static_cast<std::size_t>(c) * length + i]; }
  T* row(int c) { return data.data() + static_cast<std::size_t>(c) * length; }
  const T* row(int c) const { return data.data() + static_cast<std::size_t>(c) * length; }
  std::size_t size() const { return data.size(); }
};

// One kernel row per input channel (depth multiplier 1), no bias.
template <typename T>
struct DepthwiseKernel {
  int channels = 0;
  int ksize = 0;
  std::vector<T> w;  // [channels][ksize]

  DepthwiseKernel() = default;
  DepthwiseKernel(int ch, int k, T fill = T{})
      : channels(ch), ksize(k), w(static_cast<std::size_t>(ch) * k, fill) {}

  static DepthwiseKernel from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    DepthwiseKernel k;
    k.channels = static_cast<int>(rows.size());
    k.ksize = rows.size() ? static_cast<int>(rows.begin()->size()) : 0;
    for (const auto& r : rows) k.w.insert(k.w.end(), r.begin(), r.end());
    return k;
  }
};

// 1 x Ch convolution projecting Ch channels onto F filters, with bias.
template <typename T>
struct PointwiseKernel {
  int filters = 0;
  int channels = 0;
  std::vector<T> w;  // [filters][channels]
  std::vector<T> b;  // [filters]

  PointwiseKernel() = default;
  PointwiseKernel(int f, int ch)
      : filters(f),
        channels(ch),
        w(static_cast<std::size_t>(f) * ch, T{}),
        b(static_cast<std::size_t>(f), T{}) {}
};

// A tape drives exactly one backward pass.
class GradTape {
 public:
  void consume() {
    if (consumed_) throw TapeConsumed("backward called twice on the same tape");
    consumed_ = true;
  }
  bool consumed() const { return consumed_; }
  void reset() { consumed_ = false; }

 private:
  bool consumed_ = false;
};

struct MaxPoolTape : GradTape {
  int channels = 0;
  int in_length = 0;
  int out_length = 0;
  int pool = 0;
  std::vector<std::int32_t> argmax;  // input index per output element
};

struct DropoutTape : GradTape {
  double keep_scale = 1.0;  // 1/(1-p), 1.0 in eval mode
  std::vector<std::uint8_t> mask;
};

// ---------------------------------------------------------------------------
// raw-span kernels (hot path; callers own all buffers)
// ---------------------------------------------------------------------------
//
// Reductions accumulate in double through eight parallel lanes combined in a
// fixed order, so they vectorize without giving the compiler reassociation
// freedom: results stay bit-identical for a given build.

inline constexpr int kPointwiseBlock = 512;  // doubles; keeps tiles in L1

template <typename T>
double striped_dot(const T* a, const T* b, int n) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) lanes[l] += double(a[i + l]) * double(b[i + l]);
  for (int l = 0; i < n; ++i, ++l) lanes[l] += double(a[i]) * double(b[i]);
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <typename T>
double striped_sum(const T* a, int n) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) lanes[l] += double(a[i + l]);
  for (int l = 0; i < n; ++i, ++l) lanes[l] += double(a[i]);
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

// out[c][i] = sum_j x[c][i+j] * w[c][j]   (valid padding, cross-correlation)
//
// The tap loop only vectorizes when its trip count is known at compile
// time, so the common kernel sizes are dispatched to fixed-K instantiations.
namespace detail {

template <typename T, int K>
void depthwise_forward_fixed(const T* x, int channels, int length, const T* w, T* out) {
  const int out_len = length - K + 1;
  for (int c = 0; c < channels; ++c) {
    const T* xr = x + static_cast<std::size_t>(c) * length;
    const T* wr = w + static_cast<std::size_t>(c) * K;
    T* yr = out + static_cast<std::size_t>(c) * out_len;
    double wd[K];
    for (int j = 0; j < K; ++j) wd[j] = double(wr[j]);
    for (int i = 0; i < out_len; ++i) {
      double acc = 0.0;
      for (int j = 0; j < K; ++j) acc += double(xr[i + j]) * wd[j];
      yr[i] = static_cast<T>(acc);
    }
  }
}

template <typename T>
void depthwise_forward_generic(const T* x, int channels, int length, const T* w,
                               int ksize, T* out) {
  const int out_len = length - ksize + 1;
  for (int c = 0; c < channels; ++c) {
    const T* xr = x + static_cast<std::size_t>(c) * length;
    const T* wr = w + static_cast<std::size_t>(c) * ksize;
    T* yr = out + static_cast<std::size_t>(c) * out_len;
    for (int i = 0; i < out_len; ++i) {
      double acc = 0.0;
      for (int j = 0; j < ksize; ++j) acc += double(xr[i + j]) * double(wr[j]);
      yr[i] = static_cast<T>(acc);
    }
  }
}

}  // namespace detail

template <typename T>
void depthwise_forward(const T* x, int channels, int length, const T* w, int ksize,
                       T* out) {
  switch (ksize) {
    case 1: detail::depthwise_forward_fixed<T, 1>(x, channels, length, w, out); return;
    case 2: detail::depthwise_forward_fixed<T, 2>(x, channels, length, w, out); return;
    case 3: detail::depthwise_forward_fixed<T, 3>(x, channels, length, w, out); return;
    case 5: detail::depthwise_forward_fixed<T, 5>(x, channels, length, w, out); return;
    case 7: detail::depthwise_forward_fixed<T, 7>(x, channels, length, w, out); return;
    case 9: detail::depthwise_forward_fixed<T, 9>(x, channels, length, w, out); return;
    default: detail::depthwise_forward_generic(x, channels, length, w, ksize, out);
  }
}

// dw[c][j] = sum_i dy[c][i] * x[c][i+j];  dx[c][t] = sum_j dy[c][t-j] * w[c][j]
// dx may be null when the input gradient is not needed (first layer).
// Processed in tiles so each row streams through memory once; the per-tile
// partial sums combine in a fixed order. scratch holds `length` doubles.
template <typename T>
void depthwise_backward(const T* x, int channels, int length, const T* w, int ksize,
                        const T* dy, T* dx, T* dw, double* scratch) {
  const int out_len = length - ksize + 1;
  constexpr int kTile = 1024;
  for (int c = 0; c < channels; ++c) {
    const T* xr = x + static_cast<std::size_t>(c) * length;
    const T* wr = w + static_cast<std::size_t>(c) * ksize;
    const T* gr = dy + static_cast<std::size_t>(c) * out_len;
    T* dwr = dw + static_cast<std::size_t>(c) * ksize;
    if (ksize <= 16) {
      double acc[16] = {};
      for (int i0 = 0; i0 < out_len; i0 += kTile) {
        const int n = std::min(kTile, out_len - i0);
        for (int j = 0; j < ksize; ++j)
          acc[j] += striped_dot(gr + i0, xr + i0 + j, n);
      }
      for (int j = 0; j < ksize; ++j) dwr[j] = static_cast<T>(acc[j]);
    } else {
      for (int j = 0; j < ksize; ++j)
        dwr[j] = static_cast<T>(striped_dot(gr, xr + j, out_len));
    }
    if (dx != nullptr) {
      T* dxr = dx + static_cast<std::size_t>(c) * length;
      for (int o0 = 0; o0 < length; o0 += kTile) {
        const int n = std::min(kTile, length - o0);
        for (int i = 0; i < n; ++i) scratch[i] = 0.0;
        for (int j = 0; j < ksize; ++j) {
          const double wj = double(wr[j]);
          // dy indices contributing to dx[o0 .. o0+n): i = t - j
          const int lo = std::max(0, o0 - j);
          const int hi = std::min(out_len, o0 + n - j);
          for (int i = lo; i < hi; ++i) scratch[i + j - o0] += double(gr[i]) * wj;
        }
        for (int i = 0; i < n; ++i) dxr[o0 + i] = static_cast<T>(scratch[i]);
      }
    }
  }
}

// out[f][i] = b[f] + sum_c w[f][c] * x[c][i]; processed in L1-sized column
// tiles so every x row is read once per tile across all filters.
// scratch holds kPointwiseBlock doubles (or `length` if smaller).
template <typename T>
void pointwise_forward(const T* x, int channels, int length, const T* w, const T* b,
                       int filters, T* out, double* scratch) {
  for (int i0 = 0; i0 < length; i0 += kPointwiseBlock) {
    const int n = std::min(kPointwiseBlock, length - i0);
    for (int f = 0; f < filters; ++f) {
      const T* wf = w + static_cast<std::size_t>(f) * channels;
      const double bias = double(b[f]);
      for (int i = 0; i < n; ++i) scratch[i] = bias;
      for (int c = 0; c < channels; ++c) {
        const double wc = double(wf[c]);
        const T* xr = x + static_cast<std::size_t>(c) * length + i0;
        for (int i = 0; i < n; ++i) scratch[i] += wc * double(xr[i]);
      }
      T* yr = out + static_cast<std::size_t>(f) * length + i0;
      for (int i = 0; i < n; ++i) yr[i] = static_cast<T>(scratch[i]);
    }
  }
}

// pointwise conv with ReLU fused into the store; used by the model runner
// so the pre-activation never has to be materialized (ReLU's gradient mask
// is recoverable from the sign of the activation itself). Channel counts of
// one to three (the first block) take a single fused pass.
namespace detail {

template <typename T, int C>
void pointwise_relu_smallc(const T* x, int length, const T* w, const T* b, int filters,
                           T* out) {
  for (int f = 0; f < filters; ++f) {
    const T* wf = w + static_cast<std::size_t>(f) * C;
    double wd[C];
    for (int c = 0; c < C; ++c) wd[c] = double(wf[c]);
    const double bias = double(b[f]);
    T* yr = out + static_cast<std::size_t>(f) * length;
    for (int i = 0; i < length; ++i) {
      double acc = bias;
      for (int c = 0; c < C; ++c)
        acc += wd[c] * double(x[static_cast<std::size_t>(c) * length + i]);
      const T v = static_cast<T>(acc);
      yr[i] = v > T{} ? v : T{};
    }
  }
}

}  // namespace detail

template <typename T>
void pointwise_forward_relu(const T* x, int channels, int length, const T* w,
                            const T* b, int filters, T* out, double* scratch) {
  switch (channels) {
    case 1: detail::pointwise_relu_smallc<T, 1>(x, length, w, b, filters, out); return;
    case 2: detail::pointwise_relu_smallc<T, 2>(x, length, w, b, filters, out); return;
    case 3: detail::pointwise_relu_smallc<T, 3>(x, length, w, b, filters, out); return;
    default: break;
  }
  for (int i0 = 0; i0 < length; i0 += kPointwiseBlock) {
    const int n = std::min(kPointwiseBlock, length - i0);
    for (int f = 0; f < filters; ++f) {
      const T* wf = w + static_cast<std::size_t>(f) * channels;
      const double bias = double(b[f]);
      for (int i = 0; i < n; ++i) scratch[i] = bias;
      for (int c = 0; c < channels; ++c) {
        const double wc = double(wf[c]);
        const T* xr = x + static_cast<std::size_t>(c) * length + i0;
        for (int i = 0; i < n; ++i) scratch[i] += wc * double(xr[i]);
      }
      T* yr = out + static_cast<std::size_t>(f) * length + i0;
      for (int i = 0; i < n; ++i)
        yr[i] = scratch[i] > 0.0 ? static_cast<T>(scratch[i]) : T{};
    }
  }
}

// pointwise conv + ReLU + max-pool in one tile pass; the full-length
// activation map never touches memory. Equivalent to pointwise_forward_relu
// followed by maxpool_forward (same tie rule: first index wins).
// scratch holds kPointwiseBlock doubles; trailing samples beyond
// out_length * pool are dropped exactly as in maxpool_forward.
template <typename T>
void pointwise_relu_pool(const T* x, int channels, int length, const T* w, const T* b,
                         int filters, int pool, T* pooled, std::int32_t* argmax,
                         double* scratch) {
  if (pool < 1 || pool > kPointwiseBlock)
    throw BadArg("pointwise_relu_pool: pool size must be in 1.." +
                 std::to_string(kPointwiseBlock));
  const int out_len = length / pool;
  const int tile = kPointwiseBlock - (kPointwiseBlock % pool);
  for (int o0 = 0; o0 < out_len; o0 += tile / pool) {
    const int on = std::min(tile / pool, out_len - o0);
    const int i0 = o0 * pool;
    const int n = on * pool;
    for (int f = 0; f < filters; ++f) {
      const T* wf = w + static_cast<std::size_t>(f) * channels;
      const double bias = double(b[f]);
      for (int i = 0; i < n; ++i) scratch[i] = bias;
      for (int c = 0; c < channels; ++c) {
        const double wc = double(wf[c]);
        const T* xr = x + static_cast<std::size_t>(c) * length + i0;
        for (int i = 0; i < n; ++i) scratch[i] += wc * double(xr[i]);
      }
      T* pr = pooled + static_cast<std::size_t>(f) * out_len + o0;
      std::int32_t* ar = argmax + static_cast<std::size_t>(f) * out_len + o0;
      for (int oi = 0; oi < on; ++oi) {
        const int base = oi * pool;
        int best = base;
        T bv = static_cast<T>(scratch[base]);
        bv = bv > T{} ? bv : T{};
        for (int j = 1; j < pool; ++j) {
          T v = static_cast<T>(scratch[base + j]);
          v = v > T{} ? v : T{};
          const bool gt = v > bv;
          bv = gt ? v : bv;
          best = gt ? base + j : best;
        }
        pr[oi] = bv;
        ar[oi] = i0 + best;
      }
    }
  }
}

// max-pool backward with the ReLU mask folded into the scatter: gradient
// reaches the argmax position only when the pooled activation is positive
// (identical to routing first and masking by the pre-activation sign).
template <typename T>
void maxpool_relu_backward(const std::int32_t* argmax, const T* pooled, const T* dy,
                           int channels, int in_length, int out_length, T* dx) {
  std::fill(dx, dx + static_cast<std::size_t>(channels) * in_length, T{});
  for (int c = 0; c < channels; ++c) {
    const T* gr = dy + static_cast<std::size_t>(c) * out_length;
    const T* pr = pooled + static_cast<std::size_t>(c) * out_length;
    const std::int32_t* ar = argmax + static_cast<std::size_t>(c) * out_length;
    T* dxr = dx + static_cast<std::size_t>(c) * in_length;
    for (int i = 0; i < out_length; ++i) dxr[ar[i]] += pr[i] > T{} ? gr[i] : T{};
  }
}

// dw[f][c] = sum_i dy[f][i]*x[c][i];  db[f] = sum_i dy[f][i];
// dx[c][i] = sum_f w[f][c]*dy[f][i].  scratch holds kPointwiseBlock doubles.
template <typename T>
void pointwise_backward(const T* x, int channels, int length, const T* w, int filters,
                        const T* dy, T* dx, T* dw, T* db, double* scratch) {
  if (filters <= 32 && channels <= 32) {
    // tile pass: every dy and x row is streamed once; partial tile sums
    // combine per (f, c) in a fixed order
    double acc_w[32][32] = {};
    double acc_b[32] = {};
    for (int i0 = 0; i0 < length; i0 += kPointwiseBlock) {
      const int n = std::min(kPointwiseBlock, length - i0);
      for (int f = 0; f < filters; ++f) {
        const T* gr = dy + static_cast<std::size_t>(f) * length + i0;
        acc_b[f] += striped_sum(gr, n);
        for (int c = 0; c < channels; ++c)
          acc_w[f][c] += striped_dot(gr, x + static_cast<std::size_t>(c) * length + i0, n);
      }
    }
    for (int f = 0; f < filters; ++f) {
      db[f] = static_cast<T>(acc_b[f]);
      for (int c = 0; c < channels; ++c)
        dw[static_cast<std::size_t>(f) * channels + c] = static_cast<T>(acc_w[f][c]);
    }
  } else {
    for (int f = 0; f < filters; ++f) {
      const T* gr = dy + static_cast<std::size_t>(f) * length;
      db[f] = static_cast<T>(striped_sum(gr, length));
      T* dwf = dw + static_cast<std::size_t>(f) * channels;
      for (int c = 0; c < channels; ++c)
        dwf[c] = static_cast<T>(
            striped_dot(gr, x + static_cast<std::size_t>(c) * length, length));
    }
  }
  if (dx != nullptr) {
    for (int i0 = 0; i0 < length; i0 += kPointwiseBlock) {
      const int n = std::min(kPointwiseBlock, length - i0);
      for (int c = 0; c < channels; ++c) {
        for (int i = 0; i < n; ++i) scratch[i] = 0.0;
        for (int f = 0; f < filters; ++f) {
          const double wc = double(w[static_cast<std::size_t>(f) * channels + c]);
          const T* gr = dy + static_cast<std::size_t>(f) * length + i0;
          for (int i = 0; i < n; ++i) scratch[i] += wc * double(gr[i]);
        }
        T* dxr = dx + static_cast<std::size_t>(c) * length + i0;
        for (int i = 0; i < n; ++i) dxr[i] = static_cast<T>(scratch[i]);
      }
    }
  }
}

template <typename T>
void relu_forward(const T* x, std::size_t n, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(x[i], T{});
}

// gradient is 1 for x > 0, 0 otherwise (including x == 0)
template <typename T>
void relu_backward(const T* x, const T* dy, std::size_t n, T* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] > T{} ? dy[i] : T{};
}

// Floor semantics: out_length = length / pool, trailing remainder dropped.
// Ties resolve to the lowest input index.
template <typename T>
void maxpool_forward(const T* x, int channels, int length, int pool, T* out,
                     std::int32_t* argmax) {
  const int out_len = length / pool;
  for (int c = 0; c < channels; ++c) {
    const T* xr = x + static_cast<std::size_t>(c) * length;
    T* yr = out + static_cast<std::size_t>(c) * out_len;
    std::int32_t* ar = argmax + static_cast<std::size_t>(c) * out_len;
    for (int i = 0; i < out_len; ++i) {
      const int base = i * pool;
      int best = base;
      T bv = xr[base];
      for (int j = 1; j < pool; ++j) {
        const bool gt = xr[base + j] > bv;
        bv = gt ? xr[base + j] : bv;
        best = gt ? base + j : best;
      }
      yr[i] = bv;
      ar[i] = best;
    }
  }
}

template <typename T>
void maxpool_backward(const std::int32_t* argmax, const T* dy, int channels,
                      int in_length, int out_length, T* dx) {
  std::fill(dx, dx + static_cast<std::size_t>(channels) * in_length, T{});
  for (int c = 0; c < channels; ++c) {
    const T* gr = dy + static_cast<std::size_t>(c) * out_length;
    const std::int32_t* ar = argmax + static_cast<std::size_t>(c) * out_length;
    T* dxr = dx + static_cast<std::size_t>(c) * in_length;
    for (int i = 0; i < out_length; ++i) dxr[ar[i]] += gr[i];
  }
}

// y[o] = b[o] + sum_i w[o][i] * x[i]
template <typename T>
void dense_forward(const T* x, int in_dim, const T* w, const T* b, int out_dim, T* y) {
  for (int o = 0; o < out_dim; ++o) {
    const T* wr = w + static_cast<std::size_t>(o) * in_dim;
    y[o] = static_cast<T>(double(b[o]) + striped_dot(wr, x, in_dim));
  }
}

template <typename T>
void dense_backward(const T* x, int in_dim, const T* w, int out_dim, const T* dy,
                    T* dx, T* dw, T* db) {
  for (int o = 0; o < out_dim; ++o) {
    db[o] = dy[o];
    const double g = double(dy[o]);
    T* dwr = dw + static_cast<std::size_t>(o) * in_dim;
    const T* xr = x;
    for (int i = 0; i < in_dim; ++i) dwr[i] = static_cast<T>(g * double(xr[i]));
  }
  if (dx != nullptr) {
    for (int i = 0; i < in_dim; ++i) {
      double acc = 0.0;
      for (int o = 0; o < out_dim; ++o)
        acc += double(w[static_cast<std::size_t>(o) * in_dim + i]) * double(dy[o]);
      dx[i] = static_cast<T>(acc);
    }
  }
}

// Numerically stable softmax (max subtraction); output sums to 1.
template <typename T>
void softmax(const T* x, int n, T* p) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, double(x[i]));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double e = std::exp(double(x[i]) - mx);
    p[i] = static_cast<T>(e);
    sum += e;
  }
  for (int i = 0; i < n; ++i) p[i] = static_cast<T>(double(p[i]) / sum);
}

template <typename T>
double cross_entropy(const T* p, int n, int target) {
  if (target < 0 || target >= n) throw BadArg("cross_entropy: target class out of range");
  double q = double(p[target]);
  return -std::log(std::max(q, 1e-300));
}

// Combined softmax + cross-entropy gradient w.r.t. the logits.
template <typename T>
void softmax_cross_entropy_backward(const T* p, int n, int target, T* dlogits) {
  for (int i = 0; i < n; ++i)
    dlogits[i] = static_cast<T>(double(p[i]) - (i == target ? 1.0 : 0.0));
}

// Inverted dropout: kept entries are scaled by 1/(1-p) at train time so
// that eval mode is a pure identity.
template <typename T>
void dropout_forward(const T* x, std::size_t n, double p, Mode mode, Rng* rng, T* out,
                     DropoutTape* tape) {
  if (p < 0.0 || p >= 1.0) throw BadArg("dropout: p must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) {
    std::copy(x, x + n, out);
    if (tape != nullptr) {
      tape->keep_scale = 1.0;
      tape->mask.assign(n, 1);
    }
    return;
  }
  if (rng == nullptr) throw BadArg("dropout: train mode requires an rng");
  const double scale = 1.0 / (1.0 - p);
  if (tape != nullptr) {
    tape->keep_scale = scale;
    tape->mask.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool keep = rng->uniform() >= p;
    out[i] = keep ? static_cast<T>(double(x[i]) * scale) : T{};
    if (tape != nullptr) tape->mask[i] = keep ? 1 : 0;
  }
}

template <typename T>
void dropout_backward(DropoutTape& tape, const T* dy, std::size_t n, T* dx) {
  tape.consume();
  for (std::size_t i = 0; i < n; ++i)
    dx[i] = tape.mask[i] ? static_cast<T>(double(dy[i]) * tape.keep_scale) : T{};
}

// ---------------------------------------------------------------------------
// Tensor2 convenience layer
// ---------------------------------------------------------------------------

template <typename T>
Tensor2<T> depthwise_conv1d(const Tensor2<T>& x, const DepthwiseKernel<T>& k) {
  if (x.channels != k.channels)
    throw ShapeError("depthwise_conv1d: input has " + std::to_string(x.channels) +
                     " channels, kernel expects " + std::to_string(k.channels));
  if (x.length < k.ksize)
    throw ShapeError("depthwise_conv1d: input length " + std::to_string(x.length) +
                     " shorter than kernel size " + std::to_string(k.ksize));
  Tensor2<T> out(x.channels, x.length - k.ksize + 1);
  depthwise_forward(x.data.data(), x.channels, x.length, k.w.data(), k.ksize,
                    out.data.data());
  return out;
}

template <typename T>
struct DepthwiseGrads {
  Tensor2<T> dx;
  DepthwiseKernel<T> dk;
};

template <typename T>
DepthwiseGrads<T> depthwise_conv1d_backward(const Tensor2<T>& x,
                                            const DepthwiseKernel<T>& k,
                                            const Tensor2<T>& dy) {
  DepthwiseGrads<T> g{Tensor2<T>(x.channels, x.length), DepthwiseKernel<T>(k.channels, k.ksize)};
  std::vector<double> scratch(static_cast<std::size_t>(x.length));
  depthwise_backward(x.data.data(), x.channels, x.length, k.w.data(), k.ksize,
                     dy.data.data(), g.dx.data.data(), g.dk.w.data(), scratch.data());
  return g;
}

template <typename T>
Tensor2<T> pointwise_conv1d(const Tensor2<T>& x, const PointwiseKernel<T>& k) {
  if (x.channels != k.channels)
    throw ShapeError("pointwise_conv1d: input has " + std::to_string(x.channels) +
                     " channels, kernel expects " + std::to_string(k.channels));
  Tensor2<T> out(k.filters, x.length);
  std::vector<double> scratch(static_cast<std::size_t>(x.length));
  pointwise_forward(x.data.data(), x.channels, x.length, k.w.data(), k.b.data(),
                    k.filters, out.data.data(), scratch.data());
  return out;
}

template <typename T>
struct PointwiseGrads {
  Tensor2<T> dx;
  PointwiseKernel<T> dk;
};

template <typename T>
PointwiseGrads<T> pointwise_conv1d_backward(const Tensor2<T>& x,
                                            const PointwiseKernel<T>& k,
                                            const Tensor2<T>& dy) {
  PointwiseGrads<T> g{Tensor2<T>(x.channels, x.length), PointwiseKernel<T>(k.filters, k.channels)};
  std::vector<double> scratch(static_cast<std::size_t>(x.length));
  pointwise_backward(x.data.data(), x.channels, x.length, k.w.data(), k.filters,
                     dy.data.data(), g.dx.data.data(), g.dk.w.data(), g.dk.b.data(),
                     scratch.data());
  return g;
}

template <typename T>
Tensor2<T> maxpool1d(const Tensor2<T>& x, int pool, MaxPoolTape* tape = nullptr) {
  if (pool <= 0) throw BadArg("maxpool1d: pool size must be >= 1");
  Tensor2<T> out(x.channels, x.length / pool);
  std::vector<std::int32_t> local;
  std::vector<std::int32_t>* am = &local;
  if (tape != nullptr) {
    tape->channels = x.channels;
    tape->in_length = x.length;
    tape->out_length = out.length;
    tape->pool = pool;
    am = &tape->argmax;
  }
  am->resize(out.size());
  maxpool_forward(x.data.data(), x.channels, x.length, pool, out.data.data(), am->data());
  return out;
}

template <typename T>
Tensor2<T> maxpool1d_backward(MaxPoolTape& tape, const Tensor2<T>& dy) {
  tape.consume();
  Tensor2<T> dx(tape.channels, tape.in_length);
  maxpool_backward(tape.argmax.data(), dy.data.data(), tape.channels, tape.in_length,
                   tape.out_length, dx.data.data());
  return dx;
}

template <typename T>
Tensor2<T> relu(const Tensor2<T>& x) {
  Tensor2<T> out(x.channels, x.length);
  relu_forward(x.data.data(), x.size(), out.data.data());
  return out;
}

template <typename T>
std::vector<T> dense(const std::vector<T>& x, const std::vector<T>& w,
                     const std::vector<T>& b) {
  const int out_dim = static_cast<int>(b.size());
  const int in_dim = static_cast<int>(x.size());
  if (w.size() != static_cast<std::size_t>(out_dim) * in_dim)
    throw ShapeError("dense: weight matrix does not match input/output sizes");
  std::vector<T> y(out_dim);
  dense_forward(x.data(), in_dim, w.data(), b.data(), out_dim, y.data());
  return y;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& x) {
  std::vector<T> p(x.size());
  softmax(x.data(), static_cast<int>(x.size()), p.data());
  return p;
}

template <typename T>
double cross_entropy(const std::vector<T>& p, int target) {
  return cross_entropy(p.data(), static_cast<int>(p.size()), target);
}

template <typename T>
Tensor2<T> dropout(const Tensor2<T>& x, double p, Mode mode, Rng* rng,
                   DropoutTape* tape = nullptr) {
  Tensor2<T> out(x.channels, x.length);
  dropout_forward(x.data.data(), x.size(), p, mode, rng, out.data.data(), tape);
  return out;
}

// ---------------------------------------------------------------------------
// finite-difference verification
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|),
// with the numeric side computed by central differences in double precision.
inline double gradient_check(const std::function<double(std::span<const double>)>& f,
                             std::span<double> point, std::span<const double> analytic,
                             double eps = 1e-4) {
  if (point.size() != analytic.size())
    throw BadArg("gradient_check: analytic gradient size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + eps;
    const double fp = f(point);
    point[i] = saved - eps;
    const double fm = f(point);
    point[i] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace somnoscore::nncore
