#pragma once
#include <cmath>
#include <cstdint>
#include <vector>

#include "smim/error.hpp"
#include "smim/tensor.hpp"

// Brute-force dense reference implementations, kept free of the tape and of
// every production kernel. Each is the slowest, most literal version of the
// math; the production ops are tested against these.
//
// Accumulation order is part of each reference's contract: per output element,
// bias first, then input-channel outer / kernel-offset inner, ascending. The
// production kernels follow the same order so results match bit for bit in
// like precision.

namespace smim::oracle {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad, const char* axis) {
    const int64_t span = in + 2 * pad - k;
    if (span < 0)
        throw DimensionError(std::string("conv3d: kernel ") + std::to_string(k) +
                             " exceeds padded extent " + std::to_string(in + 2 * pad) +
                             " on axis " + axis);
    return span / stride + 1;
}

// x: [N,Ci,D,H,W], w: [Co,Ci,k,k,k], b: [Co] (empty = no bias). Returns [N,Co,Do,Ho,Wo].
template <class T>
std::vector<T> conv3d_ref(const std::vector<T>& x, int64_t N, int64_t Ci, int64_t D, int64_t H,
                          int64_t W, const std::vector<T>& w, int64_t Co, int64_t k,
                          const std::vector<T>& b, int64_t stride, int64_t pad) {
    const int64_t Do = conv_out_extent(D, k, stride, pad, "depth");
    const int64_t Ho = conv_out_extent(H, k, stride, pad, "height");
    const int64_t Wo = conv_out_extent(W, k, stride, pad, "width");
    std::vector<T> y(size_t(N * Co * Do * Ho * Wo));
    size_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t od = 0; od < Do; ++od)
                for (int64_t oh = 0; oh < Ho; ++oh)
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        T acc = b.empty() ? T(0) : b[size_t(co)];
                        for (int64_t ci = 0; ci < Ci; ++ci)
                            for (int64_t kd = 0; kd < k; ++kd)
                                for (int64_t kh = 0; kh < k; ++kh)
                                    for (int64_t kw = 0; kw < k; ++kw) {
                                        const int64_t id = od * stride - pad + kd;
                                        const int64_t ih = oh * stride - pad + kh;
                                        const int64_t iw = ow * stride - pad + kw;
                                        if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W)
                                            continue;
                                        const T xv = x[size_t((((n * Ci + ci) * D + id) * H + ih) * W + iw)];
                                        const T wv = w[size_t((((co * Ci + ci) * k + kd) * k + kh) * k + kw)];
                                        acc += xv * wv;
                                    }
                        y[oi++] = acc;
                    }
    return y;
}

// Depthwise variant: w is [C,1,k,k,k], each channel convolved with its own kernel.
template <class T>
std::vector<T> depthwise_conv3d_ref(const std::vector<T>& x, int64_t N, int64_t C, int64_t D,
                                    int64_t H, int64_t W, const std::vector<T>& w, int64_t k,
                                    const std::vector<T>& b, int64_t stride, int64_t pad) {
    const int64_t Do = conv_out_extent(D, k, stride, pad, "depth");
    const int64_t Ho = conv_out_extent(H, k, stride, pad, "height");
    const int64_t Wo = conv_out_extent(W, k, stride, pad, "width");
    std::vector<T> y(size_t(N * C * Do * Ho * Wo));
    size_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t od = 0; od < Do; ++od)
                for (int64_t oh = 0; oh < Ho; ++oh)
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        T acc = b.empty() ? T(0) : b[size_t(c)];
                        for (int64_t kd = 0; kd < k; ++kd)
                            for (int64_t kh = 0; kh < k; ++kh)
                                for (int64_t kw = 0; kw < k; ++kw) {
                                    const int64_t id = od * stride - pad + kd;
                                    const int64_t ih = oh * stride - pad + kh;
                                    const int64_t iw = ow * stride - pad + kw;
                                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W)
                                        continue;
                                    const T xv = x[size_t((((n * C + c) * D + id) * H + ih) * W + iw)];
                                    const T wv = w[size_t(((c * k + kd) * k + kh) * k + kw)];
                                    acc += xv * wv;
                                }
                        y[oi++] = acc;
                    }
    return y;
}

// Max pooling with window == stride (non-overlapping); ties resolve to the
// first element in scan order.
template <class T>
std::vector<T> max_pool3d_ref(const std::vector<T>& x, int64_t N, int64_t C, int64_t D, int64_t H,
                              int64_t W, int64_t win) {
    if (D % win || H % win || W % win)
        throw DimensionError("max_pool3d: extents " + std::to_string(D) + "," + std::to_string(H) +
                             "," + std::to_string(W) + " not divisible by window " + std::to_string(win));
    const int64_t Do = D / win, Ho = H / win, Wo = W / win;
    std::vector<T> y(size_t(N * C * Do * Ho * Wo));
    size_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t od = 0; od < Do; ++od)
                for (int64_t oh = 0; oh < Ho; ++oh)
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        bool first = true;
                        T best = 0;
                        for (int64_t kd = 0; kd < win; ++kd)
                            for (int64_t kh = 0; kh < win; ++kh)
                                for (int64_t kw = 0; kw < win; ++kw) {
                                    const T v = x[size_t((((n * C + c) * D + od * win + kd) * H +
                                                          oh * win + kh) * W + ow * win + kw)];
                                    if (first || v > best) { best = v; first = false; }
                                }
                        y[oi++] = best;
                    }
    return y;
}

template <class T>
std::vector<T> upsample_nearest3d_ref(const std::vector<T>& x, int64_t N, int64_t C, int64_t D,
                                      int64_t H, int64_t W, int64_t f) {
    const int64_t Do = D * f, Ho = H * f, Wo = W * f;
    std::vector<T> y(size_t(N * C * Do * Ho * Wo));
    size_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t od = 0; od < Do; ++od)
                for (int64_t oh = 0; oh < Ho; ++oh)
                    for (int64_t ow = 0; ow < Wo; ++ow)
                        y[oi++] = x[size_t((((n * C + c) * D + od / f) * H + oh / f) * W + ow / f)];
    return y;
}

// y[i,j] = sum_k a[i,k] b[k,j], k ascending.
template <class T>
std::vector<T> matmul_ref(const std::vector<T>& a, int64_t m, int64_t k, const std::vector<T>& b,
                          int64_t n) {
    std::vector<T> y(size_t(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += a[size_t(i * k + p)] * b[size_t(p * n + j)];
            y[size_t(i * n + j)] = acc;
        }
    return y;
}

// x: [R,Fin], w: [Fout,Fin], b: [Fout]; y[r,fo] = b[fo] + sum_fi x*w, fi ascending.
template <class T>
std::vector<T> linear_ref(const std::vector<T>& x, int64_t R, int64_t Fin, const std::vector<T>& w,
                          int64_t Fout, const std::vector<T>& b) {
    std::vector<T> y(size_t(R * Fout));
    for (int64_t r = 0; r < R; ++r)
        for (int64_t fo = 0; fo < Fout; ++fo) {
            T acc = b.empty() ? T(0) : b[size_t(fo)];
            for (int64_t fi = 0; fi < Fin; ++fi)
                acc += x[size_t(r * Fin + fi)] * w[size_t(fo * Fin + fi)];
            y[size_t(r * Fout + fo)] = acc;
        }
    return y;
}

template <class T>
std::vector<T> softmax_rows_ref(const std::vector<T>& x, int64_t R, int64_t C) {
    std::vector<T> y(x.size());
    for (int64_t r = 0; r < R; ++r) {
        T mx = x[size_t(r * C)];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, x[size_t(r * C + c)]);
        T z = 0;
        for (int64_t c = 0; c < C; ++c) {
            const T e = std::exp(x[size_t(r * C + c)] - mx);
            y[size_t(r * C + c)] = e;
            z += e;
        }
        for (int64_t c = 0; c < C; ++c) y[size_t(r * C + c)] /= z;
    }
    return y;
}

template <class T>
std::vector<T> layer_norm_rows_ref(const std::vector<T>& x, int64_t R, int64_t C,
                                   const std::vector<T>& gamma, const std::vector<T>& beta, T eps) {
    std::vector<T> y(x.size());
    for (int64_t r = 0; r < R; ++r) {
        T mean = 0;
        for (int64_t c = 0; c < C; ++c) mean += x[size_t(r * C + c)];
        mean /= T(C);
        T var = 0;
        for (int64_t c = 0; c < C; ++c) {
            const T d = x[size_t(r * C + c)] - mean;
            var += d * d;
        }
        var /= T(C);
        const T inv = T(1) / std::sqrt(var + eps);
        for (int64_t c = 0; c < C; ++c)
            y[size_t(r * C + c)] = gamma[size_t(c)] * (x[size_t(r * C + c)] - mean) * inv + beta[size_t(c)];
    }
    return y;
}

template <class T>
T gelu_scalar_ref(T x) {
    const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T c1 = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(c0 * (x + c1 * x * x * x)));
}

template <class T>
T sigmoid_scalar_ref(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------
// Dense-masked references: the correctness anchor for the sparse path. Input
// is the zero-filled densification [C,D,H,W]; outputs are zeroed at masked
// coordinates.
// ---------------------------------------------------------------------------

// Dense conv over the zero-filled masked input, restricted to active outputs.
// mask bits: 1 = active, scan order, same resolution in and out (stride 1).
template <class T>
std::vector<T> dense_masked_conv3d_ref(const std::vector<T>& x, int64_t C, int64_t D, int64_t H,
                                       int64_t W, const std::vector<uint8_t>& mask,
                                       const std::vector<T>& w, int64_t Co, int64_t k,
                                       const std::vector<T>& b, int64_t pad, int64_t groups = 1) {
    std::vector<T> xz = x;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t v = 0; v < D * H * W; ++v)
            if (!mask[size_t(v)]) xz[size_t(c * D * H * W + v)] = T(0);
    std::vector<T> y = (groups == 1)
                           ? conv3d_ref(xz, 1, C, D, H, W, w, Co, k, b, 1, pad)
                           : depthwise_conv3d_ref(xz, 1, C, D, H, W, w, k, b, 1, pad);
    for (int64_t co = 0; co < Co; ++co)
        for (int64_t v = 0; v < D * H * W; ++v)
            if (!mask[size_t(v)]) y[size_t(co * D * H * W + v)] = T(0);
    return y;
}

// Dense max pool restricted to active outputs (input windows of active
// outputs are fully active under a consistent pyramid).
template <class T>
std::vector<T> dense_masked_max_pool_ref(const std::vector<T>& x, int64_t C, int64_t D, int64_t H,
                                         int64_t W, int64_t win,
                                         const std::vector<uint8_t>& out_mask) {
    auto y = max_pool3d_ref(x, 1, C, D, H, W, win);
    const int64_t V = (D / win) * (H / win) * (W / win);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t v = 0; v < V; ++v)
            if (!out_mask[size_t(v)]) y[size_t(c * V + v)] = T(0);
    return y;
}

// Group norm with statistics over active sites only, evaluated densely:
// channel-major accumulation within each group, active sites in scan order.
// Masked outputs are zero.
template <class T>
std::vector<T> dense_masked_group_norm_ref(const std::vector<T>& x, int64_t C, int64_t V,
                                           const std::vector<uint8_t>& mask,
                                           const std::vector<T>& gamma, const std::vector<T>& beta,
                                           int64_t groups, T eps) {
    const int64_t cpg = C / groups;
    int64_t K = 0;
    for (uint8_t bit : mask) K += bit;
    if (K == 0) throw OracleError("dense_masked_group_norm_ref: empty active set");
    std::vector<T> y(x.size(), T(0));
    for (int64_t g = 0; g < groups; ++g) {
        T mean = 0;
        for (int64_t cc = 0; cc < cpg; ++cc) {
            const int64_t c = g * cpg + cc;
            for (int64_t v = 0; v < V; ++v)
                if (mask[size_t(v)]) mean += x[size_t(c * V + v)];
        }
        mean /= T(cpg * K);
        T var = 0;
        for (int64_t cc = 0; cc < cpg; ++cc) {
            const int64_t c = g * cpg + cc;
            for (int64_t v = 0; v < V; ++v)
                if (mask[size_t(v)]) {
                    const T d = x[size_t(c * V + v)] - mean;
                    var += d * d;
                }
        }
        var /= T(cpg * K);
        const T inv = T(1) / std::sqrt(var + eps);
        for (int64_t cc = 0; cc < cpg; ++cc) {
            const int64_t c = g * cpg + cc;
            for (int64_t v = 0; v < V; ++v)
                if (mask[size_t(v)])
                    y[size_t(c * V + v)] =
                        gamma[size_t(c)] * (x[size_t(c * V + v)] - mean) * inv + beta[size_t(c)];
        }
    }
    return y;
}

// Central-difference gradient of a scalar-valued closure w.r.t. one parameter
// tensor. The closure re-runs the full forward pass; grad mode is off so the
// probes never touch the tape.
template <class T, class F>
std::vector<T> finite_diff_grad(F&& eval, Tensor<T>& param, T eps) {
    NoGradGuard ng;
    std::vector<T> g(param.values().size());
    auto& v = param.values();
    for (size_t i = 0; i < v.size(); ++i) {
        const T saved = v[i];
        v[i] = saved + eps;
        const T hi = eval();
        v[i] = saved - eps;
        const T lo = eval();
        v[i] = saved;
        g[i] = (hi - lo) / (T(2) * eps);
    }
    return g;
}

template <class T>
T max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    if (a.size() != b.size())
        throw OracleError("max_abs_diff: size mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
    T m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Max |a-b| / max(|a|,|b|,floor): relative error with an absolute floor so
// near-zero entries don't blow up the ratio.
template <class T>
T max_rel_diff(const std::vector<T>& a, const std::vector<T>& b, T floor_v) {
    if (a.size() != b.size())
        throw OracleError("max_rel_diff: size mismatch");
    T m = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const T den = std::max({std::abs(a[i]), std::abs(b[i]), floor_v});
        m = std::max(m, std::abs(a[i] - b[i]) / den);
    }
    return m;
}

} // namespace smim::oracle
