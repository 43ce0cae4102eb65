#pragma once
#include <cmath>
#include <cstdint>

#include "smim/tensor.hpp"

namespace smim {

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

// Tanh-approximation GELU.
template <class T>
Tensor<T> gelu(Tensor<T> x) {
    const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T c1 = T(0.044715);
    auto out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = px[i];
        po[i] = T(0.5) * v * (T(1) + std::tanh(c0 * (v + c1 * v * v * v)));
    }
    if (tape_active<T>({x})) {
        Tape<T>::instance().record("gelu", {x}, out, [x, out, c0, c1]() mutable {
            const auto& go = out.grad();
            auto& gx = x.grad();
            const T* px2 = x.data();
            for (size_t i = 0; i < go.size(); ++i) {
                const T v = px2[i];
                const T th = std::tanh(c0 * (v + c1 * v * v * v));
                const T sech2 = T(1) - th * th;
                const T d = T(0.5) * (T(1) + th) +
                            T(0.5) * v * sech2 * c0 * (T(1) + T(3) * c1 * v * v);
                gx[i] += go[i] * d;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(Tensor<T> x) {
    auto out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
    if (tape_active<T>({x})) {
        Tape<T>::instance().record("sigmoid", {x}, out, [x, out]() mutable {
            const auto& go = out.grad();
            auto& gx = x.grad();
            const T* py = out.data();
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * py[i] * (T(1) - py[i]);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear / softmax / layer norm over row matrices
// ---------------------------------------------------------------------------

// x: [R,Fin], w: [Fout,Fin], b: [Fout]. Per output element the reduction runs
// fi ascending after the bias, matching the dense reference exactly.
template <class T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
    if (x.ndim() != 2 || w.ndim() != 2)
        throw DimensionError("linear: expected 2-d input and weight");
    const int64_t R = x.dim(0), Fin = x.dim(1), Fout = w.dim(0);
    if (w.dim(1) != Fin)
        throw DimensionError("linear: weight expects " + std::to_string(w.dim(1)) +
                             " features, input has " + std::to_string(Fin));
    if (b.defined() && b.numel() != Fout)
        throw DimensionError("linear: bias size " + std::to_string(b.numel()) + " vs " +
                             std::to_string(Fout) + " outputs");
    auto out = Tensor<T>::zeros({R, Fout});
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.defined() ? b.data() : nullptr;
    T* po = out.data();
    for (int64_t r = 0; r < R; ++r)
        for (int64_t fo = 0; fo < Fout; ++fo) {
            T acc = pb ? pb[fo] : T(0);
            const T* xrow = px + r * Fin;
            const T* wrow = pw + fo * Fin;
            for (int64_t fi = 0; fi < Fin; ++fi) acc += xrow[fi] * wrow[fi];
            po[r * Fout + fo] = acc;
        }
    std::vector<Tensor<T>> ins = {x, w};
    if (b.defined()) ins.push_back(b);
    if (tape_active(ins)) {
        Tape<T>::instance().record("linear", ins, out,
                                   [x, w, b, out, R, Fin, Fout]() mutable {
            const auto& go = out.grad();
            if (x.needs_grad()) {
                auto& gx = x.grad();
                const T* pw2 = w.data();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t fi = 0; fi < Fin; ++fi) {
                        T acc = 0;
                        for (int64_t fo = 0; fo < Fout; ++fo)
                            acc += go[size_t(r * Fout + fo)] * pw2[fo * Fin + fi];
                        gx[size_t(r * Fin + fi)] += acc;
                    }
            }
            if (w.needs_grad()) {
                auto& gw = w.grad();
                const T* px2 = x.data();
                for (int64_t fo = 0; fo < Fout; ++fo)
                    for (int64_t fi = 0; fi < Fin; ++fi) {
                        T acc = 0;
                        for (int64_t r = 0; r < R; ++r)
                            acc += go[size_t(r * Fout + fo)] * px2[r * Fin + fi];
                        gw[size_t(fo * Fin + fi)] += acc;
                    }
            }
            if (b.defined() && b.needs_grad()) {
                auto& gb = b.grad();
                for (int64_t fo = 0; fo < Fout; ++fo) {
                    T acc = 0;
                    for (int64_t r = 0; r < R; ++r) acc += go[size_t(r * Fout + fo)];
                    gb[size_t(fo)] += acc;
                }
            }
        });
    }
    return out;
}

// Numerically-stable softmax along the last axis of a 2-d tensor.
template <class T>
Tensor<T> softmax_rows(Tensor<T> x) {
    if (x.ndim() != 2) throw DimensionError("softmax_rows: expected 2-d input");
    const int64_t R = x.dim(0), C = x.dim(1);
    auto out = Tensor<T>::zeros(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t r = 0; r < R; ++r) {
        const T* xr = px + r * C;
        T* yr = po + r * C;
        T mx = xr[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
        T z = 0;
        for (int64_t c = 0; c < C; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            z += yr[c];
        }
        const T inv = T(1) / z;
        for (int64_t c = 0; c < C; ++c) yr[c] *= inv;
    }
    if (tape_active<T>({x})) {
        Tape<T>::instance().record("softmax_rows", {x}, out, [x, out, R, C]() mutable {
            const auto& go = out.grad();
            auto& gx = x.grad();
            const T* py = out.data();
            for (int64_t r = 0; r < R; ++r) {
                const T* yr = py + r * C;
                const T* gr = go.data() + r * C;
                T dot = 0;
                for (int64_t c = 0; c < C; ++c) dot += gr[c] * yr[c];
                for (int64_t c = 0; c < C; ++c)
                    gx[size_t(r * C + c)] += yr[c] * (gr[c] - dot);
            }
        });
    }
    return out;
}

// Layer norm over the last axis of [R,C]; gamma/beta are [C].
template <class T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta, T eps) {
    if (x.ndim() != 2) throw DimensionError("layer_norm: expected 2-d input");
    const int64_t R = x.dim(0), C = x.dim(1);
    if (gamma.numel() != C || beta.numel() != C)
        throw DimensionError("layer_norm: gamma/beta size vs " + std::to_string(C) + " features");
    auto out = Tensor<T>::zeros(x.shape());
    // Saved normalized values and inverse stddevs for the backward pass.
    auto saved_xhat = std::make_shared<std::vector<T>>(size_t(R * C));
    auto saved_inv = std::make_shared<std::vector<T>>(size_t(R));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbeta = beta.data();
    T* po = out.data();
    for (int64_t r = 0; r < R; ++r) {
        const T* xr = px + r * C;
        T mean = 0;
        for (int64_t c = 0; c < C; ++c) mean += xr[c];
        mean /= T(C);
        T var = 0;
        for (int64_t c = 0; c < C; ++c) {
            const T d = xr[c] - mean;
            var += d * d;
        }
        var /= T(C);
        const T inv = T(1) / std::sqrt(var + eps);
        (*saved_inv)[size_t(r)] = inv;
        for (int64_t c = 0; c < C; ++c) {
            const T xh = (xr[c] - mean) * inv;
            (*saved_xhat)[size_t(r * C + c)] = xh;
            po[r * C + c] = pg[c] * xh + pbeta[c];
        }
    }
    if (tape_active<T>({x, gamma, beta})) {
        Tape<T>::instance().record("layer_norm", {x, gamma, beta}, out,
                                   [x, gamma, beta, out, saved_xhat, saved_inv, R, C]() mutable {
            const auto& go = out.grad();
            const T* pg2 = gamma.data();
            const auto& xh = *saved_xhat;
            if (x.needs_grad()) {
                auto& gx = x.grad();
                for (int64_t r = 0; r < R; ++r) {
                    const T inv = (*saved_inv)[size_t(r)];
                    T sum_d = 0, sum_dx = 0;
                    for (int64_t c = 0; c < C; ++c) {
                        const T d = go[size_t(r * C + c)] * pg2[c];
                        sum_d += d;
                        sum_dx += d * xh[size_t(r * C + c)];
                    }
                    for (int64_t c = 0; c < C; ++c) {
                        const T d = go[size_t(r * C + c)] * pg2[c];
                        gx[size_t(r * C + c)] +=
                            inv * (d - (sum_d + xh[size_t(r * C + c)] * sum_dx) / T(C));
                    }
                }
            }
            if (gamma.needs_grad()) {
                auto& gg = gamma.grad();
                for (int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t r = 0; r < R; ++r)
                        acc += go[size_t(r * C + c)] * xh[size_t(r * C + c)];
                    gg[size_t(c)] += acc;
                }
            }
            if (beta.needs_grad()) {
                auto& gb = beta.grad();
                for (int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t r = 0; r < R; ++r) acc += go[size_t(r * C + c)];
                    gb[size_t(c)] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense 3-d volume ops; layout [N,C,D,H,W], W fastest
// ---------------------------------------------------------------------------

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad,
                               const char* axis) {
    const int64_t span = in + 2 * pad - k;
    if (span < 0)
        throw DimensionError(std::string("conv3d: kernel ") + std::to_string(k) +
                             " exceeds padded extent " + std::to_string(in + 2 * pad) +
                             " on axis " + axis);
    return span / stride + 1;
}

template <class T>
void check_volume5d(Tensor<T> x, const char* op) {
    if (x.ndim() != 5)
        throw DimensionError(std::string(op) + ": expected [N,C,D,H,W], got " + shape_str(x.shape()));
}

// Cubic-kernel conv; groups must be 1 (full) or C_in (depthwise). Per output
// element the additions run bias, then ci ascending, then kd,kh,kw — the same
// order as the dense reference.
template <class T>
Tensor<T> conv3d(Tensor<T> x, Tensor<T> w, Tensor<T> b, int64_t stride,
                 int64_t pad, int64_t groups = 1) {
    check_volume5d(x, "conv3d");
    if (w.ndim() != 5) throw DimensionError("conv3d: weight must be 5-d");
    const int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Co = w.dim(0), k = w.dim(2);
    if (w.dim(3) != k || w.dim(4) != k)
        throw DimensionError("conv3d: kernel must be cubic, got " + shape_str(w.shape()));
    if (groups != 1 && groups != Ci)
        throw ConfigError("conv3d: groups must be 1 or match input channels");
    const int64_t Cig = Ci / groups;  // input channels per group
    if (w.dim(1) != Cig)
        throw DimensionError("conv3d: weight expects " + std::to_string(w.dim(1)) +
                             " channels/group, input provides " + std::to_string(Cig));
    if (groups > 1 && groups == Ci && Co != Ci)
        throw DimensionError("conv3d: depthwise needs equal in/out channels");
    if (b.defined() && b.numel() != Co)
        throw DimensionError("conv3d: bias size vs " + std::to_string(Co) + " outputs");
    const int64_t Do = conv_out_extent(D, k, stride, pad, "depth");
    const int64_t Ho = conv_out_extent(H, k, stride, pad, "height");
    const int64_t Wo = conv_out_extent(W, k, stride, pad, "width");
    auto out = Tensor<T>::zeros({N, Co, Do, Ho, Wo});
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.defined() ? b.data() : nullptr;
    T* po = out.data();
    const int64_t in_plane = D * H * W, out_plane = Do * Ho * Wo;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co) {
            T* oc = po + (n * Co + co) * out_plane;
            if (pb) {
                const T bv = pb[co];
                for (int64_t i = 0; i < out_plane; ++i) oc[i] = bv;
            }
            const int64_t ci0 = (groups == 1) ? 0 : co;  // depthwise: own channel only
            for (int64_t cig = 0; cig < Cig; ++cig) {
                const int64_t ci = ci0 + cig;
                const T* xc = px + (n * Ci + ci) * in_plane;
                for (int64_t kd = 0; kd < k; ++kd)
                    for (int64_t kh = 0; kh < k; ++kh)
                        for (int64_t kw = 0; kw < k; ++kw) {
                            const T wv = pw[size_t((((co * Cig + cig) * k + kd) * k + kh) * k + kw)];
                            for (int64_t od = 0; od < Do; ++od) {
                                const int64_t id = od * stride - pad + kd;
                                if (id < 0 || id >= D) continue;
                                for (int64_t oh = 0; oh < Ho; ++oh) {
                                    const int64_t ih = oh * stride - pad + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    T* orow = oc + (od * Ho + oh) * Wo;
                                    const T* xrow = xc + (id * H + ih) * W;
                                    for (int64_t ow = 0; ow < Wo; ++ow) {
                                        const int64_t iw = ow * stride - pad + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        orow[ow] += wv * xrow[iw];
                                    }
                                }
                            }
                        }
            }
        }
    std::vector<Tensor<T>> ins = {x, w};
    if (b.defined()) ins.push_back(b);
    if (tape_active(ins)) {
        Tape<T>::instance().record("conv3d", ins, out,
                                   [x, w, b, out, N, Ci, Cig, D, H, W, Co, k, Do, Ho, Wo, stride,
                                    pad, groups]() mutable {
            const auto& go = out.grad();
            const int64_t in_plane = D * H * W, out_plane = Do * Ho * Wo;
            if (x.needs_grad()) {
                auto& gx = x.grad();
                const T* pw2 = w.data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* gc = go.data() + (n * Co + co) * out_plane;
                        const int64_t ci0 = (groups == 1) ? 0 : co;
                        for (int64_t cig = 0; cig < Cig; ++cig) {
                            const int64_t ci = ci0 + cig;
                            T* gxc = gx.data() + (n * Ci + ci) * in_plane;
                            for (int64_t kd = 0; kd < k; ++kd)
                                for (int64_t kh = 0; kh < k; ++kh)
                                    for (int64_t kw = 0; kw < k; ++kw) {
                                        const T wv =
                                            pw2[size_t((((co * Cig + cig) * k + kd) * k + kh) * k + kw)];
                                        for (int64_t od = 0; od < Do; ++od) {
                                            const int64_t id = od * stride - pad + kd;
                                            if (id < 0 || id >= D) continue;
                                            for (int64_t oh = 0; oh < Ho; ++oh) {
                                                const int64_t ih = oh * stride - pad + kh;
                                                if (ih < 0 || ih >= H) continue;
                                                const T* grow = gc + (od * Ho + oh) * Wo;
                                                T* xrow = gxc + (id * H + ih) * W;
                                                for (int64_t ow = 0; ow < Wo; ++ow) {
                                                    const int64_t iw = ow * stride - pad + kw;
                                                    if (iw < 0 || iw >= W) continue;
                                                    xrow[iw] += wv * grow[ow];
                                                }
                                            }
                                        }
                                    }
                        }
                    }
            }
            if (w.needs_grad()) {
                auto& gw = w.grad();
                const T* px2 = x.data();
                for (int64_t co = 0; co < Co; ++co) {
                    const int64_t ci0 = (groups == 1) ? 0 : co;
                    for (int64_t cig = 0; cig < Cig; ++cig) {
                        const int64_t ci = ci0 + cig;
                        for (int64_t kd = 0; kd < k; ++kd)
                            for (int64_t kh = 0; kh < k; ++kh)
                                for (int64_t kw = 0; kw < k; ++kw) {
                                    T acc = 0;
                                    for (int64_t n = 0; n < N; ++n) {
                                        const T* gc = go.data() + (n * Co + co) * out_plane;
                                        const T* xc = px2 + (n * Ci + ci) * in_plane;
                                        for (int64_t od = 0; od < Do; ++od) {
                                            const int64_t id = od * stride - pad + kd;
                                            if (id < 0 || id >= D) continue;
                                            for (int64_t oh = 0; oh < Ho; ++oh) {
                                                const int64_t ih = oh * stride - pad + kh;
                                                if (ih < 0 || ih >= H) continue;
                                                const T* grow = gc + (od * Ho + oh) * Wo;
                                                const T* xrow = xc + (id * H + ih) * W;
                                                for (int64_t ow = 0; ow < Wo; ++ow) {
                                                    const int64_t iw = ow * stride - pad + kw;
                                                    if (iw < 0 || iw >= W) continue;
                                                    acc += grow[ow] * xrow[iw];
                                                }
                                            }
                                        }
                                    }
                                    gw[size_t((((co * Cig + cig) * k + kd) * k + kh) * k + kw)] += acc;
                                }
                    }
                }
            }
            if (b.defined() && b.needs_grad()) {
                auto& gb = b.grad();
                for (int64_t co = 0; co < Co; ++co) {
                    T acc = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gc = go.data() + (n * Co + co) * out_plane;
                        for (int64_t i = 0; i < out_plane; ++i) acc += gc[i];
                    }
                    gb[size_t(co)] += acc;
                }
            }
        });
    }
    return out;
}

// Non-overlapping max pool (window == stride); ties take the first element in
// scan order, and only that element receives gradient.
template <class T>
Tensor<T> max_pool3d(Tensor<T> x, int64_t win) {
    check_volume5d(x, "max_pool3d");
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    if (D % win || H % win || W % win)
        throw DimensionError("max_pool3d: extents " + shape_str({D, H, W}) +
                             " not divisible by window " + std::to_string(win));
    const int64_t Do = D / win, Ho = H / win, Wo = W / win;
    auto out = Tensor<T>::zeros({N, C, Do, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(out.numel()));
    const T* px = x.data();
    T* po = out.data();
    size_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t od = 0; od < Do; ++od)
                for (int64_t oh = 0; oh < Ho; ++oh)
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        bool first = true;
                        T best = 0;
                        int64_t bi = -1;
                        for (int64_t kd = 0; kd < win; ++kd)
                            for (int64_t kh = 0; kh < win; ++kh)
                                for (int64_t kw = 0; kw < win; ++kw) {
                                    const int64_t idx = (((n * C + c) * D + od * win + kd) * H +
                                                         oh * win + kh) * W + ow * win + kw;
                                    const T v = px[idx];
                                    if (first || v > best) { best = v; bi = idx; first = false; }
                                }
                        po[oi] = best;
                        (*argmax)[oi] = bi;
                        ++oi;
                    }
    if (tape_active<T>({x})) {
        Tape<T>::instance().record("max_pool3d", {x}, out, [x, out, argmax]() mutable {
            const auto& go = out.grad();
            auto& gx = x.grad();
            for (size_t i = 0; i < go.size(); ++i) gx[size_t((*argmax)[i])] += go[i];
        });
    }
    return out;
}

// Nearest-neighbour upsample by an integer factor along each spatial axis.
template <class T>
Tensor<T> upsample_nearest3d(Tensor<T> x, int64_t f) {
    check_volume5d(x, "upsample_nearest3d");
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t Do = D * f, Ho = H * f, Wo = W * f;
    auto out = Tensor<T>::zeros({N, C, Do, Ho, Wo});
    const T* px = x.data();
    T* po = out.data();
    size_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t od = 0; od < Do; ++od)
                for (int64_t oh = 0; oh < Ho; ++oh) {
                    const T* xrow = px + (((n * C + c) * D + od / f) * H + oh / f) * W;
                    for (int64_t ow = 0; ow < Wo; ++ow) po[oi++] = xrow[ow / f];
                }
    if (tape_active<T>({x})) {
        Tape<T>::instance().record("upsample_nearest3d", {x}, out,
                                   [x, out, N, C, D, H, W, f]() mutable {
            const auto& go = out.grad();
            auto& gx = x.grad();
            const int64_t Ho = H * f, Wo = W * f;
            size_t oi = 0;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t od = 0; od < D * f; ++od)
                        for (int64_t oh = 0; oh < Ho; ++oh) {
                            T* grow = gx.data() + (((n * C + c) * D + od / f) * H + oh / f) * W;
                            for (int64_t ow = 0; ow < Wo; ++ow) grow[ow / f] += go[oi++];
                        }
        });
    }
    return out;
}

// Channel concatenation of two [N,C,D,H,W] volumes.
template <class T>
Tensor<T> concat_channels(Tensor<T> a, Tensor<T> b) {
    check_volume5d(a, "concat_channels");
    check_volume5d(b, "concat_channels");
    for (int i : {0, 2, 3, 4})
        if (a.dim(i) != b.dim(i))
            throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const int64_t plane = a.dim(2) * a.dim(3) * a.dim(4);
    auto out = Tensor<T>::zeros({N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        std::copy(pa + n * Ca * plane, pa + (n + 1) * Ca * plane, po + n * (Ca + Cb) * plane);
        std::copy(pb + n * Cb * plane, pb + (n + 1) * Cb * plane,
                  po + (n * (Ca + Cb) + Ca) * plane);
    }
    if (tape_active<T>({a, b})) {
        Tape<T>::instance().record("concat_channels", {a, b}, out,
                                   [a, b, out, N, Ca, Cb, plane]() mutable {
            const auto& go = out.grad();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t i = 0; i < Ca * plane; ++i)
                        ga[size_t(n * Ca * plane + i)] += go[size_t(n * (Ca + Cb) * plane + i)];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t i = 0; i < Cb * plane; ++i)
                        gb[size_t(n * Cb * plane + i)] +=
                            go[size_t((n * (Ca + Cb) + Ca) * plane + i)];
            }
        });
    }
    return out;
}

// Group norm over [N,C,D,H,W]: statistics per (sample, group), affine per channel.
template <class T>
Tensor<T> group_norm3d(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                       int64_t groups, T eps) {
    check_volume5d(x, "group_norm3d");
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t plane = x.dim(2) * x.dim(3) * x.dim(4);
    if (C % groups)
        throw ConfigError("group_norm3d: " + std::to_string(C) + " channels not divisible by " +
                          std::to_string(groups) + " groups");
    if (gamma.numel() != C || beta.numel() != C)
        throw DimensionError("group_norm3d: gamma/beta size vs " + std::to_string(C) + " channels");
    const int64_t cpg = C / groups;
    const int64_t gsz = cpg * plane;
    auto out = Tensor<T>::zeros(x.shape());
    auto saved_xhat = std::make_shared<std::vector<T>>(x.values().size());
    auto saved_inv = std::make_shared<std::vector<T>>(size_t(N * groups));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbeta = beta.data();
    T* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            const int64_t base = (n * C + g * cpg) * plane;
            T mean = 0;
            for (int64_t i = 0; i < gsz; ++i) mean += px[base + i];
            mean /= T(gsz);
            T var = 0;
            for (int64_t i = 0; i < gsz; ++i) {
                const T d = px[base + i] - mean;
                var += d * d;
            }
            var /= T(gsz);
            const T inv = T(1) / std::sqrt(var + eps);
            (*saved_inv)[size_t(n * groups + g)] = inv;
            for (int64_t cc = 0; cc < cpg; ++cc) {
                const int64_t c = g * cpg + cc;
                for (int64_t i = 0; i < plane; ++i) {
                    const int64_t idx = base + cc * plane + i;
                    const T xh = (px[idx] - mean) * inv;
                    (*saved_xhat)[size_t(idx)] = xh;
                    po[idx] = pg[c] * xh + pbeta[c];
                }
            }
        }
    if (tape_active<T>({x, gamma, beta})) {
        Tape<T>::instance().record("group_norm3d", {x, gamma, beta}, out,
                                   [x, gamma, beta, out, saved_xhat, saved_inv, N, C, groups, cpg,
                                    plane, gsz]() mutable {
            const auto& go = out.grad();
            const auto& xh = *saved_xhat;
            const T* pg2 = gamma.data();
            if (x.needs_grad()) {
                auto& gx = x.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t g = 0; g < groups; ++g) {
                        const int64_t base = (n * C + g * cpg) * plane;
                        const T inv = (*saved_inv)[size_t(n * groups + g)];
                        T sum_d = 0, sum_dx = 0;
                        for (int64_t cc = 0; cc < cpg; ++cc) {
                            const T gch = pg2[g * cpg + cc];
                            for (int64_t i = 0; i < plane; ++i) {
                                const int64_t idx = base + cc * plane + i;
                                const T d = go[size_t(idx)] * gch;
                                sum_d += d;
                                sum_dx += d * xh[size_t(idx)];
                            }
                        }
                        for (int64_t cc = 0; cc < cpg; ++cc) {
                            const T gch = pg2[g * cpg + cc];
                            for (int64_t i = 0; i < plane; ++i) {
                                const int64_t idx = base + cc * plane + i;
                                const T d = go[size_t(idx)] * gch;
                                gx[size_t(idx)] +=
                                    inv * (d - (sum_d + xh[size_t(idx)] * sum_dx) / T(gsz));
                            }
                        }
                    }
            }
            if (gamma.needs_grad()) {
                auto& gg = gamma.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        T acc = 0;
                        const int64_t base = (n * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i)
                            acc += go[size_t(base + i)] * xh[size_t(base + i)];
                        gg[size_t(c)] += acc;
                    }
            }
            if (beta.needs_grad()) {
                auto& gb = beta.grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        T acc = 0;
                        const int64_t base = (n * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) acc += go[size_t(base + i)];
                        gb[size_t(c)] += acc;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Scaled dot-product attention over already-projected q/k/v of shape [S,E],
// split into `heads` equal slices. Output is the head concat, [S,E]; any
// output projection is the caller's job. With one token per head this reduces
// to the identity on v.
template <class T>
Tensor<T> multi_head_attention(Tensor<T> q, Tensor<T> k, Tensor<T> v,
                               int64_t heads) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimensionError("attention: expected 2-d q/k/v");
    const int64_t S = q.dim(0), E = q.dim(1);
    if (k.dim(0) != S || v.dim(0) != S || k.dim(1) != E || v.dim(1) != E)
        throw DimensionError("attention: q/k/v shapes must match");
    if (E % heads)
        throw ConfigError("attention: embed dim " + std::to_string(E) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const int64_t dh = E / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    std::vector<Tensor<T>> outs;
    outs.reserve(size_t(heads));
    for (int64_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = slice_cols(v, h * dh, (h + 1) * dh);
        auto scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt);
        auto attn = softmax_rows(scores);
        outs.push_back(matmul(attn, vh));
    }
    return concat_cols(outs);
}

} // namespace smim
