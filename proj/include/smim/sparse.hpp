#pragma once
#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "smim/mask.hpp"
#include "smim/nn_ops.hpp"
#include "smim/tensor.hpp"

namespace smim {

// Sparse feature map: feature rows at the active coordinates of one mask
// scale, everything else logically exact zero. Coordinates are linear indices
// in scan order (w fastest), strictly ascending.
template <class T>
struct SparseMap {
    std::array<int64_t, 3> shape{0, 0, 0};  // spatial extents [d,h,w]
    int64_t channels = 0;
    std::vector<int64_t> coords;            // one linear index per row, ascending
    Tensor<T> rows;                         // [K, channels]
    int scale_id = 0;

    int64_t spatial_numel() const { return shape[0] * shape[1] * shape[2]; }
    int64_t active_count() const { return int64_t(coords.size()); }

    SparseMap with_rows(Tensor<T> r) const {
        if (r.ndim() != 2 || r.dim(0) != int64_t(coords.size()) || r.dim(1) != channels)
            throw DimensionError("sparse map: replacement rows " + shape_str(r.shape()) +
                                 " vs " + std::to_string(coords.size()) + "x" +
                                 std::to_string(channels));
        SparseMap out = *this;
        out.rows = std::move(r);
        return out;
    }
};

// The guard this module exists for: every sparse op validates that its operand
// still lives exactly on the mask's active set.
template <class T>
void check_active_set(const SparseMap<T>& m, const MaskGrid& mask, const char* op) {
    if (m.shape != mask.shape)
        throw ConsistencyError(std::string(op) + ": sparse map extent " +
                               shape_str({m.shape[0], m.shape[1], m.shape[2]}) +
                               " vs mask " +
                               shape_str({mask.shape[0], mask.shape[1], mask.shape[2]}));
    if (m.active_count() != mask.active_count())
        throw ConsistencyError(std::string(op) + ": sparse map has " +
                               std::to_string(m.active_count()) + " active rows, mask has " +
                               std::to_string(mask.active_count()));
    for (int64_t i : m.coords)
        if (!mask.bits[size_t(i)])
            throw ConsistencyError(std::string(op) + ": active coordinate " + std::to_string(i) +
                                   " is masked in the mask grid");
}

// Keeps the rows of a dense [C,D,H,W] tensor at the mask's active coordinates.
template <class T>
SparseMap<T> sparsify(Tensor<T> dense, const MaskGrid& mask) {
    if (dense.ndim() != 4)
        throw DimensionError("sparsify: expected [C,D,H,W], got " + shape_str(dense.shape()));
    if (dense.dim(1) != mask.shape[0] || dense.dim(2) != mask.shape[1] ||
        dense.dim(3) != mask.shape[2])
        throw DimensionError("sparsify: spatial extents " +
                             shape_str({dense.dim(1), dense.dim(2), dense.dim(3)}) + " vs mask " +
                             shape_str({mask.shape[0], mask.shape[1], mask.shape[2]}));
    const int64_t C = dense.dim(0);
    const int64_t V = mask.numel();
    SparseMap<T> out;
    out.shape = mask.shape;
    out.channels = C;
    out.scale_id = mask.scale_id;
    out.coords = mask.active_indices();
    auto site_major = transpose2d(reshape(dense, {C, V}));  // [V,C]
    out.rows = gather_rows(site_major, out.coords);
    return out;
}

// Broadcast one [C] vector into R identical rows; backward sums row grads.
template <class T>
Tensor<T> broadcast_rows(Tensor<T> vec, int64_t count) {
    if (vec.ndim() != 1) throw DimensionError("broadcast_rows: expected 1-d vector");
    const int64_t C = vec.numel();
    auto out = Tensor<T>::zeros({count, C});
    const T* pv = vec.data();
    T* po = out.data();
    for (int64_t r = 0; r < count; ++r) std::copy(pv, pv + C, po + r * C);
    if (tape_active<T>({vec})) {
        Tape<T>::instance().record("broadcast_rows", {vec}, out, [vec, out, count, C]() mutable {
            const auto& go = out.grad();
            auto& gv = vec.grad();
            for (int64_t c = 0; c < C; ++c) {
                T acc = 0;
                for (int64_t r = 0; r < count; ++r) acc += go[size_t(r * C + c)];
                gv[size_t(c)] += acc;
            }
        });
    }
    return out;
}

// Densifies to [C,D,H,W]: active coordinates keep their rows, every masked
// coordinate receives the learned mask embedding. The embedding's gradient is
// therefore the sum over masked positions.
template <class T>
Tensor<T> densify_with_mask_embedding(const SparseMap<T>& m, Tensor<T> mask_embed) {
    if (mask_embed.ndim() != 1 || mask_embed.numel() != m.channels)
        throw DimensionError("densify: embedding size " + std::to_string(mask_embed.numel()) +
                             " vs " + std::to_string(m.channels) + " channels");
    const int64_t V = m.spatial_numel();
    std::vector<int64_t> inactive;
    inactive.reserve(size_t(V - m.active_count()));
    {
        size_t next = 0;
        for (int64_t i = 0; i < V; ++i) {
            if (next < m.coords.size() && m.coords[next] == i) {
                ++next;
            } else {
                inactive.push_back(i);
            }
        }
    }
    auto active_part = scatter_rows(m.rows, m.coords, V);  // [V,C]
    auto site_major =
        inactive.empty()
            ? active_part
            : add(active_part,
                  scatter_rows(broadcast_rows(mask_embed, int64_t(inactive.size())), inactive, V));
    return reshape(transpose2d(site_major), {m.channels, m.shape[0], m.shape[1], m.shape[2]});
}

// Zero-filled densification (no embedding), [C,D,H,W].
template <class T>
Tensor<T> densify_zero(const SparseMap<T>& m) {
    auto site_major = scatter_rows(m.rows, m.coords, m.spatial_numel());
    return reshape(transpose2d(site_major), {m.channels, m.shape[0], m.shape[1], m.shape[2]});
}

// ---------------------------------------------------------------------------
// Submanifold sparse convolution
// ---------------------------------------------------------------------------

// Neighbour table: for every output row and kernel offset, the input row index
// or -1. Offsets enumerate (kd,kh,kw) ascending, so walking them reproduces
// the dense kernel's accumulation order.
inline std::vector<int32_t> build_rulebook(const std::vector<int64_t>& coords,
                                           const std::array<int64_t, 3>& shape, int64_t k,
                                           int64_t pad) {
    const int64_t V = shape[0] * shape[1] * shape[2];
    std::vector<int32_t> row_of(size_t(V), -1);
    for (size_t r = 0; r < coords.size(); ++r) row_of[size_t(coords[r])] = int32_t(r);
    const int64_t kk = k * k * k;
    std::vector<int32_t> rb(coords.size() * size_t(kk), -1);
    for (size_t r = 0; r < coords.size(); ++r) {
        const int64_t lin = coords[r];
        const int64_t d = lin / (shape[1] * shape[2]);
        const int64_t h = (lin / shape[2]) % shape[1];
        const int64_t w = lin % shape[2];
        int64_t off = 0;
        for (int64_t kd = 0; kd < k; ++kd)
            for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw, ++off) {
                    const int64_t id = d + kd - pad;
                    const int64_t ih = h + kh - pad;
                    const int64_t iw = w + kw - pad;
                    if (id < 0 || id >= shape[0] || ih < 0 || ih >= shape[1] || iw < 0 ||
                        iw >= shape[2])
                        continue;
                    rb[r * size_t(kk) + size_t(off)] =
                        row_of[size_t((id * shape[1] + ih) * shape[2] + iw)];
                }
    }
    return rb;
}

// Submanifold sparse conv: stride 1, odd cubic kernel, output active set ==
// input active set. Matches the dense conv on the zero-filled densification
// bit for bit at active sites: per output element the accumulation runs bias,
// input channel, then kernel offsets — identical order, and the terms it
// skips are exact zeros, which cannot change a partial sum. groups is 1 or
// channels (depthwise).
template <class T>
SparseMap<T> sparse_conv3d(const SparseMap<T>& input, const MaskGrid& mask, Tensor<T> w,
                           Tensor<T> b, int64_t pad, int64_t groups = 1) {
    check_active_set(input, mask, "sparse_conv3d");
    if (w.ndim() != 5) throw DimensionError("sparse_conv3d: weight must be 5-d");
    const int64_t Ci = input.channels;
    const int64_t Co = w.dim(0), k = w.dim(2);
    if (w.dim(3) != k || w.dim(4) != k || k % 2 == 0)
        throw DimensionError("sparse_conv3d: kernel must be odd and cubic, got " +
                             shape_str(w.shape()));
    if (groups != 1 && groups != Ci)
        throw ConfigError("sparse_conv3d: groups must be 1 or match input channels");
    const int64_t Cig = Ci / groups;
    if (w.dim(1) != Cig)
        throw DimensionError("sparse_conv3d: weight expects " + std::to_string(w.dim(1)) +
                             " channels/group, input provides " + std::to_string(Cig));
    if (groups > 1 && groups == Ci && Co != Ci)
        throw DimensionError("sparse_conv3d: depthwise needs equal in/out channels");
    if (b.defined() && b.numel() != Co)
        throw DimensionError("sparse_conv3d: bias size vs " + std::to_string(Co) + " outputs");
    const int64_t pad_needed = (k - 1) / 2;
    if (pad != pad_needed)
        throw ConfigError("sparse_conv3d: padding " + std::to_string(pad) + " does not preserve " +
                          "extents for kernel " + std::to_string(k));

    const int64_t K = input.active_count();
    const int64_t kk = k * k * k;
    auto rb = std::make_shared<std::vector<int32_t>>(
        build_rulebook(input.coords, input.shape, k, pad));
    auto rows_out = Tensor<T>::zeros({K, Co});
    const T* pin = input.rows.data();
    const T* pw = w.data();
    const T* pb = b.defined() ? b.data() : nullptr;
    T* po = rows_out.data();
    for (int64_t r = 0; r < K; ++r) {
        const int32_t* nbr = rb->data() + r * kk;
        for (int64_t co = 0; co < Co; ++co) {
            T acc = pb ? pb[co] : T(0);
            const int64_t ci0 = (groups == 1) ? 0 : co;
            for (int64_t cig = 0; cig < Cig; ++cig) {
                const int64_t ci = ci0 + cig;
                const T* wrow = pw + (co * Cig + cig) * kk;
                for (int64_t off = 0; off < kk; ++off) {
                    const int32_t s = nbr[off];
                    if (s < 0) continue;
                    acc += pin[int64_t(s) * Ci + ci] * wrow[off];
                }
            }
            po[r * Co + co] = acc;
        }
    }
    std::vector<Tensor<T>> ins = {input.rows, w};
    if (b.defined()) ins.push_back(b);
    if (tape_active(ins)) {
        auto in_rows = input.rows;
        Tape<T>::instance().record("sparse_conv3d", ins, rows_out,
                                   [in_rows, w, b, rows_out, rb, K, Ci, Cig, Co, kk,
                                    groups]() mutable {
            const auto& go = rows_out.grad();
            if (in_rows.needs_grad()) {
                auto& gi = in_rows.grad();
                const T* pw2 = w.data();
                for (int64_t r = 0; r < K; ++r) {
                    const int32_t* nbr = rb->data() + r * kk;
                    for (int64_t co = 0; co < Co; ++co) {
                        const T g = go[size_t(r * Co + co)];
                        const int64_t ci0 = (groups == 1) ? 0 : co;
                        for (int64_t cig = 0; cig < Cig; ++cig) {
                            const int64_t ci = ci0 + cig;
                            const T* wrow = pw2 + (co * Cig + cig) * kk;
                            for (int64_t off = 0; off < kk; ++off) {
                                const int32_t s = nbr[off];
                                if (s < 0) continue;
                                gi[size_t(int64_t(s) * Ci + ci)] += g * wrow[off];
                            }
                        }
                    }
                }
            }
            if (w.needs_grad()) {
                auto& gw = w.grad();
                const T* pin2 = in_rows.data();
                for (int64_t r = 0; r < K; ++r) {
                    const int32_t* nbr = rb->data() + r * kk;
                    for (int64_t co = 0; co < Co; ++co) {
                        const T g = go[size_t(r * Co + co)];
                        const int64_t ci0 = (groups == 1) ? 0 : co;
                        for (int64_t cig = 0; cig < Cig; ++cig) {
                            const int64_t ci = ci0 + cig;
                            T* gwrow = gw.data() + (co * Cig + cig) * kk;
                            for (int64_t off = 0; off < kk; ++off) {
                                const int32_t s = nbr[off];
                                if (s < 0) continue;
                                gwrow[off] += g * pin2[int64_t(s) * Ci + ci];
                            }
                        }
                    }
                }
            }
            if (b.defined() && b.needs_grad()) {
                auto& gb = b.grad();
                for (int64_t co = 0; co < Co; ++co) {
                    T acc = 0;
                    for (int64_t r = 0; r < K; ++r) acc += go[size_t(r * Co + co)];
                    gb[size_t(co)] += acc;
                }
            }
        });
    }
    SparseMap<T> out = input;
    out.channels = Co;
    out.rows = rows_out;
    return out;
}

// Pointwise (1x1x1) projection on a sparse map: a linear layer on the rows.
// w2d is [Co,Ci]; bit-identical to a k=1 sparse/dense conv.
template <class T>
SparseMap<T> sparse_pointwise(const SparseMap<T>& input, Tensor<T> w2d, Tensor<T> b) {
    auto rows = linear(input.rows, w2d, b);
    SparseMap<T> out = input;
    out.channels = w2d.dim(0);
    out.rows = rows;
    return out;
}

// ---------------------------------------------------------------------------
// Sparse max pooling
// ---------------------------------------------------------------------------

// Window == stride pooling from in_mask resolution to out_mask resolution.
// Under a consistent pyramid (strict), every window of an active output is
// fully active, so this equals dense pooling restricted to active outputs.
// With strict off (deliberately inconsistent masks), the max runs over the
// active cells only and an empty window yields a zero row.
template <class T>
SparseMap<T> sparse_max_pool(const SparseMap<T>& input, const MaskGrid& in_mask,
                             const MaskGrid& out_mask, int64_t window, bool strict = true) {
    check_active_set(input, in_mask, "sparse_max_pool");
    for (int axis = 0; axis < 3; ++axis)
        if (out_mask.shape[size_t(axis)] * window != in_mask.shape[size_t(axis)])
            throw DimensionError("sparse_max_pool: out extent " +
                                 std::to_string(out_mask.shape[size_t(axis)]) + " * window " +
                                 std::to_string(window) + " != in extent " +
                                 std::to_string(in_mask.shape[size_t(axis)]) + " on axis " +
                                 std::to_string(axis));
    if (strict && !(upsample_mask(out_mask, window) == in_mask))
        throw ConsistencyError("sparse_max_pool: input mask is not the window-replication of the "
                               "output mask (pyramid consistency violated)");

    const int64_t C = input.channels;
    std::vector<int32_t> row_of(size_t(in_mask.numel()), -1);
    for (size_t r = 0; r < input.coords.size(); ++r)
        row_of[size_t(input.coords[r])] = int32_t(r);

    SparseMap<T> out;
    out.shape = out_mask.shape;
    out.channels = C;
    out.scale_id = out_mask.scale_id;
    out.coords = out_mask.active_indices();
    const int64_t K = int64_t(out.coords.size());
    auto rows_out = Tensor<T>::zeros({K, C});
    // argmax[r*C+c]: winning input row, or -1 for an empty (non-strict) window.
    auto argmax = std::make_shared<std::vector<int32_t>>(size_t(K * C), -1);
    const T* pin = input.rows.data();
    T* po = rows_out.data();
    for (int64_t r = 0; r < K; ++r) {
        const int64_t lin = out.coords[size_t(r)];
        const int64_t od = lin / (out.shape[1] * out.shape[2]);
        const int64_t oh = (lin / out.shape[2]) % out.shape[1];
        const int64_t ow = lin % out.shape[2];
        for (int64_t c = 0; c < C; ++c) {
            bool first = true;
            T best = 0;
            int32_t bi = -1;
            for (int64_t kd = 0; kd < window; ++kd)
                for (int64_t kh = 0; kh < window; ++kh)
                    for (int64_t kw = 0; kw < window; ++kw) {
                        const int64_t iin = ((od * window + kd) * in_mask.shape[1] +
                                             oh * window + kh) * in_mask.shape[2] +
                                            ow * window + kw;
                        const int32_t s = row_of[size_t(iin)];
                        if (s < 0) continue;  // only under strict=false
                        const T v = pin[int64_t(s) * C + c];
                        if (first || v > best) {
                            best = v;
                            bi = s;
                            first = false;
                        }
                    }
            po[r * C + c] = first ? T(0) : best;
            (*argmax)[size_t(r * C + c)] = bi;
        }
    }
    if (tape_active<T>({input.rows})) {
        auto in_rows = input.rows;
        Tape<T>::instance().record("sparse_max_pool", {in_rows}, rows_out,
                                   [in_rows, rows_out, argmax, C]() mutable {
            const auto& go = rows_out.grad();
            auto& gi = in_rows.grad();
            for (size_t i = 0; i < go.size(); ++i) {
                const int32_t s = (*argmax)[i];
                if (s < 0) continue;
                gi[size_t(int64_t(s) * C + int64_t(i) % C)] += go[i];
            }
        });
    }
    out.rows = rows_out;
    return out;
}

// ---------------------------------------------------------------------------
// Group normalization over active coordinates
// ---------------------------------------------------------------------------

// Group statistics over active rows only, so masked positions can never bleed
// into the feature distribution. Channel-major accumulation matches the dense
// group-norm reference exactly when everything is active.
template <class T>
SparseMap<T> sparse_norm(const SparseMap<T>& input, Tensor<T> gamma, Tensor<T> beta,
                         int64_t groups, T eps) {
    const int64_t C = input.channels;
    const int64_t K = input.active_count();
    if (K == 0) throw ConsistencyError("sparse_norm: no active coordinates to normalize over");
    if (C % groups)
        throw ConfigError("sparse_norm: " + std::to_string(C) + " channels not divisible by " +
                          std::to_string(groups) + " groups");
    if (gamma.numel() != C || beta.numel() != C)
        throw DimensionError("sparse_norm: gamma/beta size vs " + std::to_string(C) + " channels");
    const int64_t cpg = C / groups;
    const int64_t gsz = cpg * K;
    auto rows_out = Tensor<T>::zeros({K, C});
    auto saved_xhat = std::make_shared<std::vector<T>>(size_t(K * C));
    auto saved_inv = std::make_shared<std::vector<T>>(size_t(groups));
    const T* pin = input.rows.data();
    const T* pg = gamma.data();
    const T* pbeta = beta.data();
    T* po = rows_out.data();
    for (int64_t g = 0; g < groups; ++g) {
        T mean = 0;
        for (int64_t cc = 0; cc < cpg; ++cc) {
            const int64_t c = g * cpg + cc;
            for (int64_t r = 0; r < K; ++r) mean += pin[r * C + c];
        }
        mean /= T(gsz);
        T var = 0;
        for (int64_t cc = 0; cc < cpg; ++cc) {
            const int64_t c = g * cpg + cc;
            for (int64_t r = 0; r < K; ++r) {
                const T d = pin[r * C + c] - mean;
                var += d * d;
            }
        }
        var /= T(gsz);
        const T inv = T(1) / std::sqrt(var + eps);
        (*saved_inv)[size_t(g)] = inv;
        for (int64_t cc = 0; cc < cpg; ++cc) {
            const int64_t c = g * cpg + cc;
            for (int64_t r = 0; r < K; ++r) {
                const T xh = (pin[r * C + c] - mean) * inv;
                (*saved_xhat)[size_t(r * C + c)] = xh;
                po[r * C + c] = pg[c] * xh + pbeta[c];
            }
        }
    }
    if (tape_active<T>({input.rows, gamma, beta})) {
        auto in_rows = input.rows;
        Tape<T>::instance().record("sparse_norm", {in_rows, gamma, beta}, rows_out,
                                   [in_rows, gamma, beta, rows_out, saved_xhat, saved_inv, K, C,
                                    groups, cpg, gsz]() mutable {
            const auto& go = rows_out.grad();
            const auto& xh = *saved_xhat;
            const T* pg2 = gamma.data();
            if (in_rows.needs_grad()) {
                auto& gi = in_rows.grad();
                for (int64_t g = 0; g < groups; ++g) {
                    const T inv = (*saved_inv)[size_t(g)];
                    T sum_d = 0, sum_dx = 0;
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = g * cpg + cc;
                        for (int64_t r = 0; r < K; ++r) {
                            const T d = go[size_t(r * C + c)] * pg2[c];
                            sum_d += d;
                            sum_dx += d * xh[size_t(r * C + c)];
                        }
                    }
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = g * cpg + cc;
                        for (int64_t r = 0; r < K; ++r) {
                            const T d = go[size_t(r * C + c)] * pg2[c];
                            gi[size_t(r * C + c)] +=
                                inv * (d - (sum_d + xh[size_t(r * C + c)] * sum_dx) / T(gsz));
                        }
                    }
                }
            }
            if (gamma.needs_grad()) {
                auto& gg = gamma.grad();
                for (int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t r = 0; r < K; ++r)
                        acc += go[size_t(r * C + c)] * xh[size_t(r * C + c)];
                    gg[size_t(c)] += acc;
                }
            }
            if (beta.needs_grad()) {
                auto& gb = beta.grad();
                for (int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t r = 0; r < K; ++r) acc += go[size_t(r * C + c)];
                    gb[size_t(c)] += acc;
                }
            }
        });
    }
    return input.with_rows(rows_out);
}

} // namespace smim
