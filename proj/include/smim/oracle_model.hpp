#pragma once

// Dense reference encoder: runs the same network as encode_cnn on the
// zero-filled masked input with normalization statistics restricted to active
// sites, re-zeroing inactive positions after every layer. This is the
// semantic definition the sparse path must reproduce at active coordinates.
// Built exclusively from the naive reference kernels — no tape, no sparse
// structures, no shared arithmetic with the fast path.

#include <cstdint>
#include <string>
#include <vector>

#include "encoder_cnn.hpp"
#include "mask.hpp"
#include "oracle.hpp"
#include "params.hpp"

namespace smim::oracle {

template <class T>
void zero_masked_sites(std::vector<T>& x, int64_t C, const MaskGrid& mask) {
    const int64_t V = mask.numel();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t v = 0; v < V; ++v)
            if (!mask.bits[size_t(v)]) x[size_t(c * V + v)] = T(0);
}

// A site counts as nonzero if any channel is nonzero there.
template <class T>
int64_t nonzero_site_count(const std::vector<T>& x, int64_t C, int64_t V) {
    int64_t n = 0;
    for (int64_t v = 0; v < V; ++v) {
        bool nz = false;
        for (int64_t c = 0; c < C && !nz; ++c) nz = x[size_t(c * V + v)] != T(0);
        n += nz;
    }
    return n;
}

template <class T>
struct DenseFeature {
    std::array<int64_t, 3> shape{0, 0, 0};
    int64_t channels = 0;
    std::vector<T> values;  // [C, D*H*W], zero at masked sites
};

// Pointwise (1x1x1) projection, accumulation order bias then ci ascending.
template <class T>
std::vector<T> dense_masked_pointwise_ref(const std::vector<T>& x, int64_t Ci, int64_t V,
                                          const MaskGrid& mask, const std::vector<T>& w,
                                          int64_t Co, const std::vector<T>& b) {
    std::vector<T> y(size_t(Co * V), T(0));
    for (int64_t co = 0; co < Co; ++co)
        for (int64_t v = 0; v < V; ++v) {
            if (!mask.bits[size_t(v)]) continue;
            T acc = b[size_t(co)];
            for (int64_t ci = 0; ci < Ci; ++ci)
                acc += w[size_t(co * Ci + ci)] * x[size_t(ci * V + v)];
            y[size_t(co * V + v)] = acc;
        }
    return y;
}

template <class T>
std::vector<T> dense_masked_gelu_ref(const std::vector<T>& x, int64_t C, const MaskGrid& mask) {
    const int64_t V = mask.numel();
    std::vector<T> y(x.size(), T(0));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t v = 0; v < V; ++v)
            if (mask.bits[size_t(v)]) y[size_t(c * V + v)] = gelu_scalar_ref(x[size_t(c * V + v)]);
    return y;
}

template <class T>
std::vector<T> dense_block_ref(const std::vector<T>& x, int64_t C, const MaskGrid& mask,
                               const ParamStore<T>& ps, const std::string& blk, int64_t k,
                               int64_t pad, int64_t norm_groups) {
    const auto& sh = mask.shape;
    const int64_t V = mask.numel();
    auto h = dense_masked_conv3d_ref(x, C, sh[0], sh[1], sh[2], mask.bits,
                                     ps.get(blk + "dw.w").values(), C, k,
                                     ps.get(blk + "dw.b").values(), pad, C);
    h = dense_masked_group_norm_ref(h, C, V, mask.bits, ps.get(blk + "norm.gamma").values(),
                                    ps.get(blk + "norm.beta").values(), norm_groups, T(1e-5));
    const int64_t Ce = ps.get(blk + "expand.b").numel();
    h = dense_masked_pointwise_ref(h, C, V, mask, ps.get(blk + "expand.w").values(), Ce,
                                   ps.get(blk + "expand.b").values());
    h = dense_masked_gelu_ref(h, Ce, mask);
    h = dense_masked_pointwise_ref(h, Ce, V, mask, ps.get(blk + "contract.w").values(), C,
                                   ps.get(blk + "contract.b").values());
    std::vector<T> y(x.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = x[i] + h[i];
    return y;
}

// volume: [D*H*W] scalar field at voxel resolution. Returns one dense feature
// per stage, matching encode_cnn at every active coordinate.
template <class T>
std::vector<DenseFeature<T>> dense_masked_forward(const std::vector<T>& volume,
                                                  const MaskPyramid& pyramid,
                                                  const ParamStore<T>& ps, const CnnConfig& cfg) {
    cfg.validate();
    const auto& vx = pyramid.voxel;
    if (int64_t(volume.size()) != vx.numel())
        throw OracleError("dense_masked_forward: volume has " + std::to_string(volume.size()) +
                          " voxels, mask " + std::to_string(vx.numel()));
    const int64_t k = cfg.kernel, pad = (k - 1) / 2;

    std::vector<T> x = dense_masked_conv3d_ref(volume, int64_t(1), vx.shape[0], vx.shape[1],
                                               vx.shape[2], vx.bits, ps.get("encoder.stem.conv.w").values(),
                                               cfg.channels[0], k,
                                               ps.get("encoder.stem.conv.b").values(), pad);
    if (cfg.stem_stride > 1)
        x = dense_masked_max_pool_ref(x, cfg.channels[0], vx.shape[0], vx.shape[1], vx.shape[2],
                                      cfg.stem_stride, pyramid.stage[0].bits);

    std::vector<DenseFeature<T>> out;
    out.reserve(size_t(cfg.num_stages));
    for (int64_t i = 0; i < cfg.num_stages; ++i) {
        const MaskGrid& mask = pyramid.stage[size_t(i)];
        const int64_t C = cfg.channels[size_t(i)];
        const int64_t V = mask.numel();
        if (i > 0) {
            const std::string sp = "encoder.stage" + std::to_string(i + 1) + ".";
            x = dense_masked_pointwise_ref(x, cfg.channels[size_t(i - 1)], V, mask,
                                           ps.get(sp + "in_proj.w").values(), C,
                                           ps.get(sp + "in_proj.b").values());
        }
        for (int64_t j = 0; j < cfg.blocks_per_stage; ++j) {
            const std::string blk =
                "encoder.stage" + std::to_string(i + 1) + ".block" + std::to_string(j) + ".";
            x = dense_block_ref(x, C, mask, ps, blk, k, pad, cfg.norm_groups);
        }
        out.push_back({mask.shape, C, x});
        if (i + 1 < cfg.num_stages)
            x = dense_masked_max_pool_ref(x, C, mask.shape[0], mask.shape[1], mask.shape[2],
                                          int64_t(2), pyramid.stage[size_t(i + 1)].bits);
    }
    return out;
}

}  // namespace smim::oracle
