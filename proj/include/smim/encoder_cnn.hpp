#pragma once

// Multi-stage sparse CNN encoder. Each stage runs inverted-bottleneck blocks
// (depthwise conv -> norm -> pointwise expand -> GELU -> pointwise contract ->
// residual) on the active set of its mask level, then max-pools down to the
// next level. Every op is submanifold: active sets are preserved exactly, so
// the stage outputs S_1..S_N live on M_1..M_N by construction.

#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "mask.hpp"
#include "nn_ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "sparse.hpp"
#include "tensor.hpp"

namespace smim {

struct CnnConfig {
    int64_t num_stages = 4;
    std::vector<int64_t> channels = {16, 32, 64, 128};
    int64_t blocks_per_stage = 1;
    int64_t kernel = 3;
    int64_t expansion = 2;
    int64_t stem_stride = 2;
    int64_t norm_groups = 4;

    void validate() const {
        if (num_stages < 2)
            throw ConfigError("cnn config: need at least 2 stages, got " +
                              std::to_string(num_stages));
        if (int64_t(channels.size()) != num_stages)
            throw ConfigError("cnn config: " + std::to_string(channels.size()) +
                              " channel entries for " + std::to_string(num_stages) + " stages");
        for (size_t i = 0; i < channels.size(); ++i) {
            if (channels[i] < 1)
                throw ConfigError("cnn config: stage " + std::to_string(i + 1) +
                                  " has nonpositive width");
            if (i > 0 && channels[i] <= channels[i - 1])
                throw ConfigError("cnn config: channels must be strictly increasing, got " +
                                  std::to_string(channels[i - 1]) + " -> " +
                                  std::to_string(channels[i]));
            if (channels[i] % norm_groups)
                throw ConfigError("cnn config: stage " + std::to_string(i + 1) + " width " +
                                  std::to_string(channels[i]) + " not divisible by " +
                                  std::to_string(norm_groups) + " norm groups");
        }
        if (kernel < 1 || kernel % 2 == 0)
            throw ConfigError("cnn config: kernel must be odd, got " + std::to_string(kernel));
        if (blocks_per_stage < 1) throw ConfigError("cnn config: need at least 1 block per stage");
        if (expansion < 1) throw ConfigError("cnn config: expansion ratio must be >= 1");
        if (stem_stride < 1) throw ConfigError("cnn config: stem stride must be >= 1");
    }

    // Mask-pyramid strides: input -> stage 1 is the stem stride, then one
    // stride-2 pool between consecutive stages.
    std::vector<int64_t> stage_strides() const {
        std::vector<int64_t> s(size_t(num_stages), 2);
        s[0] = stem_stride;
        return s;
    }

    int64_t total_stride() const {
        int64_t t = 1;
        for (int64_t s : stage_strides()) t *= s;
        return t;
    }
};

namespace detail {
inline std::string stage_prefix(int64_t i) {
    return "encoder.stage" + std::to_string(i + 1) + ".";
}
inline std::string block_prefix(int64_t i, int64_t j) {
    return stage_prefix(i) + "block" + std::to_string(j) + ".";
}
}  // namespace detail

template <class T>
void init_cnn_params(ParamStore<T>& ps, const CnnConfig& cfg, Rng& rng) {
    cfg.validate();
    const int64_t k = cfg.kernel;
    ps.add("encoder.stem.conv.w", init_gaussian<T>({cfg.channels[0], 1, k, k, k}, k * k * k, rng));
    ps.add("encoder.stem.conv.b", Tensor<T>::zeros({cfg.channels[0]}));
    for (int64_t i = 0; i < cfg.num_stages; ++i) {
        const int64_t c = cfg.channels[size_t(i)];
        if (i > 0) {
            const int64_t cin = cfg.channels[size_t(i - 1)];
            ps.add(detail::stage_prefix(i) + "in_proj.w", init_gaussian<T>({c, cin}, cin, rng));
            ps.add(detail::stage_prefix(i) + "in_proj.b", Tensor<T>::zeros({c}));
        }
        for (int64_t j = 0; j < cfg.blocks_per_stage; ++j) {
            const std::string blk = detail::block_prefix(i, j);
            const int64_t ce = c * cfg.expansion;
            ps.add(blk + "dw.w", init_gaussian<T>({c, 1, k, k, k}, k * k * k, rng));
            ps.add(blk + "dw.b", Tensor<T>::zeros({c}));
            ps.add(blk + "norm.gamma", Tensor<T>::filled({c}, T(1)));
            ps.add(blk + "norm.beta", Tensor<T>::zeros({c}));
            ps.add(blk + "expand.w", init_gaussian<T>({ce, c}, c, rng));
            ps.add(blk + "expand.b", Tensor<T>::zeros({ce}));
            ps.add(blk + "contract.w", init_gaussian<T>({c, ce}, ce, rng));
            ps.add(blk + "contract.b", Tensor<T>::zeros({c}));
        }
    }
}

template <class T>
SparseMap<T> cnn_block(const SparseMap<T>& x, const MaskGrid& mask, const ParamStore<T>& ps,
                       const std::string& blk, int64_t pad, int64_t norm_groups) {
    SparseMap<T> h =
        sparse_conv3d(x, mask, ps.get(blk + "dw.w"), ps.get(blk + "dw.b"), pad, x.channels);
    h = sparse_norm(h, ps.get(blk + "norm.gamma"), ps.get(blk + "norm.beta"), norm_groups,
                    T(1e-5));
    h = sparse_pointwise(h, ps.get(blk + "expand.w"), ps.get(blk + "expand.b"));
    h = h.with_rows(gelu(h.rows));
    h = sparse_pointwise(h, ps.get(blk + "contract.w"), ps.get(blk + "contract.b"));
    return x.with_rows(add(x.rows, h.rows));
}

// volume: dense [1, D, H, W] in [0,1]. Returns one sparse map per stage,
// S_i on mask level M_i with scale_id == i. `strict_pyramid` demands the
// bottom-up replication property at every pooling step; turning it off lets
// deliberately unlinked mask pyramids through (pool windows may then be
// partially or fully empty).
template <class T>
std::vector<SparseMap<T>> encode_cnn(Tensor<T> volume, const MaskPyramid& pyramid,
                                     const ParamStore<T>& ps, const CnnConfig& cfg,
                                     bool strict_pyramid = true) {
    cfg.validate();
    if (volume.ndim() != 4 || volume.dim(0) != 1)
        throw DimensionError("encode_cnn: volume must be [1,D,H,W], got " +
                             shape_str(volume.shape()));
    if (int64_t(pyramid.stage.size()) != cfg.num_stages || pyramid.strides != cfg.stage_strides())
        throw ConfigError("encode_cnn: mask pyramid strides do not match the encoder config");
    for (int axis = 0; axis < 3; ++axis)
        if (volume.dim(1 + axis) != pyramid.voxel.shape[size_t(axis)])
            throw ConfigError("encode_cnn: volume extent " + std::to_string(volume.dim(1 + axis)) +
                              " vs pyramid voxel extent " +
                              std::to_string(pyramid.voxel.shape[size_t(axis)]) + " on axis " +
                              std::to_string(axis));

    const int64_t pad = (cfg.kernel - 1) / 2;
    SparseMap<T> cur = sparsify(volume, pyramid.voxel);
    cur = sparse_conv3d(cur, pyramid.voxel, ps.get("encoder.stem.conv.w"),
                        ps.get("encoder.stem.conv.b"), pad);
    if (cfg.stem_stride > 1)
        cur = sparse_max_pool(cur, pyramid.voxel, pyramid.stage[0], cfg.stem_stride,
                              strict_pyramid);

    std::vector<SparseMap<T>> out;
    out.reserve(size_t(cfg.num_stages));
    for (int64_t i = 0; i < cfg.num_stages; ++i) {
        const MaskGrid& mask = pyramid.stage[size_t(i)];
        if (i > 0)
            cur = sparse_pointwise(cur, ps.get(detail::stage_prefix(i) + "in_proj.w"),
                                   ps.get(detail::stage_prefix(i) + "in_proj.b"));
        for (int64_t j = 0; j < cfg.blocks_per_stage; ++j)
            cur = cnn_block(cur, mask, ps, detail::block_prefix(i, j), pad, cfg.norm_groups);
        cur.scale_id = int(i + 1);
        out.push_back(cur);
        if (i + 1 < cfg.num_stages)
            cur = sparse_max_pool(cur, mask, pyramid.stage[size_t(i + 1)], 2, strict_pyramid);
    }
    return out;
}

}  // namespace smim
