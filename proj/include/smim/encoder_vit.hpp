#pragma once

// Transformer encoder over the junction grid. Each active junction cell is
// one token (patch size = 1 cell): patchify projects the cell's channel
// vector to the embed dim and adds a learned positional embedding indexed by
// the cell's coordinate; masked cells produce no token at all, so attention
// cost scales with the keep fraction. unpatchify projects back and scatters
// rows to their coordinates.

#include <array>
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

struct VitConfig {
    int64_t embed_dim = 192;
    int64_t depth = 4;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;

    void validate() const {
        if (embed_dim < 1 || depth < 1 || heads < 1 || mlp_ratio < 1)
            throw ConfigError("vit config: all fields must be positive");
        if (embed_dim % heads)
            throw ConfigError("vit config: " + std::to_string(heads) +
                              " heads do not divide embed dim " + std::to_string(embed_dim));
    }
};

template <class T>
struct TokenSequence {
    Tensor<T> tokens;             // [K, embed_dim]
    std::vector<int64_t> coords;  // junction linear index per token, ascending
    std::array<int64_t, 3> grid{0, 0, 0};
};

// Work counter for the structural cost assertion: tokens entering each block.
struct VitStats {
    int64_t tokens_processed = 0;
};

namespace detail {
inline std::string vit_block_prefix(int64_t d) {
    return "vit.block" + std::to_string(d) + ".";
}
}  // namespace detail

// `junction_channels` is the channel width of S_N; `junction_shape` fixes the
// positional-embedding table size.
template <class T>
void init_vit_params(ParamStore<T>& ps, const VitConfig& cfg, int64_t junction_channels,
                     const std::array<int64_t, 3>& junction_shape, Rng& rng) {
    cfg.validate();
    const int64_t E = cfg.embed_dim;
    const int64_t G = junction_shape[0] * junction_shape[1] * junction_shape[2];
    if (G < 1) throw ConfigError("vit params: empty junction grid");
    ps.add("vit.patch.w", init_gaussian<T>({E, junction_channels}, junction_channels, rng));
    ps.add("vit.patch.b", Tensor<T>::zeros({E}));
    ps.add("vit.pos", init_gaussian_flat<T>({G, E}, 0.02, rng));
    for (int64_t d = 0; d < cfg.depth; ++d) {
        const std::string blk = detail::vit_block_prefix(d);
        ps.add(blk + "norm1.gamma", Tensor<T>::filled({E}, T(1)));
        ps.add(blk + "norm1.beta", Tensor<T>::zeros({E}));
        for (const char* n : {"wq", "wk", "wv", "wo"})
            ps.add(blk + "attn." + std::string(n), init_gaussian<T>({E, E}, E, rng));
        for (const char* n : {"bq", "bk", "bv", "bo"})
            ps.add(blk + "attn." + std::string(n), Tensor<T>::zeros({E}));
        ps.add(blk + "norm2.gamma", Tensor<T>::filled({E}, T(1)));
        ps.add(blk + "norm2.beta", Tensor<T>::zeros({E}));
        ps.add(blk + "mlp.fc1.w", init_gaussian<T>({E * cfg.mlp_ratio, E}, E, rng));
        ps.add(blk + "mlp.fc1.b", Tensor<T>::zeros({E * cfg.mlp_ratio}));
        ps.add(blk + "mlp.fc2.w", init_gaussian<T>({E, E * cfg.mlp_ratio}, E * cfg.mlp_ratio, rng));
        ps.add(blk + "mlp.fc2.b", Tensor<T>::zeros({E}));
    }
    ps.add("vit.unpatch.w", init_gaussian<T>({junction_channels, E}, E, rng));
    ps.add("vit.unpatch.b", Tensor<T>::zeros({junction_channels}));
}

// One token per active junction cell: linear projection plus the positional
// embedding row for the cell's coordinate.
template <class T>
TokenSequence<T> patchify(const SparseMap<T>& s_n, const MaskGrid& m_n, const ParamStore<T>& ps) {
    check_active_set(s_n, m_n, "patchify");
    if (s_n.scale_id != m_n.scale_id)
        throw ConsistencyError("patchify: feature scale " + std::to_string(s_n.scale_id) +
                               " vs mask scale " + std::to_string(m_n.scale_id));
    Tensor<T> pos = ps.get("vit.pos");
    if (pos.dim(0) != m_n.numel())
        throw ConsistencyError("patchify: positional table has " + std::to_string(pos.dim(0)) +
                               " cells, junction grid has " + std::to_string(m_n.numel()));
    auto tokens = linear(s_n.rows, ps.get("vit.patch.w"), ps.get("vit.patch.b"));
    tokens = add(tokens, gather_rows(pos, s_n.coords));
    return {tokens, s_n.coords, m_n.shape};
}

// Pre-norm transformer blocks; coordinates pass through untouched.
template <class T>
TokenSequence<T> vit_encode(const TokenSequence<T>& seq, const ParamStore<T>& ps,
                            const VitConfig& cfg, VitStats* stats = nullptr) {
    cfg.validate();
    const int64_t K = seq.tokens.defined() ? seq.tokens.dim(0) : 0;
    if (K == 0) throw ConsistencyError("vit_encode: empty token set");
    const T eps = T(1e-5);
    Tensor<T> x = seq.tokens;
    for (int64_t d = 0; d < cfg.depth; ++d) {
        const std::string blk = detail::vit_block_prefix(d);
        if (stats) stats->tokens_processed += K;
        auto h = layer_norm(x, ps.get(blk + "norm1.gamma"), ps.get(blk + "norm1.beta"), eps);
        auto q = linear(h, ps.get(blk + "attn.wq"), ps.get(blk + "attn.bq"));
        auto k = linear(h, ps.get(blk + "attn.wk"), ps.get(blk + "attn.bk"));
        auto v = linear(h, ps.get(blk + "attn.wv"), ps.get(blk + "attn.bv"));
        auto a = multi_head_attention(q, k, v, cfg.heads);
        a = linear(a, ps.get(blk + "attn.wo"), ps.get(blk + "attn.bo"));
        x = add(x, a);
        auto h2 = layer_norm(x, ps.get(blk + "norm2.gamma"), ps.get(blk + "norm2.beta"), eps);
        auto m = gelu(linear(h2, ps.get(blk + "mlp.fc1.w"), ps.get(blk + "mlp.fc1.b")));
        m = linear(m, ps.get(blk + "mlp.fc2.w"), ps.get(blk + "mlp.fc2.b"));
        x = add(x, m);
    }
    return {x, seq.coords, seq.grid};
}

// Project tokens back to feature channels and scatter to their coordinates;
// inactive cells stay empty.
template <class T>
SparseMap<T> unpatchify(const TokenSequence<T>& seq, const MaskGrid& m_n, int64_t channels,
                        const ParamStore<T>& ps) {
    if (seq.grid != m_n.shape)
        throw ConsistencyError("unpatchify: token grid " +
                               shape_str({seq.grid[0], seq.grid[1], seq.grid[2]}) + " vs mask " +
                               shape_str({m_n.shape[0], m_n.shape[1], m_n.shape[2]}));
    if (seq.coords != m_n.active_indices())
        throw ConsistencyError("unpatchify: token coordinates do not match the mask's active set");
    Tensor<T> w = ps.get("vit.unpatch.w");
    if (w.dim(0) != channels)
        throw DimensionError("unpatchify: projection emits " + std::to_string(w.dim(0)) +
                             " channels, requested " + std::to_string(channels));
    SparseMap<T> out;
    out.shape = m_n.shape;
    out.channels = channels;
    out.coords = seq.coords;
    out.scale_id = m_n.scale_id;
    out.rows = linear(seq.tokens, w, ps.get("vit.unpatch.b"));
    return out;
}

}  // namespace smim
