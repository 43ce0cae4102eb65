#pragma once

// Hierarchical dense decoder. Coarsest scale is projected pointwise, then
// each step upsamples (two k=3 convs, each norm+GELU, then nearest-neighbor
// resize) and fuses the skip feature from the same scale. Fusion is
// concatenation + two convs by default; the addition and no-skip variants are
// ablation arms that share the upsampling spine.

#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"
#include "nn_ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace smim {

enum class DecodeMode { Concat, Addition, NoSkip };

inline const char* decode_mode_name(DecodeMode m) {
    switch (m) {
        case DecodeMode::Concat: return "concat";
        case DecodeMode::Addition: return "addition";
        case DecodeMode::NoSkip: return "no-skip";
    }
    return "?";
}

struct DecoderConfig {
    // One pointwise projection per scale, finest first (mirrors the encoder).
    std::vector<int64_t> proj_widths = {16, 32, 64, 128};
    // Spatial factor of each upsample step i+1 -> i.
    std::vector<int64_t> up_factors = {2, 2, 2};
    // Width of D_i for i < N (output of the fusion / upsample step).
    std::vector<int64_t> fuse_widths = {16, 32, 64};
    int64_t norm_groups = 4;

    int64_t num_scales() const { return int64_t(proj_widths.size()); }

    // Width of D_i (1-based scale index).
    int64_t decode_width(int64_t i) const {
        return i == num_scales() ? proj_widths.back() : fuse_widths[size_t(i - 1)];
    }

    void validate(DecodeMode mode) const {
        const int64_t n = num_scales();
        if (n < 2) throw ConfigError("decoder config: need at least 2 scales");
        if (int64_t(up_factors.size()) != n - 1 || int64_t(fuse_widths.size()) != n - 1)
            throw ConfigError("decoder config: " + std::to_string(n) + " scales need " +
                              std::to_string(n - 1) + " upsample factors and fusion widths");
        for (int64_t w : proj_widths)
            if (w < 1) throw ConfigError("decoder config: nonpositive projection width");
        for (int64_t f : up_factors)
            if (f < 1) throw ConfigError("decoder config: nonpositive upsample factor");
        for (int64_t w : fuse_widths) {
            if (w < 1) throw ConfigError("decoder config: nonpositive fusion width");
            if (w % norm_groups)
                throw ConfigError("decoder config: fusion width " + std::to_string(w) +
                                  " not divisible by " + std::to_string(norm_groups) +
                                  " norm groups");
        }
        if (mode == DecodeMode::Addition)
            for (size_t i = 0; i + 1 < proj_widths.size(); ++i)
                if (fuse_widths[i] != proj_widths[i])
                    throw ConfigError("decoder config: addition fusion needs matching widths at "
                                      "scale " +
                                      std::to_string(i + 1) + ", got " +
                                      std::to_string(fuse_widths[i]) + " vs " +
                                      std::to_string(proj_widths[i]));
    }
};

namespace detail {

template <class T>
void add_conv_norm(ParamStore<T>& ps, const std::string& prefix, int64_t ci, int64_t co,
                   int64_t k, Rng& rng) {
    ps.add(prefix + ".w", init_gaussian<T>({co, ci, k, k, k}, ci * k * k * k, rng));
    ps.add(prefix + ".b", Tensor<T>::zeros({co}));
    ps.add(prefix + ".gamma", Tensor<T>::filled({co}, T(1)));
    ps.add(prefix + ".beta", Tensor<T>::zeros({co}));
}

// conv k=3 pad 1 -> group norm -> GELU
template <class T>
Tensor<T> conv_norm_gelu(Tensor<T> x, const ParamStore<T>& ps, const std::string& prefix,
                         int64_t norm_groups) {
    auto y = conv3d(x, ps.get(prefix + ".w"), ps.get(prefix + ".b"), 1, 1);
    y = group_norm3d(y, ps.get(prefix + ".gamma"), ps.get(prefix + ".beta"), norm_groups,
                     T(1e-5));
    return gelu(y);
}

}  // namespace detail

// `input_channels` are the channel widths of S'_1..S'_N (finest first).
template <class T>
void init_decoder_params(ParamStore<T>& ps, const std::vector<int64_t>& input_channels,
                         const DecoderConfig& cfg, DecodeMode mode, Rng& rng) {
    cfg.validate(mode);
    const int64_t n = cfg.num_scales();
    if (int64_t(input_channels.size()) != n)
        throw ConfigError("decoder params: " + std::to_string(input_channels.size()) +
                          " input widths for " + std::to_string(n) + " scales");
    for (int64_t i = 1; i <= n; ++i) {
        if (mode == DecodeMode::NoSkip && i < n) continue;
        const int64_t ci = input_channels[size_t(i - 1)];
        const int64_t co = cfg.proj_widths[size_t(i - 1)];
        ps.add("decoder.proj" + std::to_string(i) + ".w",
               init_gaussian<T>({co, ci, 1, 1, 1}, ci, rng));
        ps.add("decoder.proj" + std::to_string(i) + ".b", Tensor<T>::zeros({co}));
    }
    for (int64_t i = 1; i < n; ++i) {
        const int64_t fw = cfg.fuse_widths[size_t(i - 1)];
        const std::string up = "decoder.up" + std::to_string(i);
        detail::add_conv_norm(ps, up + ".conv1", cfg.decode_width(i + 1), fw, 3, rng);
        detail::add_conv_norm(ps, up + ".conv2", fw, fw, 3, rng);
        if (mode == DecodeMode::Concat) {
            const std::string fu = "decoder.fuse" + std::to_string(i);
            detail::add_conv_norm(ps, fu + ".conv1", fw + cfg.proj_widths[size_t(i - 1)], fw, 3,
                                  rng);
            detail::add_conv_norm(ps, fu + ".conv2", fw, fw, 3, rng);
        }
    }
}

// features: densified S'_1..S'_N, finest first, each [1, C_i, D_i, H_i, W_i].
// Returns D_1 at the finest decoder scale.
template <class T>
Tensor<T> decode(const std::vector<Tensor<T>>& features, const ParamStore<T>& ps,
                 const DecoderConfig& cfg, DecodeMode mode = DecodeMode::Concat) {
    cfg.validate(mode);
    const int64_t n = cfg.num_scales();
    if (int64_t(features.size()) != n)
        throw DimensionError("decode: got " + std::to_string(features.size()) +
                             " feature scales, config has " + std::to_string(n));
    for (int64_t i = 0; i < n; ++i) {
        const auto& f = features[size_t(i)];
        if (f.ndim() != 5 || f.dim(0) != 1)
            throw DimensionError("decode: scale " + std::to_string(i + 1) +
                                 " must be [1,C,D,H,W], got " + shape_str(f.shape()));
        if (i > 0) {
            const int64_t fac = cfg.up_factors[size_t(i - 1)];
            for (int axis = 0; axis < 3; ++axis)
                if (features[size_t(i - 1)].dim(2 + axis) != f.dim(2 + axis) * fac)
                    throw DimensionError(
                        "decode: scale " + std::to_string(i + 1) + " extent " +
                        std::to_string(f.dim(2 + axis)) + " x factor " + std::to_string(fac) +
                        " != scale " + std::to_string(i) + " extent " +
                        std::to_string(features[size_t(i - 1)].dim(2 + axis)) + " on axis " +
                        std::to_string(axis));
        }
    }

    auto proj = [&](int64_t i) {
        const std::string p = "decoder.proj" + std::to_string(i);
        return conv3d(features[size_t(i - 1)], ps.get(p + ".w"), ps.get(p + ".b"), 1, 0);
    };

    Tensor<T> d = proj(n);
    for (int64_t i = n - 1; i >= 1; --i) {
        const std::string up = "decoder.up" + std::to_string(i);
        auto u = detail::conv_norm_gelu(d, ps, up + ".conv1", cfg.norm_groups);
        u = detail::conv_norm_gelu(u, ps, up + ".conv2", cfg.norm_groups);
        u = upsample_nearest3d(u, cfg.up_factors[size_t(i - 1)]);
        switch (mode) {
            case DecodeMode::Concat: {
                const std::string fu = "decoder.fuse" + std::to_string(i);
                auto cat = concat_channels(u, proj(i));
                auto f = detail::conv_norm_gelu(cat, ps, fu + ".conv1", cfg.norm_groups);
                d = detail::conv_norm_gelu(f, ps, fu + ".conv2", cfg.norm_groups);
                break;
            }
            case DecodeMode::Addition:
                d = add(u, proj(i));
                break;
            case DecodeMode::NoSkip:
                d = u;
                break;
        }
    }
    return d;
}

template <class T>
Tensor<T> skip_addition_decode(const std::vector<Tensor<T>>& features, const ParamStore<T>& ps,
                               const DecoderConfig& cfg) {
    return decode(features, ps, cfg, DecodeMode::Addition);
}

// Pointwise linear map to `out_channels`, then nearest-neighbor upsample back
// to input resolution (factor 1 = identity).
template <class T>
void init_head_params(ParamStore<T>& ps, const std::string& name, int64_t in_channels,
                      int64_t out_channels, Rng& rng) {
    ps.add(name + ".w", init_gaussian<T>({out_channels, in_channels, 1, 1, 1}, in_channels, rng));
    ps.add(name + ".b", Tensor<T>::zeros({out_channels}));
}

template <class T>
Tensor<T> apply_head(Tensor<T> d1, const ParamStore<T>& ps, const std::string& name,
                     int64_t upsample_factor) {
    auto y = conv3d(d1, ps.get(name + ".w"), ps.get(name + ".b"), 1, 0);
    if (upsample_factor > 1) y = upsample_nearest3d(y, upsample_factor);
    return y;
}

template <class T>
Tensor<T> reconstruct_head(Tensor<T> d1, const ParamStore<T>& ps, int64_t upsample_factor) {
    return apply_head(d1, ps, "recon.head", upsample_factor);
}

}  // namespace smim
