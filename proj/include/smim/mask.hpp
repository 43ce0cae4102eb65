#pragma once
#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "smim/error.hpp"
#include "smim/rng.hpp"

namespace smim {

// Boolean occupancy grid at one scale. bits: 1 = active (kept/visible),
// 0 = masked. Scan order is [d,h,w] with w fastest, matching tensor layout.
struct MaskGrid {
    std::array<int64_t, 3> shape{0, 0, 0};
    std::vector<uint8_t> bits;
    int scale_id = 0;

    int64_t numel() const { return shape[0] * shape[1] * shape[2]; }

    int64_t active_count() const {
        return std::accumulate(bits.begin(), bits.end(), int64_t(0));
    }

    double active_fraction() const { return double(active_count()) / double(numel()); }

    bool at(int64_t d, int64_t h, int64_t w) const {
        return bits[size_t((d * shape[1] + h) * shape[2] + w)] != 0;
    }

    // Linear indices of active cells, ascending scan order.
    std::vector<int64_t> active_indices() const {
        std::vector<int64_t> idx;
        idx.reserve(size_t(active_count()));
        for (int64_t i = 0; i < int64_t(bits.size()); ++i)
            if (bits[size_t(i)]) idx.push_back(i);
        return idx;
    }

    bool operator==(const MaskGrid& o) const {
        return shape == o.shape && bits == o.bits;
    }
};

// Draws the junction-level mask: exactly round(mask_ratio * cells) cells
// masked, chosen uniformly without replacement. When the ratio is strictly
// inside (0,1) the count is clamped so at least one cell stays on each side.
inline MaskGrid init_junction_mask(std::array<int64_t, 3> shape, double mask_ratio,
                                   uint64_t seed) {
    const int64_t n = shape[0] * shape[1] * shape[2];
    if (n < 2) throw ConfigError("mask grid needs at least 2 cells, got " + std::to_string(n));
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
        throw ConfigError("mask ratio must be in [0,1), got " + std::to_string(mask_ratio));
    int64_t masked = std::llround(mask_ratio * double(n));
    if (mask_ratio > 0.0) {
        masked = std::max<int64_t>(masked, 1);
        masked = std::min<int64_t>(masked, n - 1);
    }
    MaskGrid m;
    m.shape = shape;
    m.bits.assign(size_t(n), 1);
    // Partial Fisher-Yates: the first `masked` entries of a shuffled index
    // vector are the masked cells.
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), int64_t(0));
    Rng rng(seed);
    for (int64_t i = 0; i < masked; ++i) {
        const int64_t j = i + int64_t(rng.uniform_int(uint64_t(n - i)));
        std::swap(idx[size_t(i)], idx[size_t(j)]);
        m.bits[size_t(idx[size_t(i)])] = 0;
    }
    return m;
}

// Nearest-neighbour replication: every cell becomes a factor^3 block of
// identical bits.
inline MaskGrid upsample_mask(const MaskGrid& m, int64_t factor) {
    if (factor < 1) throw ConfigError("mask upsample factor must be >= 1");
    MaskGrid out;
    out.shape = {m.shape[0] * factor, m.shape[1] * factor, m.shape[2] * factor};
    out.scale_id = m.scale_id;
    out.bits.resize(size_t(out.numel()));
    size_t oi = 0;
    for (int64_t d = 0; d < out.shape[0]; ++d)
        for (int64_t h = 0; h < out.shape[1]; ++h)
            for (int64_t w = 0; w < out.shape[2]; ++w)
                out.bits[oi++] = m.bits[size_t(((d / factor) * m.shape[1] + h / factor) *
                                               m.shape[2] + w / factor)];
    return out;
}

// Block reduction: a coarse cell is active iff any cell of its block is.
inline MaskGrid downsample_mask(const MaskGrid& m, int64_t factor) {
    if (factor < 1) throw ConfigError("mask downsample factor must be >= 1");
    for (int axis = 0; axis < 3; ++axis)
        if (m.shape[size_t(axis)] % factor)
            throw DimensionError("mask downsample: extent " +
                                 std::to_string(m.shape[size_t(axis)]) + " on axis " +
                                 std::to_string(axis) + " not divisible by " +
                                 std::to_string(factor));
    MaskGrid out;
    out.shape = {m.shape[0] / factor, m.shape[1] / factor, m.shape[2] / factor};
    out.scale_id = m.scale_id;
    out.bits.assign(size_t(out.numel()), 0);
    for (int64_t d = 0; d < m.shape[0]; ++d)
        for (int64_t h = 0; h < m.shape[1]; ++h)
            for (int64_t w = 0; w < m.shape[2]; ++w)
                if (m.at(d, h, w))
                    out.bits[size_t(((d / factor) * out.shape[1] + h / factor) * out.shape[2] +
                                    w / factor)] = 1;
    return out;
}

// True when every factor^3 block holds a single value — the condition under
// which pooling windows never mix masked and unmasked cells.
inline bool is_block_constant(const MaskGrid& m, int64_t factor) {
    if (factor < 1) return false;
    for (int axis = 0; axis < 3; ++axis)
        if (m.shape[size_t(axis)] % factor) return false;
    for (int64_t d = 0; d < m.shape[0]; ++d)
        for (int64_t h = 0; h < m.shape[1]; ++h)
            for (int64_t w = 0; w < m.shape[2]; ++w) {
                const bool ref = m.at((d / factor) * factor, (h / factor) * factor,
                                      (w / factor) * factor);
                if (m.at(d, h, w) != ref) return false;
            }
    return true;
}

// The full mask family: one grid per CNN stage plus the voxel-resolution
// replication used for reconstruction targets.
struct MaskPyramid {
    std::vector<MaskGrid> stage;     // stage[i] is M_{i+1}; stage.back() is the junction
    MaskGrid voxel;                  // input-resolution replication of the junction
    std::vector<int64_t> strides;    // strides[0] = input->stage1, strides[i] = stage i->i+1

    const MaskGrid& junction() const { return stage.back(); }
};

// Replicates a junction mask bottom-up to every stage resolution and to voxel
// resolution. strides[0] maps input to stage 1; strides[i] maps stage i to
// stage i+1; the junction lives at the last stage.
inline MaskPyramid build_pyramid(const MaskGrid& junction, std::vector<int64_t> stage_strides,
                                 std::array<int64_t, 3> input_shape) {
    if (stage_strides.empty()) throw ConfigError("build_pyramid: no stages");
    int64_t total = 1;
    for (int64_t s : stage_strides) {
        if (s < 1) throw ConfigError("build_pyramid: stride must be >= 1");
        total *= s;
    }
    const char* axis_names[3] = {"depth", "height", "width"};
    for (int axis = 0; axis < 3; ++axis) {
        if (input_shape[size_t(axis)] % total)
            throw ConfigError("build_pyramid: input extent " +
                              std::to_string(input_shape[size_t(axis)]) + " on axis " +
                              axis_names[axis] + " not divisible by total stride " +
                              std::to_string(total));
        if (input_shape[size_t(axis)] / total != junction.shape[size_t(axis)])
            throw ConfigError("build_pyramid: junction extent " +
                              std::to_string(junction.shape[size_t(axis)]) + " on axis " +
                              axis_names[axis] + ", expected " +
                              std::to_string(input_shape[size_t(axis)] / total));
    }
    const int n = int(stage_strides.size());
    MaskPyramid p;
    p.strides = stage_strides;
    p.stage.resize(size_t(n));
    int64_t factor = 1;
    for (int i = n - 1; i >= 0; --i) {  // junction outward
        p.stage[size_t(i)] = upsample_mask(junction, factor);
        p.stage[size_t(i)].scale_id = i + 1;
        factor *= (i > 0) ? stage_strides[size_t(i)] : 1;
    }
    p.voxel = upsample_mask(junction, total);
    p.voxel.scale_id = 0;
    return p;
}

// Ablation variant: every level re-drawn independently at the same ratio
// instead of replicated from the junction — deliberately breaks the
// cross-scale consistency the pyramid otherwise guarantees. The junction
// grid itself matches build_pyramid for the same (ratio, seed).
inline MaskPyramid build_unlinked_pyramid(std::array<int64_t, 3> input_shape,
                                          std::vector<int64_t> stage_strides, double mask_ratio,
                                          uint64_t seed) {
    int64_t total = 1;
    for (int64_t s : stage_strides) total *= s;
    std::array<int64_t, 3> jshape = {input_shape[0] / total, input_shape[1] / total,
                                     input_shape[2] / total};
    auto junction = init_junction_mask(jshape, mask_ratio, seed);
    auto p = build_pyramid(junction, stage_strides, input_shape);
    // Overwrite every non-junction level with an independent draw.
    const int n = int(stage_strides.size());
    for (int i = 0; i + 1 < n; ++i) {
        auto& g = p.stage[size_t(i)];
        g = init_junction_mask(g.shape, mask_ratio, Rng::derive(seed, uint64_t(i + 1)));
        g.scale_id = i + 1;
    }
    p.voxel = init_junction_mask(p.voxel.shape, mask_ratio, Rng::derive(seed, uint64_t(n + 1)));
    p.voxel.scale_id = 0;
    return p;
}

// Verifies the cross-scale invariant: OR-downsampling each stage by its
// outgoing stride reproduces the next stage, and each stage is constant on
// junction-cell blocks. Throws ConsistencyError naming the first bad stage.
inline void check_pyramid(const MaskPyramid& p) {
    const int n = int(p.stage.size());
    for (int i = 0; i + 1 < n; ++i) {
        const int64_t s = p.strides[size_t(i + 1)];
        if (!is_block_constant(p.stage[size_t(i)], s))
            throw ConsistencyError("mask stage " + std::to_string(i + 1) +
                                   " is not constant on stride-" + std::to_string(s) + " blocks");
        if (!(downsample_mask(p.stage[size_t(i)], s) == p.stage[size_t(i + 1)]))
            throw ConsistencyError("mask stage " + std::to_string(i + 1) +
                                   " does not reduce to stage " + std::to_string(i + 2));
    }
    int64_t vf = 1;
    for (int64_t s : p.strides) vf *= s;
    if (!(p.voxel == upsample_mask(p.junction(), vf)))
        throw ConsistencyError("voxel mask is not the junction replication");
}

// ---------------------------------------------------------------------------
// Run-length dump (verify/visualization interface)
// ---------------------------------------------------------------------------

// {"shape":[d,h,w], "scale_id", "ratio", "seed", "first_bit", "runs":[...]}
// runs are lengths of alternating-value runs in scan order, starting with
// first_bit; ratio/seed echo the generator inputs and are not re-derived.
inline std::string mask_to_rle_json(const MaskGrid& m, double ratio, uint64_t seed) {
    nlohmann::json j;
    j["shape"] = {m.shape[0], m.shape[1], m.shape[2]};
    j["scale_id"] = m.scale_id;
    j["ratio"] = ratio;
    j["seed"] = seed;
    j["first_bit"] = m.bits.empty() ? 0 : int(m.bits[0]);
    std::vector<int64_t> runs;
    int64_t run = 0;
    uint8_t cur = m.bits.empty() ? 0 : m.bits[0];
    for (uint8_t b : m.bits) {
        if (b == cur) {
            ++run;
        } else {
            runs.push_back(run);
            cur = b;
            run = 1;
        }
    }
    if (run) runs.push_back(run);
    j["runs"] = runs;
    return j.dump();
}

inline MaskGrid mask_from_rle_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("mask dump is not valid JSON: ") + e.what());
    }
    for (const char* key : {"shape", "scale_id", "first_bit", "runs"})
        if (!j.contains(key)) throw FormatError(std::string("mask dump missing field ") + key);
    MaskGrid m;
    auto sh = j["shape"];
    if (!sh.is_array() || sh.size() != 3) throw FormatError("mask dump shape must have 3 extents");
    m.shape = {sh[0].get<int64_t>(), sh[1].get<int64_t>(), sh[2].get<int64_t>()};
    m.scale_id = j["scale_id"].get<int>();
    uint8_t cur = uint8_t(j["first_bit"].get<int>() & 1);
    m.bits.reserve(size_t(m.numel()));
    for (const auto& r : j["runs"]) {
        const int64_t len = r.get<int64_t>();
        if (len <= 0) throw FormatError("mask dump run lengths must be positive");
        m.bits.insert(m.bits.end(), size_t(len), cur);
        cur = uint8_t(1 - cur);
    }
    if (int64_t(m.bits.size()) != m.numel())
        throw FormatError("mask dump runs cover " + std::to_string(m.bits.size()) +
                          " cells, shape expects " + std::to_string(m.numel()));
    return m;
}

} // namespace smim
