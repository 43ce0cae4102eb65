#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "smim/encoder_cnn.hpp"
#include "smim/mask.hpp"
#include "smim/oracle_model.hpp"
#include "smim/params.hpp"
#include "smim/rng.hpp"
#include "test_util.hpp"

using namespace smim;

namespace {

Tensor<double> random_volume(int64_t e, Rng& rng) {
    auto v = Tensor<double>::zeros({1, e, e, e});
    for (auto& x : v.values()) x = rng.uniform(0.0, 1.0);
    return v;
}

// Largest |sparse row value - dense reference value| over all stages.
double compare_to_dense_reference(const std::vector<SparseMap<double>>& got,
                                  const std::vector<oracle::DenseFeature<double>>& ref) {
    REQUIRE(got.size() == ref.size());
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        REQUIRE(got[i].channels == ref[i].channels);
        REQUIRE(got[i].shape == ref[i].shape);
        const int64_t C = got[i].channels;
        const int64_t V = got[i].spatial_numel();
        const double* rows = got[i].rows.data();
        for (int64_t r = 0; r < got[i].active_count(); ++r) {
            const int64_t v = got[i].coords[size_t(r)];
            for (int64_t c = 0; c < C; ++c) {
                const double d = std::abs(rows[r * C + c] - ref[i].values[size_t(c * V + v)]);
                worst = std::max(worst, d);
            }
        }
    }
    return worst;
}

CnnConfig tiny_config() {
    CnnConfig cfg;
    cfg.num_stages = 2;
    cfg.channels = {4, 8};
    cfg.norm_groups = 2;
    return cfg;
}

}  // namespace

TEST_SUITE("encoder_cnn") {

TEST_CASE("config validation rejects inconsistent settings") {
    CnnConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    CnnConfig bad = cfg;
    bad.num_stages = 1;
    bad.channels = {16};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.channels = {16, 16, 64, 128};
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("strictly increasing"), ConfigError);

    bad = cfg;
    bad.kernel = 4;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("odd"), ConfigError);

    bad = cfg;
    bad.channels = {10, 32, 64, 128};  // 10 % 4 != 0
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("norm groups"), ConfigError);

    bad = cfg;
    bad.channels = {16, 32, 64};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("stride schedule is stem stride then twos") {
    CnnConfig cfg;
    CHECK(cfg.stage_strides() == std::vector<int64_t>{2, 2, 2, 2});
    CHECK(cfg.total_stride() == 16);
    cfg.stem_stride = 1;
    CHECK(cfg.stage_strides() == std::vector<int64_t>{1, 2, 2, 2});
    CHECK(cfg.total_stride() == 8);
}

TEST_CASE("parameter set depends on the config only") {
    CnnConfig cfg;
    ParamStore<double> a, b;
    Rng ra(1), rb(99);
    init_cnn_params(a, cfg, ra);
    init_cnn_params(b, cfg, rb);
    CHECK(a.names() == b.names());  // same structure regardless of init seed
    CHECK(a.scalar_count() == b.scalar_count());
    // Hand-counted for the default config (k=3, expansion 2):
    // stem 448; stages 1552 + 5696 + 20608 + 78080.
    CHECK(a.scalar_count() == 106384);
    CHECK_THROWS_WITH_AS(a.add("encoder.stem.conv.w", Tensor<double>::zeros({1})),
                         doctest::Contains("twice"), ConfigError);
}

TEST_CASE("stage outputs follow the shape contract and live on their masks") {
    CnnConfig cfg;
    ParamStore<double> ps;
    Rng rng(7);
    init_cnn_params(ps, cfg, rng);
    const int64_t e = 32;
    auto junction = init_junction_mask({e / 16, e / 16, e / 16}, 0.75, 11);
    auto pyr = build_pyramid(junction, cfg.stage_strides(), {e, e, e});
    auto vol = random_volume(e, rng);

    auto feats = encode_cnn(vol, pyr, ps, cfg);
    REQUIRE(int64_t(feats.size()) == cfg.num_stages);
    int64_t extent = e / cfg.stem_stride;
    for (int64_t i = 0; i < cfg.num_stages; ++i) {
        const auto& s = feats[size_t(i)];
        CHECK(s.scale_id == int(i + 1));
        CHECK(s.channels == cfg.channels[size_t(i)]);
        CHECK(s.shape == std::array<int64_t, 3>{extent, extent, extent});
        CHECK(s.coords == pyr.stage[size_t(i)].active_indices());
        extent /= 2;
    }
}

TEST_CASE("no erosion after stacked blocks at 75% masking") {
    CnnConfig cfg = tiny_config();
    cfg.blocks_per_stage = 3;
    ParamStore<double> ps;
    Rng rng(3);
    init_cnn_params(ps, cfg, rng);
    const int64_t e = 16;
    auto junction = init_junction_mask({4, 4, 4}, 0.75, 5);
    auto pyr = build_pyramid(junction, cfg.stage_strides(), {e, e, e});
    auto feats = encode_cnn(random_volume(e, rng), pyr, ps, cfg);
    for (size_t i = 0; i < feats.size(); ++i) {
        CHECK(feats[i].coords == pyr.stage[i].active_indices());
        // No row is silently dead either: features are generically nonzero.
        double mx = 0;
        for (double v : feats[i].rows.values()) mx = std::max(mx, std::abs(v));
        CHECK(mx > 0.0);
    }
}

TEST_CASE("all-active encoding equals the dense reference exactly") {
    CnnConfig cfg;
    ParamStore<double> ps;
    Rng rng(21);
    init_cnn_params(ps, cfg, rng);
    const int64_t e = 32;
    auto junction = init_junction_mask({2, 2, 2}, 0.0, 1);
    auto pyr = build_pyramid(junction, cfg.stage_strides(), {e, e, e});
    auto vol = random_volume(e, rng);

    auto feats = encode_cnn(vol, pyr, ps, cfg);
    auto ref = oracle::dense_masked_forward(vol.values(), pyr, ps, cfg);
    const double diff = compare_to_dense_reference(feats, ref);
    CHECK(diff <= 1e-12);
    CHECK(diff == 0.0);  // accumulation orders are aligned by design
}

TEST_CASE("masked encoding matches the dense reference at active sites") {
    Rng meta(555);
    for (double ratio : {0.25, 0.5, 0.75}) {
        CAPTURE(ratio);
        CnnConfig cfg = tiny_config();
        ParamStore<double> ps;
        Rng rng(meta.next_u64());
        init_cnn_params(ps, cfg, rng);
        const int64_t e = 16;
        auto junction = init_junction_mask({4, 4, 4}, ratio, meta.next_u64());
        auto pyr = build_pyramid(junction, cfg.stage_strides(), {e, e, e});
        auto vol = random_volume(e, rng);

        auto feats = encode_cnn(vol, pyr, ps, cfg);
        auto ref = oracle::dense_masked_forward(vol.values(), pyr, ps, cfg);
        const double diff = compare_to_dense_reference(feats, ref);
        CHECK(diff <= 1e-12);
        CHECK(diff == 0.0);
    }
}

TEST_CASE("default config at 75% matches the dense reference") {
    CnnConfig cfg;
    ParamStore<double> ps;
    Rng rng(77);
    init_cnn_params(ps, cfg, rng);
    const int64_t e = 32;
    auto junction = init_junction_mask({2, 2, 2}, 0.75, 13);
    auto pyr = build_pyramid(junction, cfg.stage_strides(), {e, e, e});
    auto vol = random_volume(e, rng);
    auto feats = encode_cnn(vol, pyr, ps, cfg);
    auto ref = oracle::dense_masked_forward(vol.values(), pyr, ps, cfg);
    CHECK(compare_to_dense_reference(feats, ref) <= 1e-12);
}

TEST_CASE("unmasked dense convolution erodes the mask (positive control)") {
    // One k=3 convolution on the zero-filled masked input without re-masking
    // strictly grows the nonzero-site set: the failure mode the sparse path
    // exists to prevent.
    Rng rng(31);
    const int64_t e = 8, V = e * e * e;
    auto junction = init_junction_mask({2, 2, 2}, 0.75, 9);
    auto mask = upsample_mask(junction, 4);  // 8^3 voxel mask
    std::vector<double> x(static_cast<size_t>(V));
    for (int64_t v = 0; v < V; ++v)
        x[size_t(v)] = mask.bits[size_t(v)] ? rng.uniform(0.5, 1.0) : 0.0;
    std::vector<double> w(27, 1.0), b(1, 0.0);
    auto y = oracle::conv3d_ref(x, int64_t(1), int64_t(1), e, e, e, w, int64_t(1), int64_t(3), b,
                                int64_t(1), int64_t(1));
    const int64_t before = oracle::nonzero_site_count(x, 1, V);
    const int64_t after = oracle::nonzero_site_count(y, 1, V);
    CHECK(before == mask.active_count());
    CHECK(after > before);
}

TEST_CASE("pyramid and volume mismatches are rejected") {
    CnnConfig cfg = tiny_config();
    ParamStore<double> ps;
    Rng rng(2);
    init_cnn_params(ps, cfg, rng);

    // Pyramid built for a different stride schedule.
    auto junction = init_junction_mask({4, 4, 4}, 0.5, 1);
    auto pyr_bad = build_pyramid(junction, {1, 2}, {8, 8, 8});
    CHECK_THROWS_WITH_AS(encode_cnn(random_volume(8, rng), pyr_bad, ps, cfg),
                         doctest::Contains("stride"), ConfigError);

    auto pyr = build_pyramid(junction, cfg.stage_strides(), {16, 16, 16});
    CHECK_THROWS_WITH_AS(encode_cnn(random_volume(8, rng), pyr, ps, cfg),
                         doctest::Contains("extent"), ConfigError);
    CHECK_THROWS_AS(encode_cnn(Tensor<double>::zeros({16, 16, 16}), pyr, ps, cfg),
                    DimensionError);
}

TEST_CASE("encoder gradients match finite differences") {
    CnnConfig cfg;
    cfg.num_stages = 2;
    cfg.channels = {2, 4};
    cfg.norm_groups = 2;
    ParamStore<double> ps;
    Rng rng(17);
    init_cnn_params(ps, cfg, rng);
    const int64_t e = 8;
    auto junction = init_junction_mask({2, 2, 2}, 0.5, 4);
    auto pyr = build_pyramid(junction, cfg.stage_strides(), {e, e, e});
    auto vol = random_volume(e, rng);

    auto fwd = [&]() {
        auto feats = encode_cnn(vol, pyr, ps, cfg);
        return add(mean_all(feats[0].rows), mean_all(mul(feats[1].rows, feats[1].rows)));
    };
    check_grads(fwd,
                {ps.get("encoder.stem.conv.w"), ps.get("encoder.stage1.block0.dw.w"),
                 ps.get("encoder.stage1.block0.norm.gamma"),
                 ps.get("encoder.stage1.block0.expand.w"), ps.get("encoder.stage2.in_proj.w"),
                 ps.get("encoder.stage2.block0.contract.b")},
                1e-5, 1e-6);
}

}  // TEST_SUITE
