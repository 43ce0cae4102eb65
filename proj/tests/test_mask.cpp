#include <doctest.h>

#include "smim/mask.hpp"

using namespace smim;

TEST_SUITE("mask") {

TEST_CASE("junction mask: exact counts, determinism, validation") {
    auto m = init_junction_mask({6, 6, 6}, 0.75, 42);
    CHECK(m.numel() == 216);
    CHECK(m.active_count() == 54);  // 216 cells at 75% masked keep exactly a quarter

    auto all = init_junction_mask({6, 6, 6}, 0.0, 42);
    CHECK(all.active_count() == 216);

    auto m2 = init_junction_mask({6, 6, 6}, 0.75, 42);
    CHECK(m == m2);
    auto m3 = init_junction_mask({6, 6, 6}, 0.75, 43);
    CHECK(!(m == m3));

    CHECK_THROWS_AS(init_junction_mask({6, 6, 6}, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(init_junction_mask({6, 6, 6}, -0.1, 1), ConfigError);
    CHECK_THROWS_AS(init_junction_mask({1, 1, 1}, 0.5, 1), ConfigError);
}

TEST_CASE("junction mask keeps both sides populated for interior ratios") {
    // round() would give 0 masked cells; the clamp keeps one.
    auto low = init_junction_mask({1, 1, 2}, 0.1, 7);
    CHECK(low.active_count() == 1);
    // round() would mask both cells; the clamp keeps one active.
    auto high = init_junction_mask({1, 1, 2}, 0.9, 7);
    CHECK(high.active_count() == 1);
    // Count stays within one cell of round(ratio*n) across seeds and ratios.
    for (double ratio : {0.25, 0.5, 0.75}) {
        for (uint64_t seed = 0; seed < 10; ++seed) {
            auto g = init_junction_mask({4, 4, 4}, ratio, seed);
            const int64_t expect_active = 64 - llround(ratio * 64);
            CHECK(std::abs(g.active_count() - expect_active) <= 1);
        }
    }
}

TEST_CASE("upsample replicates blocks; factor 1 is identity") {
    MaskGrid m;
    m.shape = {2, 2, 2};
    m.bits = {0, 0, 0, 0, 0, 0, 0, 1};  // single active cell at (1,1,1)
    auto up = upsample_mask(m, 2);
    CHECK(up.shape == std::array<int64_t, 3>{4, 4, 4});
    CHECK(up.active_count() == 8);
    for (int64_t d = 2; d < 4; ++d)
        for (int64_t h = 2; h < 4; ++h)
            for (int64_t w = 2; w < 4; ++w) CHECK(up.at(d, h, w));
    CHECK(upsample_mask(m, 1) == m);
    CHECK_THROWS_AS(upsample_mask(m, 0), ConfigError);
}

TEST_CASE("downsample is an any-reduce and round-trips replication") {
    MaskGrid fine;
    fine.shape = {2, 2, 2};
    fine.bits = {1, 0, 0, 0, 0, 0, 0, 0};  // one active voxel in the block
    auto coarse = downsample_mask(fine, 2);
    CHECK(coarse.numel() == 1);
    CHECK(coarse.active_count() == 1);

    for (int64_t f : {2, 4, 8, 16}) {
        for (uint64_t seed = 1; seed <= 5; ++seed) {
            auto m = init_junction_mask({2, 2, 2}, 0.5, seed);
            CHECK(downsample_mask(upsample_mask(m, f), f) == m);
        }
    }
    MaskGrid odd;
    odd.shape = {3, 2, 2};
    odd.bits.assign(12, 1);
    CHECK_THROWS_AS(downsample_mask(odd, 2), DimensionError);
}

TEST_CASE("block constancy detects mixed blocks") {
    auto m = init_junction_mask({2, 2, 2}, 0.5, 3);
    CHECK(is_block_constant(upsample_mask(m, 4), 4));
    CHECK(is_block_constant(upsample_mask(m, 4), 2));  // finer blocks are constant too
    MaskGrid mixed;
    mixed.shape = {2, 2, 2};
    mixed.bits = {1, 0, 0, 0, 0, 0, 0, 0};
    CHECK(!is_block_constant(mixed, 2));
}

TEST_CASE("pyramid shapes from strides [2,2,2,2] over a 96^3 input") {
    auto junction = init_junction_mask({6, 6, 6}, 0.75, 9);
    auto p = build_pyramid(junction, {2, 2, 2, 2}, {96, 96, 96});
    REQUIRE(p.stage.size() == 4);
    CHECK(p.stage[0].shape == std::array<int64_t, 3>{48, 48, 48});
    CHECK(p.stage[1].shape == std::array<int64_t, 3>{24, 24, 24});
    CHECK(p.stage[2].shape == std::array<int64_t, 3>{12, 12, 12});
    CHECK(p.stage[3].shape == std::array<int64_t, 3>{6, 6, 6});
    CHECK(p.voxel.shape == std::array<int64_t, 3>{96, 96, 96});
    CHECK(p.junction() == junction);
    CHECK(p.stage[0].scale_id == 1);
    CHECK(p.voxel.scale_id == 0);
}

TEST_CASE("pyramid preserves the keep fraction at every scale") {
    auto junction = init_junction_mask({2, 2, 2}, 0.5, 11);
    auto p = build_pyramid(junction, {2, 2, 2}, {16, 16, 16});
    const double f = junction.active_fraction();
    for (const auto& g : p.stage) CHECK(g.active_fraction() == f);
    CHECK(p.voxel.active_fraction() == f);
}

TEST_CASE("all-active junction replicates to all-active everywhere") {
    auto junction = init_junction_mask({2, 2, 2}, 0.0, 1);
    auto p = build_pyramid(junction, {2, 2}, {8, 8, 8});
    for (const auto& g : p.stage) CHECK(g.active_count() == g.numel());
    CHECK(p.voxel.active_count() == p.voxel.numel());
}

TEST_CASE("pyramid consistency holds for 100 random seeds") {
    for (uint64_t seed = 0; seed < 100; ++seed) {
        auto junction = init_junction_mask({2, 2, 2}, 0.75, seed);
        auto p = build_pyramid(junction, {2, 2, 2, 2}, {32, 32, 32});
        CHECK_NOTHROW(check_pyramid(p));
    }
}

TEST_CASE("pyramid construction validates geometry naming the axis") {
    auto junction = init_junction_mask({6, 6, 6}, 0.75, 1);
    CHECK_THROWS_WITH_AS(build_pyramid(junction, {2, 2, 2, 2}, {96, 90, 96}),
                         doctest::Contains("height"), ConfigError);
    CHECK_THROWS_AS(build_pyramid(junction, {2, 2, 2, 2}, {32, 32, 32}), ConfigError);
    CHECK_THROWS_AS(build_pyramid(junction, {}, {96, 96, 96}), ConfigError);
    CHECK_THROWS_AS(build_pyramid(junction, {2, 0, 2, 2}, {96, 96, 96}), ConfigError);
}

TEST_CASE("unlinked pyramid keeps the junction but breaks cross-scale consistency") {
    const uint64_t seed = 5;
    auto junction = init_junction_mask({2, 2, 2}, 0.75, seed);
    auto linked = build_pyramid(junction, {2, 2, 2, 2}, {32, 32, 32});
    auto unlinked = build_unlinked_pyramid({32, 32, 32}, {2, 2, 2, 2}, 0.75, seed);
    CHECK(unlinked.junction() == linked.junction());
    CHECK(!(unlinked.stage[0] == linked.stage[0]));
    CHECK_THROWS_AS(check_pyramid(unlinked), ConsistencyError);
}

TEST_CASE("rle dump round-trips and rejects malformed input") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        auto m = init_junction_mask({3, 4, 5}, 0.6, seed);
        m.scale_id = 2;
        auto text = mask_to_rle_json(m, 0.6, seed);
        auto back = mask_from_rle_json(text);
        CHECK(back == m);
        CHECK(back.scale_id == 2);
    }
    CHECK_THROWS_AS(mask_from_rle_json("not json"), FormatError);
    CHECK_THROWS_AS(mask_from_rle_json("{\"shape\":[2,2,2]}"), FormatError);
    CHECK_THROWS_AS(mask_from_rle_json(
                        "{\"shape\":[2,2,2],\"scale_id\":0,\"first_bit\":1,\"runs\":[3]}"),
                    FormatError);
    CHECK_THROWS_AS(mask_from_rle_json(
                        "{\"shape\":[1,1,2],\"scale_id\":0,\"first_bit\":1,\"runs\":[2,-1]}"),
                    FormatError);
}

TEST_CASE("active indices come back sorted in scan order") {
    auto m = init_junction_mask({4, 4, 4}, 0.5, 17);
    auto idx = m.active_indices();
    CHECK(int64_t(idx.size()) == m.active_count());
    for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i - 1] < idx[i]);
    for (int64_t i : idx) CHECK(m.bits[size_t(i)] == 1);
}

} // TEST_SUITE
