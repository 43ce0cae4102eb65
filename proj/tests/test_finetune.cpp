#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include <smim/finetune.hpp>

#include "test_util.hpp"

using namespace smim;

namespace {

CnnConfig tiny_cnn() {
    CnnConfig c;
    c.num_stages = 2;
    c.channels = {2, 4};
    c.blocks_per_stage = 1;
    c.norm_groups = 2;
    return c;
}

VitConfig tiny_vit() {
    VitConfig v;
    v.embed_dim = 4;
    v.depth = 1;
    v.heads = 2;
    v.mlp_ratio = 2;
    return v;
}

template <class T>
Model<T> tiny_model(ModelKind kind, std::array<int64_t, 3> crop = {8, 8, 8},
                    uint64_t seed = 0) {
    auto cnn = tiny_cnn();
    return build_model<T>(kind, cnn, tiny_vit(), mirrored_decoder(cnn), DecodeMode::Concat,
                          crop, seed);
}

LabeledVolume make_pair(uint64_t seed, std::array<int64_t, 3> shape = {16, 16, 16}) {
    auto [vol, label] = generate_phantom(seed, shape);
    return {std::move(vol), std::move(label)};
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

}  // namespace

TEST_SUITE("finetune") {

TEST_CASE("dense encoding is the all-active case of the sparse path") {
    auto model = tiny_model<double>(ModelKind::Pretrain);
    auto pair = make_pair(3);
    auto crop = preprocess(pair.image, {8, 8, 8}, CropMode::Center);
    auto x = volume_to_tensor<double>(crop);

    auto pyr = full_pyramid(model.junction, model.cnn.stage_strides(), model.crop);
    for (const auto& g : pyr.stage) CHECK(g.active_count() == g.numel());
    CHECK(pyr.voxel.active_count() == pyr.voxel.numel());

    // With nothing masked, inserting mask embeddings is a no-op: the two
    // paths must agree bit for bit.
    auto with = model_forward(model, x, pyr, /*use_mask_embeddings=*/true);
    auto without = model_forward(model, x, pyr, /*use_mask_embeddings=*/false);
    CHECK(std::memcmp(with.values().data(), without.values().data(),
                      with.values().size() * sizeof(double)) == 0);

    auto seg = tiny_model<double>(ModelKind::Segment);
    auto direct = dense_encode(seg, x);
    auto via_pyramid = model_forward(seg, x, pyr, false);
    CHECK(direct.shape() == Shape{1, 1, 8, 8, 8});
    CHECK(std::memcmp(direct.values().data(), via_pyramid.values().data(),
                      direct.values().size() * sizeof(double)) == 0);
}

TEST_CASE("segmentation loss matches hand-computed anchors") {
    SUBCASE("zero logits cost exactly ln 2 in cross-entropy") {
        auto logits = Tensor<double>::zeros({8});
        auto label = Tensor<double>::from_values({8}, {1, 0, 1, 0, 1, 0, 1, 0});
        CHECK(bce_with_logits(logits, label).item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
        // p = 0.5 everywhere: intersection 2, prediction mass 4, labels 4.
        const double s = kDiceSmoothing;
        const double dice = (2 * 2.0 + s) / (4.0 + 4.0 + s);
        CHECK(dice_loss_with_logits(logits, label).item() ==
              doctest::Approx(1.0 - dice).epsilon(1e-12));
        CHECK(seg_loss(logits, label).item() ==
              doctest::Approx(std::log(2.0) + 1.0 - dice).epsilon(1e-12));
    }
    SUBCASE("a confident correct prediction costs almost nothing") {
        auto logits = Tensor<double>::from_values({4}, {40, -40, 40, -40});
        auto label = Tensor<double>::from_values({4}, {1, 0, 1, 0});
        CHECK(seg_loss(logits, label).item() < 1e-6);
    }
    SUBCASE("an empty prediction against an empty label costs almost nothing") {
        auto logits = Tensor<double>::from_values({4}, {-40, -40, -40, -40});
        auto label = Tensor<double>::zeros({4});
        CHECK(seg_loss(logits, label).item() < 1e-6);
    }
    SUBCASE("labels must be binary") {
        auto logits = Tensor<double>::zeros({2});
        auto label = Tensor<double>::from_values({2}, {0.0, 0.5});
        CHECK_THROWS_WITH_AS(seg_loss(logits, label), doctest::Contains("0 or 1"), DataError);
    }
    SUBCASE("shapes must match") {
        CHECK_THROWS_AS(seg_loss(Tensor<double>::zeros({3}), Tensor<double>::zeros({4})),
                        DimensionError);
    }
}

TEST_CASE("segmentation loss gradients match finite differences") {
    Rng rng(5);
    const int64_t n = 8 * 8 * 8;
    auto logits = Tensor<double>::from_values(
        {n}, random_values(size_t(n), rng, -2.0, 2.0));
    std::vector<double> lab(static_cast<size_t>(n));
    for (auto& y : lab) y = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto label = Tensor<double>::from_values({n}, std::move(lab));

    SUBCASE("cross-entropy term") {
        check_grads([&] { return bce_with_logits(logits, label); }, {logits});
    }
    SUBCASE("overlap term") {
        check_grads([&] { return dice_loss_with_logits(logits, label); }, {logits});
    }
    SUBCASE("combined") {
        check_grads([&] { return seg_loss(logits, label); }, {logits});
    }
}

TEST_CASE("gradients flow from the segmentation loss into the model") {
    auto model = tiny_model<double>(ModelKind::Segment);
    auto pair = make_pair(7);
    auto origin = crop_origin(pair.image.shape, {8, 8, 8}, CropMode::Center);
    auto img = crop_volume(pair.image, {8, 8, 8}, origin);
    window_hu(img);
    auto lab = crop_volume(pair.label, {8, 8, 8}, origin);
    auto label = reshape(volume_to_tensor<double>(lab), {512});

    auto fwd = [&] {
        auto pred = dense_encode(model, volume_to_tensor<double>(img));
        return seg_loss(reshape(pred, {512}), label);
    };
    check_grads(fwd,
                {model.ps.get("encoder.stem.conv.b"), model.ps.get("vit.block0.attn.bv"),
                 model.ps.get("decoder.up1.conv2.beta"), model.ps.get("seg.head.w"),
                 model.ps.get("seg.head.b")},
                1e-5, 1e-5);
}

TEST_CASE("hard overlap metric hits its anchor cases") {
    CHECK(dice_overlap({0, 0, 0}, {0, 0, 0}) == 1.0);  // empty agrees with empty
    CHECK(dice_overlap({1, 1, 0}, {1, 1, 0}) == 1.0);
    CHECK(dice_overlap({1, 0}, {0, 1}) == 0.0);
    CHECK(dice_overlap({1, 1, 0, 0}, {1, 0, 1, 0}) == 0.5);
    CHECK_THROWS_AS(dice_overlap({1}, {1, 0}), DimensionError);

    SUBCASE("logits binarize at probability one half") {
        auto logits = Tensor<double>::from_values({4}, {2.5, -0.1, 0.3, -4.0});
        auto label = Tensor<double>::from_values({4}, {1, 0, 1, 0});
        CHECK(binarize_logits(logits) == std::vector<uint8_t>{1, 0, 1, 0});
        CHECK(dice_metric(logits, label) == 1.0);
        auto flipped = Tensor<double>::from_values({4}, {-2.5, 0.1, -0.3, 4.0});
        CHECK(dice_metric(flipped, label) == 0.0);
        CHECK_THROWS_AS(dice_metric(logits, Tensor<double>::from_values({4}, {1, 0, 2, 0})),
                        DataError);
    }
}

TEST_CASE("encoder transfer copies exactly the shared names") {
    auto pre = tiny_model<double>(ModelKind::Pretrain, {8, 8, 8}, 4);
    auto seg = tiny_model<double>(ModelKind::Segment, {8, 8, 8}, 77);

    auto copied = transfer_encoder(seg, pre.ps);
    std::set<std::string> expect;
    for (const auto& n : pre.ps.names())
        if (is_encoder_param(n)) expect.insert(n);
    CHECK(std::set<std::string>(copied.begin(), copied.end()) == expect);
    for (const auto& n : copied) CHECK(seg.ps.get(n).values() == pre.ps.get(n).values());

    // Decoder and head weights stayed put (different init seeds).
    CHECK(seg.ps.get("decoder.proj1.w").values() != pre.ps.get("decoder.proj1.w").values());

    SUBCASE("a source missing an encoder tensor is an error") {
        ParamStore<double> sparse_src;
        sparse_src.add("encoder.stem.conv.w", pre.ps.get("encoder.stem.conv.w"));
        CHECK_THROWS_WITH_AS(transfer_encoder(seg, sparse_src),
                             doctest::Contains("missing from source"), ConsistencyError);
    }
}

TEST_CASE("fine-tuning runs deterministically and learns") {
    std::vector<LabeledVolume> data{make_pair(41), make_pair(42)};

    FinetuneConfig cfg;
    cfg.crop = {8, 8, 8};
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.seed = 3;

    SUBCASE("identical seeds give bit-identical curves") {
        auto m1 = tiny_model<double>(ModelKind::Segment);
        auto m2 = tiny_model<double>(ModelKind::Segment);
        auto r1 = run_finetune(m1, data, cfg);
        auto r2 = run_finetune(m2, data, cfg);
        REQUIRE(r1.log.size() == 4);
        for (size_t i = 0; i < 4; ++i) {
            CHECK(r1.log[i].step == int64_t(i));
            CHECK(std::memcmp(&r1.log[i].loss, &r2.log[i].loss, sizeof(double)) == 0);
            CHECK(r1.log[i].dice >= 0.0);
            CHECK(r1.log[i].dice <= 1.0);
            CHECK(r1.log[i].lr == cosine_lr(int64_t(i), 4, cfg.lr, cfg.lr_min));
        }
        for (int64_t i = 0; i < m1.ps.size(); ++i)
            CHECK(bitwise_equal(m1.ps.tensors()[size_t(i)].values(),
                                m2.ps.tensors()[size_t(i)].values()));
    }
    SUBCASE("zero learning rate freezes the weights") {
        auto model = tiny_model<double>(ModelKind::Segment);
        std::vector<std::vector<double>> before;
        for (const auto& t : model.ps.tensors()) before.push_back(t.values());
        FinetuneConfig frozen = cfg;
        frozen.lr = 0.0;
        frozen.lr_min = 0.0;
        auto r = run_finetune(model, data, frozen);
        CHECK(r.log.size() == 4);
        for (int64_t i = 0; i < model.ps.size(); ++i)
            CHECK(bitwise_equal(model.ps.tensors()[size_t(i)].values(), before[size_t(i)]));
    }
    SUBCASE("a short run reduces the loss") {
        auto model = tiny_model<double>(ModelKind::Segment, {8, 8, 8}, 9);
        FinetuneConfig longer = cfg;
        longer.steps = 30;
        longer.batch_size = 1;
        longer.lr = 3e-3;
        longer.lr_min = 3e-4;
        auto r = run_finetune(model, data, longer);
        double head = 0, tail = 0;
        for (int i = 0; i < 5; ++i) head += r.log[size_t(i)].loss;
        for (int i = 25; i < 30; ++i) tail += r.log[size_t(i)].loss;
        CHECK(tail < head);
    }
    SUBCASE("input validation") {
        auto model = tiny_model<double>(ModelKind::Segment);
        CHECK_THROWS_AS(run_finetune(model, {}, cfg), DataError);
        auto pre = tiny_model<double>(ModelKind::Pretrain);
        CHECK_THROWS_WITH_AS(run_finetune(pre, data, cfg),
                             doctest::Contains("segmentation head"), UsageError);
        FinetuneConfig wrong = cfg;
        wrong.crop = {16, 16, 16};
        CHECK_THROWS_WITH_AS(run_finetune(model, data, wrong),
                             doctest::Contains("build crop"), ConfigError);
        auto bad = data;
        bad[0].label.shape = {8, 8, 8};
        bad[0].label.values.resize(512);
        CHECK_THROWS_WITH_AS(run_finetune(model, bad, cfg),
                             doctest::Contains("shape mismatch"), DataError);
    }
}

TEST_CASE("whole-volume evaluation scores crop-sized pairs") {
    auto model = tiny_model<double>(ModelKind::Segment, {16, 16, 16});
    std::vector<LabeledVolume> data{make_pair(51), make_pair(52)};
    const double d = evaluate_dice(model, data);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);

    auto small = tiny_model<double>(ModelKind::Segment, {8, 8, 8});
    CHECK_THROWS_WITH_AS(evaluate_dice(small, data), doctest::Contains("model crop"),
                         DataError);
    CHECK_THROWS_AS(evaluate_dice(model, {}), DataError);
}

}  // TEST_SUITE
