#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <smim/pipeline.hpp>

namespace fs = std::filesystem;
using namespace smim;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("smim_ckpt_test_" + std::to_string(std::rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

template <class T>
Model<T> make_model(uint64_t seed = 0) {
    CnnConfig cnn;
    cnn.num_stages = 2;
    cnn.channels = {2, 4};
    cnn.norm_groups = 2;
    VitConfig vit;
    vit.embed_dim = 4;
    vit.depth = 1;
    vit.heads = 2;
    vit.mlp_ratio = 2;
    return build_model<T>(ModelKind::Pretrain, cnn, vit, mirrored_decoder(cnn),
                          DecodeMode::Concat, {8, 8, 8}, seed);
}

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save and load round-trip every tensor and the optimizer") {
    TempDir tmp;
    auto model = make_model<double>(3);

    OptState<double> opt;
    init_opt_state(opt, model.ps);
    Rng rng(17);
    for (auto& mv : opt.m)
        for (auto& x : mv) x = rng.gaussian();
    for (auto& vv : opt.v)
        for (auto& x : vv) x = rng.uniform(0.0, 1.0);
    opt.step = 42;

    nlohmann::json cfg = {{"mask_ratio", 0.75}, {"steps", 200}};
    const auto path = tmp.file("model.ckpt");
    save_checkpoint(path, model.ps, &opt, 42, cfg);

    auto loaded = load_checkpoint<double>(path);
    CHECK(loaded.step == 42);
    CHECK(loaded.config == cfg);
    CHECK(loaded.names == model.ps.names());
    CHECK(loaded.opt.step == 42);
    REQUIRE(loaded.opt.m.size() == opt.m.size());
    for (size_t i = 0; i < opt.m.size(); ++i) {
        CHECK(loaded.opt.m[i] == opt.m[i]);
        CHECK(loaded.opt.v[i] == opt.v[i]);
    }
    for (int64_t i = 0; i < model.ps.size(); ++i) {
        const auto& name = model.ps.names()[size_t(i)];
        const auto& [shape, values] = loaded.params.at(name);
        CHECK(shape == model.ps.tensors()[size_t(i)].shape());
        CHECK(values == model.ps.tensors()[size_t(i)].values());
    }

    SUBCASE("a rebuilt store drives a bit-identical forward pass") {
        auto restored = make_model<double>(999);  // different init, same architecture
        restored.ps = loaded.as_store();
        auto [vol, label] = generate_phantom(8, {16, 16, 16});
        auto crop = preprocess(vol, {8, 8, 8}, CropMode::Center);
        auto pyr = build_pyramid(init_junction_mask({2, 2, 2}, 0.5, 5),
                                 model.cnn.stage_strides(), model.crop);
        auto a = model_forward(model, volume_to_tensor<double>(crop), pyr, true);
        auto b = model_forward(restored, volume_to_tensor<double>(crop), pyr, true);
        REQUIRE(a.numel() == b.numel());
        CHECK(std::memcmp(a.values().data(), b.values().data(),
                          a.values().size() * sizeof(double)) == 0);
    }
    SUBCASE("saving without optimizer state loads an empty one") {
        const auto p2 = tmp.file("bare.ckpt");
        save_checkpoint<double>(p2, model.ps, nullptr, 7, {});
        auto bare = load_checkpoint<double>(p2);
        CHECK(bare.opt.empty());
        CHECK(bare.step == 7);
        CHECK(bare.names == model.ps.names());
    }
}

TEST_CASE("checkpoint rejects corrupted files with structured errors") {
    TempDir tmp;
    auto model = make_model<double>();
    const auto path = tmp.file("model.ckpt");
    save_checkpoint<double>(path, model.ps, nullptr, 1, {});
    const auto good = read_bytes(path);

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint<double>(tmp.file("absent.ckpt")), IoError);
    }
    SUBCASE("header truncation") {
        write_bytes(path, {good.begin(), good.begin() + 6});
        CHECK_THROWS_WITH_AS(load_checkpoint<double>(path), doctest::Contains("header"),
                             FormatError);
    }
    SUBCASE("blob truncation") {
        write_bytes(path, {good.begin(), good.end() - 64});
        CHECK_THROWS_AS(load_checkpoint<double>(path), FormatError);
    }
    SUBCASE("bad magic") {
        auto bad = good;
        bad[0] = 'X';
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint<double>(path), doctest::Contains("magic"),
                             FormatError);
    }
    SUBCASE("unsupported version") {
        auto bad = good;
        bad[8] = 99;
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint<double>(path), doctest::Contains("not supported"),
                             FormatError);
    }
    SUBCASE("element-type mismatch") {
        CHECK_THROWS_WITH_AS(load_checkpoint<float>(path), doctest::Contains("f64"),
                             FormatError);
    }
    SUBCASE("manifest corruption") {
        auto bad = good;
        // First manifest byte lives right after magic + version + length.
        bad[8 + 4 + 8] = '!';
        write_bytes(path, bad);
        CHECK_THROWS_AS(load_checkpoint<double>(path), FormatError);
    }
}

TEST_CASE("float stores round-trip under their own element type") {
    TempDir tmp;
    auto model = make_model<float>(11);
    const auto path = tmp.file("f32.ckpt");
    save_checkpoint<float>(path, model.ps, nullptr, 3, {{"precision", "f32"}});
    auto loaded = load_checkpoint<float>(path);
    CHECK(loaded.names == model.ps.names());
    auto store = loaded.as_store();
    for (int64_t i = 0; i < model.ps.size(); ++i)
        CHECK(store.tensors()[size_t(i)].values() == model.ps.tensors()[size_t(i)].values());
}

TEST_CASE("encoder parameters transfer one-to-one between model kinds") {
    TempDir tmp;
    auto pre = make_model<double>(4);
    const auto path = tmp.file("pre.ckpt");
    save_checkpoint<double>(path, pre.ps, nullptr, 10, {});

    auto loaded = load_checkpoint<double>(path);
    auto src = loaded.as_store();

    CnnConfig cnn = pre.cnn;
    VitConfig vit = pre.vit;
    auto seg = build_model<double>(ModelKind::Segment, cnn, vit, mirrored_decoder(cnn),
                                   DecodeMode::Concat, {8, 8, 8}, 77);
    auto copied = seg.ps.load_filtered(src, is_encoder_param);

    std::set<std::string> expect;
    for (const auto& n : pre.ps.names())
        if (is_encoder_param(n)) expect.insert(n);
    CHECK(std::set<std::string>(copied.begin(), copied.end()) == expect);
    for (const auto& n : copied)
        CHECK(seg.ps.get(n).values() == pre.ps.get(n).values());
    // Mask embeddings and the reconstruction head never cross over.
    for (const auto& n : copied) {
        CHECK(n.rfind("mask_embed.", 0) != 0);
        CHECK(n.rfind("recon.", 0) != 0);
        CHECK(n.rfind("decoder.", 0) != 0);
    }
}

}  // TEST_SUITE
