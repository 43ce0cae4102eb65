#pragma once

// Self-verification suites behind the `verify` subcommand. Each check
// re-derives a core guarantee from scratch — sparse/dense agreement against
// the brute-force oracle, analytic/numeric gradient agreement, mask-pyramid
// replication (with a positive control that must be caught), and training
// reproducibility — and reports pass/fail plus a human-readable detail line
// in a machine-readable report.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "finetune.hpp"
#include "oracle_model.hpp"
#include "pipeline.hpp"

namespace smim {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct SuiteResult {
    std::string name;
    bool pass = true;
    std::vector<CheckResult> checks;
};

struct VerifyReport {
    bool pass = true;
    std::vector<SuiteResult> suites;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["pass"] = pass;
        j["suites"] = nlohmann::json::array();
        for (const auto& s : suites) {
            nlohmann::json js;
            js["name"] = s.name;
            js["pass"] = s.pass;
            js["checks"] = nlohmann::json::array();
            for (const auto& c : s.checks)
                js["checks"].push_back(
                    {{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
            j["suites"].push_back(std::move(js));
        }
        return j;
    }
};

inline const std::vector<std::string>& verify_suite_names() {
    static const std::vector<std::string> names{"sparse", "grad", "mask", "pipeline"};
    return names;
}

namespace verify_detail {

// Runs one check, turning a returned detail string into a pass and any
// exception into a failure.
inline void run_check(SuiteResult& suite, const std::string& name,
                      const std::function<std::string()>& body) {
    CheckResult r;
    r.name = name;
    try {
        r.detail = body();
        r.pass = true;
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = e.what();
    }
    suite.pass = suite.pass && r.pass;
    suite.checks.push_back(std::move(r));
}

inline CnnConfig small_cnn(int64_t stages) {
    CnnConfig c;
    c.num_stages = stages;
    c.channels.clear();
    for (int64_t i = 0; i < stages; ++i) c.channels.push_back(2 << i);  // 2, 4, 8, ...
    c.blocks_per_stage = 1;
    c.norm_groups = 2;
    return c;
}

inline VitConfig small_vit() {
    VitConfig v;
    v.embed_dim = 4;
    v.depth = 1;
    v.heads = 2;
    v.mlp_ratio = 2;
    return v;
}

template <class T>
Model<T> small_model(ModelKind kind, std::array<int64_t, 3> crop, uint64_t seed = 0) {
    auto cnn = small_cnn(2);
    return build_model<T>(kind, cnn, small_vit(), mirrored_decoder(cnn), DecodeMode::Concat,
                          crop, seed);
}

inline Tensor<double> random_volume(const std::array<int64_t, 3>& e, Rng& rng) {
    auto v = Tensor<double>::zeros({1, e[0], e[1], e[2]});
    for (auto& x : v.values()) x = rng.uniform(0.0, 1.0);
    return v;
}

// Largest |sparse row - dense oracle value| across all stages.
inline double sparse_vs_oracle(const std::vector<SparseMap<double>>& got,
                               const std::vector<oracle::DenseFeature<double>>& ref) {
    if (got.size() != ref.size()) throw OracleError("stage count mismatch vs oracle");
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        if (got[i].channels != ref[i].channels || got[i].shape != ref[i].shape)
            throw OracleError("stage " + std::to_string(i + 1) + " layout mismatch vs oracle");
        const int64_t C = got[i].channels;
        const int64_t V = got[i].spatial_numel();
        for (int64_t r = 0; r < got[i].active_count(); ++r) {
            const int64_t v = got[i].coords[size_t(r)];
            for (int64_t c = 0; c < C; ++c)
                worst = std::max(worst, std::abs(got[i].rows.values()[size_t(r * C + c)] -
                                                 ref[i].values[size_t(c * V + v)]));
        }
    }
    return worst;
}

inline std::string fmt(double x) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << x;
    return os.str();
}

// --------------------------- sparse suite ---------------------------------

inline SuiteResult suite_sparse() {
    SuiteResult suite;
    suite.name = "sparse";

    run_check(suite, "encoder matches the brute-force dense reference", [] {
        double worst = 0.0;
        int runs = 0;
        for (int64_t stages : {2, 3}) {
            auto cfg = small_cnn(stages);
            const int64_t side = cfg.total_stride() * 2;  // junction 2x2x2
            for (double ratio : {0.25, 0.5, 0.75}) {
                Rng rng(uint64_t(stages * 100 + int(ratio * 100)));
                ParamStore<double> ps;
                init_cnn_params(ps, cfg, rng);
                auto junction = init_junction_mask({2, 2, 2}, ratio, 7 + uint64_t(runs));
                auto pyr = build_pyramid(junction, cfg.stage_strides(), {side, side, side});
                auto vol = random_volume({side, side, side}, rng);
                auto feats = encode_cnn(vol, pyr, ps, cfg);
                auto ref = oracle::dense_masked_forward(vol.values(), pyr, ps, cfg);
                worst = std::max(worst, sparse_vs_oracle(feats, ref));
                ++runs;
            }
        }
        if (worst > 1e-12)
            throw ConsistencyError("max |sparse - dense| = " + fmt(worst) + " > 1e-12");
        return std::to_string(runs) + " configurations, max |sparse - dense| = " + fmt(worst);
    });

    run_check(suite, "active sites are exactly preserved at every scale", [] {
        auto cfg = small_cnn(2);
        const int64_t side = cfg.total_stride() * 2;
        for (uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed + 500);
            ParamStore<double> ps;
            init_cnn_params(ps, cfg, rng);
            auto pyr = build_pyramid(init_junction_mask({2, 2, 2}, 0.5, seed),
                                     cfg.stage_strides(), {side, side, side});
            auto feats = encode_cnn(random_volume({side, side, side}, rng), pyr, ps, cfg);
            for (size_t i = 0; i < feats.size(); ++i) {
                const auto& mask = pyr.stage[i];
                if (feats[i].coords != mask.active_indices())
                    throw ConsistencyError("stage " + std::to_string(i + 1) +
                                           " active set changed (seed " +
                                           std::to_string(seed) + ")");
                auto dense = densify_zero(feats[i]);
                const int64_t V = feats[i].spatial_numel();
                for (int64_t v = 0; v < V; ++v) {
                    if (mask.bits[size_t(v)]) continue;
                    for (int64_t c = 0; c < feats[i].channels; ++c)
                        if (dense.values()[size_t(c * V + v)] != 0.0)
                            throw ConsistencyError("masked site " + std::to_string(v) +
                                                   " is nonzero at stage " +
                                                   std::to_string(i + 1));
                }
            }
        }
        return "10 seeds, all scales: nonzero sites == mask";
    });

    run_check(suite, "positive control: a plain dense convolution leaks past the mask", [] {
        Rng rng(42);
        const int64_t e = 8, V = e * e * e;
        auto junction = init_junction_mask({2, 2, 2}, 0.75, 3);
        auto voxel = upsample_mask(junction, 4);
        std::vector<double> x(size_t(V), 0.0);
        int64_t before = 0;
        for (int64_t v = 0; v < V; ++v)
            if (voxel.bits[size_t(v)]) {
                x[size_t(v)] = rng.uniform(0.5, 1.0);
                ++before;
            }
        std::vector<double> w(27, 1.0), b(1, 0.0);
        auto y = oracle::conv3d_ref(x, int64_t(1), int64_t(1), e, e, e, w, int64_t(1),
                                    int64_t(3), b, int64_t(1), int64_t(1));
        int64_t after = 0;
        for (double v : y)
            if (v != 0.0) ++after;
        if (after <= before)
            throw ConsistencyError("dense conv footprint did not grow (" +
                                   std::to_string(before) + " -> " + std::to_string(after) +
                                   "); the preservation check would be blind");
        return "footprint " + std::to_string(before) + " -> " + std::to_string(after) +
               " sites: an unconstrained conv is detectable";
    });

    return suite;
}

// ---------------------------- grad suite -----------------------------------

inline SuiteResult suite_grad() {
    SuiteResult suite;
    suite.name = "grad";

    run_check(suite, "reconstruction loss gradients match finite differences", [] {
        auto model = small_model<double>(ModelKind::Pretrain, {8, 8, 8}, 11);
        auto [vol, label] = generate_phantom(11, {16, 16, 16});
        auto crop = preprocess(vol, {8, 8, 8}, CropMode::Center);
        auto pyr = build_pyramid(init_junction_mask(model.junction, 0.5, 2),
                                 model.cnn.stage_strides(), model.crop);
        auto tf = normalize_targets<double>(crop, pyr.stage.back());
        auto fwd = [&] {
            auto pred = model_forward(model, volume_to_tensor<double>(crop), pyr, true);
            return masked_mse_loss(reshape(pred, {512}), tf);
        };

        double worst = 0.0;
        int64_t coords = 0;
        for (const char* name : {"encoder.stem.conv.b", "mask_embed.scale1", "vit.patch.b",
                                 "decoder.proj2.b", "recon.head.w", "recon.head.b"}) {
            auto p = model.ps.get(name);
            p.set_requires_grad(true);
            p.zero_grad();
            auto loss = fwd();
            backward(loss);
            auto analytic = p.grad();
            auto eval = [&] { return fwd().item(); };
            auto fd = oracle::finite_diff_grad<double>(eval, p, 1e-5);
            for (size_t i = 0; i < fd.size(); ++i) {
                const double denom =
                    std::max({1.0, std::abs(analytic[i]), std::abs(fd[i])});
                worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
                ++coords;
            }
            p.zero_grad();
            p.set_requires_grad(false);
        }
        if (worst > 1e-4)
            throw ConsistencyError("max relative gradient error " + fmt(worst) + " > 1e-4");
        return std::to_string(coords) + " coordinates, max relative error " + fmt(worst);
    });

    run_check(suite, "segmentation loss gradients match finite differences", [] {
        Rng rng(9);
        const int64_t n = 64;
        auto logits = Tensor<double>::from_values(
            {n}, [&] {
                std::vector<double> v(static_cast<size_t>(n));
                for (auto& x : v) x = rng.uniform(-2.0, 2.0);
                return v;
            }());
        std::vector<double> lab(static_cast<size_t>(n));
        for (auto& y : lab) y = rng.uniform() < 0.4 ? 1.0 : 0.0;
        auto label = Tensor<double>::from_values({n}, std::move(lab));

        logits.set_requires_grad(true);
        auto fwd = [&] { return seg_loss(logits, label); };
        auto loss = fwd();
        backward(loss);
        auto analytic = logits.grad();
        auto eval = [&] { return fwd().item(); };
        auto fd = oracle::finite_diff_grad<double>(eval, logits, 1e-6);
        double worst = 0.0;
        for (size_t i = 0; i < fd.size(); ++i) {
            const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(fd[i])});
            worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
        }
        if (worst > 1e-4)
            throw ConsistencyError("max relative gradient error " + fmt(worst) + " > 1e-4");
        return std::to_string(n) + " logits, max relative error " + fmt(worst);
    });

    return suite;
}

// ---------------------------- mask suite -----------------------------------

inline SuiteResult suite_mask(bool bottom_up) {
    SuiteResult suite;
    suite.name = "mask";
    const std::vector<int64_t> strides{2, 2, 2};
    const std::array<int64_t, 3> input{16, 16, 16};

    if (bottom_up) {
        run_check(suite, "replicated pyramids satisfy the cross-scale invariant", [&] {
            for (uint64_t seed = 0; seed < 25; ++seed) {
                auto pyr = build_pyramid(init_junction_mask({2, 2, 2}, 0.5, seed), strides,
                                         input);
                check_pyramid(pyr);  // throws on violation
            }
            return "25 seeds: OR-downsample of every level reproduces the next";
        });
        run_check(suite, "voxel mask replicates the junction exactly", [&] {
            for (uint64_t seed = 0; seed < 10; ++seed) {
                auto junction = init_junction_mask({2, 2, 2}, 0.75, seed);
                auto pyr = build_pyramid(junction, strides, input);
                auto expect = upsample_mask(junction, 8);
                if (!(pyr.voxel == expect))
                    throw ConsistencyError("voxel mask diverges from the junction at seed " +
                                           std::to_string(seed));
            }
            return "10 seeds: voxel level is a pure replication of the junction";
        });
        run_check(suite, "positive control: independently drawn masks are caught", [&] {
            int caught = 0;
            for (uint64_t seed = 0; seed < 25; ++seed) {
                auto pyr = build_unlinked_pyramid(input, strides, 0.5, seed);
                try {
                    check_pyramid(pyr);
                } catch (const ConsistencyError&) {
                    ++caught;
                }
            }
            if (caught != 25)
                throw ConsistencyError("only " + std::to_string(caught) +
                                       "/25 unlinked pyramids were flagged; the consistency "
                                       "check is blind");
            return "25/25 unlinked pyramids correctly rejected";
        });
    } else {
        // Deliberately runs the invariant on per-scale independent masks: this
        // is expected to fail, demonstrating the check has teeth.
        run_check(suite, "independently drawn masks satisfy the cross-scale invariant", [&] {
            for (uint64_t seed = 0; seed < 25; ++seed)
                check_pyramid(build_unlinked_pyramid(input, strides, 0.5, seed));
            return "25 seeds passed (unexpected for unlinked masks)";
        });
    }

    return suite;
}

// --------------------------- pipeline suite --------------------------------

inline SuiteResult suite_pipeline() {
    SuiteResult suite;
    suite.name = "pipeline";

    run_check(suite, "learning-rate schedule hits its endpoints", [] {
        const double hi = 1e-4, lo = 1e-6;
        if (cosine_lr(0, 100, hi, lo) != hi) throw ConsistencyError("start != max");
        if (std::abs(cosine_lr(100, 100, hi, lo) - lo) > 1e-18)
            throw ConsistencyError("end != min");
        if (std::abs(cosine_lr(50, 100, hi, lo) - 0.5 * (hi + lo)) > 1e-18)
            throw ConsistencyError("midpoint != mean of extremes");
        return "start, midpoint, and end match the closed form";
    });

    run_check(suite, "masked loss ignores visible voxels bit-for-bit", [] {
        auto [vol, label] = generate_phantom(21, {16, 16, 16});
        auto crop = preprocess(vol, {8, 8, 8}, CropMode::Center);
        auto junction = init_junction_mask({2, 2, 2}, 0.5, 9);
        auto tf = normalize_targets<double>(crop, junction);
        Rng rng(77);
        std::vector<double> base(512);
        for (auto& x : base) x = rng.gaussian();
        const double ref =
            masked_mse_loss(Tensor<double>::from_values({512}, std::vector<double>(base)), tf)
                .item();
        for (int trial = 0; trial < 10; ++trial) {
            auto pert = base;
            for (size_t v = 0; v < 512; ++v)
                if (!tf.in_loss[v]) pert[v] += rng.uniform(-1e6, 1e6);
            const double got =
                masked_mse_loss(Tensor<double>::from_values({512}, std::move(pert)), tf)
                    .item();
            if (std::memcmp(&got, &ref, sizeof(double)) != 0)
                throw ConsistencyError("loss changed after perturbing visible voxels");
        }
        return "10 perturbation trials: loss bits unchanged";
    });

    run_check(suite, "two identically seeded runs are bit-identical", [] {
        auto [vol, label] = generate_phantom(31, {16, 16, 16});
        std::vector<Volume3D> vols{vol};
        TrainConfig cfg;
        cfg.crop = {8, 8, 8};
        cfg.steps = 2;
        cfg.batch_size = 1;
        cfg.mask_ratio = 0.5;
        cfg.seed = 4;
        auto m1 = small_model<double>(ModelKind::Pretrain, cfg.crop, 1);
        auto m2 = small_model<double>(ModelKind::Pretrain, cfg.crop, 1);
        auto r1 = run_pretrain(m1, vols, cfg);
        auto r2 = run_pretrain(m2, vols, cfg);
        for (size_t i = 0; i < r1.log.size(); ++i)
            if (std::memcmp(&r1.log[i].loss, &r2.log[i].loss, sizeof(double)) != 0)
                throw ConsistencyError("loss curves diverge at step " + std::to_string(i));
        for (int64_t i = 0; i < m1.ps.size(); ++i) {
            const auto& a = m1.ps.tensors()[size_t(i)].values();
            const auto& b = m2.ps.tensors()[size_t(i)].values();
            if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0)
                throw ConsistencyError("weights diverge in '" + m1.ps.names()[size_t(i)] +
                                       "'");
        }
        return "2 steps, every loss bit and weight bit identical";
    });

    run_check(suite, "checkpoints restore a bit-identical forward pass", [] {
        namespace fs = std::filesystem;
        auto model = small_model<double>(ModelKind::Pretrain, {8, 8, 8}, 6);
        const auto path =
            (fs::temp_directory_path() / "smim_verify_roundtrip.ckpt").string();
        save_checkpoint<double>(path, model.ps, nullptr, 1, {});
        auto loaded = load_checkpoint<double>(path);
        fs::remove(path);
        auto restored = small_model<double>(ModelKind::Pretrain, {8, 8, 8}, 999);
        restored.ps = loaded.as_store();
        auto [vol, label] = generate_phantom(41, {16, 16, 16});
        auto crop = preprocess(vol, {8, 8, 8}, CropMode::Center);
        auto pyr = build_pyramid(init_junction_mask({2, 2, 2}, 0.5, 3),
                                 model.cnn.stage_strides(), model.crop);
        auto a = model_forward(model, volume_to_tensor<double>(crop), pyr, true);
        auto b = model_forward(restored, volume_to_tensor<double>(crop), pyr, true);
        if (std::memcmp(a.values().data(), b.values().data(),
                        a.values().size() * sizeof(double)) != 0)
            throw ConsistencyError("forward pass differs after a save/load round trip");
        return "prediction bits identical after save -> load -> forward";
    });

    return suite;
}

}  // namespace verify_detail

// `suite`: one of "all", "sparse", "grad", "mask", "pipeline". `bottom_up`
// selects the mask suite's fixture: replicated pyramids must pass the
// invariant, unlinked ones must be caught violating it.
inline VerifyReport run_verify(const std::string& suite, bool bottom_up = true) {
    bool known = suite == "all";
    for (const auto& n : verify_suite_names()) known = known || suite == n;
    if (!known)
        throw UsageError("verify: unknown suite '" + suite +
                         "' (expected all, sparse, grad, mask, or pipeline)");

    VerifyReport report;
    if (suite == "all" || suite == "sparse")
        report.suites.push_back(verify_detail::suite_sparse());
    if (suite == "all" || suite == "grad") report.suites.push_back(verify_detail::suite_grad());
    if (suite == "all" || suite == "mask")
        report.suites.push_back(verify_detail::suite_mask(bottom_up));
    if (suite == "all" || suite == "pipeline")
        report.suites.push_back(verify_detail::suite_pipeline());
    for (const auto& s : report.suites) report.pass = report.pass && s.pass;
    return report;
}

}  // namespace smim
