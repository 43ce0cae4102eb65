#pragma once

// Masked-reconstruction pretraining: model assembly (sparse CNN + transformer
// + dense decoder + head), per-patch normalized targets, masked MSE, AdamW
// with cosine annealing, and the step loop. A producer thread preprocesses
// upcoming batches on independent buffers and hands them to the trainer
// through a bounded queue; every random draw is derived from (seed, step,
// sample), so runs are bit-reproducible regardless of thread timing.

#include <array>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "decoder.hpp"
#include "encoder_cnn.hpp"
#include "encoder_vit.hpp"
#include "error.hpp"
#include "mask.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "sparse.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace smim {

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

enum class ModelKind { Pretrain, Segment };

inline DecoderConfig mirrored_decoder(const CnnConfig& cnn) {
    DecoderConfig dec;
    dec.proj_widths = cnn.channels;
    dec.fuse_widths.assign(cnn.channels.begin(), cnn.channels.end() - 1);
    dec.up_factors.assign(size_t(cnn.num_stages - 1), 2);
    dec.norm_groups = cnn.norm_groups;
    return dec;
}

template <class T>
struct Model {
    ModelKind kind = ModelKind::Pretrain;
    CnnConfig cnn;
    VitConfig vit;
    DecoderConfig dec;
    DecodeMode mode = DecodeMode::Concat;
    std::array<int64_t, 3> crop{0, 0, 0};
    std::array<int64_t, 3> junction{0, 0, 0};
    ParamStore<T> ps;

    const char* head_name() const {
        return kind == ModelKind::Pretrain ? "recon.head" : "seg.head";
    }
};

template <class T>
Model<T> build_model(ModelKind kind, const CnnConfig& cnn, const VitConfig& vit,
                     const DecoderConfig& dec, DecodeMode mode,
                     const std::array<int64_t, 3>& crop, uint64_t init_seed) {
    cnn.validate();
    vit.validate();
    dec.validate(mode);
    if (int64_t(dec.proj_widths.size()) != cnn.num_stages)
        throw ConfigError("build_model: decoder has " + std::to_string(dec.proj_widths.size()) +
                          " scales, encoder has " + std::to_string(cnn.num_stages));
    Model<T> m;
    m.kind = kind;
    m.cnn = cnn;
    m.vit = vit;
    m.dec = dec;
    m.mode = mode;
    m.crop = crop;
    const int64_t stride = cnn.total_stride();
    for (int axis = 0; axis < 3; ++axis) {
        if (crop[size_t(axis)] % stride)
            throw ConfigError("build_model: crop extent " + std::to_string(crop[size_t(axis)]) +
                              " not divisible by cumulative stride " + std::to_string(stride) +
                              " on axis " + std::to_string(axis));
        m.junction[size_t(axis)] = crop[size_t(axis)] / stride;
    }

    Rng rng(Rng::derive(init_seed, 7));
    init_cnn_params(m.ps, cnn, rng);
    init_vit_params(m.ps, vit, cnn.channels.back(), m.junction, rng);
    if (kind == ModelKind::Pretrain)
        for (int64_t i = 1; i <= cnn.num_stages; ++i)
            m.ps.add("mask_embed.scale" + std::to_string(i),
                     init_gaussian_flat<T>({cnn.channels[size_t(i - 1)]}, 0.02, rng));
    init_decoder_params(m.ps, cnn.channels, dec, mode, rng);
    init_head_params<T>(m.ps, m.head_name(), dec.decode_width(1), 1, rng);
    return m;
}

// True for every parameter the fine-tuning path inherits from pretraining:
// the hybrid encoder only — mask embeddings, decoder, and heads stay out.
inline bool is_encoder_param(const std::string& name) {
    return name.rfind("encoder.", 0) == 0 || name.rfind("vit.", 0) == 0;
}

template <class T>
Tensor<T> volume_to_tensor(const Volume3D& v) {
    std::vector<T> vals(v.values.begin(), v.values.end());
    return Tensor<T>::from_values({1, v.shape[0], v.shape[1], v.shape[2]}, std::move(vals));
}

struct ForwardStats {
    VitStats vit;
    std::vector<int64_t> active_per_stage;
};

// Full forward pass: sparse encoding, transformer over kept tokens, per-scale
// densification, hierarchical decode, head. With an all-active pyramid and
// `use_mask_embeddings == false` this is the dense path used for
// fine-tuning: dense input is the ratio-0 special case of sparse input.
template <class T>
Tensor<T> model_forward(const Model<T>& m, Tensor<T> volume, const MaskPyramid& pyr,
                        bool use_mask_embeddings, bool strict_pyramid = true,
                        ForwardStats* stats = nullptr) {
    auto feats = encode_cnn(volume, pyr, m.ps, m.cnn, strict_pyramid);
    const MaskGrid& mn = pyr.stage.back();
    auto seq = patchify(feats.back(), mn, m.ps);
    seq = vit_encode(seq, m.ps, m.vit, stats ? &stats->vit : nullptr);
    auto vit_sn = unpatchify(seq, mn, m.cnn.channels.back(), m.ps);

    std::vector<Tensor<T>> dense;
    dense.reserve(feats.size());
    for (int64_t i = 0; i < m.cnn.num_stages; ++i) {
        const SparseMap<T>& s = (i + 1 == m.cnn.num_stages) ? vit_sn : feats[size_t(i)];
        if (stats) stats->active_per_stage.push_back(s.active_count());
        Tensor<T> d;
        if (use_mask_embeddings) {
            if (m.kind != ModelKind::Pretrain)
                throw UsageError("model_forward: this model has no mask embeddings");
            d = densify_with_mask_embedding(
                s, m.ps.get("mask_embed.scale" + std::to_string(i + 1)));
        } else {
            d = densify_zero(s);
        }
        dense.push_back(reshape(d, {1, s.channels, s.shape[0], s.shape[1], s.shape[2]}));
    }
    auto d1 = decode(dense, m.ps, m.dec, m.mode);
    return apply_head(d1, m.ps, m.head_name(), m.cnn.stem_stride);
}

// ---------------------------------------------------------------------------
// Reconstruction targets and loss
// ---------------------------------------------------------------------------

inline constexpr double kTargetEps = 1e-6;

template <class T>
struct TargetField {
    Tensor<T> targets;             // [V], zero outside masked blocks; constant
    std::vector<uint8_t> in_loss;  // 1 = voxel of a masked junction block
    std::vector<T> block_mean, block_std;  // per junction cell (masked only)
    int64_t masked_voxels = 0;
};

// Per masked junction block: target = (x - mean) / (std + eps), statistics
// over that block only. Visible blocks carry no target.
template <class T>
TargetField<T> normalize_targets(const Volume3D& vol, const MaskGrid& junction) {
    std::array<int64_t, 3> block{};
    for (int axis = 0; axis < 3; ++axis) {
        if (vol.shape[size_t(axis)] % junction.shape[size_t(axis)])
            throw DimensionError("normalize_targets: volume extent " +
                                 std::to_string(vol.shape[size_t(axis)]) +
                                 " not divisible into " +
                                 std::to_string(junction.shape[size_t(axis)]) +
                                 " junction cells on axis " + std::to_string(axis));
        block[size_t(axis)] = vol.shape[size_t(axis)] / junction.shape[size_t(axis)];
    }
    const int64_t V = vol.numel();
    TargetField<T> tf;
    tf.targets = Tensor<T>::zeros({V});
    tf.in_loss.assign(size_t(V), 0);
    tf.block_mean.assign(size_t(junction.numel()), T(0));
    tf.block_std.assign(size_t(junction.numel()), T(0));

    const int64_t bvox = block[0] * block[1] * block[2];
    for (int64_t jd = 0; jd < junction.shape[0]; ++jd)
        for (int64_t jh = 0; jh < junction.shape[1]; ++jh)
            for (int64_t jw = 0; jw < junction.shape[2]; ++jw) {
                const int64_t j = (jd * junction.shape[1] + jh) * junction.shape[2] + jw;
                if (junction.bits[size_t(j)]) continue;  // visible: no target
                T mean = 0;
                for (int64_t d = 0; d < block[0]; ++d)
                    for (int64_t h = 0; h < block[1]; ++h)
                        for (int64_t w = 0; w < block[2]; ++w)
                            mean += T(vol.at(jd * block[0] + d, jh * block[1] + h,
                                             jw * block[2] + w));
                mean /= T(bvox);
                T var = 0;
                for (int64_t d = 0; d < block[0]; ++d)
                    for (int64_t h = 0; h < block[1]; ++h)
                        for (int64_t w = 0; w < block[2]; ++w) {
                            const T x = T(vol.at(jd * block[0] + d, jh * block[1] + h,
                                                 jw * block[2] + w));
                            var += (x - mean) * (x - mean);
                        }
                var /= T(bvox);
                const T sd = std::sqrt(var);
                tf.block_mean[size_t(j)] = mean;
                tf.block_std[size_t(j)] = sd;
                for (int64_t d = 0; d < block[0]; ++d)
                    for (int64_t h = 0; h < block[1]; ++h)
                        for (int64_t w = 0; w < block[2]; ++w) {
                            const int64_t vd = jd * block[0] + d;
                            const int64_t vh = jh * block[1] + h;
                            const int64_t vw = jw * block[2] + w;
                            const int64_t v = (vd * vol.shape[1] + vh) * vol.shape[2] + vw;
                            const T x = T(vol.at(vd, vh, vw));
                            tf.targets.values()[size_t(v)] = (x - mean) / (sd + T(kTargetEps));
                            tf.in_loss[size_t(v)] = 1;
                        }
                tf.masked_voxels += bvox;
            }
    return tf;
}

// Mean squared error over masked voxels only. Visible voxels are multiplied
// by an exact zero, so perturbing them cannot change the loss bit.
template <class T>
Tensor<T> masked_mse_loss(Tensor<T> pred_flat, const TargetField<T>& tf) {
    if (tf.masked_voxels == 0)
        throw ConsistencyError("masked_mse_loss: no masked voxels to average over");
    if (pred_flat.numel() != tf.targets.numel())
        throw DimensionError("masked_mse_loss: prediction has " +
                             std::to_string(pred_flat.numel()) + " voxels, targets " +
                             std::to_string(tf.targets.numel()));
    std::vector<T> mask_vals(tf.in_loss.begin(), tf.in_loss.end());
    const int64_t n = int64_t(mask_vals.size());
    auto mask = Tensor<T>::from_values({n}, std::move(mask_vals));
    auto diff = mul(sub(pred_flat, tf.targets), mask);
    return scale(sum_all(mul(diff, diff)), T(1) / T(tf.masked_voxels));
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

template <class T>
void init_opt_state(OptState<T>& st, const ParamStore<T>& ps) {
    st.m.clear();
    st.v.clear();
    st.step = 0;
    for (const auto& t : ps.tensors()) {
        st.m.emplace_back(t.values().size(), T(0));
        st.v.emplace_back(t.values().size(), T(0));
    }
}

// Decoupled-weight-decay Adam. Parameters with no gradient this step see a
// zero gradient (their moments decay; weight decay still applies).
template <class T>
void adamw_step(ParamStore<T>& ps, OptState<T>& st, double lr, const AdamWConfig& cfg) {
    if (int64_t(st.m.size()) != ps.size())
        throw ConsistencyError("adamw_step: state covers " + std::to_string(st.m.size()) +
                               " tensors, store has " + std::to_string(ps.size()));
    st.step += 1;
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    const T bc1 = T(1) - T(std::pow(cfg.beta1, double(st.step)));
    const T bc2 = T(1) - T(std::pow(cfg.beta2, double(st.step)));
    for (int64_t i = 0; i < ps.size(); ++i) {
        Tensor<T> p = ps.tensors()[size_t(i)];
        auto& pv = p.values();
        auto& m = st.m[size_t(i)];
        auto& v = st.v[size_t(i)];
        const bool has_grad = p.has_grad();
        const auto* g = has_grad ? p.grad().data() : nullptr;
        for (size_t j = 0; j < pv.size(); ++j) {
            const T gj = has_grad ? g[j] : T(0);
            if (!std::isfinite(double(gj)))
                throw TrainingError("non-finite gradient in '" + ps.names()[size_t(i)] +
                                    "' element " + std::to_string(j));
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            pv[j] -= T(lr) * (mhat / (std::sqrt(vhat) + T(cfg.eps)) +
                              T(cfg.weight_decay) * pv[j]);
        }
    }
}

inline double cosine_lr(int64_t step, int64_t total, double lr_max, double lr_min) {
    if (total < 1) throw UsageError("cosine_lr: total steps must be positive");
    const double t = double(step) / double(total);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    double mask_ratio = 0.75;
    double lr = 1e-4;
    double lr_min = 1e-6;
    AdamWConfig adamw;
    int64_t steps = 200;
    int64_t batch_size = 2;
    std::array<int64_t, 3> crop{32, 32, 32};
    uint64_t seed = 0;
    std::string precision = "f64";
    bool bottom_up = true;

    // Full-scale profile kept for documentation: 96^3 crops, batch 8. A
    // 4-stage stride-2 encoder with a stride-2 stem takes 96 -> 6 at the
    // junction.
    static TrainConfig paper_scale() {
        TrainConfig c;
        c.crop = {96, 96, 96};
        c.batch_size = 8;
        c.steps = 100;
        return c;
    }

    void validate(const CnnConfig& cnn) const {
        if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
            throw ConfigError("train config: mask ratio " + std::to_string(mask_ratio) +
                              " outside [0,1)");
        if (steps < 1 || batch_size < 1)
            throw ConfigError("train config: steps and batch size must be positive");
        if (lr < 0 || lr_min < 0 || lr_min > lr)
            throw ConfigError("train config: learning-rate range is invalid");
        if (precision != "f32" && precision != "f64")
            throw ConfigError("train config: precision must be f32 or f64, got '" + precision +
                              "'");
        const int64_t stride = cnn.total_stride();
        int64_t cells = 1;
        for (int axis = 0; axis < 3; ++axis) {
            if (crop[size_t(axis)] % stride)
                throw ConfigError("train config: crop extent " +
                                  std::to_string(crop[size_t(axis)]) +
                                  " not divisible by cumulative stride " +
                                  std::to_string(stride) + " on axis " + std::to_string(axis));
            cells *= crop[size_t(axis)] / stride;
        }
        if (cells < 2)
            throw ConfigError("train config: junction grid has " + std::to_string(cells) +
                              " cell(s); masking needs at least 2");
    }

    nlohmann::json to_json() const {
        return {{"mask_ratio", mask_ratio},
                {"lr", lr},
                {"lr_min", lr_min},
                {"weight_decay", adamw.weight_decay},
                {"beta1", adamw.beta1},
                {"beta2", adamw.beta2},
                {"adam_eps", adamw.eps},
                {"steps", steps},
                {"batch_size", batch_size},
                {"crop", {crop[0], crop[1], crop[2]}},
                {"seed", seed},
                {"precision", precision},
                {"bottom_up", bottom_up}};
    }
};

struct LossRecord {
    int64_t step = 0;
    double lr = 0;
    double loss = 0;
    int64_t masked_voxels = 0;
    uint64_t seed = 0;
};

// Bounded single-producer single-consumer handoff.
template <class Item>
class BoundedQueue {
public:
    explicit BoundedQueue(size_t cap) : cap_(cap) {}

    void push(Item item) {
        std::unique_lock lk(mu_);
        cv_space_.wait(lk, [&] { return items_.size() < cap_ || closed_; });
        if (closed_) return;
        items_.push_back(std::move(item));
        cv_data_.notify_one();
    }

    std::optional<Item> pop() {
        std::unique_lock lk(mu_);
        cv_data_.wait(lk, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return std::nullopt;
        Item item = std::move(items_.front());
        items_.pop_front();
        cv_space_.notify_one();
        return item;
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        cv_data_.notify_all();
        cv_space_.notify_all();
    }

private:
    size_t cap_;
    std::mutex mu_;
    std::condition_variable cv_data_, cv_space_;
    std::deque<Item> items_;
    bool closed_ = false;
};

namespace detail {

struct CropBatch {
    int64_t step = 0;
    std::vector<Volume3D> crops;
};

// Seed streams: all draws are pure functions of (config seed, step, sample).
inline uint64_t volume_pick_seed(uint64_t seed, int64_t idx) {
    return Rng::derive(seed, 0x300000 + uint64_t(idx));
}
inline uint64_t crop_seed(uint64_t seed, int64_t idx) {
    return Rng::derive(seed, 0x100000 + uint64_t(idx));
}
inline uint64_t mask_seed(uint64_t seed, int64_t idx) {
    return Rng::derive(seed, 0x200000 + uint64_t(idx));
}

}  // namespace detail

template <class T>
struct PretrainOutput {
    std::vector<LossRecord> log;
    OptState<T> opt;
};

template <class T>
PretrainOutput<T> run_pretrain(Model<T>& model, const std::vector<Volume3D>& volumes,
                               const TrainConfig& cfg,
                               const std::function<void(const LossRecord&)>& on_step = {}) {
    cfg.validate(model.cnn);
    if (model.kind != ModelKind::Pretrain)
        throw UsageError("run_pretrain: model was built without the reconstruction head");
    if (cfg.crop != model.crop)
        throw ConfigError("run_pretrain: config crop does not match the model's build crop");
    if (volumes.empty()) throw DataError("run_pretrain: no volumes");
    for (const auto& v : volumes)
        for (int axis = 0; axis < 3; ++axis)
            if (v.shape[size_t(axis)] < cfg.crop[size_t(axis)])
                throw DataError("run_pretrain: volume '" + v.provenance +
                                "' is smaller than the crop on axis " + std::to_string(axis));

    const auto strides = model.cnn.stage_strides();
    const int64_t V = cfg.crop[0] * cfg.crop[1] * cfg.crop[2];

    BoundedQueue<detail::CropBatch> queue(2);
    std::exception_ptr producer_error;
    std::thread producer([&] {
        try {
            for (int64_t step = 0; step < cfg.steps; ++step) {
                detail::CropBatch batch;
                batch.step = step;
                for (int64_t b = 0; b < cfg.batch_size; ++b) {
                    const int64_t idx = step * cfg.batch_size + b;
                    Rng pick(detail::volume_pick_seed(cfg.seed, idx));
                    const auto& vol = volumes[size_t(pick.uniform_int(uint64_t(volumes.size())))];
                    Rng crng(detail::crop_seed(cfg.seed, idx));
                    batch.crops.push_back(preprocess(vol, cfg.crop, CropMode::Random, &crng));
                }
                queue.push(std::move(batch));
            }
        } catch (...) {
            producer_error = std::current_exception();
        }
        queue.close();
    });

    PretrainOutput<T> out;
    init_opt_state(out.opt, model.ps);
    try {
        for (int64_t step = 0; step < cfg.steps; ++step) {
            auto batch = queue.pop();
            if (!batch) {
                if (producer_error) std::rethrow_exception(producer_error);
                throw TrainingError("step " + std::to_string(step) +
                                    ": batch producer stopped early");
            }
            const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
            try {
                model.ps.zero_grad();
                Tensor<T> loss;
                int64_t masked_total = 0;
                for (int64_t b = 0; b < cfg.batch_size; ++b) {
                    const Volume3D& crop = batch->crops[size_t(b)];
                    const int64_t idx = step * cfg.batch_size + b;
                    const uint64_t mseed = detail::mask_seed(cfg.seed, idx);
                    MaskPyramid pyr =
                        cfg.bottom_up
                            ? build_pyramid(init_junction_mask(model.junction, cfg.mask_ratio,
                                                               mseed),
                                            strides, cfg.crop)
                            : build_unlinked_pyramid(cfg.crop, strides, cfg.mask_ratio, mseed);
                    auto tf = normalize_targets<T>(crop, pyr.stage.back());
                    masked_total += tf.masked_voxels;
                    auto pred = model_forward(model, volume_to_tensor<T>(crop), pyr,
                                              /*use_mask_embeddings=*/true,
                                              /*strict_pyramid=*/cfg.bottom_up);
                    auto sample_loss =
                        scale(masked_mse_loss(reshape(pred, {V}), tf), T(1) / T(cfg.batch_size));
                    loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
                }
                backward(loss);
                adamw_step(model.ps, out.opt, lr, cfg.adamw);
                LossRecord rec{step, lr, double(loss.item()), masked_total, cfg.seed};
                out.log.push_back(rec);
                if (on_step) on_step(rec);
            } catch (const Error& e) {
                throw TrainingError("step " + std::to_string(step) + ": " + e.what());
            }
        }
    } catch (...) {
        queue.close();
        producer.join();
        throw;
    }
    queue.close();
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);
    return out;
}

}  // namespace smim
