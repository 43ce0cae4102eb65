#pragma once

// Segmentation fine-tuning. Dense inputs ride the sparse machinery as the
// ratio-0 special case (an all-active mask pyramid), the loss is binary
// cross-entropy plus a smoothed Dice term over sigmoid probabilities, and
// encoder weights can be transferred from a reconstruction checkpoint —
// mask embeddings and heads stay behind.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "pipeline.hpp"

namespace smim {

inline constexpr double kDiceSmoothing = 1e-5;

// All cells visible: ratio 0 draws nothing.
inline MaskPyramid full_pyramid(const std::array<int64_t, 3>& junction,
                                const std::vector<int64_t>& strides,
                                const std::array<int64_t, 3>& input_shape) {
    return build_pyramid(init_junction_mask(junction, 0.0, 0), strides, input_shape);
}

// Dense forward pass: identical arithmetic to the sparse path with every
// site active and no mask embeddings inserted.
template <class T>
Tensor<T> dense_encode(const Model<T>& m, Tensor<T> volume) {
    auto pyr = full_pyramid(m.junction, m.cnn.stage_strides(), m.crop);
    return model_forward(m, volume, pyr, /*use_mask_embeddings=*/false);
}

template <class T>
void check_binary_labels(const Tensor<T>& label, const char* op) {
    for (T y : label.values())
        if (y != T(0) && y != T(1))
            throw DataError(std::string(op) + ": labels must be 0 or 1, found " +
                            std::to_string(double(y)));
}

// Mean binary cross-entropy from logits, computed in the numerically stable
// form max(x,0) - x*y + log1p(exp(-|x|)). At logit 0 every voxel contributes
// exactly ln 2.
template <class T>
Tensor<T> bce_with_logits(Tensor<T> logits, Tensor<T> label) {
    check_same_shape(logits, label, "bce_with_logits");
    check_binary_labels(label, "bce_with_logits");
    const int64_t n = logits.numel();
    const T* x = logits.data();
    const T* y = label.data();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i)
        acc += std::max(x[i], T(0)) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
    auto out = Tensor<T>::scalar(acc / T(n));
    if (tape_active<T>({logits})) {
        Tape<T>::instance().record("bce_with_logits", {logits}, out,
                                   [logits, label, out, n]() mutable {
                                       const T go = out.grad()[0];
                                       auto& gx = logits.grad();
                                       const T* xv = logits.data();
                                       const T* yv = label.data();
                                       for (int64_t i = 0; i < n; ++i) {
                                           const T p = T(1) / (T(1) + std::exp(-xv[size_t(i)]));
                                           gx[size_t(i)] += go * (p - yv[size_t(i)]) / T(n);
                                       }
                                   });
    }
    return out;
}

// 1 - Dice over sigmoid probabilities, smoothed on both sides of the ratio
// so an empty prediction against an empty label costs nothing.
template <class T>
Tensor<T> dice_loss_with_logits(Tensor<T> logits, Tensor<T> label,
                                T smoothing = T(kDiceSmoothing)) {
    check_same_shape(logits, label, "dice_loss_with_logits");
    check_binary_labels(label, "dice_loss_with_logits");
    const int64_t n = logits.numel();
    const T* x = logits.data();
    const T* y = label.data();
    T inter = 0, psum = 0, ysum = 0;
    std::vector<T> probs(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const T p = T(1) / (T(1) + std::exp(-x[i]));
        probs[size_t(i)] = p;
        inter += p * y[i];
        psum += p;
        ysum += y[i];
    }
    const T denom = psum + ysum + smoothing;
    const T dice = (T(2) * inter + smoothing) / denom;
    auto out = Tensor<T>::scalar(T(1) - dice);
    if (tape_active<T>({logits})) {
        Tape<T>::instance().record(
            "dice_loss_with_logits", {logits}, out,
            [logits, label, out, probs = std::move(probs), inter, denom, smoothing,
             n]() mutable {
                const T go = out.grad()[0];
                auto& gx = logits.grad();
                const T* yv = label.data();
                const T num = T(2) * inter + smoothing;
                for (int64_t i = 0; i < n; ++i) {
                    const T p = probs[size_t(i)];
                    // d(1-dice)/dp = -(2*y*denom - num) / denom^2
                    const T ddice = (T(2) * yv[size_t(i)] * denom - num) / (denom * denom);
                    gx[size_t(i)] += go * (-ddice) * p * (T(1) - p);
                }
            });
    }
    return out;
}

template <class T>
Tensor<T> seg_loss(Tensor<T> logits, Tensor<T> label) {
    return add(bce_with_logits(logits, label), dice_loss_with_logits(logits, label));
}

// Hard Dice overlap between two binary fields; two empty fields agree
// perfectly.
inline double dice_overlap(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    if (a.size() != b.size())
        throw DimensionError("dice_overlap: " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + " voxels");
    int64_t inter = 0, asum = 0, bsum = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        asum += a[i] ? 1 : 0;
        bsum += b[i] ? 1 : 0;
    }
    if (asum + bsum == 0) return 1.0;
    return 2.0 * double(inter) / double(asum + bsum);
}

// Logit > 0 is probability > 0.5.
template <class T>
std::vector<uint8_t> binarize_logits(const Tensor<T>& logits) {
    std::vector<uint8_t> out(logits.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = logits.values()[i] > T(0) ? 1 : 0;
    return out;
}

template <class T>
double dice_metric(const Tensor<T>& logits, const Tensor<T>& label) {
    check_binary_labels(label, "dice_metric");
    if (logits.numel() != label.numel())
        throw DimensionError("dice_metric: " + std::to_string(logits.numel()) + " vs " +
                             std::to_string(label.numel()) + " voxels");
    std::vector<uint8_t> lab(label.values().size());
    for (size_t i = 0; i < lab.size(); ++i) lab[i] = label.values()[i] != T(0) ? 1 : 0;
    return dice_overlap(binarize_logits(logits), lab);
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

struct LabeledVolume {
    Volume3D image;
    Volume3D label;  // binary, same shape
};

struct FinetuneConfig {
    double lr = 1e-4;
    double lr_min = 1e-6;
    AdamWConfig adamw;
    int64_t steps = 500;
    int64_t batch_size = 1;
    std::array<int64_t, 3> crop{32, 32, 32};
    uint64_t seed = 0;
    std::string precision = "f64";

    void validate(const CnnConfig& cnn) const {
        TrainConfig proxy;
        proxy.lr = lr;
        proxy.lr_min = lr_min;
        proxy.adamw = adamw;
        proxy.steps = steps;
        proxy.batch_size = batch_size;
        proxy.crop = crop;
        proxy.seed = seed;
        proxy.precision = precision;
        proxy.validate(cnn);
    }

    nlohmann::json to_json() const {
        return {{"lr", lr},
                {"lr_min", lr_min},
                {"weight_decay", adamw.weight_decay},
                {"beta1", adamw.beta1},
                {"beta2", adamw.beta2},
                {"adam_eps", adamw.eps},
                {"steps", steps},
                {"batch_size", batch_size},
                {"crop", {crop[0], crop[1], crop[2]}},
                {"seed", seed},
                {"precision", precision}};
    }
};

struct FinetuneRecord {
    int64_t step = 0;
    double lr = 0;
    double loss = 0;
    double dice = 0;  // hard Dice of this batch's predictions
    uint64_t seed = 0;
};

// Copies every encoder tensor (sparse CNN + transformer) from a saved store
// into `model`, leaving decoder, heads, and any mask embeddings untouched.
// Returns the transferred names.
template <class T>
std::vector<std::string> transfer_encoder(Model<T>& model, const ParamStore<T>& src) {
    return model.ps.load_filtered(src, is_encoder_param);
}

template <class T>
struct FinetuneOutput {
    std::vector<FinetuneRecord> log;
    OptState<T> opt;
};

template <class T>
FinetuneOutput<T> run_finetune(Model<T>& model, const std::vector<LabeledVolume>& data,
                               const FinetuneConfig& cfg,
                               const std::function<void(const FinetuneRecord&)>& on_step = {}) {
    cfg.validate(model.cnn);
    if (model.kind != ModelKind::Segment)
        throw UsageError("run_finetune: model was built without the segmentation head");
    if (cfg.crop != model.crop)
        throw ConfigError("run_finetune: config crop does not match the model's build crop");
    if (data.empty()) throw DataError("run_finetune: no labeled volumes");
    for (const auto& pair : data) {
        if (pair.image.shape != pair.label.shape)
            throw DataError("run_finetune: image/label shape mismatch for '" +
                            pair.image.provenance + "'");
        for (int axis = 0; axis < 3; ++axis)
            if (pair.image.shape[size_t(axis)] < cfg.crop[size_t(axis)])
                throw DataError("run_finetune: volume '" + pair.image.provenance +
                                "' is smaller than the crop on axis " + std::to_string(axis));
    }

    const auto pyr = full_pyramid(model.junction, model.cnn.stage_strides(), model.crop);
    const int64_t V = cfg.crop[0] * cfg.crop[1] * cfg.crop[2];

    FinetuneOutput<T> out;
    init_opt_state(out.opt, model.ps);
    for (int64_t step = 0; step < cfg.steps; ++step) {
        const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        try {
            model.ps.zero_grad();
            Tensor<T> loss;
            double dice_sum = 0;
            for (int64_t b = 0; b < cfg.batch_size; ++b) {
                const int64_t idx = step * cfg.batch_size + b;
                Rng pick(detail::volume_pick_seed(cfg.seed, idx));
                const auto& pair = data[size_t(pick.uniform_int(uint64_t(data.size())))];
                Rng crng(detail::crop_seed(cfg.seed, idx));
                const auto origin =
                    crop_origin(pair.image.shape, cfg.crop, CropMode::Random, &crng);
                Volume3D img = crop_volume(pair.image, cfg.crop, origin);
                window_hu(img);  // same intensity mapping as the pretraining path
                Volume3D lab = crop_volume(pair.label, cfg.crop, origin);

                auto pred = model_forward(model, volume_to_tensor<T>(img), pyr,
                                          /*use_mask_embeddings=*/false);
                auto logits = reshape(pred, {V});
                auto label = volume_to_tensor<T>(lab);
                label = reshape(label, {V});
                auto sample_loss =
                    scale(seg_loss(logits, label), T(1) / T(cfg.batch_size));
                loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
                dice_sum += dice_metric(logits, label);
            }
            backward(loss);
            adamw_step(model.ps, out.opt, lr, cfg.adamw);
            FinetuneRecord rec{step, lr, double(loss.item()),
                               dice_sum / double(cfg.batch_size), cfg.seed};
            out.log.push_back(rec);
            if (on_step) on_step(rec);
        } catch (const Error& e) {
            throw TrainingError("step " + std::to_string(step) + ": " + e.what());
        }
    }
    return out;
}

// Hard Dice of the model's prediction over whole (crop-sized) labeled
// volumes — the number a training run is judged by.
template <class T>
double evaluate_dice(const Model<T>& model, const std::vector<LabeledVolume>& data) {
    if (data.empty()) throw DataError("evaluate_dice: no labeled volumes");
    NoGradGuard guard;
    double total = 0;
    for (const auto& pair : data) {
        if (pair.image.shape != model.crop)
            throw DataError("evaluate_dice: volume '" + pair.image.provenance +
                            "' does not match the model crop");
        Volume3D img = pair.image;
        window_hu(img);
        auto pred = dense_encode(model, volume_to_tensor<T>(img));
        const int64_t V = pred.numel();
        total += dice_metric(reshape(pred, {V}),
                             reshape(volume_to_tensor<T>(pair.label), {V}));
    }
    return total / double(data.size());
}

}  // namespace smim
