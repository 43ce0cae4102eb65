// Command-line front end: phantom data generation, masked pretraining,
// segmentation fine-tuning, reconstruction dumps, self-verification, and
// ablation comparisons. Exit codes: 0 success, 1 runtime failure (a check
// found a violation, training or IO failed), 2 usage/config error.

#include <smim/cli.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include <smim/checkpoint.hpp>
#include <smim/finetune.hpp>
#include <smim/pipeline.hpp>
#include <smim/verify.hpp>
#include <smim/volume.hpp>

namespace fs = std::filesystem;

namespace smim {
namespace {

// ---------------------------------------------------------------------------
// Config file: `[section]` headers and `key = value` lines; `#` or `;` starts
// a comment. Every key can also be set by a command-line flag, which wins.
// ---------------------------------------------------------------------------

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file '" + path + "' cannot be opened");
    std::map<std::string, std::string> kv;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto cut = line.find_first_of("#;");
        std::string s = trim(cut == std::string::npos ? line : line.substr(0, cut));
        if (s.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        if (s.front() == '[') {
            if (s.back() != ']' || s.size() < 3)
                throw ConfigError(where + ": malformed section header '" + s + "'");
            section = trim(s.substr(1, s.size() - 2));
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + s + "'");
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (section.empty())
            throw ConfigError(where + ": key '" + key + "' appears before any [section]");
        kv[section + "." + key] = val;
    }
    return kv;
}

int64_t parse_i64(const std::string& what, const std::string& v) {
    try {
        size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return int64_t(x);
    } catch (const std::exception&) {
        throw ConfigError(what + ": '" + v + "' is not an integer");
    }
}

uint64_t parse_u64(const std::string& what, const std::string& v) {
    try {
        size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return uint64_t(x);
    } catch (const std::exception&) {
        throw ConfigError(what + ": '" + v + "' is not a nonnegative integer");
    }
}

double parse_f64(const std::string& what, const std::string& v) {
    try {
        size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(what + ": '" + v + "' is not a number");
    }
}

bool parse_bool(const std::string& what, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(what + ": '" + v + "' is not a boolean");
}

std::vector<int64_t> parse_i64_list(const std::string& what, const std::string& v) {
    std::vector<int64_t> out;
    size_t pos = 0;
    while (pos <= v.size()) {
        const auto comma = v.find(',', pos);
        const std::string item =
            trim(comma == std::string::npos ? v.substr(pos) : v.substr(pos, comma - pos));
        out.push_back(parse_i64(what, item));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

// "32" (cubic) or "32,48,64".
std::array<int64_t, 3> parse_extent3(const std::string& what, const std::string& v) {
    const auto list = parse_i64_list(what, v);
    if (list.size() == 1) return {list[0], list[0], list[0]};
    if (list.size() == 3) return {list[0], list[1], list[2]};
    throw ConfigError(what + ": expected one extent or three comma-separated extents, got '" +
                      v + "'");
}

DecodeMode parse_decode(const std::string& what, const std::string& v) {
    if (v == "concat") return DecodeMode::Concat;
    if (v == "addition") return DecodeMode::Addition;
    if (v == "no-skip") return DecodeMode::NoSkip;
    throw ConfigError(what + ": '" + v + "' is not a decode mode (concat, addition, no-skip)");
}

// ---------------------------------------------------------------------------
// Model settings: encoder + transformer + decoder-fusion choice.
// ---------------------------------------------------------------------------

struct ModelSettings {
    CnnConfig cnn;
    VitConfig vit;
    DecodeMode mode = DecodeMode::Concat;
};

nlohmann::json model_to_json(const ModelSettings& ms) {
    return {{"stages", ms.cnn.num_stages},
            {"channels", ms.cnn.channels},
            {"blocks_per_stage", ms.cnn.blocks_per_stage},
            {"kernel", ms.cnn.kernel},
            {"expansion", ms.cnn.expansion},
            {"stem_stride", ms.cnn.stem_stride},
            {"norm_groups", ms.cnn.norm_groups},
            {"vit_dim", ms.vit.embed_dim},
            {"vit_depth", ms.vit.depth},
            {"vit_heads", ms.vit.heads},
            {"vit_mlp_ratio", ms.vit.mlp_ratio},
            {"decode", decode_mode_name(ms.mode)}};
}

ModelSettings model_from_json(const nlohmann::json& j) {
    ModelSettings ms;
    if (!j.is_object()) return ms;  // unannotated checkpoint: library defaults
    if (j.contains("stages")) ms.cnn.num_stages = j["stages"].get<int64_t>();
    if (j.contains("channels")) ms.cnn.channels = j["channels"].get<std::vector<int64_t>>();
    if (j.contains("blocks_per_stage"))
        ms.cnn.blocks_per_stage = j["blocks_per_stage"].get<int64_t>();
    if (j.contains("kernel")) ms.cnn.kernel = j["kernel"].get<int64_t>();
    if (j.contains("expansion")) ms.cnn.expansion = j["expansion"].get<int64_t>();
    if (j.contains("stem_stride")) ms.cnn.stem_stride = j["stem_stride"].get<int64_t>();
    if (j.contains("norm_groups")) ms.cnn.norm_groups = j["norm_groups"].get<int64_t>();
    if (j.contains("vit_dim")) ms.vit.embed_dim = j["vit_dim"].get<int64_t>();
    if (j.contains("vit_depth")) ms.vit.depth = j["vit_depth"].get<int64_t>();
    if (j.contains("vit_heads")) ms.vit.heads = j["vit_heads"].get<int64_t>();
    if (j.contains("vit_mlp_ratio")) ms.vit.mlp_ratio = j["vit_mlp_ratio"].get<int64_t>();
    if (j.contains("decode")) ms.mode = parse_decode("checkpoint decode mode", j["decode"]);
    return ms;
}

// Applies every key of a parsed config file, rejecting unknown ones.
void apply_config(const std::map<std::string, std::string>& kv, ModelSettings& ms,
                  TrainConfig& tc, FinetuneConfig& fc) {
    for (const auto& [key, v] : kv) {
        const std::string what = "config key " + key;
        if (key == "model.stages") ms.cnn.num_stages = parse_i64(what, v);
        else if (key == "model.channels") ms.cnn.channels = parse_i64_list(what, v);
        else if (key == "model.blocks_per_stage") ms.cnn.blocks_per_stage = parse_i64(what, v);
        else if (key == "model.kernel") ms.cnn.kernel = parse_i64(what, v);
        else if (key == "model.expansion") ms.cnn.expansion = parse_i64(what, v);
        else if (key == "model.stem_stride") ms.cnn.stem_stride = parse_i64(what, v);
        else if (key == "model.norm_groups") ms.cnn.norm_groups = parse_i64(what, v);
        else if (key == "model.vit_dim") ms.vit.embed_dim = parse_i64(what, v);
        else if (key == "model.vit_depth") ms.vit.depth = parse_i64(what, v);
        else if (key == "model.vit_heads") ms.vit.heads = parse_i64(what, v);
        else if (key == "model.vit_mlp_ratio") ms.vit.mlp_ratio = parse_i64(what, v);
        else if (key == "model.decode") ms.mode = parse_decode(what, v);
        else if (key == "pretrain.mask_ratio") tc.mask_ratio = parse_f64(what, v);
        else if (key == "pretrain.lr") tc.lr = parse_f64(what, v);
        else if (key == "pretrain.lr_min") tc.lr_min = parse_f64(what, v);
        else if (key == "pretrain.weight_decay") tc.adamw.weight_decay = parse_f64(what, v);
        else if (key == "pretrain.steps") tc.steps = parse_i64(what, v);
        else if (key == "pretrain.batch_size") tc.batch_size = parse_i64(what, v);
        else if (key == "pretrain.crop") tc.crop = parse_extent3(what, v);
        else if (key == "pretrain.seed") tc.seed = parse_u64(what, v);
        else if (key == "pretrain.precision") tc.precision = v;
        else if (key == "pretrain.bottom_up") tc.bottom_up = parse_bool(what, v);
        else if (key == "finetune.lr") fc.lr = parse_f64(what, v);
        else if (key == "finetune.lr_min") fc.lr_min = parse_f64(what, v);
        else if (key == "finetune.weight_decay") fc.adamw.weight_decay = parse_f64(what, v);
        else if (key == "finetune.steps") fc.steps = parse_i64(what, v);
        else if (key == "finetune.batch_size") fc.batch_size = parse_i64(what, v);
        else if (key == "finetune.crop") fc.crop = parse_extent3(what, v);
        else if (key == "finetune.seed") fc.seed = parse_u64(what, v);
        else if (key == "finetune.precision") fc.precision = v;
        else throw ConfigError("config: unknown key '" + key + "'");
    }
}

// ---------------------------------------------------------------------------
// Small IO helpers.
// ---------------------------------------------------------------------------

void ensure_parent_dir(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("short write to '" + path + "'");
}

nlohmann::json read_index(const std::string& dir) {
    const std::string path = dir + "/index.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open data index '" + path + "' (generate it with gen-data)");
    nlohmann::json index;
    try {
        in >> index;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("data index '" + path + "' is not valid JSON: " + e.what());
    }
    if (!index.contains("items") || !index["items"].is_array() || index["items"].empty())
        throw FormatError("data index '" + path + "' has no items");
    return index;
}

std::vector<Volume3D> load_images(const std::string& dir) {
    std::vector<Volume3D> out;
    const auto index = read_index(dir);
    for (const auto& item : index.at("items")) {
        if (!item.contains("volume"))
            throw FormatError("data index in '" + dir + "': item without a volume field");
        out.push_back(load_volume(dir + "/" + item["volume"].get<std::string>()));
    }
    return out;
}

std::vector<LabeledVolume> load_labeled(const std::string& dir) {
    std::vector<LabeledVolume> out;
    const auto index = read_index(dir);
    for (const auto& item : index.at("items")) {
        if (!item.contains("volume") || !item.contains("label"))
            throw FormatError("data index in '" + dir + "': item without volume+label fields");
        LabeledVolume lv;
        lv.image = load_volume(dir + "/" + item["volume"].get<std::string>());
        lv.label = load_volume(dir + "/" + item["label"].get<std::string>());
        out.push_back(std::move(lv));
    }
    return out;
}

// Center crops of raw labeled volumes, for held-out-style evaluation at the
// model's input size.
std::vector<LabeledVolume> center_crops(const std::vector<LabeledVolume>& data,
                                        const std::array<int64_t, 3>& crop) {
    std::vector<LabeledVolume> out;
    out.reserve(data.size());
    for (const auto& pair : data) {
        const auto origin = crop_origin(pair.image.shape, crop, CropMode::Center);
        LabeledVolume lv;
        lv.image = crop_volume(pair.image, crop, origin);
        lv.label = crop_volume(pair.label, crop, origin);
        out.push_back(std::move(lv));
    }
    return out;
}

// Mean segmentation loss and hard Dice over crop-sized raw volumes.
template <class T>
std::pair<double, double> eval_loss_dice(const Model<T>& model,
                                         const std::vector<LabeledVolume>& eval_set) {
    NoGradGuard guard;
    double loss_sum = 0, dice_sum = 0;
    for (const auto& pair : eval_set) {
        Volume3D img = pair.image;
        window_hu(img);
        auto pred = dense_encode(model, volume_to_tensor<T>(img));
        const int64_t V = pred.numel();
        auto logits = reshape(pred, {V});
        auto label = reshape(volume_to_tensor<T>(pair.label), {V});
        loss_sum += double(seg_loss(logits, label).item());
        dice_sum += dice_metric(logits, label);
    }
    const double n = double(eval_set.size());
    return {loss_sum / n, dice_sum / n};
}

int64_t progress_stride(int64_t steps) { return steps >= 10 ? steps / 10 : 1; }

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, int64_t count, const std::array<int64_t, 3>& shape,
                 uint64_t seed) {
    if (count < 1) throw ConfigError("gen-data: count must be positive");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("gen-data: cannot create '" + out_dir + "': " + ec.message());

    nlohmann::json index;
    index["count"] = count;
    index["seed"] = seed;
    index["shape"] = {shape[0], shape[1], shape[2]};
    index["items"] = nlohmann::json::array();
    for (int64_t i = 0; i < count; ++i) {
        const uint64_t item_seed = Rng::derive(seed, uint64_t(i));
        auto [vol, lab] = generate_phantom(item_seed, shape);
        char vname[32], lname[32];
        std::snprintf(vname, sizeof vname, "vol_%04lld.raw", (long long)i);
        std::snprintf(lname, sizeof lname, "lab_%04lld.raw", (long long)i);
        save_volume(vol, out_dir + "/" + vname);
        save_volume(lab, out_dir + "/" + lname);
        index["items"].push_back({{"volume", vname},
                                  {"label", lname},
                                  {"seed", item_seed},
                                  {"shape", {shape[0], shape[1], shape[2]}}});
    }
    write_text(out_dir + "/index.json", index.dump(2) + "\n");
    std::printf("gen-data: wrote %lld volume/label pairs under '%s'\n", (long long)count,
                out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

template <class T>
int do_pretrain(const ModelSettings& ms, const TrainConfig& cfg, const std::string& data_dir,
                const std::string& out) {
    auto volumes = load_images(data_dir);
    auto model = build_model<T>(ModelKind::Pretrain, ms.cnn, ms.vit, mirrored_decoder(ms.cnn),
                                ms.mode, cfg.crop, cfg.seed);
    const nlohmann::json eff = {{"command", "pretrain"},
                                {"model", model_to_json(ms)},
                                {"train", cfg.to_json()},
                                {"data", data_dir}};

    ensure_parent_dir(out);
    const std::string log_path = out + ".loss.ndjson";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open '" + log_path + "' for writing");
    const int64_t stride = progress_stride(cfg.steps);
    auto res = run_pretrain(model, volumes, cfg, [&](const LossRecord& r) {
        log << nlohmann::json{{"step", r.step},
                              {"lr", r.lr},
                              {"loss", r.loss},
                              {"masked_voxels", r.masked_voxels},
                              {"seed", r.seed}}
                   .dump()
            << "\n";
        if (r.step % stride == 0 || r.step + 1 == cfg.steps)
            std::fprintf(stderr, "pretrain step %lld/%lld  lr %.3e  loss %.6f\n",
                         (long long)(r.step + 1), (long long)cfg.steps, r.lr, r.loss);
    });
    log.flush();
    if (!log) throw IoError("short write to '" + log_path + "'");

    save_checkpoint<T>(out, model.ps, &res.opt, cfg.steps, eff);
    write_text(out + ".config.json", eff.dump(2) + "\n");
    std::printf("pretrain: %lld steps, final loss %.6f, checkpoint '%s'\n",
                (long long)cfg.steps, res.log.back().loss, out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

template <class T>
int do_finetune(const ModelSettings& ms, const FinetuneConfig& cfg, const std::string& data_dir,
                const std::string& ckpt, const std::string& out) {
    auto data = load_labeled(data_dir);
    auto model = build_model<T>(ModelKind::Segment, ms.cnn, ms.vit, mirrored_decoder(ms.cnn),
                                ms.mode, cfg.crop, cfg.seed);
    if (ckpt != "none") {
        auto loaded = load_checkpoint<T>(ckpt);
        const auto copied = transfer_encoder(model, loaded.as_store());
        std::fprintf(stderr, "finetune: transferred %zu encoder tensors from '%s'\n",
                     copied.size(), ckpt.c_str());
    }
    const nlohmann::json eff = {{"command", "finetune"},
                                {"model", model_to_json(ms)},
                                {"finetune", cfg.to_json()},
                                {"init_checkpoint", ckpt},
                                {"data", data_dir}};

    ensure_parent_dir(out);
    const std::string log_path = out + ".dice.ndjson";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open '" + log_path + "' for writing");
    const int64_t stride = progress_stride(cfg.steps);
    auto res = run_finetune(model, data, cfg, [&](const FinetuneRecord& r) {
        log << nlohmann::json{
                   {"epoch", r.step}, {"split", "train"}, {"dice", r.dice}, {"loss", r.loss}}
                   .dump()
            << "\n";
        if (r.step % stride == 0 || r.step + 1 == cfg.steps)
            std::fprintf(stderr, "finetune step %lld/%lld  lr %.3e  loss %.6f  dice %.4f\n",
                         (long long)(r.step + 1), (long long)cfg.steps, r.lr, r.loss, r.dice);
    });
    const auto [val_loss, val_dice] = eval_loss_dice(model, center_crops(data, cfg.crop));
    log << nlohmann::json{
               {"epoch", cfg.steps}, {"split", "val"}, {"dice", val_dice}, {"loss", val_loss}}
               .dump()
        << "\n";
    log.flush();
    if (!log) throw IoError("short write to '" + log_path + "'");

    save_checkpoint<T>(out, model.ps, &res.opt, cfg.steps, eff);
    write_text(out + ".config.json", eff.dump(2) + "\n");
    std::printf("finetune: %lld steps, final train dice %.4f, val dice %.4f, model '%s'\n",
                (long long)cfg.steps, res.log.back().dice, val_dice, out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

template <class T>
int do_reconstruct(const std::string& ckpt, const std::string& volume_path, double ratio,
                   uint64_t seed, const std::string& out) {
    auto loaded = load_checkpoint<T>(ckpt);
    const ModelSettings ms = model_from_json(
        loaded.config.is_object() ? loaded.config.value("model", nlohmann::json())
                                  : nlohmann::json());
    std::array<int64_t, 3> crop = TrainConfig{}.crop;
    if (loaded.config.is_object() && loaded.config.contains("train") &&
        loaded.config["train"].contains("crop")) {
        const auto& c = loaded.config["train"]["crop"];
        for (int i = 0; i < 3; ++i) crop[size_t(i)] = c[size_t(i)].template get<int64_t>();
    }

    auto model = build_model<T>(ModelKind::Pretrain, ms.cnn, ms.vit, mirrored_decoder(ms.cnn),
                                ms.mode, crop, 0);
    model.ps.load_filtered(loaded.as_store(), [](const std::string&) { return true; });

    const Volume3D raw = load_volume(volume_path);
    const Volume3D input = preprocess(raw, crop, CropMode::Center);
    const auto junction = init_junction_mask(model.junction, ratio, seed);
    const auto pyr = build_pyramid(junction, ms.cnn.stage_strides(), crop);

    Volume3D masked = input;
    for (size_t v = 0; v < masked.values.size(); ++v)
        if (!pyr.voxel.bits[v]) masked.values[v] = 0.0f;

    NoGradGuard guard;
    auto pred = model_forward(model, volume_to_tensor<T>(input), pyr,
                              /*use_mask_embeddings=*/true);
    const auto tf = normalize_targets<T>(input, junction);

    // Reconstruction panel: model output de-normalized with the per-block
    // statistics at masked voxels, the visible input everywhere else.
    Volume3D recon = input;
    const std::array<int64_t, 3> block{crop[0] / junction.shape[0],
                                       crop[1] / junction.shape[1],
                                       crop[2] / junction.shape[2]};
    const auto& pv = pred.values();
    for (int64_t d = 0; d < crop[0]; ++d)
        for (int64_t h = 0; h < crop[1]; ++h)
            for (int64_t w = 0; w < crop[2]; ++w) {
                const int64_t v = (d * crop[1] + h) * crop[2] + w;
                if (!tf.in_loss[size_t(v)]) continue;
                const int64_t j = ((d / block[0]) * junction.shape[1] + h / block[1]) *
                                      junction.shape[2] +
                                  w / block[2];
                recon.values[size_t(v)] =
                    float(pv[size_t(v)] * (tf.block_std[size_t(j)] + T(kTargetEps)) +
                          tf.block_mean[size_t(j)]);
            }

    ensure_parent_dir(out);
    Volume3D in_copy = input, mask_copy = masked;
    in_copy.provenance = "reconstruct:input";
    mask_copy.provenance = "reconstruct:masked";
    recon.provenance = "reconstruct:prediction";
    save_volume(in_copy, out + ".input.raw");
    save_volume(mask_copy, out + ".masked.raw");
    save_volume(recon, out + ".pred.raw");
    std::printf(
        "reconstruct: ratio %.2f seed %llu -> '%s.input.raw', '%s.masked.raw', '%s.pred.raw'\n",
        ratio, (unsigned long long)seed, out.c_str(), out.c_str(), out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

int cmd_verify(const std::string& suite, bool bottom_up, const std::string& out_path) {
    const auto report = run_verify(suite, bottom_up);
    const std::string text = report.to_json().dump(2) + "\n";
    std::fputs(text.c_str(), stdout);
    if (!out_path.empty()) write_text(out_path, text);
    for (const auto& s : report.suites)
        std::fprintf(stderr, "verify: %-8s %s\n", s.name.c_str(), s.pass ? "pass" : "FAIL");
    return report.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct ArmSpec {
    std::string name;
    double mask_ratio = 0.75;
    DecodeMode mode = DecodeMode::Concat;
};

ArmSpec arm_from_name(const std::string& name) {
    if (name == "ratio25") return {name, 0.25, DecodeMode::Concat};
    if (name == "ratio50") return {name, 0.50, DecodeMode::Concat};
    if (name == "ratio75") return {name, 0.75, DecodeMode::Concat};
    if (name == "no-skip") return {name, 0.75, DecodeMode::NoSkip};
    if (name == "skip-add") return {name, 0.75, DecodeMode::Addition};
    if (name == "skip-concat") return {name, 0.75, DecodeMode::Concat};
    throw ConfigError("ablate: unknown arm '" + name +
                      "' (expected ratio25, ratio50, ratio75, no-skip, skip-add, skip-concat)");
}

template <class T>
nlohmann::json run_arm(const ModelSettings& base, const ArmSpec& arm, TrainConfig pre_cfg,
                       FinetuneConfig ft_cfg, const std::vector<Volume3D>& images,
                       const std::vector<LabeledVolume>& labeled, const std::string& out_dir) {
    ModelSettings ms = base;
    ms.mode = arm.mode;
    pre_cfg.mask_ratio = arm.mask_ratio;

    auto pre_model = build_model<T>(ModelKind::Pretrain, ms.cnn, ms.vit,
                                    mirrored_decoder(ms.cnn), ms.mode, pre_cfg.crop,
                                    pre_cfg.seed);
    const std::string pre_log_path = out_dir + "/" + arm.name + ".loss.ndjson";
    std::ofstream pre_log(pre_log_path, std::ios::trunc);
    if (!pre_log) throw IoError("cannot open '" + pre_log_path + "' for writing");
    std::fprintf(stderr, "ablate arm %s: pretraining (%lld steps, ratio %.2f, %s skips)\n",
                 arm.name.c_str(), (long long)pre_cfg.steps, arm.mask_ratio,
                 decode_mode_name(arm.mode));
    auto pres = run_pretrain(pre_model, images, pre_cfg, [&](const LossRecord& r) {
        pre_log << nlohmann::json{{"step", r.step},
                                  {"lr", r.lr},
                                  {"loss", r.loss},
                                  {"masked_voxels", r.masked_voxels},
                                  {"seed", r.seed}}
                       .dump()
                << "\n";
    });

    // Token accounting on one representative masked forward.
    const auto junction = init_junction_mask(pre_model.junction, arm.mask_ratio, pre_cfg.seed);
    const auto pyr = build_pyramid(junction, ms.cnn.stage_strides(), pre_cfg.crop);
    ForwardStats stats;
    {
        NoGradGuard guard;
        const Volume3D probe = preprocess(images.front(), pre_cfg.crop, CropMode::Center);
        model_forward(pre_model, volume_to_tensor<T>(probe), pyr, true, true, &stats);
    }

    auto ft_model = build_model<T>(ModelKind::Segment, ms.cnn, ms.vit, mirrored_decoder(ms.cnn),
                                   ms.mode, ft_cfg.crop, ft_cfg.seed);
    transfer_encoder(ft_model, pre_model.ps);
    const std::string ft_log_path = out_dir + "/" + arm.name + ".dice.ndjson";
    std::ofstream ft_log(ft_log_path, std::ios::trunc);
    if (!ft_log) throw IoError("cannot open '" + ft_log_path + "' for writing");
    std::fprintf(stderr, "ablate arm %s: fine-tuning (%lld steps)\n", arm.name.c_str(),
                 (long long)ft_cfg.steps);
    auto fres = run_finetune(ft_model, labeled, ft_cfg, [&](const FinetuneRecord& r) {
        ft_log << nlohmann::json{
                      {"epoch", r.step}, {"split", "train"}, {"dice", r.dice}, {"loss", r.loss}}
                      .dump()
               << "\n";
    });

    return {{"arm", arm.name},
            {"mask_ratio", arm.mask_ratio},
            {"decode", decode_mode_name(arm.mode)},
            {"param_count", pre_model.ps.scalar_count()},
            {"junction_cells", junction.numel()},
            {"active_cells", junction.active_count()},
            {"vit_tokens_processed", stats.vit.tokens_processed},
            {"vit_depth", ms.vit.depth},
            {"active_per_stage", stats.active_per_stage},
            {"final_pretrain_loss", pres.log.back().loss},
            {"final_dice", fres.log.back().dice}};
}

void print_arm_table(const nlohmann::json& arms) {
    std::printf("%-12s %6s %-9s %10s %6s %5s %13s %12s %8s\n", "arm", "ratio", "decode",
                "params", "cells", "kept", "tokens/layer", "pre_loss", "dice");
    for (const auto& a : arms) {
        const int64_t kept = a["active_cells"].get<int64_t>();
        const int64_t depth = a["vit_depth"].get<int64_t>();
        const int64_t tokens = a["vit_tokens_processed"].get<int64_t>();
        std::printf("%-12s %6.2f %-9s %10lld %6lld %5lld %13lld %12.6f %8.4f\n",
                    a["arm"].get<std::string>().c_str(), a["mask_ratio"].get<double>(),
                    a["decode"].get<std::string>().c_str(),
                    (long long)a["param_count"].get<int64_t>(),
                    (long long)a["junction_cells"].get<int64_t>(), (long long)kept,
                    (long long)(depth > 0 ? tokens / depth : 0),
                    a["final_pretrain_loss"].get<double>(), a["final_dice"].get<double>());
    }
}

template <class T>
int do_ablate(const ModelSettings& ms, const std::vector<std::string>& arm_names,
              const TrainConfig& pre_cfg, const FinetuneConfig& ft_cfg,
              const std::string& data_dir, const std::string& out_dir) {
    std::vector<ArmSpec> arms;
    for (const auto& n : arm_names) arms.push_back(arm_from_name(n));

    const auto labeled = load_labeled(data_dir);
    std::vector<Volume3D> images;
    images.reserve(labeled.size());
    for (const auto& lv : labeled) images.push_back(lv.image);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("ablate: cannot create '" + out_dir + "': " + ec.message());

    nlohmann::json report;
    report["shared"] = {{"model", model_to_json(ms)},
                        {"pretrain", pre_cfg.to_json()},
                        {"finetune", ft_cfg.to_json()},
                        {"data", data_dir}};
    report["arms"] = nlohmann::json::array();
    for (const auto& arm : arms)
        report["arms"].push_back(run_arm<T>(ms, arm, pre_cfg, ft_cfg, images, labeled, out_dir));

    write_text(out_dir + "/ablate_report.json", report.dump(2) + "\n");
    print_arm_table(report["arms"]);
    std::printf("ablate: report written to '%s/ablate_report.json'\n", out_dir.c_str());
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Argument wiring.
// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args) {
    try {
        CLI::App app{"hybrid sparse masked-volume modeling toolkit"};
        app.name("smim");
        app.require_subcommand(1);

        // gen-data
        auto* gen = app.add_subcommand("gen-data", "generate a phantom volume+label corpus");
        std::string gen_out;
        int64_t gen_count = 10;
        std::string gen_shape = "48";
        uint64_t gen_seed = 0;
        gen->add_option("--out", gen_out, "output directory")->required();
        gen->add_option("--count", gen_count, "number of volume/label pairs");
        gen->add_option("--shape", gen_shape, "volume extents, D,H,W or one cubic extent");
        gen->add_option("--seed", gen_seed, "corpus seed");

        // shared training flag bundles
        struct CommonFlags {
            std::string config;
            std::optional<double> lr, lr_min;
            std::optional<int64_t> steps, batch_size;
            std::optional<std::string> crop, precision;
            std::optional<uint64_t> seed;
        };
        auto add_common = [](CLI::App* cmd, CommonFlags& f) {
            cmd->add_option("--config", f.config, "config file ([model]/[pretrain]/[finetune])");
            cmd->add_option("--lr", f.lr, "peak learning rate");
            cmd->add_option("--lr-min", f.lr_min, "final learning rate");
            cmd->add_option("--steps", f.steps, "training steps");
            cmd->add_option("--batch-size", f.batch_size, "crops per step");
            cmd->add_option("--crop", f.crop, "training crop extents");
            cmd->add_option("--seed", f.seed, "training seed");
            cmd->add_option("--precision", f.precision, "f32 or f64");
        };

        // pretrain
        auto* pre = app.add_subcommand("pretrain", "masked-reconstruction pretraining");
        std::string pre_data, pre_out;
        CommonFlags pre_flags;
        std::optional<double> pre_ratio;
        bool pre_no_bottom_up = false;
        pre->add_option("--data", pre_data, "corpus directory (from gen-data)")->required();
        pre->add_option("--out", pre_out, "checkpoint path to write")->required();
        pre->add_option("--mask-ratio", pre_ratio, "fraction of junction cells to mask");
        pre->add_flag("--no-bottom-up", pre_no_bottom_up,
                      "draw per-scale masks independently instead of replicating the junction "
                      "mask (ablation; breaks the pyramid invariant)");
        add_common(pre, pre_flags);

        // finetune
        auto* fin = app.add_subcommand("finetune", "segmentation fine-tuning");
        std::string fin_data, fin_out, fin_ckpt;
        CommonFlags fin_flags;
        fin->add_option("--data", fin_data, "corpus directory (from gen-data)")->required();
        fin->add_option("--ckpt", fin_ckpt, "pretraining checkpoint, or 'none' for scratch")
            ->required();
        fin->add_option("--out", fin_out, "model path to write")->required();
        add_common(fin, fin_flags);

        // reconstruct
        auto* rec = app.add_subcommand("reconstruct",
                                       "dump input/masked/prediction volumes for a checkpoint");
        std::string rec_ckpt, rec_volume, rec_out, rec_precision = "f64";
        double rec_ratio = 0.75;
        uint64_t rec_seed = 0;
        rec->add_option("--ckpt", rec_ckpt, "pretraining checkpoint")->required();
        rec->add_option("--volume", rec_volume, "raw volume to reconstruct")->required();
        rec->add_option("--out", rec_out, "output path prefix")->required();
        rec->add_option("--mask-ratio", rec_ratio, "fraction of junction cells to mask");
        rec->add_option("--seed", rec_seed, "mask seed");
        rec->add_option("--precision", rec_precision, "checkpoint precision (f32 or f64)");

        // verify
        auto* ver = app.add_subcommand("verify", "run the self-verification suites");
        std::string ver_suite = "all", ver_out;
        bool ver_no_bottom_up = false;
        ver->add_option("--suite", ver_suite, "all, sparse, grad, mask, or pipeline");
        ver->add_flag("--no-bottom-up", ver_no_bottom_up,
                      "run the mask suite against independently drawn masks (expected to fail)");
        ver->add_option("--out", ver_out, "also write the JSON report here");

        // ablate
        auto* abl = app.add_subcommand("ablate", "pretrain+finetune comparison arms");
        std::vector<std::string> abl_arms;
        std::string abl_data, abl_out = "ablate_out", abl_config;
        std::optional<int64_t> abl_pre_steps, abl_ft_steps, abl_batch;
        std::optional<std::string> abl_crop, abl_precision;
        std::optional<uint64_t> abl_seed;
        abl->add_option("--arm", abl_arms,
                        "ratio25|ratio50|ratio75|no-skip|skip-add|skip-concat (repeatable)")
            ->required();
        abl->add_option("--data", abl_data, "corpus directory (from gen-data)")->required();
        abl->add_option("--out", abl_out, "report/log directory");
        abl->add_option("--config", abl_config, "config file");
        abl->add_option("--pretrain-steps", abl_pre_steps, "pretraining steps per arm");
        abl->add_option("--finetune-steps", abl_ft_steps, "fine-tuning steps per arm");
        abl->add_option("--batch-size", abl_batch, "crops per step");
        abl->add_option("--crop", abl_crop, "training crop extents");
        abl->add_option("--seed", abl_seed, "shared seed for every arm");
        abl->add_option("--precision", abl_precision, "f32 or f64");

        try {
            std::vector<std::string> reversed(args.rbegin(), args.rend());
            app.parse(reversed);
        } catch (const CLI::ParseError& e) {
            const int rc = app.exit(e);
            return rc == 0 ? 0 : 2;
        }

        if (*gen)
            return cmd_gen_data(gen_out, gen_count,
                                parse_extent3("gen-data --shape", gen_shape), gen_seed);

        if (*pre) {
            ModelSettings ms;
            TrainConfig tc;
            FinetuneConfig fc_unused;
            if (!pre_flags.config.empty())
                apply_config(parse_config_file(pre_flags.config), ms, tc, fc_unused);
            if (pre_ratio) tc.mask_ratio = *pre_ratio;
            if (pre_no_bottom_up) tc.bottom_up = false;
            if (pre_flags.lr) tc.lr = *pre_flags.lr;
            if (pre_flags.lr_min) tc.lr_min = *pre_flags.lr_min;
            if (pre_flags.steps) tc.steps = *pre_flags.steps;
            if (pre_flags.batch_size) tc.batch_size = *pre_flags.batch_size;
            if (pre_flags.crop) tc.crop = parse_extent3("pretrain --crop", *pre_flags.crop);
            if (pre_flags.seed) tc.seed = *pre_flags.seed;
            if (pre_flags.precision) tc.precision = *pre_flags.precision;
            tc.validate(ms.cnn);
            return tc.precision == "f32" ? do_pretrain<float>(ms, tc, pre_data, pre_out)
                                         : do_pretrain<double>(ms, tc, pre_data, pre_out);
        }

        if (*fin) {
            ModelSettings ms;
            TrainConfig tc_unused;
            FinetuneConfig fc;
            if (!fin_flags.config.empty())
                apply_config(parse_config_file(fin_flags.config), ms, tc_unused, fc);
            if (fin_flags.lr) fc.lr = *fin_flags.lr;
            if (fin_flags.lr_min) fc.lr_min = *fin_flags.lr_min;
            if (fin_flags.steps) fc.steps = *fin_flags.steps;
            if (fin_flags.batch_size) fc.batch_size = *fin_flags.batch_size;
            if (fin_flags.crop) fc.crop = parse_extent3("finetune --crop", *fin_flags.crop);
            if (fin_flags.seed) fc.seed = *fin_flags.seed;
            if (fin_flags.precision) fc.precision = *fin_flags.precision;
            fc.validate(ms.cnn);
            if (fin_ckpt != "none" && !fs::exists(fin_ckpt))
                throw ConfigError("finetune: checkpoint '" + fin_ckpt + "' does not exist");
            return fc.precision == "f32"
                       ? do_finetune<float>(ms, fc, fin_data, fin_ckpt, fin_out)
                       : do_finetune<double>(ms, fc, fin_data, fin_ckpt, fin_out);
        }

        if (*rec) {
            if (!fs::exists(rec_ckpt))
                throw ConfigError("reconstruct: checkpoint '" + rec_ckpt + "' does not exist");
            if (!fs::exists(rec_volume))
                throw ConfigError("reconstruct: volume '" + rec_volume + "' does not exist");
            if (rec_precision != "f32" && rec_precision != "f64")
                throw ConfigError("reconstruct: precision must be f32 or f64, got '" +
                                  rec_precision + "'");
            return rec_precision == "f32"
                       ? do_reconstruct<float>(rec_ckpt, rec_volume, rec_ratio, rec_seed,
                                               rec_out)
                       : do_reconstruct<double>(rec_ckpt, rec_volume, rec_ratio, rec_seed,
                                                rec_out);
        }

        if (*ver) return cmd_verify(ver_suite, !ver_no_bottom_up, ver_out);

        if (*abl) {
            ModelSettings ms;
            TrainConfig tc;
            FinetuneConfig fc;
            if (!abl_config.empty()) apply_config(parse_config_file(abl_config), ms, tc, fc);
            if (abl_pre_steps) tc.steps = *abl_pre_steps;
            if (abl_ft_steps) fc.steps = *abl_ft_steps;
            if (abl_batch) tc.batch_size = fc.batch_size = *abl_batch;
            if (abl_crop) tc.crop = fc.crop = parse_extent3("ablate --crop", *abl_crop);
            if (abl_seed) tc.seed = fc.seed = *abl_seed;
            if (abl_precision) tc.precision = *abl_precision;
            fc.precision = tc.precision;  // arms share one numeric type
            tc.validate(ms.cnn);
            fc.validate(ms.cnn);
            return tc.precision == "f32"
                       ? do_ablate<float>(ms, abl_arms, tc, fc, abl_data, abl_out)
                       : do_ablate<double>(ms, abl_arms, tc, fc, abl_data, abl_out);
        }

        return 2;  // unreachable: a subcommand is required
    } catch (const UsageError& e) {
        std::fprintf(stderr, "smim: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "smim: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "smim: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "smim: unexpected error: %s\n", e.what());
        return 1;
    }
}

}  // namespace smim
