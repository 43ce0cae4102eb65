#pragma once

// Checkpoint container: 8-byte magic, u32 format version, u64 manifest
// length, JSON manifest, raw parameter blob. The manifest records every
// tensor's name, shape, byte span, and kind (param / optimizer moment), plus
// the training step and a config snapshot. Round-trips are bit-exact; any
// structural damage is a format error, never a crash.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "params.hpp"
#include "tensor.hpp"

namespace smim {

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'I', 'M', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <class T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

// Optimizer moments, ordered like the ParamStore they belong to.
template <class T>
struct OptState {
    std::vector<std::vector<T>> m, v;
    int64_t step = 0;
    bool empty() const { return m.empty() && v.empty(); }
};

template <class T>
struct LoadedCheckpoint {
    int64_t step = 0;
    nlohmann::json config;
    std::vector<std::string> names;  // parameter order as saved
    std::unordered_map<std::string, std::pair<Shape, std::vector<T>>> params;
    OptState<T> opt;

    // Rebuilds a parameter store holding the saved values in saved order.
    ParamStore<T> as_store() const {
        ParamStore<T> ps;
        for (const auto& n : names) {
            const auto& [shape, values] = params.at(n);
            ps.add(n, Tensor<T>::from_values(shape, values));
        }
        return ps;
    }
};

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& ps, const OptState<T>* opt,
                     int64_t step, const nlohmann::json& config) {
    nlohmann::json manifest;
    manifest["dtype"] = dtype_name<T>();
    manifest["step"] = step;
    manifest["config"] = config;
    manifest["tensors"] = nlohmann::json::array();

    std::vector<char> blob;
    auto append = [&blob](const std::string& name, const std::string& kind, const Shape& shape,
                          const std::vector<T>& values, nlohmann::json& list) {
        const uint64_t offset = blob.size();
        const uint64_t nbytes = values.size() * sizeof(T);
        blob.resize(blob.size() + nbytes);
        std::memcpy(blob.data() + offset, values.data(), nbytes);
        list.push_back({{"name", name},
                        {"kind", kind},
                        {"shape", shape},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    };

    for (int64_t i = 0; i < ps.size(); ++i) {
        const auto& name = ps.names()[size_t(i)];
        const auto t = ps.tensors()[size_t(i)];
        append(name, "param", t.shape(), t.values(), manifest["tensors"]);
    }
    if (opt && !opt->empty()) {
        if (int64_t(opt->m.size()) != ps.size() || int64_t(opt->v.size()) != ps.size())
            throw ConsistencyError("save_checkpoint: optimizer state covers " +
                                   std::to_string(opt->m.size()) + " tensors, store has " +
                                   std::to_string(ps.size()));
        manifest["opt_step"] = opt->step;
        for (int64_t i = 0; i < ps.size(); ++i) {
            const auto& name = ps.names()[size_t(i)];
            const Shape flat{int64_t(opt->m[size_t(i)].size())};
            append(name, "opt_m", flat, opt->m[size_t(i)], manifest["tensors"]);
            append(name, "opt_v", flat, opt->v[size_t(i)], manifest["tensors"]);
        }
    }

    const std::string mtext = manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, 8);
    const uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t mlen = mtext.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mtext.data(), std::streamsize(mtext.size()));
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw IoError("save_checkpoint: short write to '" + path + "'");
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
    const int64_t total = in.tellg();
    in.seekg(0);

    char magic[8];
    uint32_t version = 0;
    uint64_t mlen = 0;
    if (total < int64_t(8 + sizeof(version) + sizeof(mlen)))
        throw FormatError("load_checkpoint: '" + path + "' is too short for a header");
    in.read(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError("load_checkpoint: bad magic in '" + path + "'");
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCheckpointVersion)
        throw FormatError("load_checkpoint: format version " + std::to_string(version) +
                          " not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    const int64_t header = 8 + int64_t(sizeof(version)) + int64_t(sizeof(mlen));
    if (int64_t(mlen) > total - header)
        throw FormatError("load_checkpoint: manifest length " + std::to_string(mlen) +
                          " exceeds file size");

    std::string mtext(size_t(mlen), '\0');
    in.read(mtext.data(), std::streamsize(mlen));
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: manifest is not valid JSON: ") +
                          e.what());
    }
    if (!manifest.contains("dtype") || !manifest.contains("tensors"))
        throw FormatError("load_checkpoint: manifest missing dtype or tensor list");
    if (manifest["dtype"] != dtype_name<T>())
        throw FormatError("load_checkpoint: checkpoint dtype '" +
                          manifest["dtype"].get<std::string>() + "' does not match '" +
                          dtype_name<T>() + "'");

    const int64_t blob_size = total - header - int64_t(mlen);
    std::vector<char> blob(static_cast<size_t>(blob_size));
    in.read(blob.data(), std::streamsize(blob_size));
    if (!in) throw IoError("load_checkpoint: short read from '" + path + "'");

    LoadedCheckpoint<T> out;
    out.step = manifest.value("step", int64_t(0));
    out.config = manifest.value("config", nlohmann::json::object());
    out.opt.step = manifest.value("opt_step", int64_t(0));

    std::unordered_map<std::string, int64_t> param_index;
    for (const auto& entry : manifest["tensors"]) {
        for (const char* field : {"name", "kind", "shape", "offset", "nbytes"})
            if (!entry.contains(field))
                throw FormatError("load_checkpoint: manifest entry missing '" +
                                  std::string(field) + "'");
        const std::string name = entry["name"];
        const std::string kind = entry["kind"];
        const uint64_t offset = entry["offset"];
        const uint64_t nbytes = entry["nbytes"];
        if (offset + nbytes > uint64_t(blob_size))
            throw FormatError("load_checkpoint: tensor '" + name + "' (" + kind + ") spans [" +
                              std::to_string(offset) + ", " + std::to_string(offset + nbytes) +
                              ") outside the " + std::to_string(blob_size) + "-byte blob");
        if (nbytes % sizeof(T))
            throw FormatError("load_checkpoint: tensor '" + name + "' byte count " +
                              std::to_string(nbytes) + " is not a multiple of the scalar size");
        std::vector<T> values(size_t(nbytes / sizeof(T)));
        std::memcpy(values.data(), blob.data() + offset, nbytes);

        if (kind == "param") {
            Shape shape = entry["shape"].get<Shape>();
            if (shape_numel(shape) != int64_t(values.size()))
                throw FormatError("load_checkpoint: tensor '" + name + "' shape " +
                                  shape_str(shape) + " disagrees with its byte span");
            param_index[name] = int64_t(out.names.size());
            out.names.push_back(name);
            out.params[name] = {std::move(shape), std::move(values)};
        } else if (kind == "opt_m" || kind == "opt_v") {
            auto it = param_index.find(name);
            if (it == param_index.end())
                throw FormatError("load_checkpoint: optimizer entry '" + name +
                                  "' has no matching parameter");
            auto& side = (kind == "opt_m") ? out.opt.m : out.opt.v;
            side.resize(out.names.size());
            side[size_t(it->second)] = std::move(values);
        } else {
            throw FormatError("load_checkpoint: unknown tensor kind '" + kind + "'");
        }
    }
    return out;
}

}  // namespace smim
