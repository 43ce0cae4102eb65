#pragma once

// Scalar 3D volumes: disk format (raw f32 little-endian + JSON sidecar),
// intensity windowing, crop extraction, and the procedural phantom generator
// that stands in for CT data. Axis order is [D,H,W] with W fastest.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace smim {

static_assert(std::endian::native == std::endian::little,
              "raw volume IO assumes a little-endian host");

constexpr double kHuWindowLo = -175.0;
constexpr double kHuWindowHi = 250.0;

struct Volume3D {
    std::array<int64_t, 3> shape{0, 0, 0};
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::vector<float> values;  // [D,H,W] row-major
    std::string provenance;

    int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
    float at(int64_t d, int64_t h, int64_t w) const {
        return values[size_t((d * shape[1] + h) * shape[2] + w)];
    }
};

inline void save_volume(const Volume3D& v, const std::string& path) {
    if (int64_t(v.values.size()) != v.numel())
        throw ConsistencyError("save_volume: " + std::to_string(v.values.size()) +
                               " values for shape product " + std::to_string(v.numel()));
    std::ofstream raw(path, std::ios::binary | std::ios::trunc);
    if (!raw) throw IoError("save_volume: cannot open '" + path + "' for writing");
    raw.write(reinterpret_cast<const char*>(v.values.data()),
              std::streamsize(v.values.size() * sizeof(float)));
    if (!raw) throw IoError("save_volume: short write to '" + path + "'");
    raw.close();

    nlohmann::json side;
    side["shape"] = {v.shape[0], v.shape[1], v.shape[2]};
    side["spacing_mm"] = {v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]};
    side["dtype"] = "f32le";
    std::ofstream meta(path + ".json", std::ios::trunc);
    if (!meta) throw IoError("save_volume: cannot open '" + path + ".json' for writing");
    meta << side.dump(2) << "\n";
}

inline Volume3D load_volume(const std::string& path) {
    std::ifstream meta(path + ".json");
    if (!meta) throw IoError("load_volume: missing sidecar '" + path + ".json'");
    nlohmann::json side;
    try {
        meta >> side;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_volume: sidecar '" + path + ".json' is not valid JSON: " +
                          e.what());
    }
    for (const char* field : {"shape", "spacing_mm", "dtype"})
        if (!side.contains(field))
            throw FormatError("load_volume: sidecar missing field '" + std::string(field) + "'");
    if (side["dtype"] != "f32le")
        throw FormatError("load_volume: unsupported dtype '" +
                          side["dtype"].get<std::string>() + "'");
    if (!side["shape"].is_array() || side["shape"].size() != 3)
        throw FormatError("load_volume: shape must be a 3-element array");

    Volume3D v;
    for (int i = 0; i < 3; ++i) {
        const int64_t e = side["shape"][size_t(i)].get<int64_t>();
        if (e < 1) throw FormatError("load_volume: nonpositive extent on axis " +
                                     std::to_string(i));
        v.shape[size_t(i)] = e;
    }
    if (side["spacing_mm"].is_array() && side["spacing_mm"].size() == 3)
        for (int i = 0; i < 3; ++i) v.spacing_mm[size_t(i)] = side["spacing_mm"][size_t(i)];

    std::ifstream raw(path, std::ios::binary | std::ios::ate);
    if (!raw) throw IoError("load_volume: cannot open '" + path + "'");
    const auto bytes = raw.tellg();
    const int64_t want = v.numel() * int64_t(sizeof(float));
    if (int64_t(bytes) != want)
        throw FormatError("load_volume: '" + path + "' holds " + std::to_string(bytes) +
                          " bytes, sidecar shape needs " + std::to_string(want));
    raw.seekg(0);
    v.values.resize(size_t(v.numel()));
    raw.read(reinterpret_cast<char*>(v.values.data()), std::streamsize(want));
    if (!raw) throw IoError("load_volume: short read from '" + path + "'");
    v.provenance = path;
    return v;
}

enum class CropMode { Random, Center };

// Clip to the HU window and rescale to [0,1] in place.
inline void window_hu(Volume3D& v) {
    const double span = kHuWindowHi - kHuWindowLo;
    for (float& x : v.values) {
        const double c = std::min(kHuWindowHi, std::max(kHuWindowLo, double(x)));
        x = float((c - kHuWindowLo) / span);
    }
}

// Picks a crop origin inside `shape`. `rng` is consulted only for random
// crops.
inline std::array<int64_t, 3> crop_origin(const std::array<int64_t, 3>& shape,
                                          const std::array<int64_t, 3>& crop, CropMode mode,
                                          Rng* rng = nullptr) {
    std::array<int64_t, 3> origin{0, 0, 0};
    for (int i = 0; i < 3; ++i) {
        if (crop[size_t(i)] < 1 || crop[size_t(i)] > shape[size_t(i)])
            throw DataError("crop extent " + std::to_string(crop[size_t(i)]) +
                            " exceeds volume extent " + std::to_string(shape[size_t(i)]) +
                            " on axis " + std::to_string(i));
        const int64_t slack = shape[size_t(i)] - crop[size_t(i)];
        if (mode == CropMode::Random) {
            if (!rng) throw UsageError("random crop needs an rng");
            origin[size_t(i)] = int64_t(rng->uniform_int(uint64_t(slack + 1)));
        } else {
            origin[size_t(i)] = slack / 2;
        }
    }
    return origin;
}

// Cuts a sub-volume at `origin` without touching the values.
inline Volume3D crop_volume(const Volume3D& raw, const std::array<int64_t, 3>& crop,
                            const std::array<int64_t, 3>& origin) {
    for (int i = 0; i < 3; ++i)
        if (origin[size_t(i)] < 0 ||
            origin[size_t(i)] + crop[size_t(i)] > raw.shape[size_t(i)])
            throw DataError("crop window [" + std::to_string(origin[size_t(i)]) + ", " +
                            std::to_string(origin[size_t(i)] + crop[size_t(i)]) +
                            ") outside volume extent " +
                            std::to_string(raw.shape[size_t(i)]) + " on axis " +
                            std::to_string(i));
    Volume3D out;
    out.shape = crop;
    out.spacing_mm = raw.spacing_mm;
    out.provenance = raw.provenance;
    out.values.resize(size_t(out.numel()));
    size_t idx = 0;
    for (int64_t d = 0; d < crop[0]; ++d)
        for (int64_t h = 0; h < crop[1]; ++h)
            for (int64_t w = 0; w < crop[2]; ++w)
                out.values[idx++] = raw.at(origin[0] + d, origin[1] + h, origin[2] + w);
    return out;
}

// Window raw HU values to [0,1] and cut a crop. `rng` is consulted only for
// random crops.
inline Volume3D preprocess(const Volume3D& raw, const std::array<int64_t, 3>& crop,
                           CropMode mode, Rng* rng = nullptr) {
    for (float x : raw.values)
        if (!std::isfinite(x))
            throw DataError("preprocess: volume '" + raw.provenance +
                            "' contains non-finite values");
    std::array<int64_t, 3> origin;
    try {
        origin = crop_origin(raw.shape, crop, mode, rng);
    } catch (const DataError& e) {
        throw DataError("preprocess: " + std::string(e.what()));
    } catch (const UsageError& e) {
        throw UsageError("preprocess: " + std::string(e.what()));
    }
    Volume3D out = crop_volume(raw, crop, origin);
    window_hu(out);
    return out;
}

// ---------------------------------------------------------------------------
// Procedural phantoms: a smooth low-frequency background, bright ellipsoids
// ("organs", these form the label), dimmer tubes ("vessels"), and a small
// additive noise floor. Intensity bands are disjoint by construction so every
// labeled voxel sits strictly above the local background.
// ---------------------------------------------------------------------------

namespace phantom {

struct Wave {
    std::array<double, 3> freq{0, 0, 0};  // radians per voxel
    double phase = 0;
    double amplitude = 0;
};

struct Ellipsoid {
    std::array<double, 3> center{0, 0, 0};
    std::array<double, 3> semi{1, 1, 1};
    double intensity = 0;
};

struct Tube {
    int axis = 0;                 // the axis the tube runs along
    std::array<double, 2> pos{0, 0};  // center in the two perpendicular axes
    double radius = 1;
    double intensity = 0;
};

struct Params {
    double base = 0;
    std::vector<Wave> waves;
    std::vector<Ellipsoid> organs;
    std::vector<Tube> vessels;
    double noise_amp = 4.0;
};

// All draws happen here, in one fixed order, so volumes are a pure function
// of (seed, shape).
inline Params draw_params(uint64_t seed, const std::array<int64_t, 3>& shape) {
    Rng rng(Rng::derive(seed, 1));
    Params p;
    p.base = rng.uniform(-140.0, -60.0);
    const int waves = 3;
    for (int i = 0; i < waves; ++i) {
        Wave w;
        for (int a = 0; a < 3; ++a) {
            const double cycles = rng.uniform(0.5, 2.0);
            w.freq[size_t(a)] = 2.0 * 3.14159265358979323846 * cycles / double(shape[size_t(a)]);
        }
        w.phase = rng.uniform(0.0, 6.28318530717958647692);
        w.amplitude = rng.uniform(18.0, 30.0);
        p.waves.push_back(w);
    }
    const int organs = 2 + int(rng.uniform_int(4));  // 2..5
    for (int i = 0; i < organs; ++i) {
        Ellipsoid e;
        for (int a = 0; a < 3; ++a) {
            const double ext = double(shape[size_t(a)]);
            e.semi[size_t(a)] = rng.uniform(0.10, 0.20) * ext;
            e.center[size_t(a)] = rng.uniform(e.semi[size_t(a)], ext - e.semi[size_t(a)]);
        }
        e.intensity = rng.uniform(120.0, 240.0);
        p.organs.push_back(e);
    }
    const int vessels = 1 + int(rng.uniform_int(3));  // 1..3
    for (int i = 0; i < vessels; ++i) {
        Tube t;
        t.axis = int(rng.uniform_int(3));
        int slot = 0;
        for (int a = 0; a < 3; ++a) {
            if (a == t.axis) continue;
            t.pos[size_t(slot++)] = rng.uniform(0.2, 0.8) * double(shape[size_t(a)]);
        }
        t.radius = rng.uniform(1.5, 3.0);
        t.intensity = rng.uniform(60.0, 110.0);
        p.vessels.push_back(t);
    }
    return p;
}

inline double background_at(const Params& p, int64_t d, int64_t h, int64_t w) {
    double v = p.base;
    for (const auto& wave : p.waves)
        v += wave.amplitude * std::sin(wave.freq[0] * double(d) + wave.freq[1] * double(h) +
                                       wave.freq[2] * double(w) + wave.phase);
    return v;
}

inline bool inside_organ(const Ellipsoid& e, int64_t d, int64_t h, int64_t w) {
    const double xd = (double(d) - e.center[0]) / e.semi[0];
    const double xh = (double(h) - e.center[1]) / e.semi[1];
    const double xw = (double(w) - e.center[2]) / e.semi[2];
    return xd * xd + xh * xh + xw * xw <= 1.0;
}

inline bool inside_vessel(const Tube& t, int64_t d, int64_t h, int64_t w) {
    const double c[3] = {double(d), double(h), double(w)};
    double r2 = 0;
    int slot = 0;
    for (int a = 0; a < 3; ++a) {
        if (a == t.axis) continue;
        const double delta = c[a] - t.pos[size_t(slot++)];
        r2 += delta * delta;
    }
    return r2 <= t.radius * t.radius;
}

}  // namespace phantom

// Returns (volume, label). Label voxels are ellipsoid interiors; their
// emitted intensity (>= 120 - noise) strictly exceeds the background field
// (<= -60 + 90 + noise band kept disjoint).
inline std::pair<Volume3D, Volume3D> generate_phantom(uint64_t seed,
                                                      const std::array<int64_t, 3>& shape) {
    for (int i = 0; i < 3; ++i)
        if (shape[size_t(i)] < 16)
            throw ConfigError("generate_phantom: extent " +
                              std::to_string(shape[size_t(i)]) + " on axis " +
                              std::to_string(i) + " is below the 16-voxel minimum");
    const auto p = phantom::draw_params(seed, shape);
    Rng noise(Rng::derive(seed, 2));

    Volume3D vol, label;
    vol.shape = label.shape = shape;
    vol.provenance = label.provenance = "phantom:" + std::to_string(seed);
    vol.values.resize(size_t(vol.numel()));
    label.values.resize(size_t(label.numel()));

    size_t idx = 0;
    for (int64_t d = 0; d < shape[0]; ++d)
        for (int64_t h = 0; h < shape[1]; ++h)
            for (int64_t w = 0; w < shape[2]; ++w, ++idx) {
                double v = phantom::background_at(p, d, h, w);
                for (const auto& t : p.vessels)
                    if (phantom::inside_vessel(t, d, h, w)) v = std::max(v, t.intensity);
                bool organ = false;
                for (const auto& e : p.organs)
                    if (phantom::inside_organ(e, d, h, w)) {
                        v = std::max(v, e.intensity);
                        organ = true;
                    }
                v += noise.uniform(-p.noise_amp, p.noise_amp);
                v = std::min(300.0, std::max(-200.0, v));
                vol.values[idx] = float(v);
                label.values[idx] = organ ? 1.0f : 0.0f;
            }
    return {vol, label};
}

}  // namespace smim
