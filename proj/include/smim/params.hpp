#pragma once

// Named parameter store. Every trainable tensor in a model lives here under a
// dotted path ("encoder.stage1.block0.dw.w"). Insertion order is deterministic
// and is the canonical iteration order for optimizers and checkpoints, so a
// fixed seed yields bit-identical training runs.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace smim {

template <typename T>
class ParamStore {
public:
    // Registers a new parameter. Rejects duplicates so two model components
    // can never silently share (or shadow) a tensor.
    Tensor<T> add(const std::string& name, Tensor<T> value) {
        if (index_.count(name) > 0) {
            throw ConfigError("parameter '" + name + "' registered twice");
        }
        value.set_requires_grad(true);
        index_[name] = names_.size();
        names_.push_back(name);
        values_.push_back(value);
        return value;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ConfigError("unknown parameter '" + name + "'");
        }
        return values_[it->second];
    }

    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Tensor<T>>& tensors() const { return values_; }
    int64_t size() const { return int64_t(names_.size()); }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& t : values_) n += t.numel();
        return n;
    }

    void zero_grad() const {
        for (auto t : values_) t.zero_grad();  // handles share storage
    }

    // Copies values (not handles) from `src` for every name accepted by
    // `filter`. Returns the copied names. Shape mismatches are errors;
    // filtered names missing on either side are errors, so a transfer is
    // always exactly the expected set.
    template <typename Pred>
    std::vector<std::string> load_filtered(const ParamStore<T>& src, Pred filter) {
        std::vector<std::string> copied;
        for (const auto& name : src.names()) {
            if (!filter(name)) continue;
            if (!has(name)) {
                throw ConsistencyError("transfer source parameter '" + name +
                                       "' has no destination");
            }
            Tensor<T> dst = get(name);
            Tensor<T> s = src.get(name);
            if (dst.shape() != s.shape()) {
                throw ConsistencyError("transfer shape mismatch for '" + name + "': " +
                                       shape_str(s.shape()) + " -> " + shape_str(dst.shape()));
            }
            dst.values() = s.values();
            copied.push_back(name);
        }
        for (const auto& name : names_) {
            if (filter(name) && !src.has(name)) {
                throw ConsistencyError("transfer destination parameter '" + name +
                                       "' missing from source");
            }
        }
        return copied;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> values_;
    std::unordered_map<std::string, size_t> index_;
};

// Fan-in-scaled gaussian init (He-style). `fan_in` is the number of inputs
// feeding one output unit.
template <typename T>
Tensor<T> init_gaussian(const Shape& shape, int64_t fan_in, Rng& rng) {
    const double scale = std::sqrt(2.0 / double(fan_in > 0 ? fan_in : 1));
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (auto& v : t.values()) v = T(rng.gaussian() * scale);
    return t;
}

template <typename T>
Tensor<T> init_gaussian_flat(const Shape& shape, double stddev, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (auto& v : t.values()) v = T(rng.gaussian() * stddev);
    return t;
}

}  // namespace smim
