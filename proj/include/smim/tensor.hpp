#pragma once
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "smim/error.hpp"
#include "smim/rng.hpp"

namespace smim {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Autodiff mode flag. Ops record onto the tape only while enabled.
// Thread-local: one trainer per thread, per the concurrency contract.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <class T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;      // empty until a gradient is accumulated
    bool requires_grad = false;
    bool taped = false;       // produced by a recorded op since the last clear
};

// Shared-ownership dense tensor, row-major, last axis fastest.
template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return filled(std::move(shape), T(0));
    }

    static Tensor filled(Shape shape, T v) {
        auto d = std::make_shared<TensorData<T>>();
        d->values.assign(size_t(shape_numel(shape)), v);
        d->shape = std::move(shape);
        return Tensor(std::move(d));
    }

    static Tensor from_values(Shape shape, std::vector<T> values) {
        if (int64_t(values.size()) != shape_numel(shape))
            throw DimensionError("tensor init: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(shape));
        auto d = std::make_shared<TensorData<T>>();
        d->shape = std::move(shape);
        d->values = std::move(values);
        return Tensor(std::move(d));
    }

    static Tensor scalar(T v) { return from_values({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
        auto t = zeros(std::move(shape));
        for (auto& v : t.values()) v = T(rng.gaussian()) * stddev;
        return t;
    }

    bool defined() const { return bool(d_); }
    const Shape& shape() const { return d_->shape; }
    int64_t numel() const { return int64_t(d_->values.size()); }
    int64_t dim(int i) const { return d_->shape[size_t(i)]; }
    int ndim() const { return int(d_->shape.size()); }

    std::vector<T>& values() { return d_->values; }
    const std::vector<T>& values() const { return d_->values; }
    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }

    T item() const {
        if (numel() != 1)
            throw UsageError("item() on tensor with " + std::to_string(numel()) + " elements");
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }
    bool taped() const { return d_->taped; }
    void set_taped(bool v) { d_->taped = v; }
    // Whether gradients must flow through/into this tensor.
    bool needs_grad() const { return d_->requires_grad || d_->taped; }

    bool has_grad() const { return !d_->grad.empty(); }
    // Gradient buffer, allocated to zeros on first use.
    std::vector<T>& grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
        return d_->grad;
    }
    const std::vector<T>& grad() const { return d_->grad; }
    void zero_grad() { d_->grad.clear(); }

    bool same_object(const Tensor& o) const { return d_ == o.d_; }

    // Deep copy of values only (fresh leaf).
    Tensor clone_detached() const {
        return from_values(d_->shape, d_->values);
    }

private:
    explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData<T>> d_;
};

template <class T>
struct TapeNode {
    const char* op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
};

// Per-thread op tape. Append order is a topological order of the graph, so a
// reverse sweep visits every node exactly once after all of its consumers.
template <class T>
class Tape {
public:
    static Tape& instance() {
        thread_local Tape tape;
        return tape;
    }

    void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                std::function<void()> backward) {
        output.set_taped(true);
        nodes_.push_back(TapeNode<T>{op, std::move(inputs), std::move(output), std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss)=1 and sweeps the tape in reverse, accumulating
    // gradients into every tensor reached. Clears the tape afterward; grads on
    // leaves (parameters) survive until zero_grad.
    void backward(Tensor<T> loss) {
        if (!loss.defined() || loss.numel() != 1) {
            clear();
            throw UsageError("backward requires a scalar loss");
        }
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->output.has_grad()) continue;
            it->backward();
        }
        clear();
    }

    void clear() {
        for (auto& n : nodes_) {
            n.output.set_taped(false);
            n.output.zero_grad();
            for (auto& in : n.inputs)
                if (in.taped()) in.zero_grad();  // keep leaf grads, drop intermediates
        }
        nodes_.clear();
    }

private:
    Tape() = default;
    std::vector<TapeNode<T>> nodes_;
};

template <class T>
inline bool tape_active(std::initializer_list<Tensor<T>> inputs) {
    if (!grad_mode_flag()) return false;
    for (const auto& t : inputs)
        if (t.defined() && t.needs_grad()) return true;
    return false;
}

template <class T>
inline bool tape_active(const std::vector<Tensor<T>>& inputs) {
    if (!grad_mode_flag()) return false;
    for (const auto& t : inputs)
        if (t.defined() && t.needs_grad()) return true;
    return false;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class T>
void check_same_shape(Tensor<T> a, Tensor<T> b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    check_same_shape(a, b, "add");
    auto out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (tape_active<T>({a, b})) {
        Tape<T>::instance().record("add", {a, b}, out, [a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
    check_same_shape(a, b, "sub");
    auto out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (tape_active<T>({a, b})) {
        Tape<T>::instance().record("sub", {a, b}, out, [a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    check_same_shape(a, b, "mul");
    auto out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (tape_active<T>({a, b})) {
        Tape<T>::instance().record("mul", {a, b}, out, [a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                const T* pb2 = b.data();
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb2[i];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                const T* pa2 = a.data();
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa2[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(Tensor<T> a, T c) {
    auto out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("scale", {a}, out, [a, out, c]() mutable {
            const auto& go = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

template <class T>
Tensor<T> sum_all(Tensor<T> a) {
    T acc = 0;
    const T* pa = a.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    auto out = Tensor<T>::scalar(acc);
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("sum_all", {a}, out, [a, out]() mutable {
            const T g = out.grad()[0];
            auto& ga = a.grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> mean_all(Tensor<T> a) {
    const int64_t n = a.numel();
    T acc = 0;
    const T* pa = a.data();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    auto out = Tensor<T>::scalar(acc / T(n));
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("mean_all", {a}, out, [a, out, n]() mutable {
            const T g = out.grad()[0] / T(n);
            auto& ga = a.grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

// Copying reshape; same element order, new extents.
template <class T>
Tensor<T> reshape(Tensor<T> a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto out = Tensor<T>::from_values(std::move(shape), a.values());
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("reshape", {a}, out, [a, out]() mutable {
            const auto& go = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        });
    }
    return out;
}

// Row gather from a [R,C] matrix.
template <class T>
Tensor<T> gather_rows(Tensor<T> a, std::vector<int64_t> idx) {
    if (a.ndim() != 2) throw DimensionError("gather_rows: expected 2-d input, got " + shape_str(a.shape()));
    const int64_t rows = a.dim(0), cols = a.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= rows)
            throw DimensionError("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(rows));
    auto out = Tensor<T>::zeros({int64_t(idx.size()), cols});
    const T* pa = a.data();
    T* po = out.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(pa + idx[r] * cols, pa + (idx[r] + 1) * cols, po + int64_t(r) * cols);
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("gather_rows", {a}, out, [a, out, idx = std::move(idx), cols]() mutable {
            const auto& go = out.grad();
            auto& ga = a.grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int64_t c = 0; c < cols; ++c)
                    ga[size_t(idx[r] * cols + c)] += go[r * size_t(cols) + size_t(c)];
        });
    }
    return out;
}

// Scatter [K,C] rows into a zero [R,C] matrix at the given row indices.
template <class T>
Tensor<T> scatter_rows(Tensor<T> rows, std::vector<int64_t> idx, int64_t num_rows) {
    if (rows.ndim() != 2) throw DimensionError("scatter_rows: expected 2-d input");
    if (int64_t(idx.size()) != rows.dim(0))
        throw DimensionError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                             std::to_string(rows.dim(0)) + " rows");
    const int64_t cols = rows.dim(1);
    auto out = Tensor<T>::zeros({num_rows, cols});
    const T* pr = rows.data();
    T* po = out.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(pr + int64_t(r) * cols, pr + int64_t(r + 1) * cols, po + idx[r] * cols);
    if (tape_active<T>({rows})) {
        Tape<T>::instance().record("scatter_rows", {rows}, out, [rows, out, idx, cols]() mutable {
            const auto& go = out.grad();
            auto& gr = rows.grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int64_t c = 0; c < cols; ++c)
                    gr[r * size_t(cols) + size_t(c)] += go[size_t(idx[r] * cols + c)];
        });
    }
    return out;
}

template <class T>
Tensor<T> slice_cols(Tensor<T> a, int64_t c0, int64_t c1) {
    if (a.ndim() != 2) throw DimensionError("slice_cols: expected 2-d input");
    const int64_t rows = a.dim(0), cols = a.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1)
        throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") of " + std::to_string(cols) + " columns");
    const int64_t w = c1 - c0;
    auto out = Tensor<T>::zeros({rows, w});
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        std::copy(pa + r * cols + c0, pa + r * cols + c1, po + r * w);
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("slice_cols", {a}, out, [a, out, c0, w, cols, rows]() mutable {
            const auto& go = out.grad();
            auto& ga = a.grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < w; ++c)
                    ga[size_t(r * cols + c0 + c)] += go[size_t(r * w + c)];
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_cols(std::vector<Tensor<T>> parts) {
    if (parts.empty()) throw UsageError("concat_cols: no inputs");
    const int64_t rows = parts[0].dim(0);
    int64_t cols = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != rows)
            throw DimensionError("concat_cols: row mismatch");
        cols += p.dim(1);
    }
    auto out = Tensor<T>::zeros({rows, cols});
    T* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p.dim(1);
        const T* pp = p.data();
        for (int64_t r = 0; r < rows; ++r)
            std::copy(pp + r * w, pp + (r + 1) * w, po + r * cols + off);
        off += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || (grad_mode_flag() && p.needs_grad());
    if (any) {
        std::vector<Tensor<T>> ins = parts;
        Tape<T>::instance().record("concat_cols", ins, out, [parts, out, rows, cols]() mutable {
            const auto& go = out.grad();
            int64_t off2 = 0;
            for (auto& p : parts) {
                const int64_t w = p.dim(1);
                if (p.needs_grad()) {
                    auto& gp = p.grad();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < w; ++c)
                            gp[size_t(r * w + c)] += go[size_t(r * cols + off2 + c)];
                }
                off2 += w;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> transpose2d(Tensor<T> a) {
    if (a.ndim() != 2) throw DimensionError("transpose2d: expected 2-d input");
    const int64_t rows = a.dim(0), cols = a.dim(1);
    auto out = Tensor<T>::zeros({cols, rows});
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            po[c * rows + r] = pa[r * cols + c];
    if (tape_active<T>({a})) {
        Tape<T>::instance().record("transpose2d", {a}, out, [a, out, rows, cols]() mutable {
            const auto& go = out.grad();
            auto& ga = a.grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < cols; ++c)
                    ga[size_t(r * cols + c)] += go[size_t(c * rows + r)];
        });
    }
    return out;
}

template <class T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul: expected 2-d inputs");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner axis " + std::to_string(a.dim(1)) + " vs " +
                             std::to_string(b.dim(0)));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::zeros({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < m; ++i) {
        T* orow = po + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (tape_active<T>({a, b})) {
        Tape<T>::instance().record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
            const auto& go = out.grad();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                const T* pb2 = b.data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        T acc = 0;
                        for (int64_t j = 0; j < n; ++j)
                            acc += go[size_t(i * n + j)] * pb2[p * n + j];
                        ga[size_t(i * k + p)] += acc;
                    }
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                const T* pa2 = a.data();
                for (int64_t p = 0; p < k; ++p)
                    for (int64_t j = 0; j < n; ++j) {
                        T acc = 0;
                        for (int64_t i = 0; i < m; ++i)
                            acc += pa2[i * k + p] * go[size_t(i * n + j)];
                        gb[size_t(p * n + j)] += acc;
                    }
            }
        });
    }
    return out;
}

// Clears gradients and tape state; call between independent steps if an
// exception unwound mid-graph.
template <class T>
void reset_tape() {
    Tape<T>::instance().clear();
}

// Entry point mirroring the loss.backward() idiom.
template <class T>
void backward(Tensor<T> loss) {
    Tape<T>::instance().backward(loss);
}

} // namespace smim
