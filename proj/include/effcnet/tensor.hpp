#pragma once

#include "effcnet/errors.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace effcnet {

using Shape = std::vector<std::size_t>;
using Strides = std::vector<std::ptrdiff_t>;
using TensorId = std::uint64_t;

std::size_t shape_numel(const Shape& shape);
Strides row_major_strides(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
class Tape;

namespace detail {
struct TensorAccess;
}

// Strided N-d array over a shared, immutable buffer. Copies are cheap handle
// copies; no operation writes into an existing buffer. Each handle carries a
// unique id that the tape uses to route gradients.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, T fill);
    Tensor(Shape shape, std::vector<T> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

    bool defined() const { return storage_ != nullptr; }
    TensorId id() const { return id_; }

    const Shape& shape() const { return shape_; }
    const Strides& strides() const { return strides_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return shape_numel(shape_); }
    std::size_t dim(std::size_t axis) const;

    bool is_contiguous() const;
    // Row-major copy when the handle is a strided view; the same handle otherwise.
    Tensor contiguous() const;

    // Element access through strides.
    T at(std::initializer_list<std::size_t> index) const;
    T at(std::span<const std::size_t> index) const;
    // Value of a single-element tensor.
    T item() const;

    // Flat row-major view. Throws ShapeError on a non-contiguous handle.
    std::span<const T> values() const;
    std::vector<T> to_vector() const;

    bool requires_grad() const { return requires_grad_; }
    bool is_leaf() const { return leaf_; }
    // Marks a leaf as a gradient target. Non-leaf results track automatically.
    Tensor& set_requires_grad(bool flag);
    // Same data under a fresh id, cut from any tape.
    Tensor detach() const;

    // Views (differentiable when recorded).
    Tensor reshape(Shape shape) const;
    Tensor transpose(std::size_t a, std::size_t b) const;

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out;
        out.reserve(numel());
        for (T v : to_vector()) {
            out.push_back(static_cast<U>(v));
        }
        return Tensor<U>(shape_, std::move(out));
    }

private:
    friend struct detail::TensorAccess;

    std::shared_ptr<const std::vector<T>> storage_;
    std::size_t offset_ = 0;
    Shape shape_;
    Strides strides_;
    TensorId id_ = 0;
    bool requires_grad_ = false;
    bool leaf_ = true;
};

// Per-input gradients returned by an op's backward closure; an undefined
// tensor means "no gradient flows to this input".
template <typename T>
using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>& grad_output)>;

template <typename T>
class Gradients {
public:
    bool contains(const Tensor<T>& t) const { return grads_.count(t.id()) != 0; }
    const Tensor<T>& at(const Tensor<T>& t) const;
    std::size_t size() const { return grads_.size(); }

    void insert(TensorId id, Tensor<T> grad) { grads_.insert_or_assign(id, std::move(grad)); }

private:
    std::unordered_map<TensorId, Tensor<T>> grads_;
};

// Reverse-mode tape. Ops record onto the tape made current by a
// RecordingScope whenever one of their inputs requires grad. A tape is
// consumed by one backward() call and cannot be replayed.
template <typename T>
class Tape {
public:
    struct Entry {
        std::string op;
        std::vector<TensorId> inputs;
        std::vector<bool> input_is_leaf;
        std::vector<bool> input_requires_grad;
        std::vector<Shape> input_shapes;
        TensorId output = 0;
        Shape output_shape;
        BackwardFn<T> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::string_view op, std::span<const Tensor<T>* const> inputs, const Tensor<T>& output,
                BackwardFn<T> backward);

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    bool consumed() const { return consumed_; }

    Gradients<T> backward(const Tensor<T>& loss);

private:
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

template <typename T>
Tape<T>*& current_tape();

// Makes `tape` current for the enclosing scope (thread-local, nestable).
template <typename T>
class RecordingScope {
public:
    explicit RecordingScope(Tape<T>& tape) : previous_(current_tape<T>()) { current_tape<T>() = &tape; }
    ~RecordingScope() { current_tape<T>() = previous_; }
    RecordingScope(const RecordingScope&) = delete;
    RecordingScope& operator=(const RecordingScope&) = delete;

private:
    Tape<T>* previous_;
};

// Suspends recording for the enclosing scope.
template <typename T>
class NoGradScope {
public:
    NoGradScope() : previous_(current_tape<T>()) { current_tape<T>() = nullptr; }
    ~NoGradScope() { current_tape<T>() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<T>* previous_;
};

namespace detail {

struct TensorAccess {
    template <typename T>
    static Tensor<T> view(const Tensor<T>& base, std::size_t offset, Shape shape, Strides strides)
    {
        Tensor<T> t;
        t.storage_ = base.storage_;
        t.offset_ = offset;
        t.shape_ = std::move(shape);
        t.strides_ = std::move(strides);
        t.id_ = next_id();
        return t;
    }
    template <typename T>
    static void mark_result(Tensor<T>& t)
    {
        t.requires_grad_ = true;
        t.leaf_ = false;
    }
    template <typename T>
    static std::size_t offset(const Tensor<T>& t)
    {
        return t.offset_;
    }
    static TensorId next_id();
};

// Wraps a freshly computed buffer as an op result and records it on the
// current tape when any input requires grad.
template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward);

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs);

} // namespace detail

// Elementwise arithmetic. Shapes must match, or one side is a single-element
// tensor (scalar broadcast).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b)
{
    return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b)
{
    return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b)
{
    return mul(a, b);
}

// Central-difference check of the tape gradient of a scalar function.
// Returns max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// order 2 uses (f(x+h) - f(x-h)) / 2h; order 4 the five-point stencil, which
// allows a larger h when some true gradients are tiny and roundoff dominates.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps = 1e-5, int order = 2);

// Same check over several inputs at once; the maximum is taken across all of them.
double grad_check_many(const std::function<Tensor<double>(std::span<const Tensor<double>>)>& f,
                       std::span<const Tensor<double>> inputs, double eps = 1e-5, int order = 2);

} // namespace effcnet
