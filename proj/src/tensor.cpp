#include "effcnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace effcnet {

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

Strides row_major_strides(const Shape& shape)
{
    Strides strides(shape.size());
    std::ptrdiff_t s = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[i] = s;
        s *= static_cast<std::ptrdiff_t>(shape[i]);
    }
    return strides;
}

std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape)
{
    if (shape.empty()) {
        throw ShapeError("tensor shape must have at least one axis");
    }
    for (std::size_t e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape));
        }
    }
}

template <typename T>
void check_finite([[maybe_unused]] std::string_view op, [[maybe_unused]] const std::vector<T>& values)
{
#ifndef NDEBUG
    for (T v : values) {
        if (!std::isfinite(v)) {
            throw NumericsError("non-finite value produced by " + std::string(op));
        }
    }
#endif
}

} // namespace

TensorId detail::TensorAccess::next_id()
{
    static std::atomic<TensorId> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
{
    check_extents(shape);
    storage_ = std::make_shared<const std::vector<T>>(shape_numel(shape), fill);
    strides_ = row_major_strides(shape);
    shape_ = std::move(shape);
    id_ = detail::TensorAccess::next_id();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
{
    check_extents(shape);
    if (values.size() != shape_numel(shape)) {
        throw ShapeError("buffer of " + std::to_string(values.size()) + " elements does not match shape " +
                         shape_string(shape));
    }
    storage_ = std::make_shared<const std::vector<T>>(std::move(values));
    strides_ = row_major_strides(shape);
    shape_ = std::move(shape);
    id_ = detail::TensorAccess::next_id();
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const
{
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
    }
    return shape_[axis];
}

template <typename T>
bool Tensor<T>::is_contiguous() const
{
    return strides_ == row_major_strides(shape_);
}

template <typename T>
Tensor<T> Tensor<T>::contiguous() const
{
    if (!defined() || is_contiguous()) {
        return *this;
    }
    Tensor<T> out(shape_, to_vector());
    out.requires_grad_ = requires_grad_;
    out.leaf_ = leaf_;
    out.id_ = id_;
    return out;
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const
{
    return at(std::span<const std::size_t>(index.begin(), index.size()));
}

template <typename T>
T Tensor<T>::at(std::span<const std::size_t> index) const
{
    if (index.size() != shape_.size()) {
        throw ShapeError("index rank " + std::to_string(index.size()) + " != tensor rank " +
                         std::to_string(shape_.size()));
    }
    std::ptrdiff_t off = static_cast<std::ptrdiff_t>(offset_);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= shape_[i]) {
            throw ShapeError("index out of range on axis " + std::to_string(i));
        }
        off += static_cast<std::ptrdiff_t>(index[i]) * strides_[i];
    }
    return (*storage_)[static_cast<std::size_t>(off)];
}

template <typename T>
T Tensor<T>::item() const
{
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return (*storage_)[offset_];
}

template <typename T>
std::span<const T> Tensor<T>::values() const
{
    if (!defined()) {
        return {};
    }
    if (!is_contiguous()) {
        throw ShapeError("values() requires a contiguous tensor");
    }
    return std::span<const T>(storage_->data() + offset_, numel());
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const
{
    if (!defined()) {
        return {};
    }
    if (is_contiguous()) {
        auto v = values();
        return std::vector<T>(v.begin(), v.end());
    }
    std::vector<T> out;
    out.reserve(numel());
    std::vector<std::size_t> idx(shape_.size(), 0);
    const std::size_t n = numel();
    for (std::size_t k = 0; k < n; ++k) {
        std::ptrdiff_t off = static_cast<std::ptrdiff_t>(offset_);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            off += static_cast<std::ptrdiff_t>(idx[i]) * strides_[i];
        }
        out.push_back((*storage_)[static_cast<std::size_t>(off)]);
        for (std::size_t i = idx.size(); i-- > 0;) {
            if (++idx[i] < shape_[i]) {
                break;
            }
            idx[i] = 0;
        }
    }
    return out;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag)
{
    if (!leaf_) {
        throw TapeError("requires_grad can only be set on leaf tensors");
    }
    requires_grad_ = flag;
    return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const
{
    return detail::TensorAccess::view(*this, offset_, shape_, strides_);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const
{
    check_extents(shape);
    if (shape_numel(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    const Tensor<T> src = contiguous();
    Strides strides = row_major_strides(shape);
    Tensor<T> out = detail::TensorAccess::view(src, detail::TensorAccess::offset(src), shape, strides);
    if (detail::any_requires_grad<T>({this}) && current_tape<T>() != nullptr) {
        detail::TensorAccess::mark_result(out);
        const Shape in_shape = shape_;
        const Tensor<T>* inputs[] = {this};
        current_tape<T>()->record("reshape", inputs, out, [in_shape](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{Tensor<T>(in_shape, g.to_vector())};
        });
    }
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::transpose(std::size_t a, std::size_t b) const
{
    if (a >= rank() || b >= rank()) {
        throw ShapeError("transpose axes out of range");
    }
    Shape shape = shape_;
    Strides strides = strides_;
    std::swap(shape[a], shape[b]);
    std::swap(strides[a], strides[b]);
    Tensor<T> out = detail::TensorAccess::view(*this, offset_, shape, strides);
    if (detail::any_requires_grad<T>({this}) && current_tape<T>() != nullptr) {
        detail::TensorAccess::mark_result(out);
        const Tensor<T>* inputs[] = {this};
        current_tape<T>()->record("transpose", inputs, out, [a, b](const Tensor<T>& g) {
            return std::vector<Tensor<T>>{g.transpose(a, b).contiguous().detach()};
        });
    }
    return out;
}

template <typename T>
const Tensor<T>& Gradients<T>::at(const Tensor<T>& t) const
{
    auto it = grads_.find(t.id());
    if (it == grads_.end()) {
        throw TapeError("no gradient recorded for tensor id " + std::to_string(t.id()));
    }
    return it->second;
}

template <typename T>
Tape<T>*& current_tape()
{
    thread_local Tape<T>* tape = nullptr;
    return tape;
}

template <typename T>
void Tape<T>::record(std::string_view op, std::span<const Tensor<T>* const> inputs, const Tensor<T>& output,
                     BackwardFn<T> backward)
{
    if (consumed_) {
        throw TapeError("cannot record onto a tape that has already run backward");
    }
    Entry e;
    e.op = std::string(op);
    for (const Tensor<T>* in : inputs) {
        e.inputs.push_back(in->id());
        e.input_is_leaf.push_back(in->is_leaf());
        e.input_requires_grad.push_back(in->requires_grad());
        e.input_shapes.push_back(in->shape());
    }
    e.output = output.id();
    e.output_shape = output.shape();
    e.backward = std::move(backward);
    entries_.push_back(std::move(e));
}

template <typename T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss)
{
    if (consumed_) {
        throw TapeError("tape already consumed by a previous backward call");
    }
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a single-element loss tensor");
    }
    std::ptrdiff_t start = -1;
    for (std::size_t i = entries_.size(); i-- > 0;) {
        if (entries_[i].output == loss.id()) {
            start = static_cast<std::ptrdiff_t>(i);
            break;
        }
    }
    if (start < 0) {
        throw TapeError("loss tensor was not produced on this tape");
    }

    std::unordered_map<TensorId, std::vector<T>> acc;
    acc[loss.id()] = std::vector<T>{T(1)};
    Gradients<T> result;

    for (std::ptrdiff_t i = start; i >= 0; --i) {
        Entry& e = entries_[static_cast<std::size_t>(i)];
        auto it = acc.find(e.output);
        if (it == acc.end()) {
            continue;
        }
        std::vector<T> g = std::move(it->second);
        acc.erase(it);
        Tensor<T> grad_out(e.output_shape, std::move(g));
        std::vector<Tensor<T>> grads = e.backward(grad_out);
        for (std::size_t j = 0; j < e.inputs.size() && j < grads.size(); ++j) {
            if (!grads[j].defined() || !e.input_requires_grad[j]) {
                continue;
            }
            const std::vector<T> gj = grads[j].to_vector();
            auto& slot = acc[e.inputs[j]];
            if (slot.empty()) {
                slot = gj;
            } else {
                if (slot.size() != gj.size()) {
                    throw ShapeError("gradient size mismatch in op " + e.op);
                }
                for (std::size_t k = 0; k < gj.size(); ++k) {
                    slot[k] += gj[k];
                }
            }
        }
        // Re-published after each consumer so the last write holds the full sum.
        for (std::size_t j = 0; j < e.inputs.size(); ++j) {
            if (e.input_is_leaf[j] && e.input_requires_grad[j]) {
                auto leaf = acc.find(e.inputs[j]);
                if (leaf != acc.end()) {
                    result.insert(e.inputs[j], Tensor<T>(e.input_shapes[j], leaf->second));
                }
            }
        }
    }
    entries_.clear();
    entries_.shrink_to_fit();
    consumed_ = true;
    return result;
}

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs)
{
    for (const Tensor<T>* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward)
{
    check_finite(op, values);
    Tensor<T> out(std::move(shape), std::move(values));
    Tape<T>* tape = current_tape<T>();
    if (tape != nullptr && any_requires_grad(inputs)) {
        TensorAccess::mark_result(out);
        std::vector<const Tensor<T>*> ins(inputs);
        tape->record(op, ins, out, std::move(backward));
    }
    return out;
}

} // namespace detail

namespace {

enum class Arith { add, sub, mul };

template <typename T>
Tensor<T> binary_ew(const Tensor<T>& a_in, const Tensor<T>& b_in, Arith op, std::string_view name)
{
    const Tensor<T> a = a_in.contiguous();
    const Tensor<T> b = b_in.contiguous();
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.numel() == 1 && !same;
    const bool b_scalar = b.numel() == 1 && !same;
    if (!same && !a_scalar && !b_scalar) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[a_scalar ? 0 : i];
        const T y = bv[b_scalar ? 0 : i];
        switch (op) {
        case Arith::add: out[i] = x + y; break;
        case Arith::sub: out[i] = x - y; break;
        case Arith::mul: out[i] = x * y; break;
        }
    }
    const Shape a_shape = a.shape();
    const Shape b_shape = b.shape();
    BackwardFn<T> back = [a, b, op, a_scalar, b_scalar, a_shape, b_shape](const Tensor<T>& g) {
        auto gv = g.values();
        const std::size_t m = gv.size();
        std::vector<T> ga(a_scalar ? 1 : m, T(0));
        std::vector<T> gb(b_scalar ? 1 : m, T(0));
        auto av2 = a.values();
        auto bv2 = b.values();
        for (std::size_t i = 0; i < m; ++i) {
            const T x = av2[a_scalar ? 0 : i];
            const T y = bv2[b_scalar ? 0 : i];
            T da = T(0);
            T db = T(0);
            switch (op) {
            case Arith::add: da = gv[i]; db = gv[i]; break;
            case Arith::sub: da = gv[i]; db = -gv[i]; break;
            case Arith::mul: da = gv[i] * y; db = gv[i] * x; break;
            }
            ga[a_scalar ? 0 : i] += da;
            gb[b_scalar ? 0 : i] += db;
        }
        return std::vector<Tensor<T>>{Tensor<T>(a_shape, std::move(ga)), Tensor<T>(b_shape, std::move(gb))};
    };
    return detail::make_result<T>(name, out_shape, std::move(out), {&a_in, &b_in}, std::move(back));
}

} // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary_ew(a, b, Arith::add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary_ew(a, b, Arith::sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary_ew(a, b, Arith::mul, "mul");
}

namespace {

// c[m x n] = a[m x k] * b[k x n], all row-major.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n)
{
    std::fill(c, c + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

} // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a_in, const Tensor<T>& b_in)
{
    if (a_in.rank() != 2 || b_in.rank() != 2) {
        throw ShapeError("matmul expects 2-d operands");
    }
    const Tensor<T> a = a_in.contiguous();
    const Tensor<T> b = b_in.contiguous();
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    std::vector<T> out(m * n);
    gemm(a.values().data(), b.values().data(), out.data(), m, k, n);
    BackwardFn<T> back = [a, b, m, k, n](const Tensor<T>& g) {
        auto gv = g.values();
        auto av = a.values();
        auto bv = b.values();
        // dA = G * B^T, dB = A^T * G
        std::vector<T> ga(m * k, T(0));
        std::vector<T> gb(k * n, T(0));
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                T s = T(0);
                for (std::size_t j = 0; j < n; ++j) {
                    s += gv[i * n + j] * bv[p * n + j];
                }
                ga[i * k + p] = s;
            }
        }
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const T av_ip = av[i * k + p];
                for (std::size_t j = 0; j < n; ++j) {
                    gb[p * n + j] += av_ip * gv[i * n + j];
                }
            }
        }
        return std::vector<Tensor<T>>{Tensor<T>({m, k}, std::move(ga)), Tensor<T>({k, n}, std::move(gb))};
    };
    return detail::make_result<T>("matmul", Shape{m, n}, std::move(out), {&a_in, &b_in}, std::move(back));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x_in)
{
    const Tensor<T> x = x_in.contiguous();
    T s = T(0);
    for (T v : x.values()) {
        s += v;
    }
    const Shape shape = x.shape();
    BackwardFn<T> back = [shape](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{Tensor<T>(shape, g.item())};
    };
    return detail::make_result<T>("sum", Shape{1}, std::vector<T>{s}, {&x_in}, std::move(back));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x_in)
{
    const Tensor<T> x = x_in.contiguous();
    T s = T(0);
    for (T v : x.values()) {
        s += v;
    }
    const T n = static_cast<T>(x.numel());
    const Shape shape = x.shape();
    BackwardFn<T> back = [shape, n](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{Tensor<T>(shape, g.item() / n)};
    };
    return detail::make_result<T>("mean", Shape{1}, std::vector<T>{s / n}, {&x_in}, std::move(back));
}

double grad_check_many(const std::function<Tensor<double>(std::span<const Tensor<double>>)>& f,
                       std::span<const Tensor<double>> inputs, double eps, int order)
{
    if (order != 2 && order != 4) {
        throw ConfigError("grad_check: order must be 2 or 4");
    }
    std::vector<Tensor<double>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) {
        Tensor<double> leaf(in.shape(), in.to_vector());
        leaf.set_requires_grad(true);
        leaves.push_back(std::move(leaf));
    }

    Gradients<double> grads;
    {
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        const Tensor<double> out = f(leaves);
        if (out.numel() != 1) {
            throw ShapeError("grad_check requires a scalar-valued function");
        }
        if (!std::isfinite(out.item())) {
            throw NumericsError("grad_check: function value is not finite");
        }
        grads = tape.backward(out);
    }

    auto evaluate = [&](const std::vector<Tensor<double>>& args) {
        NoGradScope<double> no_grad;
        const double v = f(args).item();
        if (!std::isfinite(v)) {
            throw NumericsError("grad_check: function value is not finite under perturbation");
        }
        return v;
    };

    double worst = 0.0;
    std::vector<Tensor<double>> probe(leaves.begin(), leaves.end());
    for (std::size_t t = 0; t < leaves.size(); ++t) {
        const std::vector<double> base = leaves[t].to_vector();
        const std::vector<double> analytic = grads.contains(leaves[t])
                                                 ? grads.at(leaves[t]).to_vector()
                                                 : std::vector<double>(base.size(), 0.0);
        for (std::size_t i = 0; i < base.size(); ++i) {
            auto at = [&](double d) {
                std::vector<double> shifted = base;
                shifted[i] = base[i] + d;
                probe[t] = Tensor<double>(leaves[t].shape(), std::move(shifted));
                return evaluate(probe);
            };
            const double numeric =
                order == 2 ? (at(eps) - at(-eps)) / (2.0 * eps)
                           : (at(-2.0 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2.0 * eps)) / (12.0 * eps);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
        probe[t] = leaves[t];
    }
    return worst;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x, double eps,
                  int order)
{
    const Tensor<double> inputs[] = {x};
    return grad_check_many([&](std::span<const Tensor<double>> args) { return f(args[0]); }, inputs, eps, order);
}

#define EFFCNET_INSTANTIATE_TENSOR(T)                                                                   \
    template class Tensor<T>;                                                                           \
    template class Gradients<T>;                                                                        \
    template class Tape<T>;                                                                             \
    template Tape<T>*& current_tape<T>();                                                               \
    template bool detail::any_requires_grad<T>(std::initializer_list<const Tensor<T>*>);                \
    template Tensor<T> detail::make_result<T>(std::string_view, Shape, std::vector<T>,                  \
                                              std::initializer_list<const Tensor<T>*>, BackwardFn<T>);  \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                        \
    template Tensor<T> mean<T>(const Tensor<T>&);

EFFCNET_INSTANTIATE_TENSOR(float)
EFFCNET_INSTANTIATE_TENSOR(double)

} // namespace effcnet
