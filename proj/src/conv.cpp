#include "effcnet/layers.hpp"

#include <algorithm>

namespace effcnet {

ConvSpec ConvSpec::standard(int in_channels, int out_channels, int kernel, int stride, int padding)
{
    return ConvSpec{kernel, in_channels, out_channels, stride, padding < 0 ? (kernel - 1) / 2 : padding, 1};
}

ConvSpec ConvSpec::depthwise(int channels, int kernel, int stride, int padding)
{
    return ConvSpec{kernel, channels, channels, stride, padding < 0 ? (kernel - 1) / 2 : padding, channels};
}

ConvSpec ConvSpec::pointwise(int in_channels, int out_channels)
{
    return ConvSpec{1, in_channels, out_channels, 1, 0, 1};
}

ConvSpec ConvSpec::grouped(int in_channels, int out_channels, int kernel, int groups, int stride, int padding)
{
    return ConvSpec{kernel, in_channels, out_channels, stride, padding < 0 ? (kernel - 1) / 2 : padding, groups};
}

void ConvSpec::validate() const
{
    if (kernel < 1 || kernel % 2 == 0) {
        throw ShapeError("kernel size must be a positive odd integer, got " + std::to_string(kernel));
    }
    if (in_channels < 1 || out_channels < 1 || stride < 1 || padding < 0 || groups < 1) {
        throw ShapeError("convolution channels, stride and groups must be positive, padding non-negative");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
        throw ShapeError("channels (" + std::to_string(in_channels) + " -> " + std::to_string(out_channels) +
                         ") not divisible by groups " + std::to_string(groups));
    }
}

int ConvSpec::output_extent(int d) const
{
    const int out = (d + 2 * padding - kernel) / stride + 1;
    if (d + 2 * padding - kernel < 0 || out < 1) {
        throw ShapeError("convolution output extent < 1 for input extent " + std::to_string(d));
    }
    return out;
}

Shape ConvSpec::weight_shape() const
{
    const auto s = static_cast<std::size_t>(kernel);
    if (groups == in_channels && out_channels == in_channels && groups > 1) {
        return {s, s, static_cast<std::size_t>(in_channels)};
    }
    if (kernel == 1 && groups == 1) {
        return {static_cast<std::size_t>(in_channels), static_cast<std::size_t>(out_channels)};
    }
    return {s, s, static_cast<std::size_t>(in_channels / groups), static_cast<std::size_t>(out_channels)};
}

std::size_t ConvSpec::weight_count() const
{
    return static_cast<std::size_t>(kernel) * kernel * (in_channels / groups) * out_channels;
}

std::size_t ConvSpec::macs(int h, int w) const
{
    const auto oh = static_cast<std::size_t>(output_extent(h));
    const auto ow = static_cast<std::size_t>(output_extent(w));
    return oh * ow * weight_count();
}

namespace {

struct ConvGeometry {
    std::size_t n, x, h, w, y, oh, ow, s, stride, pad, g, xg, yg, r, p;
};

ConvGeometry geometry(const Shape& in, const ConvSpec& spec)
{
    spec.validate();
    if (in.size() != 4) {
        throw ShapeError("convolution input must be N,C,H,W, got " + shape_string(in));
    }
    if (in[1] != static_cast<std::size_t>(spec.in_channels)) {
        throw ShapeError("convolution expects " + std::to_string(spec.in_channels) + " input channels, got " +
                         std::to_string(in[1]));
    }
    ConvGeometry c{};
    c.n = in[0];
    c.x = in[1];
    c.h = in[2];
    c.w = in[3];
    c.y = static_cast<std::size_t>(spec.out_channels);
    c.oh = static_cast<std::size_t>(spec.output_extent(static_cast<int>(c.h)));
    c.ow = static_cast<std::size_t>(spec.output_extent(static_cast<int>(c.w)));
    c.s = static_cast<std::size_t>(spec.kernel);
    c.stride = static_cast<std::size_t>(spec.stride);
    c.pad = static_cast<std::size_t>(spec.padding);
    c.g = static_cast<std::size_t>(spec.groups);
    c.xg = c.x / c.g;
    c.yg = c.y / c.g;
    c.r = c.s * c.s * c.xg;
    c.p = c.oh * c.ow;
    return c;
}

bool is_plain_pointwise(const ConvGeometry& c)
{
    return c.s == 1 && c.stride == 1 && c.pad == 0;
}

// cols[r * P + p] for group `grp` of image `img`, r = (i * S + j) * Xg + m.
template <typename T>
void im2col(const T* in, const ConvGeometry& c, std::size_t img, std::size_t grp, T* cols)
{
    for (std::size_t i = 0; i < c.s; ++i) {
        for (std::size_t j = 0; j < c.s; ++j) {
            for (std::size_t m = 0; m < c.xg; ++m) {
                const std::size_t ch = grp * c.xg + m;
                const T* plane = in + (img * c.x + ch) * c.h * c.w;
                T* row = cols + ((i * c.s + j) * c.xg + m) * c.p;
                for (std::size_t oy = 0; oy < c.oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + i) -
                                              static_cast<std::ptrdiff_t>(c.pad);
                    T* dst = row + oy * c.ow;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.h)) {
                        std::fill(dst, dst + c.ow, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * c.w;
                    for (std::size_t ox = 0; ox < c.ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + j) -
                                                  static_cast<std::ptrdiff_t>(c.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(c.w)) ? T(0)
                                                                                     : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

// Dot product over eight fixed lanes so the loop vectorises without
// reassociation; the summation order is still fixed, so results are deterministic.
template <typename T>
T dot_lanes(const T* a, const T* b, std::size_t n)
{
    T lane[8] = {};
    std::size_t p = 0;
    for (; p + 8 <= n; p += 8) {
        for (std::size_t k = 0; k < 8; ++k) {
            lane[k] += a[p + k] * b[p + k];
        }
    }
    T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
    for (; p < n; ++p) {
        acc += a[p] * b[p];
    }
    return acc;
}

// Scatter-add of a column buffer back into the input gradient.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& c, std::size_t img, std::size_t grp, T* din)
{
    for (std::size_t i = 0; i < c.s; ++i) {
        for (std::size_t j = 0; j < c.s; ++j) {
            for (std::size_t m = 0; m < c.xg; ++m) {
                const std::size_t ch = grp * c.xg + m;
                T* plane = din + (img * c.x + ch) * c.h * c.w;
                const T* row = cols + ((i * c.s + j) * c.xg + m) * c.p;
                for (std::size_t oy = 0; oy < c.oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + i) -
                                              static_cast<std::ptrdiff_t>(c.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.h)) {
                        continue;
                    }
                    T* dst = plane + static_cast<std::size_t>(iy) * c.w;
                    const T* src = row + oy * c.ow;
                    for (std::size_t ox = 0; ox < c.ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + j) -
                                                  static_cast<std::ptrdiff_t>(c.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(c.w)) {
                            dst[static_cast<std::size_t>(ix)] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void forward_direct(const T* in, const T* wt, const ConvGeometry& c, T* out)
{
    for (std::size_t b = 0; b < c.n; ++b) {
        for (std::size_t n = 0; n < c.y; ++n) {
            const std::size_t grp = n / c.yg;
            for (std::size_t oy = 0; oy < c.oh; ++oy) {
                for (std::size_t ox = 0; ox < c.ow; ++ox) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < c.s; ++i) {
                        for (std::size_t j = 0; j < c.s; ++j) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + i) -
                                                      static_cast<std::ptrdiff_t>(c.pad);
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + j) -
                                                      static_cast<std::ptrdiff_t>(c.pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(c.h) ||
                                ix >= static_cast<std::ptrdiff_t>(c.w)) {
                                continue;
                            }
                            for (std::size_t m = 0; m < c.xg; ++m) {
                                const std::size_t ch = grp * c.xg + m;
                                acc += wt[((i * c.s + j) * c.xg + m) * c.y + n] *
                                       in[((b * c.x + ch) * c.h + static_cast<std::size_t>(iy)) * c.w +
                                          static_cast<std::size_t>(ix)];
                            }
                        }
                    }
                    out[((b * c.y + n) * c.oh + oy) * c.ow + ox] = acc;
                }
            }
        }
    }
}

bool is_depthwise(const ConvGeometry& c)
{
    return c.xg == 1 && c.yg == 1;
}

// Valid output columns [lo, hi) for kernel column j: 0 <= ox * stride + j - pad < w.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& c, std::size_t j)
{
    std::size_t lo = 0;
    while (lo < c.ow && lo * c.stride + j < c.pad) {
        ++lo;
    }
    std::size_t hi = lo;
    while (hi < c.ow && hi * c.stride + j < c.pad + c.w) {
        ++hi;
    }
    return {lo, hi};
}

// Depthwise layers skip the column buffer: each tap adds a shifted input row.
// Taps are visited in the same (i, j) order as the im2col path.
template <typename T>
void forward_depthwise(const T* in, const T* wt, const ConvGeometry& c, T* out)
{
    for (std::size_t b = 0; b < c.n; ++b) {
        for (std::size_t ch = 0; ch < c.x; ++ch) {
            const T* plane = in + (b * c.x + ch) * c.h * c.w;
            T* oplane = out + (b * c.y + ch) * c.p;
            std::fill(oplane, oplane + c.p, T(0));
            for (std::size_t i = 0; i < c.s; ++i) {
                for (std::size_t j = 0; j < c.s; ++j) {
                    const T wv = wt[(i * c.s + j) * c.y + ch];
                    const auto [lo, hi] = valid_columns(c, j);
                    for (std::size_t oy = 0; oy < c.oh; ++oy) {
                        const std::size_t iy = oy * c.stride + i;
                        if (iy < c.pad || iy >= c.pad + c.h) {
                            continue;
                        }
                        const T* src = plane + (iy - c.pad) * c.w + (j - std::min(j, c.pad));
                        const std::size_t shift = c.pad - std::min(j, c.pad);
                        T* dst = oplane + oy * c.ow;
                        if (c.stride == 1) {
                            for (std::size_t ox = lo; ox < hi; ++ox) {
                                dst[ox] += wv * src[ox - shift];
                            }
                        } else {
                            for (std::size_t ox = lo; ox < hi; ++ox) {
                                dst[ox] += wv * src[ox * c.stride - shift];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void backward_depthwise(const T* in, const T* wt, const T* gout, const ConvGeometry& c, T* din, T* dwt)
{
    for (std::size_t b = 0; b < c.n; ++b) {
        for (std::size_t ch = 0; ch < c.x; ++ch) {
            const T* plane = in + (b * c.x + ch) * c.h * c.w;
            T* dplane = din + (b * c.x + ch) * c.h * c.w;
            const T* gplane = gout + (b * c.y + ch) * c.p;
            for (std::size_t i = 0; i < c.s; ++i) {
                for (std::size_t j = 0; j < c.s; ++j) {
                    const std::size_t r = (i * c.s + j) * c.y + ch;
                    const T wv = wt[r];
                    const auto [lo, hi] = valid_columns(c, j);
                    T acc = T(0);
                    for (std::size_t oy = 0; oy < c.oh; ++oy) {
                        const std::size_t iy = oy * c.stride + i;
                        if (iy < c.pad || iy >= c.pad + c.h || lo >= hi) {
                            continue;
                        }
                        const std::size_t off = (iy - c.pad) * c.w + (j - std::min(j, c.pad));
                        const std::size_t shift = c.pad - std::min(j, c.pad);
                        const T* g = gplane + oy * c.ow;
                        if (c.stride == 1) {
                            acc += dot_lanes(plane + off + lo - shift, g + lo, hi - lo);
                            T* d = dplane + off + lo - shift;
                            for (std::size_t ox = lo; ox < hi; ++ox) {
                                d[ox - lo] += wv * g[ox];
                            }
                        } else {
                            for (std::size_t ox = lo; ox < hi; ++ox) {
                                const std::size_t k = off + ox * c.stride - shift;
                                acc += plane[k] * g[ox];
                                dplane[k] += wv * g[ox];
                            }
                        }
                    }
                    dwt[r] += acc;
                }
            }
        }
    }
}

template <typename T>
void forward_im2col(const T* in, const T* wt, const ConvGeometry& c, T* out)
{
    if (is_depthwise(c)) {
        forward_depthwise(in, wt, c, out);
        return;
    }
    std::vector<T> cols(is_plain_pointwise(c) ? 0 : c.r * c.p);
    for (std::size_t b = 0; b < c.n; ++b) {
        for (std::size_t grp = 0; grp < c.g; ++grp) {
            const T* colp = nullptr;
            if (is_plain_pointwise(c)) {
                colp = in + (b * c.x + grp * c.xg) * c.p;
            } else {
                im2col(in, c, b, grp, cols.data());
                colp = cols.data();
            }
            for (std::size_t nn = 0; nn < c.yg; ++nn) {
                const std::size_t n = grp * c.yg + nn;
                T* orow = out + (b * c.y + n) * c.p;
                std::fill(orow, orow + c.p, T(0));
                for (std::size_t r = 0; r < c.r; ++r) {
                    const T wv = wt[r * c.y + n];
                    const T* crow = colp + r * c.p;
                    for (std::size_t p = 0; p < c.p; ++p) {
                        orow[p] += wv * crow[p];
                    }
                }
            }
        }
    }
}

template <typename T>
void backward_im2col(const T* in, const T* wt, const T* gout, const ConvGeometry& c, T* din, T* dwt)
{
    if (is_depthwise(c)) {
        backward_depthwise(in, wt, gout, c, din, dwt);
        return;
    }
    const bool plain = is_plain_pointwise(c);
    std::vector<T> cols(plain ? 0 : c.r * c.p);
    std::vector<T> dcols(c.r * c.p);
    for (std::size_t b = 0; b < c.n; ++b) {
        for (std::size_t grp = 0; grp < c.g; ++grp) {
            const T* colp = nullptr;
            if (plain) {
                colp = in + (b * c.x + grp * c.xg) * c.p;
            } else {
                im2col(in, c, b, grp, cols.data());
                colp = cols.data();
            }
            std::fill(dcols.begin(), dcols.end(), T(0));
            for (std::size_t r = 0; r < c.r; ++r) {
                const T* crow = colp + r * c.p;
                T* drow = dcols.data() + r * c.p;
                for (std::size_t nn = 0; nn < c.yg; ++nn) {
                    const std::size_t n = grp * c.yg + nn;
                    const T* grow = gout + (b * c.y + n) * c.p;
                    const T wv = wt[r * c.y + n];
                    for (std::size_t p = 0; p < c.p; ++p) {
                        drow[p] += wv * grow[p];
                    }
                    dwt[r * c.y + n] += dot_lanes(crow, grow, c.p);
                }
            }
            if (plain) {
                T* dst = din + (b * c.x + grp * c.xg) * c.p;
                for (std::size_t k = 0; k < c.r * c.p; ++k) {
                    dst[k] += dcols[k];
                }
            } else {
                col2im_add(dcols.data(), c, b, grp, din);
            }
        }
    }
}

} // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input_in, const Tensor<T>& weight_in, const Tensor<T>& bias_in, const ConvSpec& spec,
                 ConvAlgorithm algo)
{
    const ConvGeometry c = geometry(input_in.shape(), spec);
    const Tensor<T> input = input_in.contiguous();
    const Tensor<T> weight = weight_in.contiguous();
    if (weight.numel() != spec.weight_count()) {
        throw ShapeError("weight of shape " + shape_string(weight.shape()) + " does not match convolution kernel " +
                         shape_string(spec.weight_shape()));
    }
    const bool has_bias = bias_in.defined();
    if (has_bias && bias_in.numel() != c.y) {
        throw ShapeError("bias length must equal output channels");
    }
    const Tensor<T> bias = has_bias ? bias_in.contiguous() : Tensor<T>();

    std::vector<T> out(c.n * c.y * c.p);
    if (algo == ConvAlgorithm::direct) {
        forward_direct(input.values().data(), weight.values().data(), c, out.data());
    } else {
        forward_im2col(input.values().data(), weight.values().data(), c, out.data());
    }
    if (has_bias) {
        auto bv = bias.values();
        for (std::size_t b = 0; b < c.n; ++b) {
            for (std::size_t n = 0; n < c.y; ++n) {
                T* row = out.data() + (b * c.y + n) * c.p;
                for (std::size_t p = 0; p < c.p; ++p) {
                    row[p] += bv[n];
                }
            }
        }
    }

    const Shape w_shape = weight.shape();
    BackwardFn<T> back = [input, weight, c, has_bias, w_shape](const Tensor<T>& g) {
        std::vector<T> din(c.n * c.x * c.h * c.w, T(0));
        std::vector<T> dw(c.r * c.y, T(0));
        backward_im2col(input.values().data(), weight.values().data(), g.values().data(), c, din.data(), dw.data());
        std::vector<Tensor<T>> grads{Tensor<T>(input.shape(), std::move(din)), Tensor<T>(w_shape, std::move(dw))};
        if (has_bias) {
            std::vector<T> db(c.y, T(0));
            auto gv = g.values();
            for (std::size_t b = 0; b < c.n; ++b) {
                for (std::size_t n = 0; n < c.y; ++n) {
                    const T* row = gv.data() + (b * c.y + n) * c.p;
                    T acc = T(0);
                    for (std::size_t p = 0; p < c.p; ++p) {
                        acc += row[p];
                    }
                    db[n] += acc;
                }
            }
            grads.emplace_back(Shape{c.y}, std::move(db));
        }
        return grads;
    };
    const Shape out_shape{c.n, c.y, c.oh, c.ow};
    if (has_bias) {
        return detail::make_result<T>("conv2d", out_shape, std::move(out), {&input_in, &weight_in, &bias_in},
                                      std::move(back));
    }
    return detail::make_result<T>("conv2d", out_shape, std::move(out), {&input_in, &weight_in}, std::move(back));
}

template <typename T>
Tensor<T> conv2d_standard(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                          ConvAlgorithm algo)
{
    if (spec.groups != 1) {
        throw ShapeError("standard convolution requires groups == 1");
    }
    return conv2d(input, params.weight, params.bias, spec, algo);
}

template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                           ConvAlgorithm algo)
{
    if (spec.groups != spec.in_channels || spec.out_channels != spec.in_channels) {
        throw ShapeError("depthwise convolution requires groups == in_channels == out_channels");
    }
    return conv2d(input, params.weight, params.bias, spec, algo);
}

template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                           ConvAlgorithm algo)
{
    if (spec.kernel != 1 || spec.groups != 1) {
        throw ShapeError("pointwise convolution requires a 1x1 kernel and groups == 1");
    }
    return conv2d(input, params.weight, params.bias, spec, algo);
}

template <typename T>
Tensor<T> conv2d_grouped(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                         ConvAlgorithm algo)
{
    return conv2d(input, params.weight, params.bias, spec, algo);
}

#define EFFCNET_INSTANTIATE_CONV(T)                                                                               \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&,          \
                                 ConvAlgorithm);                                                                  \
    template Tensor<T> conv2d_standard<T>(const Tensor<T>&, const LayerParams<T>&, const ConvSpec&, ConvAlgorithm); \
    template Tensor<T> conv2d_depthwise<T>(const Tensor<T>&, const LayerParams<T>&, const ConvSpec&,              \
                                           ConvAlgorithm);                                                        \
    template Tensor<T> conv2d_pointwise<T>(const Tensor<T>&, const LayerParams<T>&, const ConvSpec&,              \
                                           ConvAlgorithm);                                                        \
    template Tensor<T> conv2d_grouped<T>(const Tensor<T>&, const LayerParams<T>&, const ConvSpec&, ConvAlgorithm);

EFFCNET_INSTANTIATE_CONV(float)
EFFCNET_INSTANTIATE_CONV(double)

} // namespace effcnet
