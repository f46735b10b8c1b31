#include "effcnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace effcnet {

namespace {

void require_nchw(const Shape& s, const char* op)
{
    if (s.size() != 4) {
        throw ShapeError(std::string(op) + " expects an N,C,H,W tensor, got " + shape_string(s));
    }
}

} // namespace

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x_in, double slope)
{
    const Tensor<T> x = x_in.contiguous();
    const T a = static_cast<T>(slope);
    auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = xv[i] >= T(0) ? xv[i] : a * xv[i];
    }
    BackwardFn<T> back = [x, a](const Tensor<T>& g) {
        auto gv = g.values();
        auto xv2 = x.values();
        std::vector<T> dx(gv.size());
        for (std::size_t i = 0; i < gv.size(); ++i) {
            dx[i] = xv2[i] >= T(0) ? gv[i] : a * gv[i];
        }
        return std::vector<Tensor<T>>{Tensor<T>(x.shape(), std::move(dx))};
    };
    return detail::make_result<T>("leaky_relu", x.shape(), std::move(out), {&x_in}, std::move(back));
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x_in, LayerParams<T>& params, Mode mode, double momentum, double epsilon)
{
    require_nchw(x_in.shape(), "batch_norm");
    const Tensor<T> x = x_in.contiguous();
    const std::size_t n = x.dim(0);
    const std::size_t ch = x.dim(1);
    const std::size_t hw = x.dim(2) * x.dim(3);
    const std::size_t m = n * hw;
    for (const Tensor<T>* t : {&params.bn_gamma, &params.bn_beta, &params.bn_running_mean, &params.bn_running_var}) {
        if (!t->defined() || t->numel() != ch) {
            throw ShapeError("batch_norm parameters must all have " + std::to_string(ch) + " elements");
        }
    }
    if (mode == Mode::train && m < 2) {
        throw NumericsError("batch_norm in train mode needs at least 2 values per channel");
    }

    auto xv = x.values();
    std::vector<T> mean_c(ch), invstd_c(ch);
    if (mode == Mode::train) {
        std::vector<T> run_mean = params.bn_running_mean.to_vector();
        std::vector<T> run_var = params.bn_running_var.to_vector();
        for (std::size_t c = 0; c < ch; ++c) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * ch + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    s += p[k];
                }
            }
            const double mu = s / static_cast<double>(m);
            double ss = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * ch + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    const double d = p[k] - mu;
                    ss += d * d;
                }
            }
            const double var = ss / static_cast<double>(m);
            mean_c[c] = static_cast<T>(mu);
            invstd_c[c] = static_cast<T>(1.0 / std::sqrt(var + epsilon));
            const double unbiased = ss / static_cast<double>(m - 1);
            run_mean[c] = static_cast<T>((1.0 - momentum) * run_mean[c] + momentum * mu);
            run_var[c] = static_cast<T>((1.0 - momentum) * run_var[c] + momentum * unbiased);
        }
        params.bn_running_mean = Tensor<T>(Shape{ch}, std::move(run_mean));
        params.bn_running_var = Tensor<T>(Shape{ch}, std::move(run_var));
    } else {
        auto rm = params.bn_running_mean.values();
        auto rv = params.bn_running_var.values();
        for (std::size_t c = 0; c < ch; ++c) {
            mean_c[c] = rm[c];
            invstd_c[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + epsilon));
        }
    }

    auto gamma = params.bn_gamma.values();
    auto beta = params.bn_beta.values();
    std::vector<T> xhat(xv.size());
    std::vector<T> out(xv.size());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t base = (b * ch + c) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
                const T h = (xv[base + k] - mean_c[c]) * invstd_c[c];
                xhat[base + k] = h;
                out[base + k] = gamma[c] * h + beta[c];
            }
        }
    }

    const Tensor<T> gamma_t = params.bn_gamma;
    const Shape shape = x.shape();
    BackwardFn<T> back = [xhat = std::move(xhat), invstd_c, gamma_t, shape, n, ch, hw, m, mode](const Tensor<T>& g) {
        auto gv = g.values();
        auto gm = gamma_t.values();
        std::vector<T> dx(gv.size());
        std::vector<T> dgamma(ch, T(0)), dbeta(ch, T(0));
        for (std::size_t c = 0; c < ch; ++c) {
            double sum_g = 0.0;
            double sum_gx = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t base = (b * ch + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    sum_g += gv[base + k];
                    sum_gx += static_cast<double>(gv[base + k]) * xhat[base + k];
                }
            }
            dgamma[c] = static_cast<T>(sum_gx);
            dbeta[c] = static_cast<T>(sum_g);
            const double scale = static_cast<double>(gm[c]) * invstd_c[c];
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t base = (b * ch + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    if (mode == Mode::train) {
                        const double md = static_cast<double>(m);
                        dx[base + k] = static_cast<T>(scale * (gv[base + k] - sum_g / md - xhat[base + k] * sum_gx / md));
                    } else {
                        dx[base + k] = static_cast<T>(scale * gv[base + k]);
                    }
                }
            }
        }
        return std::vector<Tensor<T>>{Tensor<T>(shape, std::move(dx)), Tensor<T>(Shape{ch}, std::move(dgamma)),
                                      Tensor<T>(Shape{ch}, std::move(dbeta))};
    };
    return detail::make_result<T>("batch_norm", shape, std::move(out), {&x_in, &params.bn_gamma, &params.bn_beta},
                                  std::move(back));
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x_in, double rate, Mode mode, Rng& rng)
{
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1)");
    }
    if (mode == Mode::eval || rate == 0.0) {
        return x_in;
    }
    const Tensor<T> x = x_in.contiguous();
    auto xv = x.values();
    const T scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(xv.size());
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = rng.uniform() < rate ? T(0) : scale;
        out[i] = xv[i] * mask[i];
    }
    const Shape shape = x.shape();
    BackwardFn<T> back = [mask = std::move(mask), shape](const Tensor<T>& g) {
        auto gv = g.values();
        std::vector<T> dx(gv.size());
        for (std::size_t i = 0; i < gv.size(); ++i) {
            dx[i] = gv[i] * mask[i];
        }
        return std::vector<Tensor<T>>{Tensor<T>(shape, std::move(dx))};
    };
    return detail::make_result<T>("dropout", shape, std::move(out), {&x_in}, std::move(back));
}

namespace {

// Moves whole channel planes: out channel dst_of[c] receives input channel c.
template <typename T>
std::vector<T> move_channels(std::span<const T> src, std::size_t n, std::size_t ch, std::size_t hw,
                             const std::vector<std::size_t>& dst_of)
{
    std::vector<T> out(src.size());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
            const T* from = src.data() + (b * ch + c) * hw;
            std::copy(from, from + hw, out.data() + (b * ch + dst_of[c]) * hw);
        }
    }
    return out;
}

} // namespace

template <typename T>
Tensor<T> channel_permute(const Tensor<T>& x_in, int groups)
{
    require_nchw(x_in.shape(), "channel_permute");
    const Tensor<T> x = x_in.contiguous();
    const std::size_t n = x.dim(0);
    const std::size_t ch = x.dim(1);
    const std::size_t hw = x.dim(2) * x.dim(3);
    if (groups < 1 || ch % static_cast<std::size_t>(groups) != 0) {
        throw ShapeError("channel_permute: " + std::to_string(ch) + " channels not divisible by " +
                         std::to_string(groups) + " groups");
    }
    const auto g = static_cast<std::size_t>(groups);
    const std::size_t per = ch / g;
    // Input channel i*per + j lands at j*g + i.
    std::vector<std::size_t> dst_of(ch), src_of(ch);
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < per; ++j) {
            dst_of[i * per + j] = j * g + i;
            src_of[j * g + i] = i * per + j;
        }
    }
    std::vector<T> out = move_channels<T>(x.values(), n, ch, hw, dst_of);
    const Shape shape = x.shape();
    BackwardFn<T> back = [src_of, shape, n, ch, hw](const Tensor<T>& grad) {
        return std::vector<Tensor<T>>{Tensor<T>(shape, move_channels<T>(grad.values(), n, ch, hw, src_of))};
    };
    return detail::make_result<T>("channel_permute", shape, std::move(out), {&x_in}, std::move(back));
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x_in, int window)
{
    require_nchw(x_in.shape(), "avg_pool");
    const Tensor<T> x = x_in.contiguous();
    const std::size_t n = x.dim(0);
    const std::size_t ch = x.dim(1);
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    if (window < 1 || h % static_cast<std::size_t>(window) != 0 || w % static_cast<std::size_t>(window) != 0) {
        throw ShapeError("avg_pool: window " + std::to_string(window) + " does not tile " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
    const auto k = static_cast<std::size_t>(window);
    const std::size_t oh = h / k;
    const std::size_t ow = w / k;
    const T inv = T(1) / static_cast<T>(k * k);
    auto xv = x.values();
    std::vector<T> out(n * ch * oh * ow);
    for (std::size_t plane = 0; plane < n * ch; ++plane) {
        const T* src = xv.data() + plane * h * w;
        T* dst = out.data() + plane * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = T(0);
                for (std::size_t dy = 0; dy < k; ++dy) {
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    const Shape in_shape = x.shape();
    BackwardFn<T> back = [in_shape, n, ch, h, w, k, oh, ow, inv](const Tensor<T>& g) {
        auto gv = g.values();
        std::vector<T> dx(n * ch * h * w);
        for (std::size_t plane = 0; plane < n * ch; ++plane) {
            const T* src = gv.data() + plane * oh * ow;
            T* dst = dx.data() + plane * h * w;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    dst[y * w + xx] = src[(y / k) * ow + xx / k] * inv;
                }
            }
        }
        return std::vector<Tensor<T>>{Tensor<T>(in_shape, std::move(dx))};
    };
    return detail::make_result<T>("avg_pool", Shape{n, ch, oh, ow}, std::move(out), {&x_in}, std::move(back));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a_in, const Tensor<T>& b_in)
{
    require_nchw(a_in.shape(), "concat_channels");
    require_nchw(b_in.shape(), "concat_channels");
    const Tensor<T> a = a_in.contiguous();
    const Tensor<T> b = b_in.contiguous();
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const std::size_t n = a.dim(0);
    const std::size_t ca = a.dim(1);
    const std::size_t cb = b.dim(1);
    const std::size_t hw = a.dim(2) * a.dim(3);
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(n * (ca + cb) * hw);
    for (std::size_t s = 0; s < n; ++s) {
        std::copy_n(av.data() + s * ca * hw, ca * hw, out.data() + s * (ca + cb) * hw);
        std::copy_n(bv.data() + s * cb * hw, cb * hw, out.data() + s * (ca + cb) * hw + ca * hw);
    }
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    BackwardFn<T> back = [sa, sb, n, ca, cb, hw](const Tensor<T>& g) {
        auto gv = g.values();
        std::vector<T> da(n * ca * hw), db(n * cb * hw);
        for (std::size_t s = 0; s < n; ++s) {
            std::copy_n(gv.data() + s * (ca + cb) * hw, ca * hw, da.data() + s * ca * hw);
            std::copy_n(gv.data() + s * (ca + cb) * hw + ca * hw, cb * hw, db.data() + s * cb * hw);
        }
        return std::vector<Tensor<T>>{Tensor<T>(sa, std::move(da)), Tensor<T>(sb, std::move(db))};
    };
    return detail::make_result<T>("concat_channels", Shape{n, ca + cb, a.dim(2), a.dim(3)}, std::move(out),
                                  {&a_in, &b_in}, std::move(back));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x_in, const LayerParams<T>& params)
{
    if (x_in.rank() != 2 || params.weight.rank() != 2) {
        throw ShapeError("linear expects x[N,F] and W[F,classes]");
    }
    const Tensor<T> x = x_in.contiguous();
    const Tensor<T> w = params.weight.contiguous();
    const std::size_t n = x.dim(0);
    const std::size_t f = x.dim(1);
    const std::size_t k = w.dim(1);
    if (w.dim(0) != f) {
        throw ShapeError("linear: feature dim " + std::to_string(f) + " does not match weight " +
                         shape_string(w.shape()));
    }
    const bool has_bias = params.bias.defined();
    if (has_bias && params.bias.numel() != k) {
        throw ShapeError("linear: bias length must equal output width");
    }
    auto xv = x.values();
    auto wv = w.values();
    std::vector<T> out(n * k, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        T* row = out.data() + i * k;
        if (has_bias) {
            auto bv = params.bias.values();
            std::copy(bv.begin(), bv.end(), row);
        }
        for (std::size_t p = 0; p < f; ++p) {
            const T xvp = xv[i * f + p];
            const T* wrow = wv.data() + p * k;
            for (std::size_t j = 0; j < k; ++j) {
                row[j] += xvp * wrow[j];
            }
        }
    }
    BackwardFn<T> back = [x, w, n, f, k, has_bias](const Tensor<T>& g) {
        auto gv = g.values();
        auto xv2 = x.values();
        auto wv2 = w.values();
        std::vector<T> dx(n * f, T(0)), dw(f * k, T(0)), db(k, T(0));
        for (std::size_t i = 0; i < n; ++i) {
            const T* grow = gv.data() + i * k;
            for (std::size_t p = 0; p < f; ++p) {
                const T* wrow = wv2.data() + p * k;
                T* dwrow = dw.data() + p * k;
                const T xvp = xv2[i * f + p];
                T acc = T(0);
                for (std::size_t j = 0; j < k; ++j) {
                    acc += grow[j] * wrow[j];
                    dwrow[j] += xvp * grow[j];
                }
                dx[i * f + p] = acc;
            }
            for (std::size_t j = 0; j < k; ++j) {
                db[j] += grow[j];
            }
        }
        std::vector<Tensor<T>> grads{Tensor<T>({n, f}, std::move(dx)), Tensor<T>({f, k}, std::move(dw))};
        if (has_bias) {
            grads.emplace_back(Shape{k}, std::move(db));
        }
        return grads;
    };
    if (has_bias) {
        return detail::make_result<T>("linear", Shape{n, k}, std::move(out), {&x_in, &params.weight, &params.bias},
                                      std::move(back));
    }
    return detail::make_result<T>("linear", Shape{n, k}, std::move(out), {&x_in, &params.weight}, std::move(back));
}

namespace {

template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t n, std::size_t c)
{
    std::vector<T> p(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data() + i * c;
        const T mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            z += std::exp(static_cast<double>(row[j] - mx));
        }
        for (std::size_t j = 0; j < c; ++j) {
            p[i * c + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
        }
    }
    return p;
}

} // namespace

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits_in, std::span<const int> labels)
{
    if (logits_in.rank() != 2) {
        throw ShapeError("softmax_cross_entropy expects logits[N,C]");
    }
    const Tensor<T> logits = logits_in.contiguous();
    const std::size_t n = logits.dim(0);
    const std::size_t c = logits.dim(1);
    if (labels.size() != n) {
        throw DataError("label count " + std::to_string(labels.size()) + " != batch size " + std::to_string(n));
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) {
            throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
        }
    }
    auto lv = logits.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = lv.data() + i * c;
        const T mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            z += std::exp(static_cast<double>(row[j] - mx));
        }
        loss += std::log(z) - static_cast<double>(row[labels[i]] - mx);
    }
    loss /= static_cast<double>(n);
    std::vector<int> lab(labels.begin(), labels.end());
    BackwardFn<T> back = [logits, lab, n, c](const Tensor<T>& g) {
        std::vector<T> p = softmax_rows<T>(logits.values(), n, c);
        const T scale = g.item() / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i * c + static_cast<std::size_t>(lab[i])] -= T(1);
        }
        for (T& v : p) {
            v *= scale;
        }
        return std::vector<Tensor<T>>{Tensor<T>({n, c}, std::move(p))};
    };
    return detail::make_result<T>("softmax_cross_entropy", Shape{1}, std::vector<T>{static_cast<T>(loss)},
                                  {&logits_in}, std::move(back));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits_in)
{
    if (logits_in.rank() != 2) {
        throw ShapeError("softmax expects logits[N,C]");
    }
    const Tensor<T> logits = logits_in.contiguous();
    return Tensor<T>(logits.shape(), softmax_rows<T>(logits.values(), logits.dim(0), logits.dim(1)));
}

template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, double slope, Rng& rng)
{
    const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
    const double stddev = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::vector<T> v(shape_numel(shape));
    for (T& x : v) {
        x = static_cast<T>(stddev * rng.normal());
    }
    return Tensor<T>(std::move(shape), std::move(v));
}

#define EFFCNET_INSTANTIATE_LAYERS(T)                                                                         \
    template Tensor<T> leaky_relu<T>(const Tensor<T>&, double);                                               \
    template Tensor<T> batch_norm<T>(const Tensor<T>&, LayerParams<T>&, Mode, double, double);                \
    template Tensor<T> dropout<T>(const Tensor<T>&, double, Mode, Rng&);                                      \
    template Tensor<T> channel_permute<T>(const Tensor<T>&, int);                                             \
    template Tensor<T> avg_pool<T>(const Tensor<T>&, int);                                                    \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> linear<T>(const Tensor<T>&, const LayerParams<T>&);                                    \
    template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>);                      \
    template Tensor<T> softmax<T>(const Tensor<T>&);                                                          \
    template Tensor<T> kaiming_normal<T>(Shape, std::size_t, double, Rng&);

EFFCNET_INSTANTIATE_LAYERS(float)
EFFCNET_INSTANTIATE_LAYERS(double)

} // namespace effcnet
