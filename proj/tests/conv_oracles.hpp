#pragma once

// Test-only reference implementations. These deliberately share no code with
// src/conv.cpp: plain nested loops written straight from the convolution sum
//   O[k,l,n] = sum_{i,j,m} K[i,j,m,n] * I[k+i-p, l+j-p, m]
// with an outer batch loop, stride and zero padding.

#include "effcnet/rng.hpp"
#include "effcnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

struct Dims {
    std::size_t n, x, h, w;
};

// Dense (ungrouped) convolution; kernel is indexed [i][j][m][n].
inline std::vector<double> dense_conv(const std::vector<double>& in, Dims d, const std::vector<double>& k,
                                      std::size_t s, std::size_t y, std::size_t stride, std::size_t pad,
                                      std::size_t& oh, std::size_t& ow)
{
    oh = (d.h + 2 * pad - s) / stride + 1;
    ow = (d.w + 2 * pad - s) / stride + 1;
    std::vector<double> out(d.n * y * oh * ow, 0.0);
    for (std::size_t b = 0; b < d.n; ++b)
        for (std::size_t n = 0; n < y; ++n)
            for (std::size_t r = 0; r < oh; ++r)
                for (std::size_t c = 0; c < ow; ++c) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < s; ++j)
                            for (std::size_t m = 0; m < d.x; ++m) {
                                const long iy = static_cast<long>(r * stride + i) - static_cast<long>(pad);
                                const long ix = static_cast<long>(c * stride + j) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(d.h) || ix >= static_cast<long>(d.w))
                                    continue;
                                acc += k[((i * s + j) * d.x + m) * y + n] *
                                       in[((b * d.x + m) * d.h + static_cast<std::size_t>(iy)) * d.w +
                                          static_cast<std::size_t>(ix)];
                            }
                    out[((b * y + n) * oh + r) * ow + c] = acc;
                }
    return out;
}

inline std::vector<double> random_values(std::size_t count, effcnet::Rng& rng)
{
    std::vector<double> v(count);
    for (double& x : v) {
        x = 2.0 * rng.uniform() - 1.0;
    }
    return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) {
        return INFINITY;
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

} // namespace oracle
