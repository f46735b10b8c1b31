#pragma once

#include "effcnet/model.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace effcnet {

// One row per reporting group (stem, each block, each transition, head).
struct CostRow {
    std::string name;
    std::size_t params = 0;
    std::size_t flops = 0;       // all counted ops
    std::size_t conv_linear = 0; // conv and linear multiply-accumulates only
};

struct CostReport {
    std::string title;
    std::vector<CostRow> rows;
    std::size_t total_params = 0;
    std::size_t total_flops = 0;
    std::size_t total_conv_linear = 0;

    std::string table() const;
    // layer,params,flops
    std::string csv() const;
};

// FLOP convention: conv = D'*D'*S*S*(X/G)*Y multiply-accumulates, linear =
// F*classes + classes, Leaky-ReLU = one op per element, average pooling = one
// op per window element; batch norm, dropout and permutes are free.
template <typename T>
std::size_t layer_params(const Layer<T>& layer);
template <typename T>
std::size_t layer_flops(const Layer<T>& layer, int in_extent);

// Per-sample cost for a square input of side `input_extent` (0 = config size).
template <typename T>
CostReport analyze(const Model<T>& model, int input_extent = 0);

template <typename T>
std::size_t count_params(const Model<T>& model);
template <typename T>
std::size_t count_flops(const Model<T>& model, int input_extent = 0);

std::string compare_reports(const CostReport& a, const CostReport& b);

} // namespace effcnet
