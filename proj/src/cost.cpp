#include "effcnet/cost.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace effcnet {

template <typename T>
std::size_t layer_params(const Layer<T>& l)
{
    switch (l.kind) {
    case LayerKind::conv:
        return l.conv.weight_count();
    case LayerKind::batch_norm:
        return 2 * static_cast<std::size_t>(l.in_channels);
    case LayerKind::linear:
        return static_cast<std::size_t>(l.in_channels + 1) * static_cast<std::size_t>(l.out_channels);
    default:
        return 0;
    }
}

template <typename T>
std::size_t layer_flops(const Layer<T>& l, int in_extent)
{
    const auto c = static_cast<std::size_t>(l.in_channels);
    const auto e = static_cast<std::size_t>(in_extent);
    switch (l.kind) {
    case LayerKind::conv:
        return l.conv.macs(in_extent, in_extent);
    case LayerKind::leaky_relu:
    case LayerKind::global_pool:
        return c * e * e;
    case LayerKind::avg_pool: {
        const auto w = static_cast<std::size_t>(l.window);
        const std::size_t o = e / w;
        return c * o * o * w * w;
    }
    case LayerKind::linear:
        return c * static_cast<std::size_t>(l.out_channels) + static_cast<std::size_t>(l.out_channels);
    default:
        return 0;
    }
}

template <typename T>
CostReport analyze(const Model<T>& model, int input_extent)
{
    CostReport r;
    r.title = std::string(variant_name(model.config.variant)) + ", " + std::to_string(model.config.num_classes) +
              " classes";
    int extent = input_extent > 0 ? input_extent : model.config.input_size;
    for (const auto& l : model.layers) {
        if (r.rows.empty() || r.rows.back().name != l.group) {
            r.rows.push_back({l.group, 0, 0, 0});
        }
        CostRow& row = r.rows.back();
        const std::size_t f = layer_flops(l, extent);
        row.params += layer_params(l);
        row.flops += f;
        if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) {
            row.conv_linear += f;
        }
        if (l.kind == LayerKind::conv) {
            extent = l.conv.output_extent(extent);
        } else if (l.kind == LayerKind::avg_pool || l.kind == LayerKind::global_pool) {
            extent /= l.window;
        }
    }
    for (const auto& row : r.rows) {
        r.total_params += row.params;
        r.total_flops += row.flops;
        r.total_conv_linear += row.conv_linear;
    }
    return r;
}

template <typename T>
std::size_t count_params(const Model<T>& model)
{
    return analyze(model).total_params;
}

template <typename T>
std::size_t count_flops(const Model<T>& model, int input_extent)
{
    return analyze(model, input_extent).total_flops;
}

namespace {

std::string millions(std::size_t v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f M", static_cast<double>(v) / 1e6);
    return buf;
}

} // namespace

std::string CostReport::table() const
{
    std::size_t w = 8;
    for (const auto& row : rows) {
        w = std::max(w, row.name.size());
    }
    std::ostringstream o;
    char line[256];
    o << "# " << title << "\n";
    o << "# flops: conv/linear multiply-accumulates + activation and pooling element ops\n";
    std::snprintf(line, sizeof line, "%-*s %12s %14s\n", static_cast<int>(w), "layer", "params", "flops");
    o << line;
    for (const auto& row : rows) {
        std::snprintf(line, sizeof line, "%-*s %12zu %14zu\n", static_cast<int>(w), row.name.c_str(), row.params,
                      row.flops);
        o << line;
    }
    std::snprintf(line, sizeof line, "%-*s %12zu %14zu\n", static_cast<int>(w), "total", total_params, total_flops);
    o << line;
    o << "params " << millions(total_params) << ", flops " << millions(total_flops) << " (conv+linear only "
      << millions(total_conv_linear) << ")\n";
    return o.str();
}

std::string CostReport::csv() const
{
    std::ostringstream o;
    o << "layer,params,flops\n";
    for (const auto& row : rows) {
        o << row.name << "," << row.params << "," << row.flops << "\n";
    }
    o << "total," << total_params << "," << total_flops << "\n";
    return o.str();
}

std::string compare_reports(const CostReport& a, const CostReport& b)
{
    std::ostringstream o;
    char line[256];
    std::snprintf(line, sizeof line, "%-28s %14s %14s\n", "", "params", "flops");
    o << line;
    for (const CostReport* r : {&a, &b}) {
        std::snprintf(line, sizeof line, "%-28s %14s %14s\n", r->title.c_str(), millions(r->total_params).c_str(),
                      millions(r->total_flops).c_str());
        o << line;
    }
    auto ratio = [](std::size_t x, std::size_t y) { return y ? static_cast<double>(x) / static_cast<double>(y) : 0.0; };
    std::snprintf(line, sizeof line, "%-28s %14.3f %14.3f\n", "ratio", ratio(a.total_params, b.total_params),
                  ratio(a.total_flops, b.total_flops));
    o << line;
    return o.str();
}

#define EFFCNET_INSTANTIATE(T)                                                                                         \
    template std::size_t layer_params<T>(const Layer<T>&);                                                             \
    template std::size_t layer_flops<T>(const Layer<T>&, int);                                                         \
    template CostReport analyze<T>(const Model<T>&, int);                                                              \
    template std::size_t count_params<T>(const Model<T>&);                                                             \
    template std::size_t count_flops<T>(const Model<T>&, int);

EFFCNET_INSTANTIATE(float)
EFFCNET_INSTANTIATE(double)
#undef EFFCNET_INSTANTIATE

} // namespace effcnet
