#include "effcnet/model.hpp"

#include "effcnet/errors.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace effcnet {

std::string_view variant_name(Variant v)
{
    return v == Variant::effcnet ? "effcnet" : "condensenet_static";
}

int growth_channels(int d, int x0)
{
    if (d < 0 || x0 < 1 || d > 24) {
        throw ConfigError("growth_channels: need d >= 0 and x0 >= 1");
    }
    return x0 << d;
}

namespace {

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

int parse_int(const std::string& key, const std::string& v)
{
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v)
{
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::string format_double(double v)
{
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

// Walks the block structure and reports the first divisibility failure.
void check_channels(const NetworkConfig& c)
{
    int channels = c.init_channels;
    int extent = c.input_size;
    for (std::size_t s = 0; s < c.stages.size(); ++s) {
        const int k = growth_channels(c.stages[s].index, c.base_growth);
        for (int b = 0; b < c.stages[s].num_blocks; ++b) {
            const int mid = c.bottleneck_factor * k;
            if (c.variant == Variant::effcnet) {
                if (!c.single_pointwise && mid % c.permute_groups != 0) {
                    throw ConfigError("config: permute_groups " + std::to_string(c.permute_groups) +
                                      " does not divide " + std::to_string(mid) + " channels");
                }
            } else if (channels % c.groups != 0 || mid % c.groups != 0 || k % c.groups != 0) {
                throw ConfigError("config: groups " + std::to_string(c.groups) + " does not divide block channels (" +
                                  std::to_string(channels) + ", " + std::to_string(mid) + ", " + std::to_string(k) +
                                  ")");
            }
            channels += k;
        }
        if (s + 1 < c.stages.size()) {
            if (extent % 2 != 0 || extent < 2) {
                throw ConfigError("config: spatial size " + std::to_string(extent) + " cannot be halved");
            }
            extent /= 2;
        }
    }
}

} // namespace

void NetworkConfig::validate() const
{
    if (num_classes < 2) {
        throw ConfigError("config: num_classes must be >= 2");
    }
    if (base_growth < 1 || init_channels < 1 || bottleneck_factor < 1 || input_size < 1) {
        throw ConfigError("config: base_growth, init_channels, bottleneck_factor and input_size must be positive");
    }
    if (dw_kernel < 1 || dw_kernel % 2 == 0) {
        throw ConfigError("config: dw_kernel must be odd");
    }
    if (permute_groups < 1 || groups < 1) {
        throw ConfigError("config: group counts must be positive");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw ConfigError("config: dropout_rate must be in [0, 1)");
    }
    for (std::size_t s = 0; s < stages.size(); ++s) {
        if (stages[s].num_blocks < 1) {
            throw ConfigError("config: every stage needs at least one block");
        }
        if (s > 0 && stages[s].index <= stages[s - 1].index) {
            throw ConfigError("config: stage growth rates must strictly increase");
        }
    }
    check_channels(*this);
}

NetworkConfig NetworkConfig::parse(std::string_view text)
{
    NetworkConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    std::map<std::string, bool> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string val = trim(std::string_view(t).substr(eq + 1));
        if (seen[key]) {
            throw ConfigError("config: duplicate key '" + key + "'");
        }
        seen[key] = true;
        if (key == "variant") {
            if (val == "effcnet") {
                c.variant = Variant::effcnet;
            } else if (val == "condensenet_static") {
                c.variant = Variant::condensenet_static;
            } else {
                throw ConfigError("config: unknown variant '" + val + "'");
            }
        } else if (key == "stages") {
            c.stages.clear();
            std::istringstream parts(val);
            std::string item;
            int d = 0;
            while (std::getline(parts, item, ',')) {
                c.stages.push_back({parse_int(key, trim(item)), d++});
            }
        } else if (key == "base_growth") {
            c.base_growth = parse_int(key, val);
        } else if (key == "init_channels") {
            c.init_channels = parse_int(key, val);
        } else if (key == "num_classes") {
            c.num_classes = parse_int(key, val);
        } else if (key == "bottleneck_factor") {
            c.bottleneck_factor = parse_int(key, val);
        } else if (key == "permute_groups") {
            c.permute_groups = parse_int(key, val);
        } else if (key == "groups") {
            c.groups = parse_int(key, val);
        } else if (key == "dw_kernel") {
            c.dw_kernel = parse_int(key, val);
        } else if (key == "dropout_rate") {
            c.dropout_rate = parse_double(key, val);
        } else if (key == "single_pointwise") {
            c.single_pointwise = parse_bool(key, val);
        } else if (key == "input_size") {
            c.input_size = parse_int(key, val);
        } else {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

NetworkConfig NetworkConfig::load(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open config " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

std::string NetworkConfig::serialize() const
{
    std::ostringstream o;
    o << "variant = " << variant_name(variant) << "\n";
    o << "stages = ";
    for (std::size_t s = 0; s < stages.size(); ++s) {
        o << (s ? "," : "") << stages[s].num_blocks;
    }
    o << "\n";
    o << "base_growth = " << base_growth << "\n";
    o << "init_channels = " << init_channels << "\n";
    o << "num_classes = " << num_classes << "\n";
    o << "bottleneck_factor = " << bottleneck_factor << "\n";
    o << "permute_groups = " << permute_groups << "\n";
    o << "groups = " << groups << "\n";
    o << "dw_kernel = " << dw_kernel << "\n";
    o << "dropout_rate = " << format_double(dropout_rate) << "\n";
    o << "single_pointwise = " << (single_pointwise ? "true" : "false") << "\n";
    o << "input_size = " << input_size << "\n";
    return o.str();
}

template <typename T>
int Model<T>::final_features() const
{
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
        if (it->kind == LayerKind::linear) {
            return it->in_channels;
        }
    }
    return 0;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::named_tensors()
{
    std::vector<NamedTensor<T>> out;
    for (auto& l : layers) {
        switch (l.kind) {
        case LayerKind::conv:
            out.push_back({l.name + ".weight", &l.params.weight, true});
            break;
        case LayerKind::batch_norm:
            out.push_back({l.name + ".gamma", &l.params.bn_gamma, true});
            out.push_back({l.name + ".beta", &l.params.bn_beta, true});
            out.push_back({l.name + ".running_mean", &l.params.bn_running_mean, false});
            out.push_back({l.name + ".running_var", &l.params.bn_running_var, false});
            break;
        case LayerKind::linear:
            out.push_back({l.name + ".weight", &l.params.weight, true});
            out.push_back({l.name + ".bias", &l.params.bias, true});
            break;
        default:
            break;
        }
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::parameters()
{
    std::vector<Tensor<T>*> out;
    for (auto& nt : named_tensors()) {
        if (nt.trainable) {
            out.push_back(nt.tensor);
        }
    }
    return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const
{
    std::size_t n = 0;
    for (auto* t : const_cast<Model*>(this)->parameters()) {
        n += t->numel();
    }
    return n;
}

namespace {

template <typename T>
Layer<T> make_layer(LayerKind kind, std::string name, std::string group, int in_ch, int out_ch, int in_ext,
                    int out_ext)
{
    Layer<T> l;
    l.kind = kind;
    l.name = std::move(name);
    l.group = std::move(group);
    l.in_channels = in_ch;
    l.out_channels = out_ch;
    l.in_extent = in_ext;
    l.out_extent = out_ext;
    return l;
}

template <typename T>
Layer<T> conv_layer(const ConvSpec& spec, std::string name, std::string group, int extent, Rng& rng)
{
    spec.validate();
    const int out_ext = spec.output_extent(extent);
    auto l = make_layer<T>(LayerKind::conv, std::move(name), std::move(group), spec.in_channels, spec.out_channels,
                           extent, out_ext);
    l.conv = spec;
    const auto fan_in = static_cast<std::size_t>(spec.kernel * spec.kernel * (spec.in_channels / spec.groups));
    l.params.weight = kaiming_normal<T>(spec.weight_shape(), fan_in, 0.01, rng);
    return l;
}

template <typename T>
Layer<T> bn_layer(int channels, std::string name, std::string group, int extent)
{
    auto l = make_layer<T>(LayerKind::batch_norm, std::move(name), std::move(group), channels, channels, extent,
                           extent);
    const Shape s{static_cast<std::size_t>(channels)};
    l.params.bn_gamma = Tensor<T>::ones(s);
    l.params.bn_beta = Tensor<T>::zeros(s);
    l.params.bn_running_mean = Tensor<T>::zeros(s);
    l.params.bn_running_var = Tensor<T>::ones(s);
    return l;
}

template <typename T>
Layer<T> simple_layer(LayerKind kind, int channels, std::string name, std::string group, int extent)
{
    return make_layer<T>(kind, std::move(name), std::move(group), channels, channels, extent, extent);
}

void check_block(const BlockConfig& cfg)
{
    if (cfg.in_channels < 1 || cfg.growth < 1 || cfg.bottleneck_factor < 1) {
        throw ConfigError("block: channel counts must be positive");
    }
    if (!(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0)) {
        throw ConfigError("block: dropout_rate must be in [0, 1)");
    }
}

} // namespace

template <typename T>
std::vector<Layer<T>> build_effcnet_block(const BlockConfig& cfg, const std::string& prefix, int extent, Rng& rng)
{
    check_block(cfg);
    const int in = cfg.in_channels;
    const int k = cfg.growth;
    const int mid = cfg.mid_channels();
    if (!cfg.single_pointwise && (cfg.permute_groups < 1 || mid % cfg.permute_groups != 0)) {
        throw ConfigError("block " + prefix + ": permute_groups must divide " + std::to_string(mid));
    }
    std::vector<Layer<T>> out;
    try {
        out.push_back(simple_layer<T>(LayerKind::block_begin, in, prefix + ".begin", prefix, extent));
        out.push_back(bn_layer<T>(in, prefix + ".bn1", prefix, extent));
        out.push_back(simple_layer<T>(LayerKind::leaky_relu, in, prefix + ".act1", prefix, extent));
        out.push_back(conv_layer<T>(ConvSpec::depthwise(in, cfg.dw_kernel), prefix + ".dw", prefix, extent, rng));
        out.push_back(bn_layer<T>(in, prefix + ".bn2", prefix, extent));
        out.push_back(simple_layer<T>(LayerKind::leaky_relu, in, prefix + ".act2", prefix, extent));
        if (cfg.single_pointwise) {
            out.push_back(conv_layer<T>(ConvSpec::pointwise(in, k), prefix + ".pw", prefix, extent, rng));
        } else {
            out.push_back(conv_layer<T>(ConvSpec::pointwise(in, mid), prefix + ".pw1", prefix, extent, rng));
            auto perm = simple_layer<T>(LayerKind::permute, mid, prefix + ".permute", prefix, extent);
            perm.permute_groups = cfg.permute_groups;
            out.push_back(std::move(perm));
            out.push_back(conv_layer<T>(ConvSpec::pointwise(mid, k), prefix + ".pw2", prefix, extent, rng));
        }
    } catch (const ShapeError& e) {
        throw ConfigError("block " + prefix + ": " + e.what());
    }
    auto drop = simple_layer<T>(LayerKind::dropout, k, prefix + ".dropout", prefix, extent);
    drop.dropout_rate = cfg.dropout_rate;
    out.push_back(std::move(drop));
    out.push_back(make_layer<T>(LayerKind::block_end, prefix + ".concat", prefix, k, in + k, extent, extent));
    return out;
}

template <typename T>
std::vector<Layer<T>> build_condensenet_block_static(const BlockConfig& cfg, const std::string& prefix, int extent,
                                                     Rng& rng)
{
    check_block(cfg);
    const int in = cfg.in_channels;
    const int k = cfg.growth;
    const int mid = cfg.mid_channels();
    const int g = cfg.groups;
    if (g < 1 || in % g != 0 || mid % g != 0 || k % g != 0) {
        throw ConfigError("block " + prefix + ": groups " + std::to_string(g) + " must divide " + std::to_string(in) +
                          ", " + std::to_string(mid) + " and " + std::to_string(k));
    }
    std::vector<Layer<T>> out;
    out.push_back(simple_layer<T>(LayerKind::block_begin, in, prefix + ".begin", prefix, extent));
    out.push_back(bn_layer<T>(in, prefix + ".bn1", prefix, extent));
    out.push_back(simple_layer<T>(LayerKind::leaky_relu, in, prefix + ".act1", prefix, extent));
    out.push_back(conv_layer<T>(ConvSpec::grouped(in, mid, 1, g), prefix + ".gconv1", prefix, extent, rng));
    auto perm = simple_layer<T>(LayerKind::permute, mid, prefix + ".shuffle", prefix, extent);
    perm.permute_groups = g;
    out.push_back(std::move(perm));
    out.push_back(bn_layer<T>(mid, prefix + ".bn2", prefix, extent));
    out.push_back(simple_layer<T>(LayerKind::leaky_relu, mid, prefix + ".act2", prefix, extent));
    out.push_back(conv_layer<T>(ConvSpec::grouped(mid, k, 3, g), prefix + ".gconv2", prefix, extent, rng));
    out.push_back(make_layer<T>(LayerKind::block_end, prefix + ".concat", prefix, k, in + k, extent, extent));
    return out;
}

template <typename T>
Model<T> assemble_network(const NetworkConfig& cfg, Rng& rng)
{
    cfg.validate();
    Model<T> m;
    m.config = cfg;
    int extent = cfg.input_size;
    int channels = cfg.init_channels;
    m.layers.push_back(conv_layer<T>(ConvSpec::standard(3, channels, 3), "stem.conv", "stem", extent, rng));
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const int k = growth_channels(cfg.stages[s].index, cfg.base_growth);
        for (int b = 0; b < cfg.stages[s].num_blocks; ++b) {
            BlockConfig bc;
            bc.in_channels = channels;
            bc.growth = k;
            bc.dropout_rate = cfg.dropout_rate;
            bc.permute_groups = cfg.permute_groups;
            bc.dw_kernel = cfg.dw_kernel;
            bc.bottleneck_factor = cfg.bottleneck_factor;
            bc.single_pointwise = cfg.single_pointwise;
            bc.groups = cfg.groups;
            const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            auto block = cfg.variant == Variant::effcnet ? build_effcnet_block<T>(bc, prefix, extent, rng)
                                                         : build_condensenet_block_static<T>(bc, prefix, extent, rng);
            for (auto& l : block) {
                m.layers.push_back(std::move(l));
            }
            channels += k;
        }
        if (s + 1 < cfg.stages.size()) {
            const std::string group = "stage" + std::to_string(s) + ".pool";
            auto pool = make_layer<T>(LayerKind::avg_pool, group, group, channels, channels, extent, extent / 2);
            pool.window = 2;
            m.layers.push_back(std::move(pool));
            extent /= 2;
        }
    }
    m.layers.push_back(bn_layer<T>(channels, "head.bn", "head", extent));
    m.layers.push_back(simple_layer<T>(LayerKind::leaky_relu, channels, "head.act", "head", extent));
    auto gp = make_layer<T>(LayerKind::global_pool, "head.pool", "head", channels, channels, extent, 1);
    gp.window = extent;
    m.layers.push_back(std::move(gp));
    auto fc = make_layer<T>(LayerKind::linear, "head.fc", "head", channels, cfg.num_classes, 1, 1);
    fc.params.weight = kaiming_normal<T>(Shape{static_cast<std::size_t>(channels), static_cast<std::size_t>(cfg.num_classes)},
                                         static_cast<std::size_t>(channels), 1.0, rng);
    fc.params.bias = Tensor<T>::zeros(Shape{static_cast<std::size_t>(cfg.num_classes)});
    m.layers.push_back(std::move(fc));
    return m;
}

template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng)
{
    const auto size = static_cast<std::size_t>(model.config.input_size);
    if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != size || batch.dim(3) != size) {
        throw ShapeError("forward: expected [N,3," + std::to_string(size) + "," + std::to_string(size) + "], got " +
                         shape_string(batch.shape()));
    }
    std::vector<Tensor<T>> saved;
    Tensor<T> x = batch;
    for (auto& l : model.layers) {
        switch (l.kind) {
        case LayerKind::conv:
            x = conv2d(x, l.params.weight, Tensor<T>(), l.conv);
            break;
        case LayerKind::batch_norm:
            x = batch_norm(x, l.params, mode);
            break;
        case LayerKind::leaky_relu:
            x = leaky_relu(x);
            break;
        case LayerKind::permute:
            x = channel_permute(x, l.permute_groups);
            break;
        case LayerKind::dropout:
            if (mode == Mode::train && l.dropout_rate > 0.0) {
                if (rng == nullptr) {
                    throw ConfigError("forward: dropout in train mode needs an rng");
                }
                x = dropout(x, l.dropout_rate, mode, *rng);
            }
            break;
        case LayerKind::avg_pool:
        case LayerKind::global_pool:
            x = avg_pool(x, l.window);
            break;
        case LayerKind::linear:
            x = linear(x.reshape(Shape{x.dim(0), x.dim(1)}), l.params);
            break;
        case LayerKind::block_begin:
            saved.push_back(x);
            break;
        case LayerKind::block_end:
            x = concat_channels(saved.back(), x);
            saved.pop_back();
            break;
        }
    }
    return x;
}

template <typename T>
Tensor<T> forward_eval(const Model<T>& model, const Tensor<T>& batch)
{
    Model<T> copy = model;
    return forward(copy, batch, Mode::eval);
}

template <typename U, typename T>
Model<U> cast_model(const Model<T>& model)
{
    Model<U> out;
    out.config = model.config;
    for (const auto& l : model.layers) {
        Layer<U> c;
        c.kind = l.kind;
        c.name = l.name;
        c.group = l.group;
        c.conv = l.conv;
        c.permute_groups = l.permute_groups;
        c.dropout_rate = l.dropout_rate;
        c.window = l.window;
        c.in_channels = l.in_channels;
        c.out_channels = l.out_channels;
        c.in_extent = l.in_extent;
        c.out_extent = l.out_extent;
        auto cv = [](const Tensor<T>& t) { return t.defined() ? t.detach().template cast<U>() : Tensor<U>(); };
        c.params.weight = cv(l.params.weight);
        c.params.bias = cv(l.params.bias);
        c.params.bn_gamma = cv(l.params.bn_gamma);
        c.params.bn_beta = cv(l.params.bn_beta);
        c.params.bn_running_mean = cv(l.params.bn_running_mean);
        c.params.bn_running_var = cv(l.params.bn_running_var);
        out.layers.push_back(std::move(c));
    }
    return out;
}

#define EFFCNET_INSTANTIATE(T)                                                                                         \
    template class Model<T>;                                                                                           \
    template std::vector<Layer<T>> build_effcnet_block<T>(const BlockConfig&, const std::string&, int, Rng&);          \
    template std::vector<Layer<T>> build_condensenet_block_static<T>(const BlockConfig&, const std::string&, int,      \
                                                                     Rng&);                                            \
    template Model<T> assemble_network<T>(const NetworkConfig&, Rng&);                                                 \
    template Tensor<T> forward<T>(Model<T>&, const Tensor<T>&, Mode, Rng*);                                            \
    template Tensor<T> forward_eval<T>(const Model<T>&, const Tensor<T>&);

EFFCNET_INSTANTIATE(float)
EFFCNET_INSTANTIATE(double)
#undef EFFCNET_INSTANTIATE

template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);

} // namespace effcnet
