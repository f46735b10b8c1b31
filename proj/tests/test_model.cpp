#include "effcnet/cost.hpp"
#include "effcnet/errors.hpp"
#include "effcnet/model.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace effcnet;

namespace {

const std::filesystem::path kConfigs = EFFCNET_CONFIG_DIR;

Model<float> load_model(const char* name, std::uint64_t seed = 1)
{
    Rng rng(seed);
    return assemble_network<float>(NetworkConfig::load(kConfigs / name), rng);
}

std::size_t conv_weights(const std::vector<Layer<float>>& layers)
{
    std::size_t n = 0;
    for (const auto& l : layers) {
        if (l.kind == LayerKind::conv) {
            n += l.params.weight.numel();
        }
    }
    return n;
}

// Counts iterations of the naive convolution loop nest.
std::size_t loop_count(const ConvSpec& s, int d)
{
    const int o = s.output_extent(d);
    std::size_t n = 0;
    for (int r = 0; r < o; ++r)
        for (int c = 0; c < o; ++c)
            for (int y = 0; y < s.out_channels; ++y)
                for (int i = 0; i < s.kernel; ++i)
                    for (int j = 0; j < s.kernel; ++j)
                        for (int m = 0; m < s.in_channels / s.groups; ++m)
                            ++n;
    return n;
}

NetworkConfig tiny_config()
{
    NetworkConfig c;
    c.stages = {{1, 0}};
    c.base_growth = 4;
    c.init_channels = 8;
    c.num_classes = 10;
    c.permute_groups = 2;
    return c;
}

} // namespace

TEST_CASE("growth_channels")
{
    CHECK(growth_channels(0, 8) == 8);
    CHECK(growth_channels(2, 8) == 32);
    CHECK(growth_channels(1, 16) == 32);
    CHECK_THROWS_AS(growth_channels(-1, 8), ConfigError);
}

TEST_CASE("effcnet block")
{
    Rng rng(3);
    BlockConfig bc;
    bc.in_channels = 16;
    bc.growth = 8;
    bc.permute_groups = 4;
    auto block = build_effcnet_block<double>(bc, "b", 8, rng);
    std::size_t conv = 0;
    for (const auto& l : block) {
        if (l.kind == LayerKind::conv) {
            conv += l.params.weight.numel();
        }
    }
    CHECK(conv == 3 * 3 * 16 + 16 * 32 + 32 * 8);
    CHECK(conv == 912);
    CHECK(block.back().out_channels == 24);

    SUBCASE("forward matches manual composition")
    {
        NetworkConfig c = tiny_config();
        c.input_size = 8;
        c.init_channels = 16;
        c.base_growth = 8;
        c.permute_groups = 4;
        Rng r(5);
        auto m = assemble_network<double>(c, r);
        Rng xr(6);
        std::vector<double> v(2 * 3 * 8 * 8);
        for (auto& e : v) {
            e = xr.uniform() - 0.5;
        }
        Tensor<double> x({2, 3, 8, 8}, v);
        auto logits = forward_eval(m, x);

        auto P = [&](const char* name) -> LayerParams<double>& {
            for (auto& l : m.layers) {
                if (l.name == name) {
                    return l.params;
                }
            }
            throw std::runtime_error(name);
        };
        Tensor<double> none;
        auto h = conv2d(x, P("stem.conv").weight, none, ConvSpec::standard(3, 16, 3));
        auto t = leaky_relu(batch_norm(h, P("stage0.block0.bn1"), Mode::eval));
        t = conv2d_depthwise(t, P("stage0.block0.dw"), ConvSpec::depthwise(16, 3));
        t = leaky_relu(batch_norm(t, P("stage0.block0.bn2"), Mode::eval));
        t = conv2d_pointwise(t, P("stage0.block0.pw1"), ConvSpec::pointwise(16, 32));
        t = channel_permute(t, 4);
        t = conv2d_pointwise(t, P("stage0.block0.pw2"), ConvSpec::pointwise(32, 8));
        h = concat_channels(h, t);
        h = avg_pool(leaky_relu(batch_norm(h, P("head.bn"), Mode::eval)), 8);
        auto expect = linear(h.reshape({2, 24}), P("head.fc"));
        double diff = 0.0;
        for (std::size_t i = 0; i < expect.numel(); ++i) {
            diff = std::max(diff, std::abs(expect.values()[i] - logits.values()[i]));
        }
        CHECK(diff < 1e-6);
    }
    SUBCASE("invariant violations")
    {
        BlockConfig bad = bc;
        bad.permute_groups = 3;
        CHECK_THROWS_AS(build_effcnet_block<double>(bad, "b", 8, rng), ConfigError);
        bad = bc;
        bad.dropout_rate = 1.0;
        CHECK_THROWS_AS(build_effcnet_block<double>(bad, "b", 8, rng), ConfigError);
    }
}

TEST_CASE("condensenet static block")
{
    Rng rng(4);
    BlockConfig bc;
    bc.in_channels = 16;
    bc.growth = 8;
    bc.groups = 4;
    auto block = build_condensenet_block_static<double>(bc, "b", 8, rng);
    const std::size_t g1 = block[3].params.weight.numel();
    // (in/G)*(4k/G) per group, G groups
    CHECK(g1 == (16 / 4) * (32 / 4) * 4);
    CHECK(g1 == 16 * 4 * 8 / 4);
    CHECK(block.back().out_channels == 24);

    BlockConfig dense = bc;
    dense.groups = 1;
    auto d = build_condensenet_block_static<double>(dense, "b", 8, rng);
    CHECK(d[3].params.weight.numel() == 16 * 32);
    CHECK(d[7].params.weight.numel() == 9 * 32 * 8);

    BlockConfig bad = bc;
    bad.in_channels = 18;
    CHECK_THROWS_AS(build_condensenet_block_static<double>(bad, "b", 8, rng), ConfigError);
}

TEST_CASE("assemble_network shape chain and dense connectivity")
{
    NetworkConfig c = tiny_config();
    Rng rng(7);
    auto m = assemble_network<float>(c, rng);
    Tensor<float> x({1, 3, 32, 32}, 0.25f);
    CHECK(forward(m, x, Mode::eval).shape() == Shape{1, 10});
    CHECK_THROWS_AS(forward(m, Tensor<float>({1, 3, 16, 16}, 0.f), Mode::eval), ShapeError);

    NetworkConfig c3 = tiny_config();
    c3.stages = {{3, 0}, {2, 1}};
    c3.input_size = 8;
    Rng r3(8);
    auto m3 = assemble_network<float>(c3, r3);
    int stage_in = 8;
    int seen = 0;
    for (const auto& l : m3.layers) {
        if (l.kind == LayerKind::block_end) {
            const int k = l.group.rfind("stage0", 0) == 0 ? 4 : 8;
            const int idx = l.group.back() - '0';
            if (l.group == "stage1.block0") {
                stage_in = 8 + 3 * 4;
            }
            CHECK(l.out_channels == stage_in + (idx + 1) * k);
            ++seen;
        }
    }
    CHECK(seen == 5);
    CHECK(m3.final_features() == 8 + 12 + 16);
}

TEST_CASE("forward determinism and softmax")
{
    auto m = load_model("effcnet_mini.cfg");
    Rng xr(11);
    std::vector<float> v(2 * 3 * 32 * 32);
    for (auto& e : v) {
        e = static_cast<float>(xr.normal());
    }
    Tensor<float> x({2, 3, 32, 32}, v);
    auto a = forward_eval(m, x).to_vector();
    auto b = forward_eval(m, x).to_vector();
    CHECK(a == b);
    auto p = softmax(Tensor<float>({2, 10}, a)).to_vector();
    for (int r = 0; r < 2; ++r) {
        double s = 0.0;
        for (int j = 0; j < 10; ++j) {
            s += p[static_cast<std::size_t>(r * 10 + j)];
        }
        CHECK(std::abs(s - 1.0) < 1e-5);
    }

    SUBCASE("zero head gives uniform softmax and ln C loss")
    {
        for (auto& l : m.layers) {
            if (l.kind == LayerKind::linear) {
                l.params.weight = Tensor<float>::zeros(l.params.weight.shape());
            }
        }
        const int labels[] = {3, 7};
        auto logits = forward(m, x, Mode::eval);
        CHECK(softmax_cross_entropy(logits, labels).item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    }
}

TEST_CASE("NetworkConfig text format")
{
    auto c = NetworkConfig::load(kConfigs / "effcnet_cifar10.cfg");
    CHECK(c.stages.size() == 3);
    CHECK(c.stages[2].index == 2);
    CHECK(NetworkConfig::parse(c.serialize()) == c);
    CHECK(NetworkConfig::parse(c.serialize()).serialize() == c.serialize());
    CHECK_THROWS_AS(NetworkConfig::parse("stages = 2\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(NetworkConfig::parse("stages = 2\nnum_classes = 1\n"), ConfigError);
    CHECK_THROWS_AS(NetworkConfig::parse("stages = x\n"), ConfigError);
    CHECK_THROWS_AS(NetworkConfig::parse("just words\n"), ConfigError);
    CHECK_THROWS_AS(NetworkConfig::parse("stages = 2\npermute_groups = 5\n"), ConfigError);
    CHECK_THROWS_AS(NetworkConfig::parse("variant = condensenet_static\nstages = 2\ninit_channels = 6\n"), ConfigError);
}

TEST_CASE("cost analyzer per-layer counts")
{
    SUBCASE("dense 3x3 16->32 params")
    {
        CHECK(ConvSpec::standard(16, 32, 3).weight_count() == 4608);
    }
    SUBCASE("conv flops equal the loop count")
    {
        Layer<float> pw;
        pw.kind = LayerKind::conv;
        pw.conv = ConvSpec::pointwise(64, 128);
        CHECK(layer_flops(pw, 16) == 2097152);
        CHECK(layer_flops(pw, 16) == loop_count(pw.conv, 16));
        Layer<float> dw;
        dw.kind = LayerKind::conv;
        dw.conv = ConvSpec::depthwise(16, 3);
        CHECK(layer_flops(dw, 32) == 147456);
        CHECK(layer_flops(dw, 32) == loop_count(dw.conv, 32));
        for (const ConvSpec& s : {ConvSpec::standard(3, 5, 3, 2), ConvSpec::grouped(8, 12, 3, 4),
                                  ConvSpec::grouped(8, 4, 1, 2), ConvSpec::standard(2, 3, 5, 1, 0)}) {
            Layer<float> l;
            l.kind = LayerKind::conv;
            l.conv = s;
            CHECK(layer_flops(l, 9) == loop_count(s, 9));
        }
    }
    SUBCASE("params equal enumeration; totals equal row sums")
    {
        for (const char* name : {"effcnet_cifar10.cfg", "condensenet_cifar10.cfg", "toy.cfg", "effcnet_mini.cfg"}) {
            auto m = load_model(name);
            auto r = analyze(m);
            std::size_t enumerated = 0;
            for (auto* t : m.parameters()) {
                enumerated += t->numel();
            }
            CHECK(r.total_params == enumerated);
            std::size_t p = 0, f = 0;
            for (const auto& row : r.rows) {
                p += row.params;
                f += row.flops;
            }
            CHECK(p == r.total_params);
            CHECK(f == r.total_flops);
        }
    }
    SUBCASE("block-free config has stem and head rows only")
    {
        NetworkConfig c = tiny_config();
        c.stages.clear();
        Rng rng(1);
        auto m = assemble_network<float>(c, rng);
        auto r = analyze(m);
        REQUIRE(r.rows.size() == 2);
        CHECK(r.rows[0].name == "stem");
        CHECK(r.rows[1].name == "head");
        CHECK(r.total_params == 3 * 3 * 3 * 8 + 2 * 8 + 8 * 10 + 10);
        CHECK(r.rows[0].flops == 32 * 32 * 27 * 8);
    }
}

TEST_CASE("reference costs")
{
    auto eff10 = analyze(load_model("effcnet_cifar10.cfg"));
    auto eff100 = analyze(load_model("effcnet_cifar100.cfg"));
    auto cds10 = analyze(load_model("condensenet_cifar10.cfg"));
    auto within = [](std::size_t v, double target, double tol) {
        return std::abs(static_cast<double>(v) - target) <= tol * target;
    };
    CHECK(within(cds10.total_params, 0.52e6, 0.05));
    CHECK(within(cds10.total_flops, 65.82e6, 0.05));
    CHECK(within(eff10.total_params, 0.46e6, 0.10));
    CHECK(within(eff10.total_flops, 61.01e6, 0.10));
    CHECK(within(eff100.total_params, 0.50e6, 0.10));
    CHECK(within(eff100.total_flops, 61.05e6, 0.10));
    CHECK(eff10.total_params < cds10.total_params);
    CHECK(eff10.total_flops < cds10.total_flops);

    auto m10 = load_model("effcnet_cifar10.cfg");
    CHECK(eff100.total_params - eff10.total_params == static_cast<std::size_t>(m10.final_features()) * 90 + 90);

    auto csv = eff10.csv();
    CHECK(csv.rfind("layer,params,flops\n", 0) == 0);
    CHECK(eff10.table().find("total") != std::string::npos);
}

TEST_CASE("cost is unchanged by a config round trip")
{
    auto m = load_model("condensenet_cifar10.cfg");
    Rng rng(2);
    auto again = assemble_network<float>(NetworkConfig::parse(m.config.serialize()), rng);
    CHECK(analyze(m).csv() == analyze(again).csv());
}

TEST_CASE("block conv weights match the closed-form counts")
{
    for (int in : {16, 64, 128, 352}) {
        for (int k : {8, 16, 32}) {
            const long eff = 9L * in + in * 4L * k + 4L * k * k;
            const long cds = in * 4L * k / 4 + 9L * 4 * k * k / 4;
            Rng rng(1);
            BlockConfig bc;
            bc.in_channels = in;
            bc.growth = k;
            bc.permute_groups = 4;
            bc.groups = 4;
            auto e = build_effcnet_block<float>(bc, "e", 8, rng);
            auto c = build_condensenet_block_static<float>(bc, "c", 8, rng);
            CHECK(conv_weights(e) == static_cast<std::size_t>(eff));
            CHECK(conv_weights(c) == static_cast<std::size_t>(cds));
        }
    }
}
