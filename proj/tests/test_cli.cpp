#include "effcnet/augment.hpp"
#include "effcnet/checkpoint.hpp"
#include "effcnet/cli.hpp"
#include "effcnet/cost.hpp"
#include "effcnet/errors.hpp"
#include "effcnet/train.hpp"
#include "fake_cifar.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace effcnet;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = EFFCNET_CONFIG_DIR;
const fs::path kPolicies = EFFCNET_POLICY_DIR;

struct Run {
    int code;
    std::string out, err;
};

Run cli(const std::vector<std::string>& args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream f(p, std::ios::binary);
    f << s;
}

fs::path scratch(const char* name)
{
    const auto d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string labels_file(const fs::path& dir, int n)
{
    std::string s;
    for (int i = 0; i < n; ++i) {
        s += "class" + std::to_string(i) + "\n";
    }
    write_text(dir / "labels.txt", s);
    return (dir / "labels.txt").string();
}

} // namespace

TEST_CASE("usage errors exit with 2")
{
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"analyze", "--config", "x.cfg", "--bogus"}).code == 2);
    CHECK(cli({"eval", "--ckpt", "a.ckpt"}).code == 2);
    CHECK(cli({"augment-preview", "--image", "a", "--policy", "b", "--out", "c", "--count", "0"}).code == 2);
    const auto help = cli({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("analyze") != std::string::npos);
}

TEST_CASE("runtime failures exit with 1")
{
    const auto r = cli({"analyze", "--config", "/nonexistent/x.cfg"});
    CHECK(r.code == 1);
    CHECK(r.err.find("error:") == 0);
    const auto d = scratch("effcnet_cli_bad");
    write_text(d / "bad.cfg", "stages = 1\nwidth = 3\n");
    CHECK(cli({"analyze", "--config", (d / "bad.cfg").string()}).code == 1);
    fs::remove_all(d);
}

TEST_CASE("analyze")
{
    const auto r = cli({"analyze", "--config", (kConfigs / "effcnet_cifar10.cfg").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("stem") != std::string::npos);
    CHECK(r.out.find("head") != std::string::npos);

    const auto csv = cli({"analyze", "--config", (kConfigs / "effcnet_cifar10.cfg").string(), "--csv"});
    REQUIRE(csv.code == 0);
    CHECK(csv.out.rfind("layer,params,flops\n", 0) == 0);
    Rng rng(0);
    const auto m = assemble_network<float>(NetworkConfig::load(kConfigs / "effcnet_cifar10.cfg"), rng);
    CHECK(csv.out.find("total," + std::to_string(count_params(m)) + "," + std::to_string(count_flops(m))) !=
          std::string::npos);

    const auto cmp = cli({"analyze", "--config", (kConfigs / "effcnet_cifar10.cfg").string(), "--baseline",
                          (kConfigs / "condensenet_cifar10.cfg").string()});
    REQUIRE(cmp.code == 0);
    CHECK(cmp.out.find("ratio") != std::string::npos);
    CHECK(cmp.out.find("condensenet") != std::string::npos);

    SUBCASE("a checkpoint analyzes like its config")
    {
        const auto d = scratch("effcnet_cli_analyze");
        auto mm = m;
        save_checkpoint(mm, {}, d / "m.ckpt");
        CHECK(cli({"analyze", "--config", (d / "m.ckpt").string()}).out == r.out);
        fs::remove_all(d);
    }
}

TEST_CASE("train, eval and classify through the CLI")
{
    const auto d = scratch("effcnet_cli_train");
    write_fake_cifar10(d / "data", 110, 10, 3);
    write_text(d / "tiny.cfg", kTinyCifarConfig);
    const auto r = cli({"train", "--config", (d / "tiny.cfg").string(), "--data", (d / "data").string(), "--dataset",
                        "cifar10", "--subset", "100", "--epochs", "1", "--seed", "4", "--out", (d / "run").string(),
                        "--deterministic"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const std::string metrics = slurp(d / "run" / "metrics.csv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1);
    for (const char* f : {"config.snapshot", "best.ckpt", "last.ckpt"}) {
        CHECK(fs::exists(d / "run" / f));
    }

    // eval reproduces the logged top-1 exactly
    const auto ev = cli({"eval", "--ckpt", (d / "run" / "last.ckpt").string(), "--data", (d / "data").string()});
    REQUIRE_MESSAGE(ev.code == 0, ev.err);
    double logged = 0.0;
    std::sscanf(metrics.c_str(), "%*d,%*f,%lf", &logged);
    char want[32];
    std::snprintf(want, sizeof want, "top1=%.6f", logged);
    CHECK(ev.out.rfind(want, 0) == 0);

    // and matches in-process evaluate
    const auto loaded = load_checkpoint(d / "run" / "last.ckpt", nullptr);
    const auto direct = evaluate(loaded.model, load_cifar(d / "data", CifarVariant::cifar10, Split::test), 7,
                                 Normalization::cifar10());
    char line[160];
    std::snprintf(line, sizeof line, "top1=%.6f top5=%.6f loss=%.6f n=100\n", direct.top1, direct.top5, direct.loss);
    CHECK(ev.out == line);

    SUBCASE("classify prints ranked probabilities and latencies")
    {
        const auto labels = labels_file(d, 10);
        Image img = load_cifar(d / "data", CifarVariant::cifar10, Split::test).records[3].image;
        std::string raw(img.pixels.begin(), img.pixels.end());
        write_text(d / "img.raw", raw);
        const auto a = cli({"classify", "--ckpt", (d / "run" / "last.ckpt").string(), "--image",
                            (d / "img.raw").string(), "--labels", labels});
        REQUIRE_MESSAGE(a.code == 0, a.err);
        CHECK(a.out.rfind("rank,class,probability\n1,class", 0) == 0);
        CHECK(a.out.find("inference_ms=") != std::string::npos);
        const auto b = cli({"classify", "--ckpt", (d / "run" / "last.ckpt").string(), "--image",
                            (d / "img.raw").string(), "--labels", labels});
        // probabilities repeat exactly; only the timing lines may differ
        CHECK(a.out.substr(0, a.out.find("preprocess_ms")) == b.out.substr(0, b.out.find("preprocess_ms")));

        const auto wrong = labels_file(d, 9);
        const auto c = cli({"classify", "--ckpt", (d / "run" / "last.ckpt").string(), "--image",
                            (d / "img.raw").string(), "--labels", wrong});
        CHECK(c.code == 1);
        write_text(d / "small.raw", std::string(100, '\0'));
        CHECK(cli({"classify", "--ckpt", (d / "run" / "last.ckpt").string(), "--image", (d / "small.raw").string(),
                   "--labels", labels_file(d, 10)})
                  .code == 1);
    }
    fs::remove_all(d);
}

TEST_CASE("classify")
{
    Rng rng(2);
    auto model = assemble_network<float>(NetworkConfig::parse(kTinyCifarConfig), rng);
    std::vector<std::string> labels;
    for (int i = 0; i < 10; ++i) {
        labels.push_back("c" + std::to_string(i));
    }
    Image img(32, 32);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        img.pixels[i] = static_cast<std::uint8_t>(i * 7);
    }

    SUBCASE("probabilities sum to one in descending order")
    {
        const auto r = classify(model, img, labels);
        REQUIRE(r.ranked.size() == 10);
        double sum = 0.0;
        for (std::size_t i = 0; i < r.ranked.size(); ++i) {
            sum += r.ranked[i].second;
            if (i > 0) {
                CHECK(r.ranked[i - 1].second >= r.ranked[i].second);
            }
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(r.inference_ms >= 0.0);
    }
    SUBCASE("a zero-weight head gives uniform probabilities in index order")
    {
        for (auto& l : model.layers) {
            if (l.kind == LayerKind::linear) {
                l.params.weight = Tensor<float>::zeros(l.params.weight.shape());
                l.params.bias = Tensor<float>::zeros(l.params.bias.shape());
            }
        }
        const auto r = classify(model, img, labels);
        for (std::size_t i = 0; i < 10; ++i) {
            CHECK(r.ranked[i].first == labels[i]);
            CHECK(r.ranked[i].second == doctest::Approx(0.1).epsilon(1e-12));
        }
    }
    SUBCASE("a trained two-class model ranks a training image's label first")
    {
        std::string text = kTinyCifarConfig;
        text.replace(text.find("num_classes = 10"), 16, "num_classes = 2");
        Rng r2(3);
        auto two = assemble_network<float>(NetworkConfig::parse(text), r2);
        Dataset ds;
        ds.class_count = 2;
        Rng noise(8);
        for (int i = 0; i < 32; ++i) {
            DatasetRecord rec;
            rec.fine_label = i % 2;
            rec.image = Image(32, 32);
            for (auto& p : rec.image.pixels) {
                p = static_cast<std::uint8_t>((rec.fine_label ? 170 : 40) + static_cast<int>(noise.uniform_int(50)));
            }
            ds.records.push_back(rec);
        }
        TrainConfig tc;
        tc.epochs = 10;
        tc.batch_size = 8;
        tc.lr0 = 0.05;
        tc.seed = 1;
        tc.normalization = Normalization::cifar100(); // what classify uses for a non-10-class model
        train(two, ds, ds, tc);
        for (int i = 0; i < 2; ++i) {
            const auto r = classify(two, ds.records[static_cast<std::size_t>(i)].image, {"dark", "bright"});
            CHECK(r.ranked[0].first == (i == 0 ? "dark" : "bright"));
        }
    }
    CHECK_THROWS_AS(classify(model, img, {"a", "b"}), ConfigError);
}

TEST_CASE("augment-preview")
{
    const auto d = scratch("effcnet_cli_preview");
    Image img(32, 32);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        img.pixels[i] = static_cast<std::uint8_t>(i * 13 + 5);
    }
    write_ppm(img, d / "in.ppm");

    const auto r = cli({"augment-preview", "--image", (d / "in.ppm").string(), "--policy",
                        (kPolicies / "identity.policy").string(), "--count", "4", "--out", (d / "same").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    for (int i = 0; i < 4; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "preview_%03d.ppm", i);
        CHECK(read_ppm(d / "same" / name) == img);
    }
    CHECK_FALSE(fs::exists(d / "same" / "preview_004.ppm"));

    const auto v = cli({"augment-preview", "--image", (d / "in.ppm").string(), "--policy",
                        (kPolicies / "cifar10.policy").string(), "--count", "6", "--out", (d / "varied").string(),
                        "--seed", "3"});
    REQUIRE(v.code == 0);
    int changed = 0;
    for (int i = 0; i < 6; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "preview_%03d.ppm", i);
        changed += !(read_ppm(d / "varied" / name) == img);
    }
    CHECK(changed > 0);
    fs::remove_all(d);
}
