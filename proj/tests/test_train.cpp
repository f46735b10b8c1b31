#include "effcnet/errors.hpp"
#include "effcnet/train.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace effcnet;

namespace {

NetworkConfig toy_config()
{
    return NetworkConfig::load(std::filesystem::path(EFFCNET_CONFIG_DIR) / "toy.cfg");
}

// Constant-colour 8x8 images: class 0 dark, class 1 bright, jittered per image.
Dataset toy_data(std::size_t per_class, std::uint64_t seed)
{
    Rng rng(seed);
    Dataset ds;
    ds.class_count = 2;
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        DatasetRecord r;
        r.fine_label = static_cast<int>(i % 2);
        r.image = Image(8, 8);
        for (int c = 0; c < 3; ++c) {
            const int base = r.fine_label ? 170 : 40;
            const auto v = static_cast<std::uint8_t>(base + static_cast<int>(rng.uniform_int(50)));
            std::fill(r.image.pixels.begin() + c * 64, r.image.pixels.begin() + (c + 1) * 64, v);
        }
        ds.records.push_back(r);
    }
    return ds;
}

TrainConfig toy_train(int epochs)
{
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.lr0 = 0.05;
    t.seed = 17;
    t.deterministic = true;
    t.normalization = Normalization::identity();
    return t;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("sgd_step")
{
    SUBCASE("plain gradient step")
    {
        Tensor<double> p({2}, std::vector<double>{1.0, -2.0});
        Tensor<double> g({2}, std::vector<double>{0.5, 4.0});
        Tensor<double> v;
        sgd_step(p, g, v, 0.1, 0.0, 0.0);
        CHECK(p.to_vector()[0] == doctest::Approx(0.95));
        CHECK(p.to_vector()[1] == doctest::Approx(-2.4));
    }
    SUBCASE("momentum recurrence")
    {
        Tensor<double> p({1}, 0.0);
        Tensor<double> g({1}, 1.0);
        Tensor<double> v;
        sgd_step(p, g, v, 1.0, 0.9, 0.0);
        sgd_step(p, g, v, 1.0, 0.9, 0.0);
        CHECK(p.item() == doctest::Approx(-2.9));
    }
    SUBCASE("weight decay")
    {
        Tensor<double> p({1}, 1.0);
        Tensor<double> v;
        sgd_step(p, Tensor<double>({1}, 0.0), v, 1.0, 0.0, 0.1);
        CHECK(p.item() == doctest::Approx(0.9));
    }
    SUBCASE("shape mismatch")
    {
        Tensor<double> p({2}, 1.0);
        Tensor<double> v;
        CHECK_THROWS_AS(sgd_step(p, Tensor<double>({3}, 0.0), v, 1.0, 0.0, 0.0), ShapeError);
    }
}

TEST_CASE("cosine_lr")
{
    CHECK(cosine_lr(0, 10, 0.1) == 0.1);
    CHECK(cosine_lr(5, 10, 0.1) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(cosine_lr(9, 10, 0.1) == doctest::Approx(0.1 * 0.5 * (1 + std::cos(std::numbers::pi * 9 / 10))));
    double prev = 1.0;
    for (int e = 0; e < 200; ++e) {
        const double lr = cosine_lr(e, 200, 0.1);
        CHECK(lr < prev);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(10, 10, 0.1), ConfigError);
    CHECK_THROWS_AS(cosine_lr(-1, 10, 0.1), ConfigError);
}

TEST_CASE("topk_accuracy")
{
    Tensor<float> l({2, 3}, std::vector<float>{0.1f, 0.9f, 0.0f, 2.0f, 1.0f, 3.0f});
    const int argmax[] = {1, 2};
    CHECK(topk_accuracy(l, argmax, 1) == 1.0);
    const int any[] = {0, 1};
    CHECK(topk_accuracy(l, any, 3) == 1.0);
    CHECK_THROWS_AS(topk_accuracy(l, any, 4), ConfigError);
    CHECK_THROWS_AS(topk_accuracy(l, any, 0), ConfigError);

    SUBCASE("ties go to the lower index")
    {
        Tensor<float> z({1, 4}, 0.0f);
        const int zero[] = {0};
        const int two[] = {2};
        CHECK(topk_accuracy(z, zero, 1) == 1.0);
        CHECK(topk_accuracy(z, two, 2) == 0.0);
        CHECK(topk_accuracy(z, two, 3) == 1.0);
    }
    SUBCASE("matches a full-sort oracle on random logits")
    {
        Rng rng(5);
        std::vector<double> v(50 * 10);
        for (auto& e : v) {
            // coarse values so ties occur
            e = static_cast<double>(rng.uniform_int(6));
        }
        std::vector<int> labels(50);
        for (auto& y : labels) {
            y = static_cast<int>(rng.uniform_int(10));
        }
        Tensor<double> t({50, 10}, v);
        for (int k = 1; k <= 10; ++k) {
            int hits = 0;
            for (int i = 0; i < 50; ++i) {
                std::vector<int> order(10);
                for (int j = 0; j < 10; ++j) {
                    order[static_cast<std::size_t>(j)] = j;
                }
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    return v[static_cast<std::size_t>(i * 10 + a)] > v[static_cast<std::size_t>(i * 10 + b)];
                });
                hits += std::find(order.begin(), order.begin() + k, labels[static_cast<std::size_t>(i)]) !=
                        order.begin() + k;
            }
            CHECK(topk_accuracy(t, labels, k) == static_cast<double>(hits) / 50.0);
        }
    }
}

TEST_CASE("evaluate")
{
    Rng rng(1);
    auto model = assemble_network<float>(toy_config(), rng);
    auto ds = toy_data(12, 3);
    // drop one class-1 record so the class-0 fraction is not 1/2
    ds.records.pop_back();
    for (auto& l : model.layers) {
        if (l.kind == LayerKind::linear) {
            l.params.weight = Tensor<float>::zeros(l.params.weight.shape());
        }
    }
    const auto r = evaluate(model, ds, 5, Normalization::identity());
    CHECK(r.top1 == 12.0 / 23.0);
    CHECK(r.top5 == 1.0);
    CHECK(r.loss == doctest::Approx(std::log(2.0)));

    Rng rng2(2);
    auto trained = assemble_network<float>(toy_config(), rng2);
    const auto a = evaluate(trained, ds, 1, Normalization::identity());
    const auto b = evaluate(trained, ds, 100, Normalization::identity());
    CHECK(a.top1 == b.top1);
    CHECK(a.top5 == b.top5);
    CHECK(a.top1 <= a.top5);
    CHECK_THROWS_AS(evaluate(trained, Dataset{}, 4, Normalization::identity()), DataError);
}

TEST_CASE("train with zero learning rate leaves weights unchanged")
{
    Rng rng(1);
    auto model = assemble_network<float>(toy_config(), rng);
    auto before = model;
    auto cfg = toy_train(1);
    cfg.lr0 = 0.0;
    cfg.weight_decay = 0.0;
    auto ds = toy_data(32, 4);
    train(model, ds, ds, cfg);
    auto x = model.parameters();
    auto y = before.parameters();
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(x[i]->to_vector() == y[i]->to_vector());
    }
}

TEST_CASE("toy separable task reaches full accuracy")
{
    Rng rng(1);
    auto model = assemble_network<float>(toy_config(), rng);
    auto train_ds = toy_data(32, 5);
    auto test_ds = toy_data(16, 6);
    auto res = train(model, train_ds, test_ds, toy_train(20));
    REQUIRE(res.history.size() == 20);
    CHECK(res.history.back().top1 == 1.0);
    for (const auto& rec : res.history) {
        CHECK(rec.top1 <= rec.top5);
        CHECK(rec.top5 <= 1.0);
    }
}

TEST_CASE("seeded runs are reproducible and write a run directory")
{
    const auto base = std::filesystem::temp_directory_path() / "effcnet_train_test";
    std::filesystem::remove_all(base);
    auto train_ds = toy_data(16, 7);
    auto test_ds = toy_data(8, 8);
    auto cfg = toy_train(3);
    cfg.policy_path = std::filesystem::path(EFFCNET_POLICY_DIR) / "cifar10.policy";
    cfg.pad_crop_flip = true;
    cfg.dropout_rate = 0.2;
    for (const char* run : {"a", "b"}) {
        Rng rng(9);
        auto model = assemble_network<float>(toy_config(), rng);
        train(model, train_ds, test_ds, cfg, base / run);
    }
    for (const char* f : {"metrics.csv", "best.ckpt", "last.ckpt", "config.snapshot"}) {
        REQUIRE(std::filesystem::exists(base / "a" / f));
        CHECK(slurp(base / "a" / f) == slurp(base / "b" / f));
    }
    const std::string metrics = slurp(base / "a" / "metrics.csv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
    CHECK(metrics.rfind("1,", 0) == 0);
    CHECK(NetworkConfig::parse(slurp(base / "a" / "config.snapshot")).dropout_rate == 0.2);
    auto last = load_checkpoint(base / "a" / "last.ckpt", nullptr);
    CHECK(last.meta.epoch == 3);
    std::filesystem::remove_all(base);
}

TEST_CASE("divergence is reported")
{
    Rng rng(1);
    auto model = assemble_network<float>(toy_config(), rng);
    auto cfg = toy_train(2);
    cfg.lr0 = 1e30;
    auto ds = toy_data(16, 4);
    try {
        train(model, ds, ds, cfg);
        FAIL("expected NumericsError");
    } catch (const NumericsError& e) {
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("train config validation")
{
    auto cfg = toy_train(1);
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_train(0);
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    MetricsRecord m{2, 0.5, 0.25, 0.75, 0.1, 0.0};
    CHECK(m.csv_line() == "2,0.500000,0.250000,0.750000,0.100000,0.000");
}
