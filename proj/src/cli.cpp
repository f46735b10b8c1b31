#include "effcnet/cli.hpp"

#include "effcnet/augment.hpp"
#include "effcnet/checkpoint.hpp"
#include "effcnet/cost.hpp"
#include "effcnet/errors.hpp"
#include "effcnet/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace effcnet {

namespace {

std::string read_file(const std::filesystem::path& p)
{
    std::ifstream f(p, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + p.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

double ms_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

CifarVariant variant_for(const NetworkConfig& cfg)
{
    return cfg.num_classes == 100 ? CifarVariant::cifar100 : CifarVariant::cifar10;
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct TrainArgs {
    std::string config, data, dataset = "cifar10", out = "run";
    std::size_t subset = 0, test_subset = 0;
    int epochs = 1;
    std::uint64_t seed = 0;
    std::string policy;
    std::size_t batch_size = 64;
    double lr = 0.1;
    std::optional<double> dropout;
    bool pad_crop_flip = false;
    bool deterministic = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out)
{
    const auto variant = variant_from_name(a.dataset);
    const NetworkConfig cfg = NetworkConfig::load(a.config);
    if (cfg.num_classes != class_count(variant)) {
        throw ConfigError("config has " + std::to_string(cfg.num_classes) + " classes but " + a.dataset + " has " +
                          std::to_string(class_count(variant)));
    }
    Dataset train_ds = load_cifar(a.data, variant, Split::train);
    Dataset test_ds = load_cifar(a.data, variant, Split::test);
    if (a.subset) {
        train_ds = subset_per_class(train_ds, a.subset);
    }
    if (a.test_subset) {
        test_ds = subset_per_class(test_ds, a.test_subset);
    }
    TrainConfig tc;
    tc.epochs = a.epochs;
    tc.batch_size = a.batch_size;
    tc.lr0 = a.lr;
    tc.seed = a.seed;
    tc.dropout_rate = a.dropout;
    if (!a.policy.empty()) {
        tc.policy_path = a.policy;
    }
    tc.pad_crop_flip = a.pad_crop_flip;
    tc.deterministic = a.deterministic;
    tc.normalization = Normalization::for_variant(variant);
    Rng rng(a.seed);
    auto model = assemble_network<float>(cfg, rng);
    const auto res = train(model, train_ds, test_ds, tc, a.out, &out);
    out << "best epoch " << res.best_epoch << ", run directory " << a.out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, std::size_t test_subset, std::ostream& out,
             std::ostream& err)
{
    const auto loaded = load_checkpoint(ckpt, &err);
    Dataset ds = load_cifar(data, variant_for(loaded.model.config), Split::test);
    if (test_subset) {
        ds = subset_per_class(ds, test_subset);
    }
    const auto r = evaluate(loaded.model, ds, 100, normalization_for(loaded.model.config));
    char line[160];
    std::snprintf(line, sizeof line, "top1=%.6f top5=%.6f loss=%.6f n=%zu\n", r.top1, r.top5, r.loss, ds.size());
    out << line;
    return 0;
}

int cmd_classify(const std::string& ckpt, const std::string& image, const std::string& labels, std::ostream& out,
                 std::ostream& err)
{
    const auto loaded = load_checkpoint(ckpt, &err);
    const auto names = read_labels(labels);
    const auto r = classify(loaded.model, read_image_32(image), names);
    out << "rank,class,probability\n";
    for (std::size_t i = 0; i < r.ranked.size(); ++i) {
        out << i + 1 << "," << r.ranked[i].first << "," << fmt("%.6f", r.ranked[i].second) << "\n";
    }
    out << "preprocess_ms=" << fmt("%.3f", r.preprocess_ms) << "\n";
    out << "inference_ms=" << fmt("%.3f", r.inference_ms) << "\n";
    return 0;
}

CostReport report_for(const std::filesystem::path& p)
{
    Rng rng(0);
    return analyze(assemble_network<float>(load_config_or_checkpoint(p), rng));
}

int cmd_analyze(const std::string& config, const std::string& baseline, bool csv, std::ostream& out)
{
    const auto a = report_for(config);
    out << (csv ? a.csv() : a.table());
    if (!baseline.empty()) {
        const auto b = report_for(baseline);
        out << "\n" << (csv ? b.csv() : b.table()) << "\n" << compare_reports(a, b);
    }
    return 0;
}

int cmd_preview(const std::string& image, const std::string& policy, int count, const std::string& dir,
                std::uint64_t seed, std::ostream& out)
{
    const Image img = read_image_32(image);
    const AugPolicy pol = load_policy(policy);
    std::filesystem::create_directories(dir);
    Rng rng(seed);
    const std::vector<Image> copies(static_cast<std::size_t>(count), img);
    std::vector<std::size_t> chosen;
    const auto aug = augment_batch(copies, pol, rng, &chosen);
    for (std::size_t i = 0; i < aug.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "preview_%03zu.ppm", i);
        write_ppm(aug[i], std::filesystem::path(dir) / name);
        out << name << " sub-policy " << chosen[i] << "\n";
    }
    return 0;
}

} // namespace

void retain_freed_memory()
{
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

Normalization normalization_for(const NetworkConfig& cfg)
{
    return Normalization::for_variant(variant_for(cfg));
}

std::vector<std::string> read_labels(const std::filesystem::path& path)
{
    std::istringstream in(read_file(path));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            out.push_back(line);
        }
    }
    return out;
}

ClassifyResult classify(const Model<float>& model, const Image& img, const std::vector<std::string>& labels)
{
    const auto c = static_cast<std::size_t>(model.config.num_classes);
    if (labels.size() != c) {
        throw ConfigError("classify: " + std::to_string(labels.size()) + " class names for a " + std::to_string(c) +
                          "-class model");
    }
    ClassifyResult r;
    auto t0 = std::chrono::steady_clock::now();
    const Tensor<float> x = images_to_tensor(std::span<const Image>(&img, 1), normalization_for(model.config));
    r.preprocess_ms = ms_since(t0);
    t0 = std::chrono::steady_clock::now();
    const Tensor<float> logits = forward_eval(model, x);
    r.inference_ms = ms_since(t0);

    const auto v = logits.values();
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> p(c);
    for (std::size_t i = 0; i < c; ++i) {
        p[i] = std::exp(static_cast<double>(v[i]) - mx);
    }
    const double z = std::accumulate(p.begin(), p.end(), 0.0);
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    for (auto i : order) {
        r.ranked.emplace_back(labels[i], p[i] / z);
    }
    return r;
}

NetworkConfig load_config_or_checkpoint(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    if (bytes.rfind("EFFCNET1", 0) == 0) {
        return parse_checkpoint(bytes, nullptr).model.config;
    }
    return NetworkConfig::parse(bytes);
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"EffCNet training, evaluation and cost analysis", "effcnet"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a network and write a run directory");
    train_cmd->add_option("--config", ta.config, "network config")->required();
    train_cmd->add_option("--data", ta.data, "CIFAR binary directory")->required();
    train_cmd->add_option("--dataset", ta.dataset)->check(CLI::IsMember({"cifar10", "cifar100"}));
    train_cmd->add_option("--subset", ta.subset, "first N train records per class (0 = all)");
    train_cmd->add_option("--test-subset", ta.test_subset, "first N test records per class (0 = all)");
    train_cmd->add_option("--epochs", ta.epochs)->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", ta.seed);
    train_cmd->add_option("--policy", ta.policy, "augmentation policy file");
    train_cmd->add_option("--out", ta.out, "run directory");
    train_cmd->add_option("--batch-size", ta.batch_size)->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", ta.lr);
    train_cmd->add_option("--dropout", ta.dropout);
    train_cmd->add_flag("--pad-crop-flip", ta.pad_crop_flip, "random 4px pad-crop and horizontal flip");
    train_cmd->add_flag("--deterministic", ta.deterministic, "log 0 seconds per epoch");

    std::string ckpt, data, image, labels, config, baseline, policy, out_dir;
    std::size_t test_subset = 0;
    auto* eval_cmd = app.add_subcommand("eval", "top-1/top-5 of a checkpoint on the test split");
    eval_cmd->add_option("--ckpt", ckpt)->required();
    eval_cmd->add_option("--data", data)->required();
    eval_cmd->add_option("--test-subset", test_subset);

    auto* classify_cmd = app.add_subcommand("classify", "rank classes for one 32x32 image");
    classify_cmd->add_option("--ckpt", ckpt)->required();
    classify_cmd->add_option("--image", image)->required();
    classify_cmd->add_option("--labels", labels, "one class name per line")->required();

    bool csv = false;
    auto* analyze_cmd = app.add_subcommand("analyze", "parameter and FLOP report");
    analyze_cmd->add_option("--config", config, "config or checkpoint")->required();
    analyze_cmd->add_option("--baseline", baseline, "second config to compare against");
    analyze_cmd->add_flag("--csv", csv);

    int count = 8;
    std::uint64_t seed = 0;
    auto* preview_cmd = app.add_subcommand("augment-preview", "write augmented copies of an image");
    preview_cmd->add_option("--image", image)->required();
    preview_cmd->add_option("--policy", policy)->required();
    preview_cmd->add_option("--count", count)->check(CLI::PositiveNumber);
    preview_cmd->add_option("--out", out_dir)->required();
    preview_cmd->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (train_cmd->parsed()) {
            return cmd_train(ta, out);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(ckpt, data, test_subset, out, err);
        }
        if (classify_cmd->parsed()) {
            return cmd_classify(ckpt, image, labels, out, err);
        }
        if (analyze_cmd->parsed()) {
            return cmd_analyze(config, baseline, csv, out);
        }
        return cmd_preview(image, policy, count, out_dir, seed, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    std::vector<const char*> argv{"effcnet"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace effcnet
