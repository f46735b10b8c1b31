#pragma once

#include "effcnet/augment.hpp"
#include "effcnet/checkpoint.hpp"
#include "effcnet/data.hpp"
#include "effcnet/model.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace effcnet {

struct TrainConfig {
    int epochs = 1;
    std::size_t batch_size = 64;
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;
    std::optional<double> dropout_rate; // overrides the model's rate when set
    std::optional<std::filesystem::path> policy_path;
    bool pad_crop_flip = false;
    bool deterministic = false; // logs seconds as 0 so runs compare byte-for-byte
    std::size_t eval_batch_size = 100;
    Normalization normalization = Normalization::cifar10();

    void validate() const;
};

struct MetricsRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double top1 = 0.0;
    double top5 = 0.0;
    double lr = 0.0;
    double seconds = 0.0;

    std::string csv_line() const; // epoch,train_loss,top1,top5,lr,seconds
};

inline constexpr const char* kMetricsHeader = "epoch,train_loss,top1,top5,lr,seconds";

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    double loss = 0.0;
};

// g = grad + wd * param; v = momentum * v + g; param -= lr * v.
// An undefined velocity starts at zero.
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum,
              double weight_decay);

// lr0 * (1 + cos(pi * epoch / total)) / 2 for 0 <= epoch < total.
double cosine_lr(int epoch, int total, double lr0);

// Rank of the label counts strictly larger logits plus equal logits at lower
// indices; a row hits when that rank is below k.
template <typename T>
double topk_accuracy(const Tensor<T>& logits, std::span<const int> labels, int k);

EvalResult evaluate(const Model<float>& model, const Dataset& ds, std::size_t batch_size, const Normalization& norm);

struct TrainResult {
    std::vector<MetricsRecord> history;
    int best_epoch = 0;
};

// Writes config.snapshot, metrics.csv (one line per epoch, no header), best.ckpt
// and last.ckpt into run_dir when it is non-empty. `log` gets a header and the
// same lines.
TrainResult train(Model<float>& model, const Dataset& train_ds, const Dataset& test_ds, const TrainConfig& cfg,
                  const std::filesystem::path& run_dir = {}, std::ostream* log = nullptr);

} // namespace effcnet
