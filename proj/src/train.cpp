#include "effcnet/train.hpp"

#include "effcnet/errors.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>

namespace effcnet {

void TrainConfig::validate() const
{
    if (epochs < 1) {
        throw ConfigError("train: epochs must be >= 1");
    }
    if (batch_size < 1 || eval_batch_size < 1) {
        throw ConfigError("train: batch sizes must be >= 1");
    }
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) {
        throw ConfigError("train: lr0 must be a finite non-negative number");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("train: momentum must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("train: weight_decay must be >= 0");
    }
    if (dropout_rate && !(*dropout_rate >= 0.0 && *dropout_rate < 1.0)) {
        throw ConfigError("train: dropout_rate must be in [0, 1)");
    }
}

std::string MetricsRecord::csv_line() const
{
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.3f", epoch, train_loss, top1, top5, lr, seconds);
    return buf;
}

template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum,
              double weight_decay)
{
    if (param.shape() != grad.shape() || (velocity.defined() && velocity.shape() != param.shape())) {
        throw ShapeError("sgd_step: shape mismatch " + shape_string(param.shape()) + " vs " +
                         shape_string(grad.shape()));
    }
    const bool was_trainable = param.requires_grad();
    auto p = param.contiguous().to_vector();
    const auto g = grad.contiguous().to_vector();
    std::vector<T> v = velocity.defined() ? velocity.contiguous().to_vector() : std::vector<T>(p.size(), T(0));
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T gi = g[i] + static_cast<T>(weight_decay) * p[i];
        v[i] = static_cast<T>(momentum) * v[i] + gi;
        p[i] -= static_cast<T>(lr) * v[i];
    }
    velocity = Tensor<T>(param.shape(), std::move(v));
    param = Tensor<T>(param.shape(), std::move(p));
    param.set_requires_grad(was_trainable);
}

double cosine_lr(int epoch, int total, double lr0)
{
    if (total < 1 || epoch < 0 || epoch >= total) {
        throw ConfigError("cosine_lr: need 0 <= epoch < total");
    }
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total));
}

namespace {

template <typename T>
bool in_topk(std::span<const T> row, int label, int k)
{
    const T target = row[static_cast<std::size_t>(label)];
    int rank = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (row[j] > target || (row[j] == target && static_cast<int>(j) < label)) {
            ++rank;
        }
    }
    return rank < k;
}

} // namespace

template <typename T>
double topk_accuracy(const Tensor<T>& logits, std::span<const int> labels, int k)
{
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("topk_accuracy: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const auto c = static_cast<int>(logits.dim(1));
    if (k < 1 || k > c) {
        throw ConfigError("topk_accuracy: k must be in [1, " + std::to_string(c) + "]");
    }
    if (labels.empty()) {
        throw DataError("topk_accuracy: no rows");
    }
    const Tensor<T> lc = logits.contiguous();
    const auto v = lc.values();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= c) {
            throw DataError("topk_accuracy: label out of range");
        }
        hits += in_topk(v.subspan(i * static_cast<std::size_t>(c), static_cast<std::size_t>(c)), labels[i], k);
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

EvalResult evaluate(const Model<float>& model, const Dataset& ds, std::size_t batch_size, const Normalization& norm)
{
    if (ds.records.empty()) {
        throw DataError("evaluate: empty dataset");
    }
    NoGradScope<float> no_grad;
    Model<float> m = model;
    const int c = m.config.num_classes;
    const int k5 = std::min(5, c);
    std::size_t hit1 = 0, hit5 = 0;
    double loss = 0.0;
    for (const auto& batch : make_batches(ds, batch_size, false, 0)) {
        std::vector<Image> imgs;
        imgs.reserve(batch.size());
        for (auto i : batch) {
            imgs.push_back(ds.records[i].image);
        }
        const Tensor<float> logits = forward(m, images_to_tensor(imgs, norm), Mode::eval);
        const auto v = logits.values();
        for (std::size_t r = 0; r < batch.size(); ++r) {
            const int label = ds.records[batch[r]].fine_label;
            if (label < 0 || label >= c) {
                throw DataError("evaluate: label " + std::to_string(label) + " outside the model's classes");
            }
            const auto row = v.subspan(r * static_cast<std::size_t>(c), static_cast<std::size_t>(c));
            hit1 += in_topk(row, label, 1);
            hit5 += in_topk(row, label, k5);
            double mx = row[0];
            for (float x : row) {
                mx = std::max(mx, static_cast<double>(x));
            }
            double se = 0.0;
            for (float x : row) {
                se += std::exp(static_cast<double>(x) - mx);
            }
            loss += mx + std::log(se) - static_cast<double>(row[static_cast<std::size_t>(label)]);
        }
    }
    const auto n = static_cast<double>(ds.records.size());
    return {static_cast<double>(hit1) / n, static_cast<double>(hit5) / n, loss / n};
}

namespace {

std::string snapshot(const Model<float>& model, const TrainConfig& cfg)
{
    std::string s = model.config.serialize();
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "# train.epochs = %d\n# train.batch_size = %zu\n# train.lr0 = %g\n# train.momentum = %g\n"
                  "# train.weight_decay = %g\n# train.seed = %llu\n# train.policy = %s\n# train.pad_crop_flip = %s\n",
                  cfg.epochs, cfg.batch_size, cfg.lr0, cfg.momentum, cfg.weight_decay,
                  static_cast<unsigned long long>(cfg.seed),
                  cfg.policy_path ? cfg.policy_path->string().c_str() : "none", cfg.pad_crop_flip ? "true" : "false");
    return s + buf;
}

void write_text(const std::filesystem::path& p, const std::string& text)
{
    std::ofstream f(p, std::ios::binary);
    f << text;
    if (!f) {
        throw IoError("cannot write " + p.string());
    }
}

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kAugmentStream = 0x4155474dULL;
constexpr std::uint64_t kDropoutStream = 0x44524f50ULL;

} // namespace

TrainResult train(Model<float>& model, const Dataset& train_ds, const Dataset& test_ds, const TrainConfig& cfg,
                  const std::filesystem::path& run_dir, std::ostream* log)
{
    cfg.validate();
    if (train_ds.records.empty() || test_ds.records.empty()) {
        throw DataError("train: empty train or test split");
    }
    if (model.config.num_classes < train_ds.class_count) {
        throw ConfigError("train: model has " + std::to_string(model.config.num_classes) + " classes, dataset has " +
                          std::to_string(train_ds.class_count));
    }
    if (cfg.dropout_rate) {
        for (auto& l : model.layers) {
            if (l.kind == LayerKind::dropout) {
                l.dropout_rate = *cfg.dropout_rate;
            }
        }
        model.config.dropout_rate = *cfg.dropout_rate;
    }
    std::optional<AugPolicy> policy;
    if (cfg.policy_path) {
        policy = load_policy(*cfg.policy_path);
    }
    const bool write = !run_dir.empty();
    if (write) {
        std::filesystem::create_directories(run_dir);
        write_text(run_dir / "config.snapshot", snapshot(model, cfg));
    }
    std::string metrics_text;
    if (log) {
        *log << kMetricsHeader << "\n";
    }

    auto params = model.parameters();
    std::vector<Tensor<float>> velocity(params.size());
    TrainResult result;
    double best_top1 = -1.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        const auto e = static_cast<std::uint64_t>(epoch);
        Rng aug_rng = Rng::substream(cfg.seed ^ kAugmentStream, e);
        Rng drop_rng = Rng::substream(cfg.seed ^ kDropoutStream, e);
        const auto batches =
            make_batches(train_ds, cfg.batch_size, true, Rng::substream(cfg.seed ^ kShuffleStream, e).next_u64());
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            std::vector<Image> imgs;
            std::vector<int> labels;
            imgs.reserve(idx.size());
            for (auto i : idx) {
                imgs.push_back(train_ds.records[i].image);
                labels.push_back(train_ds.records[i].fine_label);
            }
            if (policy) {
                imgs = augment_batch(imgs, *policy, aug_rng);
            }
            if (cfg.pad_crop_flip) {
                for (auto& img : imgs) {
                    img = pad_crop_flip(img, 4, aug_rng);
                }
            }
            const Tensor<float> x = images_to_tensor(imgs, cfg.normalization);
            for (auto* p : params) {
                p->set_requires_grad(true);
            }
            Tape<float> tape;
            Tensor<float> loss;
            {
                RecordingScope<float> scope(tape);
                loss = softmax_cross_entropy(forward(model, x, Mode::train, &drop_rng), labels);
            }
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                throw NumericsError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                    std::to_string(b + 1));
            }
            const auto grads = tape.backward(loss);
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor<float>& p = *params[i];
                const Tensor<float> g = grads.contains(p) ? grads.at(p) : Tensor<float>::zeros(p.shape());
                sgd_step(p, g, velocity[i], lr, cfg.momentum, cfg.weight_decay);
            }
            loss_sum += lv * static_cast<double>(idx.size());
        }
        for (auto* p : params) {
            p->set_requires_grad(false);
        }

        const EvalResult ev = evaluate(model, test_ds, cfg.eval_batch_size, cfg.normalization);
        MetricsRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = loss_sum / static_cast<double>(train_ds.records.size());
        rec.top1 = ev.top1;
        rec.top5 = ev.top5;
        rec.lr = lr;
        rec.seconds =
            cfg.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        metrics_text += rec.csv_line() + "\n";
        if (log) {
            *log << rec.csv_line() << "\n" << std::flush;
        }

        const CheckpointMeta meta{rec.epoch, rec.top1, rec.top5, rec.train_loss, cfg.seed};
        if (rec.top1 > best_top1) {
            best_top1 = rec.top1;
            result.best_epoch = rec.epoch;
            if (write) {
                save_checkpoint(model, meta, run_dir / "best.ckpt");
            }
        }
        if (write) {
            save_checkpoint(model, meta, run_dir / "last.ckpt");
            write_text(run_dir / "metrics.csv", metrics_text);
        }
    }
    return result;
}

#define EFFCNET_INSTANTIATE(T)                                                                                         \
    template void sgd_step<T>(Tensor<T>&, const Tensor<T>&, Tensor<T>&, double, double, double);                     \
    template double topk_accuracy<T>(const Tensor<T>&, std::span<const int>, int);

EFFCNET_INSTANTIATE(float)
EFFCNET_INSTANTIATE(double)
#undef EFFCNET_INSTANTIATE

} // namespace effcnet
