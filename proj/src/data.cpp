#include "effcnet/data.hpp"

#include "effcnet/errors.hpp"
#include "effcnet/rng.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace effcnet {

CifarVariant variant_from_name(std::string_view name)
{
    if (name == "cifar10") {
        return CifarVariant::cifar10;
    }
    if (name == "cifar100") {
        return CifarVariant::cifar100;
    }
    throw ConfigError("unknown dataset '" + std::string(name) + "' (cifar10 or cifar100)");
}

std::size_t record_bytes(CifarVariant v)
{
    return v == CifarVariant::cifar10 ? 3073 : 3074;
}

int class_count(CifarVariant v)
{
    return v == CifarVariant::cifar10 ? 10 : 100;
}

std::vector<DatasetRecord> parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant v)
{
    const std::size_t rec = record_bytes(v);
    if (bytes.size() % rec != 0) {
        throw FormatError("cifar: " + std::to_string(bytes.size()) + " bytes is not a multiple of the " +
                          std::to_string(rec) + "-byte record");
    }
    const int classes = class_count(v);
    std::vector<DatasetRecord> out(bytes.size() / rec);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint8_t* p = bytes.data() + i * rec;
        DatasetRecord& r = out[i];
        if (v == CifarVariant::cifar100) {
            r.coarse_label = p[0];
            r.fine_label = p[1];
            if (r.coarse_label >= 20) {
                throw FormatError("cifar: record " + std::to_string(i) + " coarse label " +
                                  std::to_string(r.coarse_label) + " out of range");
            }
        } else {
            r.fine_label = p[0];
        }
        if (r.fine_label >= classes) {
            throw FormatError("cifar: record " + std::to_string(i) + " label " + std::to_string(r.fine_label) +
                              " out of range");
        }
        r.image.pixels.assign(p + rec - 3072, p + rec);
    }
    return out;
}

std::vector<std::uint8_t> serialize_cifar(std::span<const DatasetRecord> records, CifarVariant v)
{
    std::vector<std::uint8_t> out;
    out.reserve(records.size() * record_bytes(v));
    for (const auto& r : records) {
        if (r.image.pixels.size() != 3072) {
            throw DataError("cifar: record image is not 32x32x3");
        }
        if (v == CifarVariant::cifar100) {
            out.push_back(static_cast<std::uint8_t>(r.coarse_label < 0 ? 0 : r.coarse_label));
        }
        out.push_back(static_cast<std::uint8_t>(r.fine_label));
        out.insert(out.end(), r.image.pixels.begin(), r.image.pixels.end());
    }
    return out;
}

std::vector<DatasetRecord> read_cifar_file(const std::filesystem::path& file, CifarVariant v)
{
    std::ifstream f(file, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + file.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return parse_cifar(bytes, v);
    } catch (const FormatError& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
}

Dataset load_cifar(const std::filesystem::path& dir, CifarVariant v, Split split)
{
    std::filesystem::path base = dir;
    const char* sub = v == CifarVariant::cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
    if (std::filesystem::is_directory(dir / sub)) {
        base = dir / sub;
    }
    std::vector<std::string> files;
    if (v == CifarVariant::cifar10) {
        if (split == Split::train) {
            for (int i = 1; i <= 5; ++i) {
                files.push_back("data_batch_" + std::to_string(i) + ".bin");
            }
        } else {
            files.push_back("test_batch.bin");
        }
    } else {
        files.push_back(split == Split::train ? "train.bin" : "test.bin");
    }
    Dataset ds;
    ds.variant = v;
    ds.split = split;
    ds.class_count = class_count(v);
    for (const auto& name : files) {
        const auto path = base / name;
        if (!std::filesystem::exists(path)) {
            throw IoError("missing dataset file " + path.string());
        }
        auto recs = read_cifar_file(path, v);
        ds.records.insert(ds.records.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
    }
    return ds;
}

Dataset subset_per_class(const Dataset& ds, std::size_t n)
{
    Dataset out;
    out.class_count = ds.class_count;
    out.split = ds.split;
    out.variant = ds.variant;
    std::vector<std::size_t> taken(static_cast<std::size_t>(ds.class_count), 0);
    for (const auto& r : ds.records) {
        auto& t = taken[static_cast<std::size_t>(r.fine_label)];
        if (t < n) {
            out.records.push_back(r);
            ++t;
        }
    }
    return out;
}

namespace {

void check_norm(const Normalization& n)
{
    for (float s : n.std) {
        if (!(s > 0.0f)) {
            throw ConfigError("normalize: std components must be > 0");
        }
    }
}

} // namespace

std::vector<float> normalize(const Image& img, const Normalization& n)
{
    check_norm(n);
    const std::size_t plane = img.plane();
    std::vector<float> out(img.pixels.size());
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            out[c * plane + i] = (static_cast<float>(img.pixels[c * plane + i]) / 255.0f - n.mean[c]) / n.std[c];
        }
    }
    return out;
}

Image denormalize(std::span<const float> values, const Normalization& n, int height, int width)
{
    check_norm(n);
    Image img(height, width);
    if (values.size() != img.pixels.size()) {
        throw ShapeError("denormalize: expected " + std::to_string(img.pixels.size()) + " values");
    }
    const std::size_t plane = img.plane();
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            const float v = (values[c * plane + i] * n.std[c] + n.mean[c]) * 255.0f;
            img.pixels[c * plane + i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return img;
}

std::array<double, 3> channel_means(const Dataset& ds)
{
    std::array<double, 3> sum{0.0, 0.0, 0.0};
    std::size_t count = 0;
    for (const auto& r : ds.records) {
        const std::size_t plane = r.image.plane();
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < plane; ++i) {
                sum[c] += r.image.pixels[c * plane + i] / 255.0;
            }
        }
        count += plane;
    }
    if (count == 0) {
        throw DataError("channel_means: empty dataset");
    }
    for (auto& s : sum) {
        s /= static_cast<double>(count);
    }
    return sum;
}

std::vector<std::vector<std::size_t>> make_batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                                   std::uint64_t seed)
{
    if (ds.records.empty()) {
        throw DataError("make_batches: empty dataset");
    }
    if (batch_size < 1) {
        throw ConfigError("make_batches: batch_size must be >= 1");
    }
    std::vector<std::size_t> order(ds.records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) {
        Rng rng(seed);
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            std::swap(order[i], order[rng.uniform_int(i + 1)]);
        }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Tensor<float> images_to_tensor(std::span<const Image> images, const Normalization& n)
{
    if (images.empty()) {
        throw DataError("images_to_tensor: no images");
    }
    const int h = images[0].height, w = images[0].width;
    std::vector<float> data;
    data.reserve(images.size() * 3 * static_cast<std::size_t>(h * w));
    for (const auto& img : images) {
        if (img.height != h || img.width != w) {
            throw ShapeError("images_to_tensor: mixed image sizes");
        }
        auto v = normalize(img, n);
        data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor<float>({images.size(), 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                         std::move(data));
}

} // namespace effcnet
