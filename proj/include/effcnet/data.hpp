#pragma once

#include "effcnet/image.hpp"
#include "effcnet/tensor.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace effcnet {

enum class CifarVariant { cifar10, cifar100 };
enum class Split { train, test };

CifarVariant variant_from_name(std::string_view name); // ConfigError
std::size_t record_bytes(CifarVariant v);              // 3073 or 3074
int class_count(CifarVariant v);

struct DatasetRecord {
    int fine_label = 0;
    int coarse_label = -1; // CIFAR-100 only
    Image image;
};

struct Dataset {
    std::vector<DatasetRecord> records;
    int class_count = 10;
    Split split = Split::train;
    CifarVariant variant = CifarVariant::cifar10;

    std::size_t size() const { return records.size(); }
};

std::vector<DatasetRecord> parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant v);
std::vector<std::uint8_t> serialize_cifar(std::span<const DatasetRecord> records, CifarVariant v);
std::vector<DatasetRecord> read_cifar_file(const std::filesystem::path& file, CifarVariant v);

// Accepts either the directory holding the .bin files or its parent
// (cifar-10-batches-bin / cifar-100-binary).
Dataset load_cifar(const std::filesystem::path& dir, CifarVariant v, Split split);

// First n records of each class, original order kept.
Dataset subset_per_class(const Dataset& ds, std::size_t n);

struct Normalization {
    std::array<float, 3> mean;
    std::array<float, 3> std;

    static Normalization cifar10() { return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}}; }
    static Normalization cifar100() { return {{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}}; }
    static Normalization identity() { return {{0.f, 0.f, 0.f}, {1.f, 1.f, 1.f}}; }
    static Normalization for_variant(CifarVariant v) { return v == CifarVariant::cifar10 ? cifar10() : cifar100(); }
};

// out[c] = (pixel / 255 - mean[c]) / std[c], planar.
std::vector<float> normalize(const Image& img, const Normalization& n);
Image denormalize(std::span<const float> values, const Normalization& n, int height = 32, int width = 32);

// Per-channel mean of pixel/255 over the dataset.
std::array<double, 3> channel_means(const Dataset& ds);

// Record indices grouped into batches; the last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                                                   std::uint64_t seed);

// Normalized [B,3,H,W] tensor from images.
Tensor<float> images_to_tensor(std::span<const Image> images, const Normalization& n);

} // namespace effcnet
