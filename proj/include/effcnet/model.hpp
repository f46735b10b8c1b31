#pragma once

#include "effcnet/layers.hpp"
#include "effcnet/rng.hpp"
#include "effcnet/tensor.hpp"

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace effcnet {

enum class Variant { effcnet, condensenet_static };

std::string_view variant_name(Variant v);

// 2^d * x0
int growth_channels(int d, int x0);

struct BlockConfig {
    int in_channels = 0;
    int growth = 0;
    double dropout_rate = 0.0;
    int permute_groups = 1;
    int dw_kernel = 3;
    int bottleneck_factor = 4;
    bool single_pointwise = false; // dw -> pw(in -> k), no expand/permute
    int groups = 1;                // grouped convs in the baseline block

    int out_channels() const { return in_channels + growth; }
    int mid_channels() const { return bottleneck_factor * growth; }
};

struct StageConfig {
    int num_blocks = 0;
    int index = 0; // d in the growth rule

    bool operator==(const StageConfig&) const = default;
};

struct NetworkConfig {
    Variant variant = Variant::effcnet;
    std::vector<StageConfig> stages;
    int base_growth = 8;
    int init_channels = 16;
    int num_classes = 10;
    int bottleneck_factor = 4;
    int permute_groups = 4;
    int groups = 4;
    int dw_kernel = 3;
    double dropout_rate = 0.0;
    bool single_pointwise = false;
    int input_size = 32;

    void validate() const;

    // key = value lines, '#' comments. stages is a comma-separated list of
    // block counts; the position of each entry is its stage index.
    static NetworkConfig parse(std::string_view text);
    static NetworkConfig load(const std::filesystem::path& path);
    std::string serialize() const;

    bool operator==(const NetworkConfig&) const = default;
};

enum class LayerKind {
    conv,
    batch_norm,
    leaky_relu,
    permute,
    dropout,
    avg_pool,
    global_pool,
    linear,
    block_begin, // remembers the block input
    block_end,   // concatenates the remembered input with the current tensor
};

template <typename T>
struct Layer {
    LayerKind kind = LayerKind::conv;
    std::string name;
    std::string group; // reporting row: "stem", "stage0.block3", "stage0.pool", "head"
    ConvSpec conv;     // conv only
    int permute_groups = 1;
    double dropout_rate = 0.0;
    int window = 1;
    int in_channels = 0;
    int out_channels = 0;
    int in_extent = 0;
    int out_extent = 0;
    LayerParams<T> params;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor;
    bool trainable;
};

template <typename T>
class Model {
public:
    NetworkConfig config;
    std::vector<Layer<T>> layers;

    int final_features() const;

    // Deterministic order; running statistics appear with trainable == false.
    std::vector<NamedTensor<T>> named_tensors();
    std::vector<Tensor<T>*> parameters();
    std::size_t parameter_count() const;
};

// Layer sub-lists for a single dense block, bracketed by block_begin/block_end.
// `extent` is the spatial size the block runs at.
template <typename T>
std::vector<Layer<T>> build_effcnet_block(const BlockConfig& cfg, const std::string& prefix, int extent, Rng& rng);
template <typename T>
std::vector<Layer<T>> build_condensenet_block_static(const BlockConfig& cfg, const std::string& prefix, int extent,
                                                     Rng& rng);

template <typename T>
Model<T> assemble_network(const NetworkConfig& cfg, Rng& rng);

// Train mode updates batch-norm running statistics and needs `rng` whenever
// dropout is active. Eval mode leaves the model untouched.
template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng = nullptr);
template <typename T>
Tensor<T> forward_eval(const Model<T>& model, const Tensor<T>& batch);

template <typename U, typename T>
Model<U> cast_model(const Model<T>& model);

} // namespace effcnet
