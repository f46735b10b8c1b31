#pragma once

#include "effcnet/rng.hpp"
#include "effcnet/tensor.hpp"

#include <cstddef>
#include <span>
#include <string>

namespace effcnet {

enum class Mode { train, eval };

enum class ConvAlgorithm {
    direct, // nested-loop reference
    im2col, // column-buffer path used for training
};

// Kernel geometry shared by every convolution variant. Activations are laid
// out N,C,H,W. Weights are stored [S, S, X/G, Y]; a depthwise kernel [S, S, X]
// and a pointwise kernel [X, Y] are the same bytes under the G = X and S = 1
// specialisations.
struct ConvSpec {
    int kernel = 1;       // S
    int in_channels = 1;  // X
    int out_channels = 1; // Y
    int stride = 1;
    int padding = 0;
    int groups = 1; // G

    // "same" padding (S-1)/2 is used whenever padding is left at -1.
    static ConvSpec standard(int in_channels, int out_channels, int kernel, int stride = 1, int padding = -1);
    static ConvSpec depthwise(int channels, int kernel, int stride = 1, int padding = -1);
    static ConvSpec pointwise(int in_channels, int out_channels);
    static ConvSpec grouped(int in_channels, int out_channels, int kernel, int groups, int stride = 1,
                            int padding = -1);

    bool is_depthwise() const { return groups == in_channels && out_channels == in_channels && groups > 1; }
    bool is_pointwise() const { return kernel == 1 && groups == 1; }

    // Throws ShapeError when the geometry is inconsistent.
    void validate() const;
    // floor((d + 2*padding - S) / stride) + 1; ShapeError when < 1.
    int output_extent(int d) const;
    // Canonical weight shape for this variant.
    Shape weight_shape() const;
    std::size_t weight_count() const;
    // Multiply-accumulates per image for an h x w input.
    std::size_t macs(int h, int w) const;
};

template <typename T>
struct LayerParams {
    Tensor<T> weight;
    Tensor<T> bias;
    Tensor<T> bn_gamma;
    Tensor<T> bn_beta;
    Tensor<T> bn_running_mean;
    Tensor<T> bn_running_var;
};

// Generic grouped convolution; the four named variants below check their
// ConvSpec shape rules and forward here.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvSpec& spec,
                 ConvAlgorithm algo = ConvAlgorithm::im2col);

template <typename T>
Tensor<T> conv2d_standard(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                          ConvAlgorithm algo = ConvAlgorithm::im2col);
template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                           ConvAlgorithm algo = ConvAlgorithm::im2col);
template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                           ConvAlgorithm algo = ConvAlgorithm::im2col);
template <typename T>
Tensor<T> conv2d_grouped(const Tensor<T>& input, const LayerParams<T>& params, const ConvSpec& spec,
                         ConvAlgorithm algo = ConvAlgorithm::im2col);

// f(x) = x for x >= 0, slope * x otherwise. The derivative at 0 is taken
// from the positive branch.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.01);

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

// Per-channel normalisation over N,H,W. Train mode normalises with batch
// statistics and folds them into the running estimates held in `params`
// (biased mean, unbiased variance); eval mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, LayerParams<T>& params, Mode mode, double momentum = kBatchNormMomentum,
                     double epsilon = kBatchNormEpsilon);

// Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng);

// Channel shuffle: view C as (groups, C/groups), transpose, flatten.
// channel_permute(channel_permute(x, g), C/g) == x.
template <typename T>
Tensor<T> channel_permute(const Tensor<T>& x, int groups);

// Non-overlapping window x window mean; window == H == W is a global pool.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int window);

// Concatenation along the channel axis (dense connectivity).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// x[N,F] * W[F,classes] + b[classes].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LayerParams<T>& params);

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Row-wise softmax, not recorded.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// Kaiming-normal fan-in init with the Leaky-ReLU gain sqrt(2 / (1 + slope^2)).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, double slope, Rng& rng);

} // namespace effcnet
