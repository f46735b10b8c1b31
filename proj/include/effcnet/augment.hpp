#pragma once

#include "effcnet/image.hpp"
#include "effcnet/rng.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace effcnet {

enum class AugOpType {
    rotate,
    shear_x,
    shear_y,
    translate_x,
    translate_y,
    flip_horizontal,
    brightness,
    contrast,
    cutout,
};

std::string_view op_name(AugOpType t);
AugOpType op_from_name(std::string_view name); // ConfigError when unknown

struct AugOp {
    AugOpType type = AugOpType::rotate;
    double probability = 0.0;
    int magnitude = 0; // bin in [0, 10]
};

using SubPolicy = std::array<AugOp, 2>;

struct AugPolicy {
    std::vector<SubPolicy> sub_policies;
};

// One sub-policy per line: (op,p,m);(op,p,m). '#' comments, blank lines ignored.
AugPolicy parse_policy(std::string_view text);
AugPolicy load_policy(const std::filesystem::path& path);
std::string format_policy(const AugPolicy& policy);

// Bin -> physical magnitude (all integer arithmetic):
//   rotate        3 degrees per bin, counter-clockwise, about the centre
//   shear_x/y     0.03 per bin, about the centre
//   translate_x/y 1 pixel per bin, towards +col / +row
//   flip          mirror when bin > 0
//   brightness    scale by (100 + 9 * bin) / 100
//   contrast      blend away from the grey mean by (100 + 9 * bin) / 100
//   cutout        zero a centred square of side 2 * bin
// Geometric ops are nearest-neighbour with zero fill. Bin 0 is the identity.
Image apply_transform(const Image& img, AugOpType op, int magnitude);

// Each op fires independently iff a uniform draw is below its probability.
Image apply_subpolicy(const Image& img, const SubPolicy& sp, Rng& rng);

// Per image i: an Rng substream keyed by (one draw from `rng`, i) picks a
// sub-policy uniformly and drives apply_subpolicy. `chosen` receives the
// picked indices when non-null.
std::vector<Image> augment_batch(std::span<const Image> batch, const AugPolicy& policy, Rng& rng,
                                 std::vector<std::size_t>* chosen = nullptr);

// Zero-pad by `pad`, take a random crop of the original size, mirror with p = 0.5.
Image pad_crop_flip(const Image& img, int pad, Rng& rng);

} // namespace effcnet
