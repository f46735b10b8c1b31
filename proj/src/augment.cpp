#include "effcnet/augment.hpp"

#include "effcnet/errors.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace effcnet {

namespace {

constexpr std::array<std::string_view, 9> kNames = {
    "rotate", "shear_x", "shear_y", "translate_x", "translate_y", "flip_horizontal", "brightness", "contrast", "cutout",
};

// round(65536 * cos/sin(3 deg * bin))
constexpr std::int64_t kCos[11] = {65536, 65446, 65177, 64729, 64104, 63303, 62328, 61183, 59870, 58393, 56756};
constexpr std::int64_t kSin[11] = {0, 3430, 6850, 10252, 13626, 16962, 20252, 23486, 26656, 29753, 32768};
constexpr std::int64_t kOne = 65536;

std::int64_t floor_div(std::int64_t a, std::int64_t b)
{
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) {
        --q;
    }
    return q;
}

std::uint8_t clamp_u8(std::int64_t v)
{
    return static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
}

// Inverse-map every output pixel through a fixed-point affine transform about
// the image centre. Coordinates are doubled so the centre is an integer.
// src2 = [a b; c d] * dst2 / 65536, dst2 = 2*pos - (extent - 1).
Image affine(const Image& img, std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d)
{
    Image out(img.height, img.width);
    const std::int64_t w = img.width, h = img.height;
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t col = 0; col < w; ++col) {
            const std::int64_t x2 = 2 * col - (w - 1);
            const std::int64_t y2 = 2 * r - (h - 1);
            const std::int64_t sx2 = a * x2 + b * y2;
            const std::int64_t sy2 = c * x2 + d * y2;
            // nearest: floor(sx2 / 65536 / 2 + (w - 1) / 2 + 1/2)
            const std::int64_t sx = floor_div(sx2 + w * kOne, 2 * kOne);
            const std::int64_t sy = floor_div(sy2 + h * kOne, 2 * kOne);
            if (sx < 0 || sy < 0 || sx >= w || sy >= h) {
                continue;
            }
            for (int ch = 0; ch < 3; ++ch) {
                out.at(ch, static_cast<int>(r), static_cast<int>(col)) =
                    img.at(ch, static_cast<int>(sy), static_cast<int>(sx));
            }
        }
    }
    return out;
}

Image translate(const Image& img, int dx, int dy)
{
    Image out(img.height, img.width);
    for (int r = 0; r < img.height; ++r) {
        for (int col = 0; col < img.width; ++col) {
            const int sr = r - dy, sc = col - dx;
            if (sr < 0 || sc < 0 || sr >= img.height || sc >= img.width) {
                continue;
            }
            for (int ch = 0; ch < 3; ++ch) {
                out.at(ch, r, col) = img.at(ch, sr, sc);
            }
        }
    }
    return out;
}

Image flip(const Image& img)
{
    Image out(img.height, img.width);
    for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < img.height; ++r)
            for (int col = 0; col < img.width; ++col)
                out.at(ch, r, col) = img.at(ch, r, img.width - 1 - col);
    return out;
}

// round(v * num / 100) for v >= 0
std::int64_t scale_pct(std::int64_t v, std::int64_t num)
{
    return floor_div(v * num + 50, 100);
}

Image brightness(const Image& img, int bin)
{
    Image out = img;
    for (auto& p : out.pixels) {
        p = clamp_u8(scale_pct(p, 100 + 9 * bin));
    }
    return out;
}

Image contrast(const Image& img, int bin)
{
    // ITU-R 601 luma, integer weights summing to 1000
    const std::size_t n = img.plane();
    std::int64_t luma = 0;
    for (std::size_t i = 0; i < n; ++i) {
        luma += 299 * img.pixels[i] + 587 * img.pixels[n + i] + 114 * img.pixels[2 * n + i];
    }
    const std::int64_t mean = floor_div(luma + static_cast<std::int64_t>(n) * 500, static_cast<std::int64_t>(n) * 1000);
    Image out = img;
    for (auto& p : out.pixels) {
        p = clamp_u8(mean + scale_pct(static_cast<std::int64_t>(p) - mean, 100 + 9 * bin));
    }
    return out;
}

Image cutout(const Image& img, int bin)
{
    Image out = img;
    const int side = 2 * bin;
    const int r0 = (img.height - side) / 2;
    const int c0 = (img.width - side) / 2;
    for (int ch = 0; ch < 3; ++ch)
        for (int r = std::max(0, r0); r < std::min(img.height, r0 + side); ++r)
            for (int col = std::max(0, c0); col < std::min(img.width, c0 + side); ++col)
                out.at(ch, r, col) = 0;
    return out;
}

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

AugOp parse_op(std::string_view tok, int lineno)
{
    const std::string t = trim(tok);
    const std::string where = "policy line " + std::to_string(lineno) + ": ";
    if (t.size() < 2 || t.front() != '(' || t.back() != ')') {
        throw ParseError(where + "expected (op,probability,magnitude), got '" + t + "'");
    }
    const std::string body = t.substr(1, t.size() - 2);
    std::vector<std::string> parts;
    std::istringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        parts.push_back(trim(item));
    }
    if (parts.size() != 3) {
        throw ParseError(where + "expected three fields in '" + t + "'");
    }
    AugOp op;
    op.type = op_from_name(parts[0]);
    {
        const auto& s = parts[1];
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), op.probability);
        if (ec != std::errc() || p != s.data() + s.size()) {
            throw ParseError(where + "bad probability '" + s + "'");
        }
    }
    {
        const auto& s = parts[2];
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), op.magnitude);
        if (ec != std::errc() || p != s.data() + s.size()) {
            throw ParseError(where + "bad magnitude '" + s + "'");
        }
    }
    if (!(op.probability >= 0.0 && op.probability <= 1.0)) {
        throw ConfigError(where + "probability must be in [0, 1]");
    }
    if (op.magnitude < 0 || op.magnitude > 10) {
        throw ConfigError(where + "magnitude must be in [0, 10]");
    }
    return op;
}

void check_magnitude(int m)
{
    if (m < 0 || m > 10) {
        throw ConfigError("augment: magnitude bin " + std::to_string(m) + " outside [0, 10]");
    }
}

} // namespace

std::string_view op_name(AugOpType t)
{
    return kNames.at(static_cast<std::size_t>(t));
}

AugOpType op_from_name(std::string_view name)
{
    for (std::size_t i = 0; i < kNames.size(); ++i) {
        if (kNames[i] == name) {
            return static_cast<AugOpType>(i);
        }
    }
    throw ConfigError("augment: unknown op '" + std::string(name) + "'");
}

AugPolicy parse_policy(std::string_view text)
{
    AugPolicy policy;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto semi = t.find(';');
        if (semi == std::string::npos || t.find(';', semi + 1) != std::string::npos) {
            throw ParseError("policy line " + std::to_string(lineno) + ": a sub-policy has exactly two ops");
        }
        policy.sub_policies.push_back(
            {parse_op(std::string_view(t).substr(0, semi), lineno), parse_op(std::string_view(t).substr(semi + 1), lineno)});
    }
    if (policy.sub_policies.empty()) {
        throw ConfigError("policy has no sub-policies");
    }
    return policy;
}

AugPolicy load_policy(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open policy " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_policy(ss.str());
}

std::string format_policy(const AugPolicy& policy)
{
    std::ostringstream o;
    for (const auto& sp : policy.sub_policies) {
        for (std::size_t i = 0; i < 2; ++i) {
            char buf[32];
            auto [p, ec] = std::to_chars(buf, buf + sizeof buf, sp[i].probability);
            o << (i ? ";" : "") << "(" << op_name(sp[i].type) << "," << std::string(buf, p) << "," << sp[i].magnitude
              << ")";
        }
        o << "\n";
    }
    return o.str();
}

Image apply_transform(const Image& img, AugOpType op, int m)
{
    check_magnitude(m);
    if (m == 0) {
        return img;
    }
    const std::int64_t shear = m * 3 * kOne / 100;
    switch (op) {
    case AugOpType::rotate:
        // output (x, y) samples the source rotated back by the angle
        return affine(img, kCos[m], kSin[m], -kSin[m], kCos[m]);
    case AugOpType::shear_x:
        return affine(img, kOne, shear, 0, kOne);
    case AugOpType::shear_y:
        return affine(img, kOne, 0, shear, kOne);
    case AugOpType::translate_x:
        return translate(img, m, 0);
    case AugOpType::translate_y:
        return translate(img, 0, m);
    case AugOpType::flip_horizontal:
        return flip(img);
    case AugOpType::brightness:
        return brightness(img, m);
    case AugOpType::contrast:
        return contrast(img, m);
    case AugOpType::cutout:
        return cutout(img, m);
    }
    throw ConfigError("augment: unknown op");
}

Image apply_subpolicy(const Image& img, const SubPolicy& sp, Rng& rng)
{
    Image out = img;
    for (const auto& op : sp) {
        if (rng.uniform() < op.probability) {
            out = apply_transform(out, op.type, op.magnitude);
        }
    }
    return out;
}

std::vector<Image> augment_batch(std::span<const Image> batch, const AugPolicy& policy, Rng& rng,
                                 std::vector<std::size_t>* chosen)
{
    if (policy.sub_policies.empty()) {
        throw ConfigError("augment_batch: empty policy");
    }
    const std::uint64_t base = rng.next_u64();
    std::vector<Image> out;
    out.reserve(batch.size());
    if (chosen) {
        chosen->clear();
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Rng local = Rng::substream(base, i);
        const std::size_t k = local.uniform_int(policy.sub_policies.size());
        if (chosen) {
            chosen->push_back(k);
        }
        out.push_back(apply_subpolicy(batch[i], policy.sub_policies[k], local));
    }
    return out;
}

Image pad_crop_flip(const Image& img, int pad, Rng& rng)
{
    const int dy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    const int dx = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    Image out = translate(img, dx, dy);
    if (rng.uniform() < 0.5) {
        out = flip(out);
    }
    return out;
}

} // namespace effcnet
