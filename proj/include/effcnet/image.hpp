#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace effcnet {

// 8-bit RGB image, planar (all R, then G, then B), row-major within a plane.
struct Image {
    int height = 32;
    int width = 32;
    std::vector<std::uint8_t> pixels = std::vector<std::uint8_t>(3 * 32 * 32, 0);

    Image() = default;
    Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(3 * h * w), 0) {}

    std::size_t plane() const { return static_cast<std::size_t>(height * width); }
    std::uint8_t& at(int c, int r, int col) { return pixels[c * plane() + static_cast<std::size_t>(r * width + col)]; }
    std::uint8_t at(int c, int r, int col) const
    {
        return pixels[c * plane() + static_cast<std::size_t>(r * width + col)];
    }

    bool operator==(const Image&) const = default;
};

// Binary (P6) or ASCII (P3) portable pixmap; other maxvals are rescaled to 255.
Image read_ppm(const std::filesystem::path& path);
Image parse_ppm(const std::string& bytes);
void write_ppm(const Image& img, const std::filesystem::path& path);

// Raw 3072-byte planar 32x32 file, or a 32x32 pixmap. FormatError otherwise.
Image read_image_32(const std::filesystem::path& path);

} // namespace effcnet
