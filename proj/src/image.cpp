#include "effcnet/image.hpp"

#include "effcnet/errors.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace effcnet {

namespace {

std::string slurp(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Cursor {
    const std::string& s;
    std::size_t pos = 0;

    void skip_space()
    {
        while (pos < s.size()) {
            if (s[pos] == '#') {
                while (pos < s.size() && s[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    }

    int number()
    {
        skip_space();
        if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos]))) {
            throw FormatError("pixmap: expected a number");
        }
        long v = 0;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
            v = v * 10 + (s[pos++] - '0');
            if (v > 1 << 20) {
                throw FormatError("pixmap: number out of range");
            }
        }
        return static_cast<int>(v);
    }
};

} // namespace

Image parse_ppm(const std::string& bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '3')) {
        throw FormatError("pixmap: missing P6/P3 magic");
    }
    const bool binary = bytes[1] == '6';
    Cursor cur{bytes, 2};
    const int w = cur.number();
    const int h = cur.number();
    const int maxval = cur.number();
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
        throw FormatError("pixmap: unsupported geometry or maxval");
    }
    Image img(h, w);
    const std::size_t n = img.plane();
    auto put = [&](std::size_t i, int v) {
        if (v > maxval) {
            throw FormatError("pixmap: sample exceeds maxval");
        }
        const int scaled = maxval == 255 ? v : (v * 255 + maxval / 2) / maxval;
        img.pixels[(i % 3) * n + i / 3] = static_cast<std::uint8_t>(scaled);
    };
    if (binary) {
        ++cur.pos; // single whitespace after maxval
        if (bytes.size() < cur.pos + 3 * n) {
            throw FormatError("pixmap: truncated pixel data");
        }
        for (std::size_t i = 0; i < 3 * n; ++i) {
            put(i, static_cast<unsigned char>(bytes[cur.pos + i]));
        }
    } else {
        for (std::size_t i = 0; i < 3 * n; ++i) {
            put(i, cur.number());
        }
    }
    return img;
}

Image read_ppm(const std::filesystem::path& path)
{
    return parse_ppm(slurp(path));
}

void write_ppm(const Image& img, const std::filesystem::path& path)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot write " + path.string());
    }
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    const std::size_t n = img.plane();
    std::string buf(3 * n, '\0');
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            buf[3 * i + c] = static_cast<char>(img.pixels[c * n + i]);
        }
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

Image read_image_32(const std::filesystem::path& path)
{
    const std::string bytes = slurp(path);
    Image img;
    if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '3')) {
        img = parse_ppm(bytes);
    } else if (bytes.size() == 3072) {
        img.pixels.assign(bytes.begin(), bytes.end());
    } else {
        throw FormatError(path.string() + ": expected a 3072-byte raw image or a pixmap");
    }
    if (img.height != 32 || img.width != 32) {
        throw FormatError(path.string() + ": image is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", expected 32x32");
    }
    return img;
}

} // namespace effcnet
