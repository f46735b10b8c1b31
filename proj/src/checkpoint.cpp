#include "effcnet/checkpoint.hpp"

#include "effcnet/errors.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

namespace effcnet {

namespace {

constexpr char kMagic[8] = {'E', 'F', 'F', 'C', 'N', 'E', 'T', '1'};

template <typename U>
void put_le(std::string& out, U v)
{
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    template <typename U>
    U get()
    {
        need(sizeof(U));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return static_cast<U>(v);
    }

    std::string take(std::size_t n)
    {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const
    {
        if (n > end_ - pos_) {
            throw FormatError("checkpoint: truncated");
        }
    }

    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::string format_double(double v)
{
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::string meta_lines(const CheckpointMeta& m)
{
    std::string s;
    s += "meta.epoch = " + std::to_string(m.epoch) + "\n";
    s += "meta.top1 = " + format_double(m.top1) + "\n";
    s += "meta.top5 = " + format_double(m.top5) + "\n";
    s += "meta.train_loss = " + format_double(m.train_loss) + "\n";
    s += "meta.seed = " + std::to_string(m.seed) + "\n";
    return s;
}

template <typename U>
U parse_number(const std::string& key, const std::string& v)
{
    U out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw FormatError("checkpoint: bad value for " + key);
    }
    return out;
}

// Splits meta.* lines off the config blob.
CheckpointMeta split_meta(const std::string& blob, std::string& config_text)
{
    CheckpointMeta m;
    std::istringstream in(blob);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("meta.", 0) != 0) {
            config_text += line + "\n";
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) {
            throw FormatError("checkpoint: malformed metadata line");
        }
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 3);
        if (key == "meta.epoch") {
            m.epoch = parse_number<int>(key, val);
        } else if (key == "meta.top1") {
            m.top1 = parse_number<double>(key, val);
        } else if (key == "meta.top5") {
            m.top5 = parse_number<double>(key, val);
        } else if (key == "meta.train_loss") {
            m.train_loss = parse_number<double>(key, val);
        } else if (key == "meta.seed") {
            m.seed = parse_number<std::uint64_t>(key, val);
        }
    }
    return m;
}

} // namespace

std::uint64_t fnv1a(const void* data, std::size_t size)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string serialize_checkpoint(Model<float>& model, const CheckpointMeta& meta)
{
    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string blob = model.config.serialize() + meta_lines(meta);
    put_le<std::uint64_t>(out, blob.size());
    out += blob;
    for (const auto& nt : model.named_tensors()) {
        if (nt.name.size() > 0xFFFF) {
            throw FormatError("checkpoint: tensor name too long");
        }
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
        out += nt.name;
        const Tensor<float> t = nt.tensor->contiguous();
        put_le<std::uint64_t>(out, t.numel());
        for (float v : t.values()) {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    put_le<std::uint64_t>(out, fnv1a(out.data(), out.size()));
    return out;
}

void save_checkpoint(Model<float>& model, const CheckpointMeta& meta, const std::filesystem::path& path)
{
    const std::string bytes = serialize_checkpoint(model, meta);
    // write-then-rename keeps the previous file intact if the write fails
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) {
            throw IoError("cannot write " + tmp.string());
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw IoError("write failed: " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint parse_checkpoint(const std::string& bytes, std::ostream* warn)
{
    if (bytes.size() < sizeof kMagic + 4 + 8 + 8) {
        throw FormatError("checkpoint: truncated");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw FormatError("checkpoint: bad magic");
    }
    const std::size_t body = bytes.size() - 8;
    Reader r(bytes, body);
    r.take(sizeof kMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto blob_len = r.get<std::uint64_t>();
    if (blob_len > body) {
        throw FormatError("checkpoint: truncated");
    }
    std::string config_text;
    LoadedCheckpoint out;
    out.meta = split_meta(r.take(static_cast<std::size_t>(blob_len)), config_text);
    NetworkConfig cfg;
    try {
        cfg = NetworkConfig::parse(config_text);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: bad config: ") + e.what());
    }
    Rng rng(0);
    out.model = assemble_network<float>(cfg, rng);
    for (const auto& nt : out.model.named_tensors()) {
        const auto name_len = r.get<std::uint16_t>();
        const std::string name = r.take(name_len);
        if (name != nt.name) {
            throw FormatError("checkpoint: expected tensor '" + nt.name + "', found '" + name + "'");
        }
        const auto count = r.get<std::uint64_t>();
        if (count != nt.tensor->numel()) {
            throw FormatError("checkpoint: tensor '" + name + "' has " + std::to_string(count) + " elements, expected " +
                              std::to_string(nt.tensor->numel()));
        }
        std::vector<float> values(static_cast<std::size_t>(count));
        for (auto& v : values) {
            v = std::bit_cast<float>(r.get<std::uint32_t>());
        }
        *nt.tensor = Tensor<float>(nt.tensor->shape(), std::move(values));
    }
    if (r.pos() != body) {
        throw FormatError("checkpoint: " + std::to_string(body - r.pos()) + " unexpected trailing bytes");
    }
    Reader tail(bytes, bytes.size());
    tail.take(body);
    const auto stored = tail.get<std::uint64_t>();
    if (stored != fnv1a(bytes.data(), body)) {
        out.checksum_ok = false;
        if (warn) {
            *warn << "warning: checkpoint checksum mismatch, contents may be corrupted\n";
        }
    }
    return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::ostream* warn)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_checkpoint(ss.str(), warn);
}

} // namespace effcnet
