#pragma once

#include "effcnet/model.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

namespace effcnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    int epoch = 0;
    double top1 = 0.0;
    double top5 = 0.0;
    double train_loss = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const CheckpointMeta&) const = default;
};

// "EFFCNET1" | u32 version | u64 blob length | config blob (with meta.* lines)
// | records (u16 name length, name, u64 count, f32 LE data) | u64 FNV-1a of
// everything before it. Running statistics are stored alongside weights.
std::string serialize_checkpoint(Model<float>& model, const CheckpointMeta& meta);
void save_checkpoint(Model<float>& model, const CheckpointMeta& meta, const std::filesystem::path& path);

struct LoadedCheckpoint {
    Model<float> model;
    CheckpointMeta meta;
    bool checksum_ok = true;
};

// A checksum mismatch loads anyway and writes a warning to `warn`.
LoadedCheckpoint parse_checkpoint(const std::string& bytes, std::ostream* warn);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::ostream* warn);

std::uint64_t fnv1a(const void* data, std::size_t size);

} // namespace effcnet
