#pragma once

#include "effcnet/data.hpp"
#include "effcnet/image.hpp"
#include "effcnet/model.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace effcnet {

struct ClassifyResult {
    std::vector<std::pair<std::string, double>> ranked; // descending, ties by class index
    double preprocess_ms = 0.0;
    double inference_ms = 0.0;
};

// Normalization a checkpoint's model was trained with, chosen by class count.
Normalization normalization_for(const NetworkConfig& cfg);

std::vector<std::string> read_labels(const std::filesystem::path& path);

// Label count must match the model's classes (ConfigError).
ClassifyResult classify(const Model<float>& model, const Image& img, const std::vector<std::string>& labels);

// Reads a NetworkConfig from a config file or from a checkpoint's embedded config.
NetworkConfig load_config_or_checkpoint(const std::filesystem::path& path);

// Keeps freed activation buffers in the allocator instead of returning them
// to the OS after every batch (glibc only; a no-op elsewhere).
void retain_freed_memory();

// Runs one subcommand. Returns 0 on success, 2 on usage errors, 1 on other failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace effcnet
