#pragma once

// Self-describing tensor container used for checkpoints and morphable basis
// files. Layout follows the safetensors convention: an 8-byte little-endian
// header length, a JSON header describing every tensor (dtype, shape, byte
// range), then the raw tensor bytes in header order. A free-form JSON
// manifest rides along in the header's "__metadata__" entry.

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"

namespace rswap::io {

struct TensorArchive {
  std::map<std::string, torch::Tensor> tensors;
  nlohmann::json manifest = nlohmann::json::object();
};

// Serialization is a pure function of the archive contents: tensors are
// written in name order and the header JSON has sorted keys.
std::string serialize_archive(const TensorArchive& archive);
TensorArchive parse_archive(std::string_view bytes);

// Writes to "<path>.tmp" then renames over `path`.
void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace rswap::io
