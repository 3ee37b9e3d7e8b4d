#pragma once

// Unlabeled face-image folder. Files are decoded once at ingest, center
// cropped, resized and kept as 8-bit tensors; nothing beyond pixels is read.

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace rswap::data {

struct ImageIndex {
  int resolution = 0;
  std::vector<std::filesystem::path> paths;    // sorted, decodable files only
  std::vector<std::filesystem::path> skipped;  // present but undecodable
  torch::Tensor pixels;                        // [N, 3, R, R] uint8

  int64_t size() const { return static_cast<int64_t>(paths.size()); }
  // [B, 3, R, R] float in [-1, 1].
  torch::Tensor batch(const std::vector<int64_t>& rows) const;
};

// Accepts .png/.jpg/.jpeg (any case) directly inside `dir`. Throws
// std::runtime_error when the directory is missing or holds no decodable
// image.
ImageIndex ingest_dataset(const std::filesystem::path& dir, int resolution);

}  // namespace rswap::data
