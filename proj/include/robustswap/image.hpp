#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rswap::image {

// Images are CHW (or NCHW) RGB tensors with values in [-1, 1].

// Decodes PNG/JPEG, center-crops to a square and area-resizes to
// `resolution`. Returns nullopt when the file cannot be decoded.
std::optional<torch::Tensor> try_load(const std::filesystem::path& path, int resolution);
torch::Tensor load(const std::filesystem::path& path, int resolution);

// 8-bit PNG, [-1, 1] mapped linearly onto [0, 255].
void save_png(const std::filesystem::path& path, const torch::Tensor& chw);

// Quantizes exactly as save_png does, without touching the filesystem.
torch::Tensor to_uint8(const torch::Tensor& chw);

// Area (box-filter) downsampling by an integer factor; NCHW input.
torch::Tensor area_downsample(const torch::Tensor& nchw, int factor);

// Tiles equally sized CHW cells row-major into a grid. Missing (undefined)
// cells are left at the fill value.
torch::Tensor tile(const std::vector<torch::Tensor>& cells, int cols, int pad = 2, double fill = 1.0);

struct Series {
  std::vector<double> values;
  std::array<uint8_t, 3> rgb;
};

// Minimal raster line plot: one polyline per series over a shared x index,
// with a zero line and point markers.
void save_line_plot(const std::filesystem::path& path, const std::vector<Series>& series,
                    int width = 480, int height = 320);

}  // namespace rswap::image
