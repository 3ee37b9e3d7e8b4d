#include "robustswap/dataset.hpp"

#include <algorithm>
#include <cctype>

#include "robustswap/image.hpp"

namespace rswap::data {

namespace {

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

torch::Tensor ImageIndex::batch(const std::vector<int64_t>& rows) const {
  auto idx = torch::tensor(rows, torch::kInt64);
  return pixels.index_select(0, idx).to(torch::kFloat32).div(127.5).sub(1.0);
}

ImageIndex ingest_dataset(const std::filesystem::path& dir, int resolution) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> candidates;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) candidates.push_back(entry.path());
  std::sort(candidates.begin(), candidates.end());

  ImageIndex index;
  index.resolution = resolution;
  std::vector<torch::Tensor> decoded;
  for (const auto& p : candidates) {
    auto img = image::try_load(p, resolution);
    if (!img) {
      index.skipped.push_back(p);
      continue;
    }
    index.paths.push_back(p);
    decoded.push_back(image::to_uint8(*img));
  }
  if (decoded.empty()) throw std::runtime_error("no decodable images in " + dir.string());
  index.pixels = torch::stack(decoded);
  return index;
}

}  // namespace rswap::data
