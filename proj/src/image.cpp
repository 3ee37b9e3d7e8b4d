#include "robustswap/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rswap::image {

std::optional<torch::Tensor> try_load(const std::filesystem::path& path, int resolution) {
  cv::Mat bgr;
  try {
    bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  } catch (const cv::Exception&) {
    return std::nullopt;
  }
  if (bgr.empty()) return std::nullopt;

  const int side = std::min(bgr.cols, bgr.rows);
  const cv::Rect crop((bgr.cols - side) / 2, (bgr.rows - side) / 2, side, side);
  cv::Mat square = bgr(crop);
  cv::Mat resized;
  if (side != resolution) {
    const int interp = side > resolution ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(square, resized, cv::Size(resolution, resolution), 0, 0, interp);
  } else {
    resized = square.clone();
  }
  cv::Mat rgb;
  cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);

  auto t = torch::from_blob(rgb.data, {resolution, resolution, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

torch::Tensor load(const std::filesystem::path& path, int resolution) {
  auto img = try_load(path, resolution);
  if (!img) throw std::runtime_error("cannot decode image " + path.string());
  return *img;
}

torch::Tensor to_uint8(const torch::Tensor& chw) {
  auto t = chw.detach().to(torch::kCPU, torch::kFloat64);
  if (t.dim() == 4) t = t.squeeze(0);
  if (t.dim() != 3 || t.size(0) != 3) throw std::invalid_argument("to_uint8: expected 3xHxW image");
  return t.add(1.0).mul(127.5).round().clamp(0, 255).to(torch::kUInt8);
}

void save_png(const std::filesystem::path& path, const torch::Tensor& chw) {
  auto q = to_uint8(chw).permute({1, 2, 0}).contiguous();
  const int h = static_cast<int>(q.size(0));
  const int w = static_cast<int>(q.size(1));
  cv::Mat rgb(h, w, CV_8UC3, q.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write " + path.string());
}

torch::Tensor area_downsample(const torch::Tensor& nchw, int factor) {
  if (factor <= 1) return nchw;
  return torch::avg_pool2d(nchw, {factor, factor}, {factor, factor});
}

torch::Tensor tile(const std::vector<torch::Tensor>& cells, int cols, int pad, double fill) {
  if (cells.empty() || cols <= 0) throw std::invalid_argument("tile: empty grid");
  torch::Tensor ref;
  for (const auto& c : cells)
    if (c.defined()) {
      ref = c;
      break;
    }
  if (!ref.defined()) throw std::invalid_argument("tile: all cells empty");
  const int64_t h = ref.size(-2), w = ref.size(-1);
  const int64_t rows = (static_cast<int64_t>(cells.size()) + cols - 1) / cols;
  auto grid = torch::full({3, rows * (h + pad) + pad, cols * (w + pad) + pad}, fill,
                          torch::TensorOptions().dtype(torch::kFloat32));
  for (size_t i = 0; i < cells.size(); ++i) {
    if (!cells[i].defined()) continue;
    auto cell = cells[i].detach().to(torch::kCPU, torch::kFloat32);
    if (cell.dim() == 4) cell = cell.squeeze(0);
    const int64_t r = static_cast<int64_t>(i) / cols, c = static_cast<int64_t>(i) % cols;
    grid.slice(1, pad + r * (h + pad), pad + r * (h + pad) + h)
        .slice(2, pad + c * (w + pad), pad + c * (w + pad) + w)
        .copy_(cell);
  }
  return grid;
}

void save_line_plot(const std::filesystem::path& path, const std::vector<Series>& series, int width,
                    int height) {
  cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const int margin = 24;
  double lo = 0.0, hi = 0.0;
  size_t npoints = 0;
  for (const auto& s : series) {
    npoints = std::max(npoints, s.values.size());
    for (double v : s.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto to_px = [&](size_t i, double v) {
    const double fx = npoints > 1 ? double(i) / double(npoints - 1) : 0.5;
    const double fy = (v - lo) / (hi - lo);
    return cv::Point(margin + int(fx * (width - 2 * margin)), height - margin - int(fy * (height - 2 * margin)));
  };

  cv::rectangle(canvas, cv::Point(margin, margin), cv::Point(width - margin, height - margin),
                cv::Scalar(0, 0, 0), 1);
  cv::line(canvas, to_px(0, 0.0), to_px(npoints ? npoints - 1 : 0, 0.0), cv::Scalar(160, 160, 160), 1);
  for (const auto& s : series) {
    const cv::Scalar color(s.rgb[2], s.rgb[1], s.rgb[0]);
    for (size_t i = 0; i < s.values.size(); ++i) {
      if (!std::isfinite(s.values[i])) continue;
      cv::circle(canvas, to_px(i, s.values[i]), 3, color, cv::FILLED);
      if (i + 1 < s.values.size() && std::isfinite(s.values[i + 1]))
        cv::line(canvas, to_px(i, s.values[i]), to_px(i + 1, s.values[i + 1]), color, 2, cv::LINE_AA);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), canvas)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace rswap::image
