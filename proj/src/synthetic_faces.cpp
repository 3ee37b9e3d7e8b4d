#include "robustswap/synthetic_faces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "robustswap/image.hpp"
#include "robustswap/rng.hpp"

namespace rswap::synth {

namespace {

struct Vec2 {
  double x, y;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

struct Ellipse {
  Vec2 center;
  Vec2 u, v;  // unit axes
  double rx, ry;
};

class Canvas {
 public:
  explicit Canvas(int size) : size_(size), px_(size_t(size) * size * 3, 0.0) {}

  void fill(const Rgb& c) {
    for (size_t i = 0; i < px_.size(); i += 3)
      for (int k = 0; k < 3; ++k) px_[i + k] = c[k];
  }

  // Coverage-weighted paint; `coverage(p)` returns [0, 1] at pixel centers.
  template <typename Coverage, typename Shade>
  void paint(Coverage&& coverage, Shade&& shade) {
    for (int y = 0; y < size_; ++y)
      for (int x = 0; x < size_; ++x) {
        const Vec2 p{x + 0.5, y + 0.5};
        const double a = coverage(p);
        if (a <= 0.0) continue;
        const Rgb c = shade(p);
        double* dst = &px_[(size_t(y) * size_ + x) * 3];
        for (int k = 0; k < 3; ++k) dst[k] = dst[k] * (1.0 - a) + c[k] * a;
      }
  }

  torch::Tensor to_tensor() const {
    auto t = torch::from_blob(const_cast<double*>(px_.data()), {size_, size_, 3}, torch::kFloat64).clone();
    return t.permute({2, 0, 1}).mul(2.0).sub(1.0).to(torch::kFloat32).contiguous();
  }

 private:
  int size_;
  std::vector<double> px_;
};

double ellipse_coverage(const Ellipse& e, Vec2 p) {
  const Vec2 d = p - e.center;
  const double a = dot(d, e.u) / e.rx, b = dot(d, e.v) / e.ry;
  const double rho = std::sqrt(a * a + b * b);
  const double signed_px = (rho - 1.0) * std::min(e.rx, e.ry);
  return std::clamp(0.5 - signed_px, 0.0, 1.0);
}

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  const double t = len2 > 0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
  const Vec2 q = a + t * ab - p;
  return std::sqrt(dot(q, q));
}

Ellipse fit(const std::vector<Vec2>& pts, Vec2 u, double pad, double min_radius) {
  Vec2 c{0, 0};
  for (auto p : pts) c = c + p;
  c = (1.0 / pts.size()) * c;
  const Vec2 v{-u.y, u.x};
  double lo_u = 0, hi_u = 0, lo_v = 0, hi_v = 0;
  for (auto p : pts) {
    const Vec2 d = p - c;
    lo_u = std::min(lo_u, dot(d, u));
    hi_u = std::max(hi_u, dot(d, u));
    lo_v = std::min(lo_v, dot(d, v));
    hi_v = std::max(hi_v, dot(d, v));
  }
  const Vec2 mid = c + (0.5 * (lo_u + hi_u)) * u + (0.5 * (lo_v + hi_v)) * v;
  return {mid, u, v, std::max(min_radius, 0.5 * (hi_u - lo_u) + pad), std::max(min_radius, 0.5 * (hi_v - lo_v) + pad)};
}

Rgb scaled(const Rgb& c, double s) { return {c[0] * s, c[1] * s, c[2] * s}; }

std::vector<Vec2> range(const std::vector<Vec2>& pts, int begin, int end) {
  return {pts.begin() + begin, pts.begin() + end};
}

}  // namespace

Camera Camera::for_resolution(int resolution) {
  return {0.3 * resolution, 0.5 * resolution, 0.55 * resolution};
}

torch::Tensor project_landmarks(const mm::MorphableBasis& basis, const mm::FaceParams& row, const Camera& cam) {
  auto mesh = mm::decode_mesh(basis, row.to(torch::kFloat64));
  auto lmk = mm::landmarks(basis, mesh).squeeze(0);  // [68, 3]
  auto u = lmk.select(1, 0) * cam.scale + cam.cx;
  auto v = -lmk.select(1, 1) * cam.scale + cam.cy;
  return torch::stack({u, v}, 1);
}

torch::Tensor render(const mm::MorphableBasis& basis, const mm::FaceParams& row, const Appearance& look,
                     int resolution) {
  const auto cam = Camera::for_resolution(resolution);
  auto lmk = project_landmarks(basis, row, cam).contiguous();
  auto acc = lmk.accessor<double, 2>();
  std::vector<Vec2> p(mm::kNumLandmarks);
  for (int i = 0; i < mm::kNumLandmarks; ++i) p[i] = {acc[i][0], acc[i][1]};

  // In-plane frame from the outer eye corners; v points toward the chin.
  Vec2 u = p[45] - p[36];
  const double ulen = std::sqrt(dot(u, u));
  u = ulen > 1e-9 ? (1.0 / ulen) * u : Vec2{1, 0};
  const Vec2 v{-u.y, u.x};
  const double s = cam.scale;

  Canvas canvas(resolution);
  canvas.fill(look.background);
  // Vertical background gradient.
  canvas.paint([&](Vec2 q) { return 0.25 * q.y / resolution; },
               [&](Vec2) { return scaled(look.background, 0.7); });

  std::vector<Vec2> oval = range(p, 0, 17);
  for (int i = 17; i < 27; ++i) oval.push_back(p[i] - (0.3 * s) * v);
  const Ellipse face = fit(oval, u, 0.0, 1.0);

  Ellipse hair = face;
  hair.center = face.center - (0.22 * face.ry) * v;
  hair.rx = face.rx * 1.18;
  hair.ry = face.ry * (0.85 + 0.2 * look.hair_volume);
  canvas.paint([&](Vec2 q) { return ellipse_coverage(hair, q); }, [&](Vec2) { return look.hair; });

  Ellipse neck = face;
  neck.center = face.center + (0.85 * face.ry) * v;
  neck.rx = 0.45 * face.rx;
  neck.ry = 0.55 * face.ry;
  canvas.paint([&](Vec2 q) { return ellipse_coverage(neck, q); }, [&](Vec2) { return scaled(look.skin, 0.86); });

  canvas.paint([&](Vec2 q) { return ellipse_coverage(face, q); },
               [&](Vec2 q) {
                 const Vec2 d = q - face.center;
                 const double a = dot(d, u) / face.rx, b = dot(d, v) / face.ry;
                 return scaled(look.skin, 1.0 - 0.1 * (a * a + b * b));
               });

  // Nose: bridge and nostril shadow.
  const double bridge_w = std::max(0.6, 0.035 * s);
  canvas.paint([&](Vec2 q) { return std::clamp(bridge_w - segment_distance(q, p[27], p[30]), 0.0, 1.0) * 0.6; },
               [&](Vec2) { return scaled(look.skin, 0.88); });
  const Ellipse nostrils = fit(range(p, 31, 36), u, 0.02 * s, 0.6);
  canvas.paint([&](Vec2 q) { return ellipse_coverage(nostrils, q); }, [&](Vec2) { return scaled(look.skin, 0.84); });

  // Brows.
  const double brow_w = std::max(0.7, 0.045 * s);
  for (int start : {17, 22}) {
    canvas.paint(
        [&](Vec2 q) {
          double d = 1e9;
          for (int i = start; i < start + 4; ++i) d = std::min(d, segment_distance(q, p[i], p[i + 1]));
          return std::clamp(brow_w - d + 0.5, 0.0, 1.0);
        },
        [&](Vec2) { return look.hair; });
  }

  // Eyes with gaze-displaced pupils.
  for (int start : {36, 42}) {
    const Ellipse eye = fit(range(p, start, start + 6), u, 0.01 * s, 0.7);
    canvas.paint([&](Vec2 q) { return ellipse_coverage(eye, q); }, [&](Vec2) { return Rgb{0.93, 0.93, 0.93}; });
    Ellipse pupil = eye;
    pupil.center = eye.center + (look.gaze_yaw * 0.55 * eye.rx) * u - (look.gaze_pitch * 0.5 * eye.ry) * v;
    pupil.rx = pupil.ry = std::max(0.7, 0.75 * eye.ry);
    canvas.paint([&](Vec2 q) { return ellipse_coverage(pupil, q) * ellipse_coverage(eye, q); },
                 [&](Vec2) { return Rgb{0.05, 0.05, 0.08}; });
  }

  // Lips and mouth opening.
  const Ellipse lips = fit(range(p, 48, 60), u, 0.01 * s, 0.7);
  canvas.paint([&](Vec2 q) { return ellipse_coverage(lips, q); }, [&](Vec2) { return Rgb{0.72, 0.32, 0.34}; });
  const Ellipse opening = fit(range(p, 60, 68), u, 0.0, 0.3);
  canvas.paint([&](Vec2 q) { return ellipse_coverage(opening, q); }, [&](Vec2) { return Rgb{0.25, 0.06, 0.08}; });

  return canvas.to_tensor();
}

FaceBatch sample_faces(const mm::MorphableBasis& basis, int resolution, int count, uint64_t seed,
                       const SampleSpread& spread) {
  auto gen = make_generator(seed);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  FaceBatch batch;
  batch.params.alpha = torch::randn({count, basis.shape_dim()}, gen, opts) * spread.shape_std;
  batch.params.beta = torch::randn({count, basis.expr_dim()}, gen, opts) * spread.expr_std;
  auto rot = torch::randn({count, 3}, gen, opts) * spread.rotation_std;
  auto trans = torch::randn({count, 3}, gen, opts) * spread.translation_std;
  trans.select(1, 2).zero_();
  batch.params.theta = torch::cat({rot, trans}, 1);
  batch.gaze = (torch::rand({count, 2}, gen, opts) * 2.0 - 1.0) * spread.gaze_range;

  std::mt19937_64 rng(mix_seed({seed, 0x61707065ULL}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<torch::Tensor> images;
  for (int i = 0; i < count; ++i) {
    Appearance look;
    const double tone = 0.55 + 0.45 * unit(rng);
    look.skin = {0.95 * tone, 0.74 * tone, 0.60 * tone};
    const double h = 0.25 + 0.65 * unit(rng);
    look.hair = {0.42 * h, 0.30 * h, 0.20 * h};
    const double bg = 0.25 + 0.45 * unit(rng);
    look.background = {bg, bg + 0.1 * unit(rng), bg + 0.15 + 0.15 * unit(rng)};
    look.hair_volume = 0.6 + 0.8 * unit(rng);
    look.gaze_yaw = batch.gaze[i][0].item<double>();
    look.gaze_pitch = batch.gaze[i][1].item<double>();
    batch.appearance.push_back(look);
    images.push_back(render(basis, batch.params.slice(i, i + 1), look, resolution));
  }
  batch.images = torch::stack(images);
  return batch;
}

std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir, const mm::MorphableBasis& basis,
                                                 int resolution, int count, uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  // Render in chunks to bound memory.
  constexpr int kChunk = 64;
  for (int begin = 0; begin < count; begin += kChunk) {
    const int n = std::min(kChunk, count - begin);
    auto batch = sample_faces(basis, resolution, n, mix_seed({seed, uint64_t(begin)}));
    for (int i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "face_%05d.png", begin + i);
      paths.push_back(dir / name);
      image::save_png(paths.back(), batch.images[i]);
    }
  }
  return paths;
}

torch::Tensor parse_by_palette(const torch::Tensor& images) {
  auto x = images.detach().to(torch::kFloat64);
  if (x.dim() == 3) x = x.unsqueeze(0);
  x = (x + 1.0) * 0.5;
  auto r = x.select(1, 0), g = x.select(1, 1), b = x.select(1, 2);
  auto lum = 0.299 * r + 0.587 * g + 0.114 * b;
  auto warm = (r >= g) & (g >= b);
  auto skin = warm & (lum > 0.33) & ((r - b) > 0.12) & ((r - g) < 0.3);
  auto hair = warm & (lum <= 0.33) & ((r - b) > 0.03) & ((r - g) < 0.3);
  auto out = torch::zeros_like(r, torch::TensorOptions().dtype(torch::kInt64));
  out.masked_fill_(skin, static_cast<int64_t>(FaceClass::skin));
  out.masked_fill_(hair, static_cast<int64_t>(FaceClass::hair));
  return out;
}

}  // namespace rswap::synth
