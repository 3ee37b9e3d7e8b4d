#include "robustswap/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "robustswap/container.hpp"
#include "robustswap/image.hpp"
#include "robustswap/synthetic_faces.hpp"

namespace rswap::metrics {

namespace {

torch::Tensor batch1(const torch::Tensor& chw) { return chw.dim() == 3 ? chw.unsqueeze(0) : chw; }

torch::Tensor face_mask(const torch::Tensor& classes) {
  return (classes == static_cast<int64_t>(synth::FaceClass::skin)) |
         (classes == static_cast<int64_t>(synth::FaceClass::hair));
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

std::optional<double> masked_l1_masks(const torch::Tensor& tgt, const torch::Tensor& swp, const torch::Tensor& tgt_mask,
                                      const torch::Tensor& swp_mask) {
  if (tgt.dim() != 3 || tgt.sizes() != swp.sizes()) throw std::domain_error("masked_l1 needs matching [3, H, W] images");
  if (tgt_mask.sizes() != swp_mask.sizes() || tgt_mask.size(0) != tgt.size(1) || tgt_mask.size(1) != tgt.size(2))
    throw std::domain_error("masked_l1 masks must be [H, W]");
  auto m = (tgt_mask.to(torch::kBool) & swp_mask.to(torch::kBool)).to(torch::kFloat64);
  const double count = m.sum().item<double>();
  if (count == 0.0) return std::nullopt;
  auto t = (tgt.to(torch::kFloat64) + 1.0) * 0.5;
  auto s = (swp.to(torch::kFloat64) + 1.0) * 0.5;
  const double total = ((t - s).abs() * m.unsqueeze(0)).sum().item<double>();
  return total / (static_cast<double>(tgt.size(0)) * count);
}

std::optional<double> masked_l1(const torch::Tensor& tgt, const torch::Tensor& swp, obj::PerceptionBundle& bundle) {
  torch::NoGradGuard ng;
  auto mt = face_mask(bundle.parse_face(batch1(tgt)))[0];
  auto ms = face_mask(bundle.parse_face(batch1(swp)))[0];
  return masked_l1_masks(tgt, swp, mt, ms);
}

double eye_gaze_error(const torch::Tensor& gaze_tgt, const torch::Tensor& gaze_swp) {
  if (gaze_tgt.numel() != 2 || gaze_swp.numel() != 2) throw std::domain_error("gaze must be (yaw, pitch)");
  auto d = (gaze_tgt.to(torch::kFloat64).flatten() - gaze_swp.to(torch::kFloat64).flatten()).abs();
  return (d[0].item<double>() + d[1].item<double>()) / 2.0;
}

double eye_gaze_error(const torch::Tensor& tgt, const torch::Tensor& swp, obj::PerceptionBundle& bundle) {
  torch::NoGradGuard ng;
  return eye_gaze_error(bundle.estimate_gaze(batch1(tgt))[0], bundle.estimate_gaze(batch1(swp))[0]);
}

double identity_similarity(const torch::Tensor& src, const torch::Tensor& swp, obj::PerceptionBundle& bundle) {
  torch::NoGradGuard ng;
  return obj::cosine_similarity_checked(bundle.embed_identity(batch1(src)), bundle.embed_identity(batch1(swp)))[0]
      .item<double>();
}

PoseExprError pose_expr_error(const mm::FaceParams& tgt, const mm::FaceParams& swp) {
  if (tgt.beta.sizes() != swp.beta.sizes() || tgt.theta.sizes() != swp.theta.sizes())
    throw std::domain_error("pose/expression estimates differ in shape");
  auto rot = (tgt.theta.slice(-1, 0, 3) - swp.theta.slice(-1, 0, 3)).to(torch::kFloat64).abs().mean();
  auto exp = (tgt.beta - swp.beta).to(torch::kFloat64).abs().mean();
  return {rot.item<double>(), exp.item<double>()};
}

PoseExprError pose_expr_error(const torch::Tensor& tgt, const torch::Tensor& swp, obj::PerceptionBundle& bundle) {
  torch::NoGradGuard ng;
  return pose_expr_error(bundle.estimate_pose_expr(batch1(tgt)), bundle.estimate_pose_expr(batch1(swp)));
}

std::optional<double> head_pose_hn_error(const torch::Tensor& tgt, const torch::Tensor& swp,
                                         obj::PerceptionBundle& bundle) {
  torch::NoGradGuard ng;
  auto a = bundle.estimate_head_pose_hn(batch1(tgt));
  if (!a) return std::nullopt;
  auto b = bundle.estimate_head_pose_hn(batch1(swp));
  return (*a - *b).to(torch::kFloat64).abs().mean().item<double>();
}

FidResult frechet_distance(const torch::Tensor& mu_r, const torch::Tensor& sigma_r, const torch::Tensor& mu_f,
                           const torch::Tensor& sigma_f) {
  auto mr = mu_r.to(torch::kFloat64), mf = mu_f.to(torch::kFloat64);
  auto sr = sigma_r.to(torch::kFloat64), sf = sigma_f.to(torch::kFloat64);
  const auto d = mr.size(0);
  if (sr.sizes() != torch::IntArrayRef{d, d} || sf.sizes() != sr.sizes() || mf.sizes() != mr.sizes())
    throw std::domain_error("Frechet moments have inconsistent shapes");

  FidResult result;
  auto eye = torch::eye(d, torch::kFloat64);
  auto min_eig = [](const torch::Tensor& s) { return torch::linalg_eigvalsh(s).min().item<double>(); };
  const double scale = std::max((sr.trace() + sf.trace()).item<double>() / (2.0 * d), 1e-12);
  if (min_eig(sr) <= 1e-10 * scale || min_eig(sf) <= 1e-10 * scale) {
    result.jitter = 1e-6 * scale;
    sr = sr + result.jitter * eye;
    sf = sf + result.jitter * eye;
  }
  // tr sqrt(Sr Sf) = tr sqrt(Sr^1/2 Sf Sr^1/2), the latter symmetric PSD.
  auto [evals, evecs] = torch::linalg_eigh(sr);
  auto root = evecs.matmul(torch::diag(evals.clamp_min(0).sqrt())).matmul(evecs.t());
  auto inner = root.matmul(sf).matmul(root);
  inner = 0.5 * (inner + inner.t());
  const double tr_sqrt = torch::linalg_eigvalsh(inner).clamp_min(0).sqrt().sum().item<double>();
  const double mean_term = (mr - mf).square().sum().item<double>();
  result.value = mean_term + sr.trace().item<double>() + sf.trace().item<double>() - 2.0 * tr_sqrt;
  return result;
}

FidResult frechet_distance(const torch::Tensor& real_features, const torch::Tensor& fake_features) {
  if (real_features.dim() != 2 || fake_features.dim() != 2 || real_features.size(1) != fake_features.size(1))
    throw std::domain_error("feature sets must be [N, D] with equal D");
  if (real_features.size(0) < 2 || fake_features.size(0) < 2)
    throw std::domain_error("Frechet distance needs at least two samples per set");
  auto moments = [](const torch::Tensor& f) {
    auto x = f.to(torch::kFloat64);
    auto mu = x.mean(0);
    auto c = x - mu;
    return std::make_pair(mu, c.t().matmul(c) / static_cast<double>(x.size(0) - 1));
  };
  auto [mr, sr] = moments(real_features);
  auto [mf, sf] = moments(fake_features);
  return frechet_distance(mr, sr, mf, sf);
}

FidResult fid(const torch::Tensor& real_images, const torch::Tensor& fake_images, obj::PerceptionBundle& bundle) {
  torch::NoGradGuard ng;
  auto pool = [&](const torch::Tensor& imgs) {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < imgs.size(0); i += 32)
      parts.push_back(bundle.pooled_features(imgs.slice(0, i, std::min<int64_t>(i + 32, imgs.size(0)))));
    return torch::cat(parts, 0);
  };
  return frechet_distance(pool(real_images), pool(fake_images));
}

std::set<std::string> parse_selection(const std::string& csv) {
  std::set<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item != "fid" && std::find(kPairMetrics.begin(), kPairMetrics.end(), item) == kPairMetrics.end())
      throw std::invalid_argument("unknown metric '" + item + "'");
    out.insert(item);
  }
  return out;
}

MetricReport evaluate(const std::vector<EvalPair>& ids, const std::vector<EvalImages>& pairs,
                      obj::PerceptionBundle& bundle, const std::set<std::string>& selection) {
  if (ids.size() != pairs.size()) throw std::invalid_argument("pair ids and images differ in count");
  MetricReport report;
  for (const auto& name : kPairMetrics)
    if (selection.count(name)) report.columns.push_back(name);
  report.with_fid = selection.count("fid") > 0;

  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    MetricReport::Row row{ids[i], {}};
    auto attempt = [&](const std::string& name, auto&& fn) {
      if (!selection.count(name)) return;
      try {
        std::optional<double> v = fn();
        if (!v) throw obj::EstimatorFailure("no estimate");
        row.values[name] = v;
      } catch (const std::exception& e) {
        row.values[name] = std::nullopt;
        ++report.excluded[name];
        report.reasons[name] = e.what();
      }
    };
    std::optional<PoseExprError> pe;
    auto pose = [&]() -> PoseExprError& {
      if (!pe) pe = pose_expr_error(p.target, p.swapped, bundle);
      return *pe;
    };
    attempt("id", [&] { return std::optional<double>(identity_similarity(p.source, p.swapped, bundle)); });
    attempt("exp", [&] { return std::optional<double>(pose().exp); });
    attempt("hp", [&] { return std::optional<double>(pose().hp); });
    attempt("hp_hn", [&] {
      auto v = head_pose_hn_error(p.target, p.swapped, bundle);
      if (!v) throw obj::EstimatorFailure("no head-pose network configured");
      return v;
    });
    attempt("masked_l1", [&] {
      auto v = masked_l1(p.target, p.swapped, bundle);
      if (!v) throw obj::EstimatorFailure("empty skin/hair mask intersection");
      return v;
    });
    attempt("gaze", [&] { return std::optional<double>(eye_gaze_error(p.target, p.swapped, bundle)); });
    report.rows.push_back(std::move(row));
  }

  if (!report.rows.empty()) {
    for (const auto& name : report.columns) {
      double sum = 0.0;
      int64_t n = 0;
      for (const auto& row : report.rows)
        if (auto v = row.values.at(name)) {
          sum += *v;
          ++n;
        }
      if (n > 0) report.aggregate[name] = sum / static_cast<double>(n);
    }
  }

  if (report.with_fid) {
    try {
      std::vector<torch::Tensor> real, fake;
      for (const auto& p : pairs) {
        real.push_back(p.target);
        fake.push_back(p.swapped);
      }
      if (real.size() < 2) throw std::domain_error("FID needs at least two pairs");
      report.fid = fid(torch::stack(real), torch::stack(fake), bundle);
    } catch (const std::exception& e) {
      ++report.excluded["fid"];
      report.reasons["fid"] = e.what();
    }
  }
  return report;
}

nlohmann::json MetricReport::metadata() const {
  nlohmann::json j;
  j["masked_l1_scale"] = kMaskedL1Scale;
  j["gaze_aggregation"] = kGazeAggregation;
  j["hp_coefficients"] = "rotation (axis-angle, 3)";
  j["pairs"] = rows.size();
  j["unreadable_pairs"] = unreadable_pairs;
  j["excluded"] = excluded;
  j["exclusion_reasons"] = reasons;
  j["aggregate"] = aggregate;
  if (fid) j["fid"] = {{"value", fid->value}, {"jitter", fid->jitter}};
  return j;
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << "# masked_l1_scale=" << kMaskedL1Scale << "; gaze=" << kGazeAggregation << "\n";
  out << "source_path,target_path,swapped_path";
  for (const auto& c : columns) out << "," << c;
  out << "\n";
  for (const auto& row : rows) {
    out << row.pair.source << "," << row.pair.target << "," << row.pair.swapped;
    for (const auto& c : columns) {
      out << ",";
      if (auto v = row.values.at(c)) out << fmt(*v);
    }
    out << "\n";
  }
  if (!rows.empty()) {
    out << "mean,,";
    for (const auto& c : columns) {
      out << ",";
      if (auto it = aggregate.find(c); it != aggregate.end()) out << fmt(it->second);
    }
    out << "\n";
  }
  io::write_file_atomic(path, out.str());
}

void MetricReport::write_table(const std::filesystem::path& path, const std::string& method) const {
  const std::vector<std::pair<std::string, std::string>> layout = {
      {"id", "ID"},         {"exp", "Exp"},           {"hp", "Head Pose"}, {"hp_hn", "Head Pose-HN"},
      {"masked_l1", "Masked-L1"}, {"gaze", "Eye Gazing"}, {"fid", "FID"}};
  std::ostringstream out;
  out << "Method";
  for (const auto& [key, title] : layout) out << "," << title;
  out << "\n" << method;
  for (const auto& [key, title] : layout) {
    out << ",";
    if (key == "fid") {
      out << (fid ? fmt(fid->value) : "n/a");
    } else if (auto it = aggregate.find(key); it != aggregate.end()) {
      out << fmt(it->second);
    } else {
      out << "n/a";
    }
  }
  out << "\n";
  io::write_file_atomic(path, out.str());
}

std::vector<EvalPair> read_pairs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pairs file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("pairs file is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("pairs file lacks column " + name);
    return static_cast<size_t>(it - header.begin());
  };
  const size_t cs = col("source_path"), ct = col("target_path"), cw = col("swapped_path");
  const auto dir = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : dir / fp).string();
  };
  std::vector<EvalPair> pairs;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < header.size()) throw std::runtime_error("malformed pairs row: " + line);
    pairs.push_back({resolve(cells[cs]), resolve(cells[ct]), resolve(cells[cw])});
  }
  return pairs;
}

MetricReport evaluate_files(const std::vector<EvalPair>& pairs, int resolution, obj::PerceptionBundle& bundle,
                            const std::set<std::string>& selection) {
  std::vector<EvalPair> ok_ids;
  std::vector<EvalImages> images;
  int64_t unreadable = 0;
  for (const auto& p : pairs) {
    auto s = image::try_load(p.source, resolution);
    auto t = image::try_load(p.target, resolution);
    auto w = image::try_load(p.swapped, resolution);
    if (!s || !t || !w) {
      ++unreadable;
      continue;
    }
    ok_ids.push_back(p);
    images.push_back({*s, *t, *w});
  }
  auto report = evaluate(ok_ids, images, bundle, selection);
  report.unreadable_pairs = unreadable;
  return report;
}

}  // namespace rswap::metrics
