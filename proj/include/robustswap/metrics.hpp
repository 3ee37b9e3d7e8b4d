#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "robustswap/objectives.hpp"

namespace rswap::metrics {

// Pixel scale for masked-L1: images are mapped from [-1, 1] to [0, 1].
inline constexpr const char* kMaskedL1Scale = "[0,1]";
// Eye gaze error is the mean of the yaw and pitch absolute errors.
inline constexpr const char* kGazeAggregation = "mean(|d_yaw|,|d_pitch|)";

// Mean absolute difference over channels and the pixels where both masks
// are set. Images are [3, H, W] in [-1, 1], masks [H, W] bool. Returns
// nullopt when the intersection is empty.
std::optional<double> masked_l1_masks(const torch::Tensor& tgt, const torch::Tensor& swp, const torch::Tensor& tgt_mask,
                                      const torch::Tensor& swp_mask);
// skin-or-hair masks from the bundle's parser.
std::optional<double> masked_l1(const torch::Tensor& tgt, const torch::Tensor& swp, obj::PerceptionBundle& bundle);

// Gaze vectors are (yaw, pitch).
double eye_gaze_error(const torch::Tensor& gaze_tgt, const torch::Tensor& gaze_swp);
double eye_gaze_error(const torch::Tensor& tgt, const torch::Tensor& swp, obj::PerceptionBundle& bundle);

double identity_similarity(const torch::Tensor& src, const torch::Tensor& swp, obj::PerceptionBundle& bundle);

struct PoseExprError {
  double hp;   // mean |d| over the three rotation coefficients
  double exp;  // mean |d| over the expression coefficients
};
PoseExprError pose_expr_error(const mm::FaceParams& tgt, const mm::FaceParams& swp);
PoseExprError pose_expr_error(const torch::Tensor& tgt, const torch::Tensor& swp, obj::PerceptionBundle& bundle);

// Mean |d| over Euler angles from the dedicated head-pose network; nullopt
// when the bundle has none.
std::optional<double> head_pose_hn_error(const torch::Tensor& tgt, const torch::Tensor& swp,
                                         obj::PerceptionBundle& bundle);

struct FidResult {
  double value = 0.0;
  double jitter = 0.0;  // diagonal added to both covariances; 0 if none was needed
};

// Frechet distance between Gaussians fitted to two [N, D] feature sets
// (unbiased covariance). Needs at least two rows per set.
FidResult frechet_distance(const torch::Tensor& real_features, const torch::Tensor& fake_features);
// Same from explicit moments.
FidResult frechet_distance(const torch::Tensor& mu_r, const torch::Tensor& sigma_r, const torch::Tensor& mu_f,
                           const torch::Tensor& sigma_f);
FidResult fid(const torch::Tensor& real_images, const torch::Tensor& fake_images, obj::PerceptionBundle& bundle);

// Table 1 column order.
inline const std::vector<std::string> kPairMetrics = {"id", "exp", "hp", "hp_hn", "masked_l1", "gaze"};

struct EvalPair {
  std::string source, target, swapped;
};

struct EvalImages {
  torch::Tensor source, target, swapped;  // [3, H, W]
};

struct MetricReport {
  std::vector<std::string> columns;  // selected per-pair metrics, Table 1 order
  bool with_fid = false;

  struct Row {
    EvalPair pair;
    std::map<std::string, std::optional<double>> values;  // nullopt = excluded
  };
  std::vector<Row> rows;
  std::map<std::string, double> aggregate;     // mean over included rows; empty when there are no rows
  std::map<std::string, int64_t> excluded;     // per metric
  std::map<std::string, std::string> reasons;  // last exclusion reason per metric
  int64_t unreadable_pairs = 0;
  std::optional<FidResult> fid;

  nlohmann::json metadata() const;
  void write_csv(const std::filesystem::path& path) const;
  // One-row summary in Table 1 layout (n/a for unselected or unavailable).
  void write_table(const std::filesystem::path& path, const std::string& method = "ours") const;
};

// Accepts "id,exp,hp,hp_hn,masked_l1,gaze,fid" style lists; throws on
// unknown names.
std::set<std::string> parse_selection(const std::string& csv);

MetricReport evaluate(const std::vector<EvalPair>& ids, const std::vector<EvalImages>& pairs,
                      obj::PerceptionBundle& bundle, const std::set<std::string>& selection);

// Reads source_path,target_path,swapped_path rows (header required).
std::vector<EvalPair> read_pairs_csv(const std::filesystem::path& path);
// Loads every pair at `resolution`; unreadable pairs are counted.
MetricReport evaluate_files(const std::vector<EvalPair>& pairs, int resolution, obj::PerceptionBundle& bundle,
                            const std::set<std::string>& selection);

}  // namespace rswap::metrics
