#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "geoworld/geometry.hpp"
#include "geoworld/scene.hpp"

namespace geoworld::metrics {

inline constexpr double kPsnrCap = 99.0;

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double absrel = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double chamfer_l1 = 0.0;
  double track_delta_avg = 0.0;
};

struct MetricOptions {
  /// Median depth-scale alignment before depth metrics.
  bool align_depth_scale = true;
  /// Points kept per frame and cloud for Chamfer.
  int point_budget = 512;
  std::uint64_t seed = 0;
};

/// Interleaved RGB rasters in [0, 1]. Capped at kPsnrCap.
double psnr(const std::vector<float>& pred, const std::vector<float>& gt);

/// Mean SSIM over every 8x8 window (stride 1) of the grayscale images.
double ssim(const std::vector<float>& pred, const std::vector<float>& gt, int height, int width);

/// Only pixels valid (> 0) in both maps count.
double absrel(const std::vector<double>& pred, const std::vector<double>& gt, bool align_scale = true);
/// Fraction with max(pred/gt, gt/pred) < threshold.
double delta_acc(const std::vector<double>& pred, const std::vector<double>& gt, double threshold,
                 bool align_scale = true);
/// gt median / pred median over jointly valid pixels.
double median_scale(const std::vector<double>& pred, const std::vector<double>& gt);

/// Mean nearest-neighbor L1 distance A -> B plus B -> A.
double chamfer_l1(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

/// Valid-depth pixels of a frame back-projected into its camera, subsampled
/// to `budget` points with a seeded draw (all points when fewer).
std::vector<Vec3> point_cloud(const scene::Frame& frame, const CameraIntrinsics& K, int budget, std::uint64_t seed);

/// pred[i][t], gt[i][t], visible[i][t] for point i at frame t. Non-finite
/// predictions count as misses.
double track_delta_avg(const std::vector<std::vector<Pixel>>& pred, const std::vector<std::vector<Pixel>>& gt,
                       const std::vector<std::vector<bool>>& visible);

/// Tracks in `pred.tracks` are matched to `gt.tracks` by id; missing ids count as misses.
MetricReport evaluate_rollout(const scene::Rollout& pred, const scene::Rollout& gt, const CameraIntrinsics& K,
                              const MetricOptions& options = {});

MetricReport mean_report(const std::vector<MetricReport>& reports);

/// Header plus one row per rollout and a final "mean" row.
std::string metrics_csv(const std::vector<std::string>& names, const std::vector<MetricReport>& reports);

}  // namespace geoworld::metrics
