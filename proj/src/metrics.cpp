#include "geoworld/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "geoworld/error.hpp"
#include "geoworld/io.hpp"
#include "geoworld/rng.hpp"

namespace geoworld::metrics {

double psnr(const std::vector<float>& pred, const std::vector<float>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw InvalidInputError("psnr: images differ in size or are empty");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

std::vector<double> gray(const std::vector<float>& rgb) {
  std::vector<double> g(rgb.size() / 3);
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = 0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2];
  return g;
}

}  // namespace

double ssim(const std::vector<float>& pred, const std::vector<float>& gt, int H, int W) {
  constexpr int win = 8;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  if (pred.size() != gt.size() || pred.size() != static_cast<std::size_t>(H) * W * 3)
    throw InvalidInputError("ssim: image sizes differ");
  if (H < win || W < win) throw InvalidInputError("ssim: image smaller than the 8x8 window");
  const auto x = gray(pred), y = gray(gt);
  const double n = win * win;
  double total = 0.0;
  int count = 0;
  for (int r = 0; r + win <= H; ++r)
    for (int c = 0; c + win <= W; ++c) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = r; i < r + win; ++i)
        for (int j = c; j < c + win; ++j) {
          const double a = x[static_cast<std::size_t>(i) * W + j], b = y[static_cast<std::size_t>(i) * W + j];
          sx += a, sy += b, sxx += a * a, syy += b * b, sxy += a * b;
        }
      const double mx = sx / n, my = sy / n;
      const double vx = std::max(0.0, sxx / n - mx * mx), vy = std::max(0.0, syy / n - my * my);
      const double cxy = sxy / n - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

namespace {

struct DepthPairs {
  std::vector<double> pred, gt;
};

DepthPairs joint_valid(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size()) throw InvalidInputError("depth maps differ in size");
  DepthPairs p;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] > 0.0 && gt[i] > 0.0 && std::isfinite(pred[i]) && std::isfinite(gt[i])) {
      p.pred.push_back(pred[i]);
      p.gt.push_back(gt[i]);
    }
  if (p.pred.empty()) throw InvalidInputError("depth metrics: no jointly valid pixels");
  return p;
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

}  // namespace

double median_scale(const std::vector<double>& pred, const std::vector<double>& gt) {
  const DepthPairs p = joint_valid(pred, gt);
  return median(p.gt) / median(p.pred);
}

double absrel(const std::vector<double>& pred, const std::vector<double>& gt, bool align) {
  const DepthPairs p = joint_valid(pred, gt);
  const double s = align ? median(p.gt) / median(p.pred) : 1.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.pred.size(); ++i) sum += std::abs(s * p.pred[i] - p.gt[i]) / p.gt[i];
  return sum / static_cast<double>(p.pred.size());
}

double delta_acc(const std::vector<double>& pred, const std::vector<double>& gt, double threshold, bool align) {
  const DepthPairs p = joint_valid(pred, gt);
  const double s = align ? median(p.gt) / median(p.pred) : 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.pred.size(); ++i) {
    const double q = s * p.pred[i];
    if (std::max(q / p.gt[i], p.gt[i] / q) < threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(p.pred.size());
}

namespace {

double directed(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double sum = 0.0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) best = std::min(best, (p - q).lpNorm<1>());
    sum += best;
  }
  return sum / static_cast<double>(a.size());
}

}  // namespace

double chamfer_l1(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw InvalidInputError("chamfer: empty point set");
  return directed(a, b) + directed(b, a);
}

std::vector<Vec3> point_cloud(const scene::Frame& f, const CameraIntrinsics& K, int budget, std::uint64_t seed) {
  std::vector<int> valid;
  for (int i = 0; i < f.height * f.width; ++i)
    if (f.depth[static_cast<std::size_t>(i)] > 0.0) valid.push_back(i);
  if (budget > 0 && valid.size() > static_cast<std::size_t>(budget)) {
    // Partial Fisher-Yates keeps the draw independent of std::shuffle's implementation.
    Rng rng(seed);
    for (std::size_t k = 0; k < static_cast<std::size_t>(budget); ++k)
      std::swap(valid[k], valid[k + rng.below(valid.size() - k)]);
    valid.resize(static_cast<std::size_t>(budget));
    std::sort(valid.begin(), valid.end());
  }
  std::vector<Vec3> pts;
  pts.reserve(valid.size());
  for (int i : valid)
    pts.push_back(backproject({static_cast<double>(i % f.width), static_cast<double>(i / f.width)},
                              f.depth[static_cast<std::size_t>(i)], K));
  return pts;
}

double track_delta_avg(const std::vector<std::vector<Pixel>>& pred, const std::vector<std::vector<Pixel>>& gt,
                       const std::vector<std::vector<bool>>& visible) {
  if (pred.size() != gt.size() || gt.size() != visible.size()) throw InvalidInputError("tracks: point counts differ");
  constexpr double thresholds[] = {1, 2, 4, 8, 16};
  std::size_t hits[5] = {0, 0, 0, 0, 0}, total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (pred[i].size() != gt[i].size() || gt[i].size() != visible[i].size())
      throw InvalidInputError("tracks: frame counts differ");
    for (std::size_t t = 0; t < gt[i].size(); ++t) {
      if (!visible[i][t]) continue;
      ++total;
      const double e = std::hypot(pred[i][t].u - gt[i][t].u, pred[i][t].v - gt[i][t].v);
      if (!std::isfinite(e)) continue;
      for (int k = 0; k < 5; ++k)
        if (e < thresholds[k]) ++hits[k];
    }
  }
  if (total == 0) throw InvalidInputError("tracks: no visible pairs");
  double sum = 0.0;
  for (std::size_t h : hits) sum += static_cast<double>(h) / static_cast<double>(total);
  return sum / 5.0;
}

MetricReport evaluate_rollout(const scene::Rollout& pred, const scene::Rollout& gt, const CameraIntrinsics& K,
                              const MetricOptions& o) {
  if (pred.frames.size() != gt.frames.size())
    throw MissingInputError("frame counts differ: predicted " + std::to_string(pred.frames.size()) +
                            ", ground truth " + std::to_string(gt.frames.size()));
  if (gt.frames.empty()) throw InvalidInputError("evaluate: empty rollout");
  MetricReport r;
  std::vector<float> prgb, grgb;
  std::vector<double> pd, gd;
  double ssim_sum = 0.0, chamfer_sum = 0.0;
  for (std::size_t t = 0; t < gt.frames.size(); ++t) {
    const auto& p = pred.frames[t];
    const auto& g = gt.frames[t];
    if (p.height != g.height || p.width != g.width) throw InvalidInputError("evaluate: frame sizes differ");
    prgb.insert(prgb.end(), p.rgb.begin(), p.rgb.end());
    grgb.insert(grgb.end(), g.rgb.begin(), g.rgb.end());
    pd.insert(pd.end(), p.depth.begin(), p.depth.end());
    gd.insert(gd.end(), g.depth.begin(), g.depth.end());
    ssim_sum += ssim(p.rgb, g.rgb, g.height, g.width);
    const std::uint64_t s = o.seed * 1000003ULL + t;
    // Same draw for both clouds so identical depth gives identical samples.
    const auto a = point_cloud(p, K, o.point_budget, s);
    const auto b = point_cloud(g, K, o.point_budget, s);
    if (a.empty() || b.empty()) throw InvalidInputError("evaluate: frame " + std::to_string(t) + " has no valid depth");
    chamfer_sum += chamfer_l1(a, b);
  }
  const double n = static_cast<double>(gt.frames.size());
  r.psnr = psnr(prgb, grgb);
  r.ssim = ssim_sum / n;
  r.chamfer_l1 = chamfer_sum / n;
  r.absrel = absrel(pd, gd, o.align_depth_scale);
  r.delta1 = delta_acc(pd, gd, 1.25, o.align_depth_scale);
  r.delta2 = delta_acc(pd, gd, 1.25 * 1.25, o.align_depth_scale);

  std::map<int, const scene::Track*> by_id;
  for (const auto& tr : pred.tracks) by_id[tr.id] = &tr;
  std::vector<std::vector<Pixel>> pp, gp;
  std::vector<std::vector<bool>> vis;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& tr : gt.tracks) {
    const auto it = by_id.find(tr.id);
    std::vector<Pixel> pr, gr;
    std::vector<bool> v;
    for (std::size_t t = 0; t < tr.samples.size(); ++t) {
      gr.push_back(tr.samples[t].pixel);
      v.push_back(tr.samples[t].visible);
      if (it != by_id.end() && t < it->second->samples.size()) pr.push_back(it->second->samples[t].pixel);
      else pr.push_back({nan, nan});
    }
    pp.push_back(std::move(pr));
    gp.push_back(std::move(gr));
    vis.push_back(std::move(v));
  }
  r.track_delta_avg = track_delta_avg(pp, gp, vis);
  return r;
}

MetricReport mean_report(const std::vector<MetricReport>& rs) {
  if (rs.empty()) throw InvalidInputError("mean_report: no reports");
  MetricReport m;
  for (const auto& r : rs) {
    m.psnr += r.psnr, m.ssim += r.ssim, m.absrel += r.absrel, m.delta1 += r.delta1, m.delta2 += r.delta2;
    m.chamfer_l1 += r.chamfer_l1, m.track_delta_avg += r.track_delta_avg;
  }
  const double n = static_cast<double>(rs.size());
  m.psnr /= n, m.ssim /= n, m.absrel /= n, m.delta1 /= n, m.delta2 /= n, m.chamfer_l1 /= n, m.track_delta_avg /= n;
  return m;
}

std::string metrics_csv(const std::vector<std::string>& names, const std::vector<MetricReport>& rs) {
  if (names.size() != rs.size()) throw InvalidInputError("metrics_csv: names and reports differ in count");
  std::ostringstream os;
  os << "rollout,psnr,ssim,absrel,delta1,delta2,chamfer_l1,track_delta_avg\n";
  auto row = [&](const std::string& name, const MetricReport& r) {
    os << name;
    for (double v : {r.psnr, r.ssim, r.absrel, r.delta1, r.delta2, r.chamfer_l1, r.track_delta_avg})
      os << ',' << io::format_double(v);
    os << '\n';
  };
  for (std::size_t i = 0; i < rs.size(); ++i) row(names[i], rs[i]);
  if (!rs.empty()) row("mean", mean_report(rs));
  return os.str();
}

}  // namespace geoworld::metrics
