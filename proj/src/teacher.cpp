#include "geoworld/teacher.hpp"

#include <cmath>

#include "geoworld/error.hpp"
#include "geoworld/geometry.hpp"
#include "geoworld/io.hpp"

namespace geoworld::teacher {

void TeacherSpec::validate() const {
  if (patch < 1) throw ConfigError("teacher: patch must be >= 1");
  if (channels < 4) throw ConfigError("teacher: at least 4 channels required");
  if (variant == Variant::Oracle && channels != kOracleChannels)
    throw ConfigError("teacher: the oracle variant has exactly 10 channels");
  if (!normalization.empty()) {
    if (normalization.mean.size() != static_cast<std::size_t>(channels) ||
        normalization.scale.size() != static_cast<std::size_t>(channels))
      throw ConfigError("teacher: normalization size differs from channel count");
    for (std::size_t c = 0; c < normalization.scale.size(); ++c)
      if (!std::isfinite(normalization.mean[c]) || !std::isfinite(normalization.scale[c]) ||
          !(normalization.scale[c] > 0.0))
        throw ConfigError("teacher: normalization statistics must be finite with positive scale");
  }
}

LatentTensor GeometryRepr::latent() const { return LatentTensor(frames, grid_h * grid_w, channels, data); }

void GeometryRepr::validate() const {
  if (frames < 1 || grid_h < 1 || grid_w < 1 || channels < 1) throw FormatError("geometry: empty shape");
  if (data.rows() != static_cast<Eigen::Index>(frames) * grid_h * grid_w || data.cols() != channels)
    throw FormatError("geometry: data does not match its shape");
  if (legend.size() != static_cast<std::size_t>(channels)) throw FormatError("geometry: legend size differs from C");
  if (!data.allFinite()) throw FormatError("geometry: non-finite values");
}

std::vector<std::string> oracle_legend() {
  return {"depth", "disp_u", "disp_v", "cam_rot_x", "cam_rot_y", "cam_rot_z", "cam_tx", "cam_ty", "cam_tz", "occupancy"};
}

GeometryRepr extract(const scene::Rollout& r, const TeacherSpec& spec) {
  spec.validate();
  if (spec.variant != Variant::Oracle) throw InvalidInputError("teacher: file variant needs a feature file");
  if (!r.ground_truth) throw InvalidInputError("teacher: the oracle needs a ground-truth rollout");
  const auto& cfg = r.config;
  const int H = cfg.height, W = cfg.width, P = spec.patch, N = static_cast<int>(r.frames.size());
  if (H % P || W % P) throw InvalidInputError("teacher: patch size must divide the frame size");
  GeometryRepr g;
  g.frames = N;
  g.grid_h = H / P;
  g.grid_w = W / P;
  g.channels = kOracleChannels;
  g.legend = oracle_legend();
  g.data = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(N) * g.grid_h * g.grid_w, kOracleChannels);
  const CameraIntrinsics& K = cfg.intrinsics;

  for (int t = 0; t < N; ++t) {
    const scene::Frame& f = r.frames[static_cast<std::size_t>(t)];
    const bool has_next = t + 1 < N;
    RigidTransform rel;
    Vec3 rot = Vec3::Zero(), trans = Vec3::Zero();
    if (has_next) {
      rel = relative_pose(f.camera, r.frames[static_cast<std::size_t>(t + 1)].camera);
      rot = rotation_log(rel.R());
      trans = rel.T();
    }
    const RigidTransform cam_to_world = invert(f.camera);
    for (int py = 0; py < g.grid_h; ++py)
      for (int px = 0; px < g.grid_w; ++px) {
        const Eigen::Index row = (static_cast<Eigen::Index>(t) * g.grid_h + py) * g.grid_w + px;
        double depth_sum = 0, occupied = 0, du = 0, dv = 0;
        int valid = 0, moved = 0;
        for (int y = py * P; y < (py + 1) * P; ++y)
          for (int x = px * P; x < (px + 1) * P; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            const int id = f.object_id[i];
            if (id > scene::kBackgroundId) occupied += 1;
            if (!(f.depth[i] > 0.0)) continue;
            depth_sum += f.depth[i];
            ++valid;
            if (!has_next) continue;
            const Pixel p{static_cast<double>(x), static_cast<double>(y)};
            const Vec3 world = cam_to_world.apply(backproject(p, f.depth[i], K));
            const Vec3 flow = scene::scene_flow(cfg, id, world, t);
            if (const auto q = project_correspondence(p, f.depth[i], K, rel, flow)) {
              du += q->u - p.u;
              dv += q->v - p.v;
              ++moved;
            }
          }
        g.data(row, 0) = valid ? depth_sum / valid : 0.0;
        g.data(row, 1) = moved ? du / moved : 0.0;
        g.data(row, 2) = moved ? dv / moved : 0.0;
        for (int k = 0; k < 3; ++k) {
          g.data(row, 3 + k) = rot(k);
          g.data(row, 6 + k) = trans(k);
        }
        g.data(row, 9) = occupied / (P * P);
      }
  }
  return g;
}

GeometryRepr extract(const scene::Rollout& r, const TeacherSpec& spec, const std::filesystem::path& feature_file) {
  spec.validate();
  if (spec.variant == Variant::Oracle) return extract(r, spec);
  GeometryRepr g = read_features(feature_file);
  const int N = static_cast<int>(r.frames.size());
  const int H = r.frames.empty() ? 0 : r.frames.front().height, W = r.frames.empty() ? 0 : r.frames.front().width;
  if (g.frames != N || g.grid_h * spec.patch != H || g.grid_w * spec.patch != W || g.channels != spec.channels)
    throw FormatError("feature file " + feature_file.string() + " has shape " + std::to_string(g.frames) + "x" +
                      std::to_string(g.grid_h) + "x" + std::to_string(g.grid_w) + "x" + std::to_string(g.channels) +
                      ", expected " + std::to_string(N) + "x" + std::to_string(H / spec.patch) + "x" +
                      std::to_string(W / spec.patch) + "x" + std::to_string(spec.channels));
  return g;
}

Normalization fit_normalization(const std::vector<GeometryRepr>& reprs) {
  if (reprs.empty()) throw InvalidInputError("normalization: no representations");
  const int C = reprs.front().channels;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(C), sq = Eigen::VectorXd::Zero(C);
  double n = 0;
  for (const auto& g : reprs) {
    if (g.channels != C) throw InvalidInputError("normalization: channel counts differ");
    sum += g.data.colwise().sum().transpose();
    n += static_cast<double>(g.data.rows());
  }
  const Eigen::VectorXd mean = sum / n;
  for (const auto& g : reprs) sq += (g.data.rowwise() - mean.transpose()).array().square().matrix().colwise().sum().transpose();
  Normalization norm;
  for (int c = 0; c < C; ++c) {
    const double sd = std::sqrt(sq(c) / n);
    norm.mean.push_back(mean(c));
    norm.scale.push_back(sd < 1e-8 ? 1.0 : sd);
  }
  return norm;
}

namespace {

void check_norm(const GeometryRepr& g, const TeacherSpec& spec) {
  spec.validate();
  if (spec.normalization.empty()) throw ConfigError("teacher: no normalization statistics");
  if (g.channels != spec.channels) throw InvalidInputError("teacher: representation channels differ from spec");
}

}  // namespace

GeometryRepr normalize(const GeometryRepr& g, const TeacherSpec& spec) {
  check_norm(g, spec);
  GeometryRepr out = g;
  for (int c = 0; c < g.channels; ++c)
    out.data.col(c) = (g.data.col(c).array() - spec.normalization.mean[static_cast<std::size_t>(c)]) /
                      spec.normalization.scale[static_cast<std::size_t>(c)];
  return out;
}

GeometryRepr denormalize(const GeometryRepr& g, const TeacherSpec& spec) {
  check_norm(g, spec);
  GeometryRepr out = g;
  for (int c = 0; c < g.channels; ++c)
    out.data.col(c) = g.data.col(c).array() * spec.normalization.scale[static_cast<std::size_t>(c)] +
                      spec.normalization.mean[static_cast<std::size_t>(c)];
  return out;
}

void write_features(const std::filesystem::path& path, const GeometryRepr& g, const Normalization& norm) {
  g.validate();
  nlohmann::json header = {{"format", "geoworld.features/1"},
                           {"shape", {g.frames, g.grid_h, g.grid_w, g.channels}},
                           {"legend", g.legend}};
  if (!norm.empty()) header["normalization"] = {{"mean", norm.mean}, {"scale", norm.scale}};
  std::vector<double> payload(static_cast<std::size_t>(g.data.size()));
  for (Eigen::Index r = 0; r < g.data.rows(); ++r)
    for (Eigen::Index c = 0; c < g.data.cols(); ++c)
      payload[static_cast<std::size_t>(r * g.channels + c)] = g.data(r, c);
  io::write_headed(path, "GWF1", header, io::DType::F32, payload);
}

GeometryRepr read_features(const std::filesystem::path& path, Normalization* norm) {
  const io::Headed h = io::read_headed(path, "GWF1", io::DType::F32);
  GeometryRepr g;
  try {
    if (h.header.at("format") != "geoworld.features/1") throw FormatError("unknown feature format");
    const auto& s = h.header.at("shape");
    if (s.size() != 4) throw FormatError("feature shape must have 4 entries");
    g.frames = s[0].get<int>();
    g.grid_h = s[1].get<int>();
    g.grid_w = s[2].get<int>();
    g.channels = s[3].get<int>();
    g.legend = h.header.at("legend").get<std::vector<std::string>>();
    if (norm && h.header.contains("normalization")) {
      norm->mean = h.header["normalization"].at("mean").get<std::vector<double>>();
      norm->scale = h.header["normalization"].at("scale").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feature header: ") + e.what());
  }
  const std::size_t rows = static_cast<std::size_t>(g.frames) * g.grid_h * g.grid_w;
  if (g.frames < 1 || g.grid_h < 1 || g.grid_w < 1 || g.channels < 1 ||
      h.payload.size() != rows * static_cast<std::size_t>(g.channels))
    throw FormatError("feature payload does not match the header shape");
  g.data.resize(static_cast<Eigen::Index>(rows), g.channels);
  for (std::size_t r = 0; r < rows; ++r)
    for (int c = 0; c < g.channels; ++c)
      g.data(static_cast<Eigen::Index>(r), c) = h.payload[r * static_cast<std::size_t>(g.channels) + static_cast<std::size_t>(c)];
  g.validate();
  return g;
}

nlohmann::json to_json(const TeacherSpec& s) {
  nlohmann::json j = {{"variant", s.variant == Variant::Oracle ? "oracle" : "file"},
                      {"patch", s.patch},
                      {"channels", s.channels}};
  if (!s.normalization.empty()) j["normalization"] = {{"mean", s.normalization.mean}, {"scale", s.normalization.scale}};
  return j;
}

TeacherSpec teacher_spec_from_json(const nlohmann::json& j) {
  TeacherSpec s;
  try {
    const std::string v = j.value("variant", std::string("oracle"));
    if (v == "oracle") s.variant = Variant::Oracle;
    else if (v == "file") s.variant = Variant::File;
    else throw ConfigError("teacher: unknown variant '" + v + "'");
    s.patch = j.value("patch", s.patch);
    s.channels = j.value("channels", s.channels);
    if (j.contains("normalization")) {
      s.normalization.mean = j["normalization"].at("mean").get<std::vector<double>>();
      s.normalization.scale = j["normalization"].at("scale").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("teacher: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace geoworld::teacher
