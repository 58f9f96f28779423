#pragma once

// Frozen geometry features per patch.
//
// The oracle variant reads ground truth directly. Channel legend:
//   0     mean valid depth (m)
//   1-2   mean pixel displacement to the next frame (du, dv)
//   3-5   rotation log of the camera motion to the next frame
//   6-8   translation of the camera motion to the next frame
//   9     fraction of pixels covered by objects or the end effector
// The last frame has no successor, so channels 1-8 are zero there.
//
// The file variant loads the same layout from a feature file, so features
// from any external model with C >= 4 channels can be used instead.

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "geoworld/flow_match.hpp"
#include "geoworld/scene.hpp"

namespace geoworld::teacher {

inline constexpr int kOracleChannels = 10;

enum class Variant { Oracle, File };

struct Normalization {
  std::vector<double> mean;
  std::vector<double> scale;
  bool empty() const { return mean.empty(); }
};

struct TeacherSpec {
  Variant variant = Variant::Oracle;
  int patch = 4;
  int channels = kOracleChannels;
  Normalization normalization;
  void validate() const;
};

struct GeometryRepr {
  int frames = 0;
  int grid_h = 0;
  int grid_w = 0;
  int channels = 0;
  std::vector<std::string> legend;
  Eigen::MatrixXd data;  // (frames * grid_h * grid_w) x channels, frame-major, raster patch order

  LatentTensor latent() const;
  void validate() const;
};

std::vector<std::string> oracle_legend();

/// Oracle variant; the rollout must carry ground truth.
GeometryRepr extract(const scene::Rollout& rollout, const TeacherSpec& spec);
/// File variant: loads `feature_file` and checks it against the rollout grid and spec.
GeometryRepr extract(const scene::Rollout& rollout, const TeacherSpec& spec, const std::filesystem::path& feature_file);

/// Per-channel mean and population standard deviation; a scale below 1e-8 becomes 1.
Normalization fit_normalization(const std::vector<GeometryRepr>& reprs);

GeometryRepr normalize(const GeometryRepr& repr, const TeacherSpec& spec);
GeometryRepr denormalize(const GeometryRepr& repr, const TeacherSpec& spec);

/// Magic "GWF1"; JSON header (shape, legend, normalization) plus f32 payload.
void write_features(const std::filesystem::path& path, const GeometryRepr& repr, const Normalization& norm = {});
GeometryRepr read_features(const std::filesystem::path& path, Normalization* norm = nullptr);

nlohmann::json to_json(const TeacherSpec& spec);
TeacherSpec teacher_spec_from_json(const nlohmann::json& j);

}  // namespace geoworld::teacher
