#pragma once

// Linear patch autoencoder between RGB-D frames and latent tokens.
//
// Each P x P patch is flattened to P*P*4 values (r, g, b, depth * depth_weight
// per pixel). The encoder whitens the leading principal components of the
// training patches, so latent channels have zero mean and unit variance on
// the fitting set. Decoding is the least-squares inverse onto that subspace.

#include <Eigen/Core>
#include <vector>

#include <nlohmann/json.hpp>

#include "geoworld/flow_match.hpp"
#include "geoworld/scene.hpp"

namespace geoworld {

struct PatchCodec {
  int height = 0;
  int width = 0;
  int patch = 0;
  int latent_channels = 0;
  double depth_weight = 1.0;
  /// Decoded depths at or below this value are marked invalid (0).
  double min_depth = 0.05;
  Eigen::VectorXd mean;     // patch_dim
  Eigen::MatrixXd encoder;  // latent_channels x patch_dim
  Eigen::MatrixXd decoder;  // patch_dim x latent_channels

  int patch_dim() const { return patch * patch * 4; }
  int patches_per_frame() const { return (height / patch) * (width / patch); }

  /// Principal-component fit over every patch of every frame in `rollouts`.
  static PatchCodec fit(const std::vector<scene::Rollout>& rollouts, int latent_channels, int patch,
                        double depth_weight = 1.0);

  /// Patch rows in raster order of the patch grid, one row per token.
  Eigen::MatrixXd patchify(const scene::Frame& frame) const;
  scene::Frame unpatchify(const Eigen::MatrixXd& patches) const;

  LatentTensor encode(const std::vector<scene::Frame>& frames) const;
  LatentTensor encode(const scene::Frame& frame) const;
  /// RGB is clamped to [0, 1]; object ids are left empty.
  std::vector<scene::Frame> decode(const LatentTensor& latent) const;

  void validate() const;
};

nlohmann::json to_json(const PatchCodec& codec);
PatchCodec codec_from_json(const nlohmann::json& j);

}  // namespace geoworld
