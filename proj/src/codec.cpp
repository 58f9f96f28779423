#include "geoworld/codec.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <string>

#include "geoworld/error.hpp"

namespace geoworld {

namespace {

void check_frame(const PatchCodec& c, const scene::Frame& f) {
  if (f.height != c.height || f.width != c.width)
    throw InvalidInputError("frame is " + std::to_string(f.height) + "x" + std::to_string(f.width) +
                            " but the codec expects " + std::to_string(c.height) + "x" + std::to_string(c.width));
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols) throw FormatError("ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

void PatchCodec::validate() const {
  if (patch < 1 || height < patch || width < patch || height % patch || width % patch)
    throw ConfigError("codec: frame size must be a positive multiple of the patch size");
  if (latent_channels < 1 || latent_channels > patch_dim())
    throw ConfigError("codec: latent channels must lie in [1, patch_dim]");
  if (mean.size() != patch_dim() || encoder.rows() != latent_channels || encoder.cols() != patch_dim() ||
      decoder.rows() != patch_dim() || decoder.cols() != latent_channels)
    throw ConfigError("codec: matrix shapes do not match the declared sizes");
}

PatchCodec PatchCodec::fit(const std::vector<scene::Rollout>& rollouts, int latent_channels, int patch,
                           double depth_weight) {
  if (rollouts.empty() || rollouts.front().frames.empty()) throw InvalidInputError("codec fit: no frames");
  PatchCodec c;
  c.height = rollouts.front().frames.front().height;
  c.width = rollouts.front().frames.front().width;
  c.patch = patch;
  c.latent_channels = latent_channels;
  c.depth_weight = depth_weight;
  const int D = c.patch_dim();
  c.mean = Eigen::VectorXd::Zero(D);
  c.encoder = Eigen::MatrixXd::Zero(latent_channels, D);
  c.decoder = Eigen::MatrixXd::Zero(D, latent_channels);
  c.validate();

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(D);
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(D, D);
  double count = 0;
  for (const auto& r : rollouts) {
    for (const auto& f : r.frames) {
      const Eigen::MatrixXd P = c.patchify(f);
      sum += P.colwise().sum().transpose();
      outer.noalias() += P.transpose() * P;
      count += static_cast<double>(P.rows());
    }
  }
  c.mean = sum / count;
  const Eigen::MatrixXd cov = outer / count - c.mean * c.mean.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; take the trailing columns in descending order.
  for (int k = 0; k < latent_channels; ++k) {
    const Eigen::Index col = D - 1 - k;
    const double sd = std::sqrt(std::max(eig.eigenvalues()(col), 1e-12));
    Eigen::VectorXd u = eig.eigenvectors().col(col);
    // Fix the sign so the largest-magnitude entry is positive.
    Eigen::Index arg;
    u.cwiseAbs().maxCoeff(&arg);
    if (u(arg) < 0) u = -u;
    c.encoder.row(k) = u.transpose() / sd;
    c.decoder.col(k) = u * sd;
  }
  return c;
}

Eigen::MatrixXd PatchCodec::patchify(const scene::Frame& f) const {
  check_frame(*this, f);
  const int gw = width / patch;
  Eigen::MatrixXd out(patches_per_frame(), patch_dim());
  for (int py = 0; py < height / patch; ++py)
    for (int px = 0; px < gw; ++px) {
      const int row = py * gw + px;
      int k = 0;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) {
          const std::size_t idx = static_cast<std::size_t>((py * patch + y) * width + px * patch + x);
          out(row, k++) = f.rgb[3 * idx];
          out(row, k++) = f.rgb[3 * idx + 1];
          out(row, k++) = f.rgb[3 * idx + 2];
          out(row, k++) = f.depth[idx] * depth_weight;
        }
    }
  return out;
}

scene::Frame PatchCodec::unpatchify(const Eigen::MatrixXd& P) const {
  if (P.rows() != patches_per_frame() || P.cols() != patch_dim()) throw InvalidInputError("unpatchify: shape mismatch");
  scene::Frame f;
  f.height = height;
  f.width = width;
  f.rgb.assign(static_cast<std::size_t>(height * width * 3), 0.0f);
  f.depth.assign(static_cast<std::size_t>(height * width), 0.0);
  const int gw = width / patch;
  for (int py = 0; py < height / patch; ++py)
    for (int px = 0; px < gw; ++px) {
      const int row = py * gw + px;
      int k = 0;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) {
          const std::size_t idx = static_cast<std::size_t>((py * patch + y) * width + px * patch + x);
          for (int ch = 0; ch < 3; ++ch) f.rgb[3 * idx + ch] = static_cast<float>(std::clamp(P(row, k++), 0.0, 1.0));
          const double d = P(row, k++) / depth_weight;
          f.depth[idx] = d > min_depth ? d : 0.0;
        }
    }
  return f;
}

LatentTensor PatchCodec::encode(const scene::Frame& frame) const { return encode(std::vector<scene::Frame>{frame}); }

LatentTensor PatchCodec::encode(const std::vector<scene::Frame>& frames) const {
  validate();
  const int n = patches_per_frame();
  LatentTensor z(static_cast<int>(frames.size()), n, latent_channels);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Eigen::MatrixXd P = patchify(frames[i]);
    P.rowwise() -= mean.transpose();
    z.data.middleRows(static_cast<Eigen::Index>(i) * n, n) = P * encoder.transpose();
  }
  return z;
}

std::vector<scene::Frame> PatchCodec::decode(const LatentTensor& z) const {
  validate();
  if (z.tokens != patches_per_frame() || z.channels != latent_channels)
    throw InvalidInputError("decode: latent shape does not match the codec");
  std::vector<scene::Frame> frames;
  const int n = z.tokens;
  for (int i = 0; i < z.frames; ++i) {
    Eigen::MatrixXd P = z.data.middleRows(static_cast<Eigen::Index>(i) * n, n) * decoder.transpose();
    P.rowwise() += mean.transpose();
    frames.push_back(unpatchify(P));
  }
  return frames;
}

nlohmann::json to_json(const PatchCodec& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"patch", c.patch},
          {"latent_channels", c.latent_channels},
          {"depth_weight", c.depth_weight},
          {"min_depth", c.min_depth},
          {"mean", matrix_json(c.mean.transpose())[0]},
          {"encoder", matrix_json(c.encoder)},
          {"decoder", matrix_json(c.decoder)}};
}

PatchCodec codec_from_json(const nlohmann::json& j) {
  try {
    PatchCodec c;
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.patch = j.at("patch").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.depth_weight = j.at("depth_weight").get<double>();
    c.min_depth = j.at("min_depth").get<double>();
    const auto& m = j.at("mean");
    c.mean.resize(static_cast<Eigen::Index>(m.size()));
    for (std::size_t i = 0; i < m.size(); ++i) c.mean(static_cast<Eigen::Index>(i)) = m[i].get<double>();
    c.encoder = matrix_from_json(j.at("encoder"));
    c.decoder = matrix_from_json(j.at("decoder"));
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("codec: ") + e.what());
  }
}

}  // namespace geoworld
