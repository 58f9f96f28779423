#pragma once

// Dual-branch latent flow model.
//
// Video branch: transformer blocks over (frame, patch) tokens with adaLN
// timestep conditioning, an additive instruction embedding, and first-frame
// tokens added to every frame. Blocks [0, mid_layer) form the backbone E; the
// output of block mid_layer - 1 is m_t. The remaining blocks and the output
// projection form the head U.
//
// Geometry branch: its own blocks over geometry tokens, conditioned on t and on
// m_t through frame-local cross-attention. It takes no other scene input and is
// never evaluated at inference.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "geoworld/autodiff.hpp"
#include "geoworld/codec.hpp"
#include "geoworld/flow_match.hpp"
#include "geoworld/rng.hpp"
#include "geoworld/scene.hpp"

namespace geoworld {

struct ModelConfig {
  int frames = 8;
  int grid_h = 8;  // patches per column
  int grid_w = 8;  // patches per row
  int patch = 4;
  int latent_channels = 16;
  int geometry_channels = 10;
  int width = 32;
  int heads = 4;
  int mlp_ratio = 2;
  int video_depth = 4;
  int geometry_depth = 2;
  int mid_layer = 2;
  double alpha = 0.5;
  int vocab = 6;
  /// Alternate spatial and temporal attention instead of full attention.
  bool factorized = true;

  int tokens_per_frame() const { return grid_h * grid_w; }
  int tokens() const { return frames * tokens_per_frame(); }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class Branch : int { VideoBackbone = 0, VideoHead = 1, Geometry = 2 };
const char* branch_name(Branch b);

struct SliceInfo {
  std::string name;
  Branch branch = Branch::VideoBackbone;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Flat parameter store (row-major slices). The same layout doubles as the
/// gradient store. Reads through `matrix` are counted per branch.
class Parameters {
 public:
  Parameters() = default;
  Parameters(const Parameters& o);
  Parameters& operator=(const Parameters& o);

  int add(const std::string& name, Branch branch, int rows, int cols);
  int find(const std::string& name) const;
  const std::vector<SliceInfo>& slices() const { return slices_; }
  const SliceInfo& slice(int id) const { return slices_[static_cast<std::size_t>(id)]; }

  ad::Matrix matrix(int id) const;
  void set_matrix(int id, const ad::Matrix& m);
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  Parameters zeros_like() const;
  bool same_layout(const Parameters& o) const;
  bool finite() const;
  /// FNV-1a over the raw bytes of every slice in `branch`.
  std::uint64_t hash(Branch branch) const;
  void zero_branch(Branch branch);

  std::uint64_t reads(Branch b) const { return reads_[static_cast<std::size_t>(b)].load(); }
  void reset_reads() const;

 private:
  std::vector<SliceInfo> slices_;
  std::unordered_map<std::string, int> index_;
  std::vector<double> values_;
  mutable std::array<std::atomic<std::uint64_t>, 3> reads_{};
};

/// Layout for `cfg` with every weight drawn from N(0, 1/fan_in). With
/// `zero_heads`, adaLN projections and both output projections start at zero.
Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed, bool zero_heads = true);

struct Conditioning {
  int instruction = 0;
  LatentTensor first_frame;  // 1 x tokens_per_frame x latent_channels
};

Conditioning make_conditioning(const LatentTensor& z0, int instruction);

struct BackboneOutput {
  LatentTensor m;      // frames x tokens x width
  LatentTensor v_vid;  // same shape as z_t
};

BackboneOutput backbone_forward(const ModelConfig& cfg, const Parameters& params, const LatentTensor& z_t, double t,
                                const Conditioning& cond);

LatentTensor geometry_forward(const ModelConfig& cfg, const Parameters& params, const LatentTensor& g_t, double t,
                              const LatentTensor& m);

/// Clean data for one rollout: video latent z0 and normalized geometry g0.
struct TrainingExample {
  LatentTensor z0;
  LatentTensor g0;
  int instruction = 0;
};

/// One noised draw: shared t for both branches.
struct BatchItem {
  const TrainingExample* example = nullptr;
  LatentTensor z1;
  LatentTensor g1;
  double t = 0.0;
};

using Batch = std::vector<BatchItem>;

Batch sample_batch(const std::vector<TrainingExample>& data, int batch_size, Rng& rng);

struct LossTerms {
  double total = 0.0;
  double video = 0.0;
  double geometry = 0.0;
};

/// L = L_vid + alpha * L_geo, each a batch mean of per-item MSEs.
LossTerms joint_loss(const ModelConfig& cfg, const Parameters& params, const Batch& batch, double alpha);

struct GradResult {
  LossTerms loss;
  Parameters grad;
};

/// Reverse-mode gradient of the joint loss. With `stop_gradient_at_m` the
/// geometry loss reaches the backbone through a detached copy of m_t.
GradResult grad(const ModelConfig& cfg, const Parameters& params, const Batch& batch, double alpha,
                bool stop_gradient_at_m = false);

struct OptimizerConfig {
  int steps = 200;
  int batch_size = 2;
  double learning_rate = 1e-3;
  double decay = 0.99;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
};

nlohmann::json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);

struct LossRecord {
  int step = 0;
  LossTerms loss;
};

struct TrainState {
  Parameters params;
  Parameters second_moment;
  int step = 0;
  Rng rng;
};

struct TrainResult {
  Parameters params;
  std::vector<LossRecord> curve;
  int steps = 0;
  std::string rng_state;
};

/// Momentum-free RMS-normalized steps with global-norm clipping. Throws
/// NumericalError naming the step on a non-finite loss or gradient.
TrainResult train(const std::vector<TrainingExample>& data, const ModelConfig& cfg, const OptimizerConfig& opt,
                  std::uint64_t seed);

/// Samples N latent frames from noise with the video branch only and decodes
/// them. Frame 0 carries the observed first frame's RGB-D unchanged.
std::vector<scene::Frame> generate(const ModelConfig& cfg, const Parameters& params, const PatchCodec& codec,
                                   const scene::Frame& first_frame, int instruction, int steps, std::uint64_t seed);

/// Latent-level sampler used by `generate`.
LatentTensor sample_latent(const ModelConfig& cfg, const Parameters& params, const Conditioning& cond, int steps,
                           std::uint64_t seed);

// -- persistence ----------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  Parameters params;
  int step = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();  // codec, teacher normalization, ...
};

/// Magic "GWC1"; header lists every slice, payload is f64 in slice order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Columns step,L,L_vid,L_geo.
std::string loss_csv(const std::vector<LossRecord>& curve);

}  // namespace geoworld
