#pragma once

// End-to-end stages shared by the CLI, the acceptance runner and the Python
// module: dataset generation, training, sampling, evaluation and action
// extraction over one run configuration.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geoworld/aids.hpp"
#include "geoworld/codec.hpp"
#include "geoworld/metrics.hpp"
#include "geoworld/scene.hpp"
#include "geoworld/teacher.hpp"
#include "geoworld/world_model.hpp"

namespace geoworld::pipeline {

struct RunConfig {
  scene::SceneGenParams scene;
  int count = 4;  // rollouts for gen-data
  ModelConfig model;
  OptimizerConfig optimizer;
  double depth_weight = 1.0;  // codec
  teacher::TeacherSpec teacher;
  aids::AidsConfig aids;
  std::string suite = "rgbd";  // "rgbd" or "oracle"
  metrics::MetricOptions metrics;
  int sample_steps = 10;
  std::uint64_t seed = 0;

  /// Cross-block consistency (model layout vs scene, vocabulary vs objects).
  void validate() const;
};

/// Missing model layout fields (frames, grid, patch, vocab) are derived from
/// the scene block; everything else falls back to defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

/// Independent per-item seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure by index.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

std::vector<scene::Rollout> generate_dataset(const RunConfig& cfg, int count, std::uint64_t seed, int jobs = 1);

struct NamedRollout {
  std::string name;
  scene::Rollout rollout;
};

/// Dataset directory: dataset.json plus one rollout directory per entry.
void write_dataset(const std::filesystem::path& dir, const std::vector<NamedRollout>& rollouts,
                   const nlohmann::json& meta = nlohmann::json::object());
/// Accepts a dataset directory or a single rollout directory.
std::vector<NamedRollout> read_dataset(const std::filesystem::path& dir);
std::string rollout_name(int index);

struct Prepared {
  PatchCodec codec;
  teacher::TeacherSpec teacher;  // with fitted normalization
  std::vector<TrainingExample> examples;
};

/// Fits the codec and the teacher normalization and encodes every rollout.
/// `feature_files` is required (one per rollout) for the file teacher.
Prepared prepare(const std::vector<scene::Rollout>& rollouts, const RunConfig& cfg,
                 const std::vector<std::filesystem::path>& feature_files = {});

struct TrainOutput {
  Checkpoint checkpoint;  // extra: codec, teacher, run config
  std::vector<LossRecord> curve;
};

TrainOutput train_model(const std::vector<scene::Rollout>& rollouts, const RunConfig& cfg, std::uint64_t seed,
                        const std::vector<std::filesystem::path>& feature_files = {});

/// Codec stored in a checkpoint's extra block.
PatchCodec checkpoint_codec(const Checkpoint& ck);

/// Generates a rollout from `scene`'s first frame. Predicted tracks come from
/// block matching on the generated frames, seeded at the ground-truth
/// frame-0 track positions.
scene::Rollout predict(const Checkpoint& ck, const PatchCodec& codec, const scene::Rollout& scene,
                       const scene::InstructionId& instruction, int steps, std::uint64_t seed);

aids::PerceptionSuite make_suite(const RunConfig& cfg, const scene::Rollout& rollout);

}  // namespace geoworld::pipeline
