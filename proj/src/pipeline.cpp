#include "geoworld/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "geoworld/error.hpp"
#include "geoworld/io.hpp"

namespace geoworld::pipeline {

namespace fs = std::filesystem;

// -- config ----------------------------------------------------------------------------

void RunConfig::validate() const {
  model.validate();
  teacher.validate();
  aids.validate();
  if (count < 1) throw ConfigError("count must be >= 1");
  if (sample_steps < 1) throw ConfigError("sample_steps must be >= 1");
  if (suite != "rgbd" && suite != "oracle") throw ConfigError("suite must be 'rgbd' or 'oracle', got '" + suite + "'");
  if (scene.height % scene.patch || scene.width % scene.patch)
    throw ConfigError("scene size must be a multiple of the patch size");
  if (model.frames != scene.frames) throw ConfigError("model.frames differs from scene.frames");
  if (model.patch != scene.patch || teacher.patch != scene.patch) throw ConfigError("model, teacher and scene patch sizes differ");
  if (model.grid_h != scene.height / scene.patch || model.grid_w != scene.width / scene.patch)
    throw ConfigError("model grid does not match scene size / patch");
  if (model.vocab < 2 * scene.max_objects) throw ConfigError("model.vocab must cover 2 tasks x max_objects");
  if (model.geometry_channels != teacher.channels) throw ConfigError("model.geometry_channels differs from teacher.channels");
  if (model.latent_channels > scene.patch * scene.patch * 4)
    throw ConfigError("latent_channels exceeds the patch dimension");
  if (aids.max_objects < scene.max_objects) throw ConfigError("aids.max_objects is below scene.max_objects");
  if (metrics.point_budget < 1) throw ConfigError("metrics.point_budget must be >= 1");
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  try {
    const auto block = [&](const char* k) { return j.contains(k) ? j.at(k) : nlohmann::json::object(); };
    c.scene = scene::scene_gen_from_json(block("scene"));
    nlohmann::json m = block("model");
    if (!m.contains("frames")) m["frames"] = c.scene.frames;
    if (!m.contains("patch")) m["patch"] = c.scene.patch;
    if (!m.contains("grid_h")) m["grid_h"] = c.scene.height / std::max(1, c.scene.patch);
    if (!m.contains("grid_w")) m["grid_w"] = c.scene.width / std::max(1, c.scene.patch);
    if (!m.contains("vocab")) m["vocab"] = 2 * c.scene.max_objects;
    c.model = model_config_from_json(m);
    c.optimizer = optimizer_config_from_json(block("optimizer"));
    nlohmann::json t = block("teacher");
    if (!t.contains("patch")) t["patch"] = c.scene.patch;
    c.teacher = teacher::teacher_spec_from_json(t);
    nlohmann::json a = block("aids");
    if (!a.contains("max_objects")) a["max_objects"] = c.scene.max_objects;
    c.aids = aids::aids_config_from_json(a);
    c.count = j.value("count", c.count);
    c.depth_weight = j.value("depth_weight", c.depth_weight);
    c.suite = j.value("suite", c.suite);
    c.sample_steps = j.value("sample_steps", c.sample_steps);
    c.seed = j.value("seed", c.seed);
    const auto mj = block("metrics");
    c.metrics.align_depth_scale = mj.value("align_depth_scale", c.metrics.align_depth_scale);
    c.metrics.point_budget = mj.value("point_budget", c.metrics.point_budget);
    c.metrics.seed = mj.value("seed", c.metrics.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json t = teacher::to_json(c.teacher);
  t.erase("normalization");  // fitted at train time
  return {{"scene", scene::to_json(c.scene)},
          {"count", c.count},
          {"model", to_json(c.model)},
          {"optimizer", to_json(c.optimizer)},
          {"depth_weight", c.depth_weight},
          {"teacher", t},
          {"aids", aids::to_json(c.aids)},
          {"suite", c.suite},
          {"metrics",
           {{"align_depth_scale", c.metrics.align_depth_scale},
            {"point_budget", c.metrics.point_budget},
            {"seed", c.metrics.seed}}},
          {"sample_steps", c.sample_steps},
          {"seed", c.seed}};
}

// -- utilities -----------------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::clamp(jobs, 1, std::max(1, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<scene::Rollout> generate_dataset(const RunConfig& cfg, int count, std::uint64_t seed, int jobs) {
  if (count < 1) throw ConfigError("count must be >= 1");
  std::vector<scene::Rollout> out(static_cast<std::size_t>(count));
  parallel_for(count, jobs, [&](int i) {
    out[static_cast<std::size_t>(i)] =
        scene::generate_rollout(scene::random_scene(cfg.scene, derive_seed(seed, static_cast<std::uint64_t>(i))));
  });
  return out;
}

std::string rollout_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rollout_%04d", index);
  return buf;
}

void write_dataset(const fs::path& dir, const std::vector<NamedRollout>& rollouts, const nlohmann::json& meta) {
  fs::create_directories(dir);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& r : rollouts) {
    scene::write_rollout(dir / r.name, r.rollout);
    names.push_back(r.name);
  }
  nlohmann::json j = meta;
  j["format"] = "geoworld.dataset/1";
  j["rollouts"] = names;
  io::write_json(dir / "dataset.json", j);
}

std::vector<NamedRollout> read_dataset(const fs::path& dir) {
  if (!fs::exists(dir)) throw MissingInputError("input does not exist: " + dir.string());
  if (fs::exists(dir / "manifest.json")) return {{dir.filename().string(), scene::read_rollout(dir)}};
  if (!fs::exists(dir / "dataset.json")) throw MissingInputError("neither dataset.json nor manifest.json in " + dir.string());
  const nlohmann::json j = io::read_json(dir / "dataset.json");
  if (j.value("format", "") != "geoworld.dataset/1") throw FormatError(dir.string() + ": unknown dataset format");
  std::vector<NamedRollout> out;
  try {
    for (const auto& n : j.at("rollouts")) {
      const std::string name = n.get<std::string>();
      out.push_back({name, scene::read_rollout(dir / name)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/dataset.json: " + e.what());
  }
  if (out.empty()) throw MissingInputError(dir.string() + ": dataset lists no rollouts");
  return out;
}

// -- training ------------------------------------------------------------------------------

Prepared prepare(const std::vector<scene::Rollout>& rollouts, const RunConfig& cfg,
                 const std::vector<fs::path>& feature_files) {
  if (rollouts.empty()) throw MissingInputError("no training rollouts");
  for (const auto& r : rollouts) {
    if (!r.ground_truth) throw InvalidInputError("training rollouts must carry ground truth");
    if (static_cast<int>(r.frames.size()) != cfg.model.frames || r.config.height != cfg.scene.height ||
        r.config.width != cfg.scene.width)
      throw InvalidInputError("training rollout layout differs from the configuration (" +
                              std::to_string(r.frames.size()) + " frames of " + std::to_string(r.config.height) + "x" +
                              std::to_string(r.config.width) + ")");
  }
  const bool from_files = cfg.teacher.variant == teacher::Variant::File;
  if (from_files && feature_files.size() != rollouts.size())
    throw MissingInputError("file teacher needs one feature file per rollout");
  Prepared p;
  p.codec = PatchCodec::fit(rollouts, cfg.model.latent_channels, cfg.model.patch, cfg.depth_weight);
  p.teacher = cfg.teacher;
  std::vector<teacher::GeometryRepr> geo;
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    geo.push_back(from_files ? teacher::extract(rollouts[i], p.teacher, feature_files[i])
                             : teacher::extract(rollouts[i], p.teacher));
  p.teacher.normalization = teacher::fit_normalization(geo);
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    p.examples.push_back({p.codec.encode(rollouts[i].frames), teacher::normalize(geo[i], p.teacher).latent(),
                          rollouts[i].config.instruction.index(cfg.scene.max_objects)});
  return p;
}

TrainOutput train_model(const std::vector<scene::Rollout>& rollouts, const RunConfig& cfg, std::uint64_t seed,
                        const std::vector<fs::path>& feature_files) {
  const Prepared p = prepare(rollouts, cfg, feature_files);
  TrainResult tr = train(p.examples, cfg.model, cfg.optimizer, seed);
  TrainOutput out;
  out.checkpoint.config = cfg.model;
  out.checkpoint.params = std::move(tr.params);
  out.checkpoint.step = tr.steps;
  out.checkpoint.rng_state = tr.rng_state;
  out.checkpoint.extra = {{"codec", to_json(p.codec)}, {"teacher", teacher::to_json(p.teacher)}, {"run", to_json(cfg)},
                          {"seed", seed}};
  out.curve = std::move(tr.curve);
  return out;
}

PatchCodec checkpoint_codec(const Checkpoint& ck) {
  if (!ck.extra.contains("codec")) throw FormatError("checkpoint carries no codec");
  try {
    return codec_from_json(ck.extra.at("codec"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint codec: ") + e.what());
  }
}

// -- sampling --------------------------------------------------------------------------------

scene::Rollout predict(const Checkpoint& ck, const PatchCodec& codec, const scene::Rollout& gt,
                       const scene::InstructionId& instruction, int steps, std::uint64_t seed) {
  if (gt.frames.empty()) throw InvalidInputError("predict: scene has no frames");
  if (gt.config.height != codec.height || gt.config.width != codec.width)
    throw InvalidInputError("predict: scene is " + std::to_string(gt.config.height) + "x" +
                            std::to_string(gt.config.width) + " but the model expects " +
                            std::to_string(codec.height) + "x" + std::to_string(codec.width));
  const int max_objects = std::max(1, ck.config.vocab / 2);
  if (instruction.task < 0 || instruction.task > 1 || instruction.target_object < 1 ||
      instruction.target_object > max_objects)
    throw InvalidInputError("predict: instruction outside the model vocabulary");
  scene::Rollout out;
  out.config = gt.config;
  out.config.instruction = instruction;
  out.ground_truth = false;
  out.frames = generate(ck.config, ck.params, codec, gt.frames[0], instruction.index(max_objects), steps, seed);
  for (auto& f : out.frames) f.object_id.clear();

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<Pixel> seeds;
  for (const auto& tr : gt.tracks) {
    const auto& s0 = tr.samples.front();
    seeds.push_back(s0.visible ? s0.pixel : Pixel{nan, nan});
  }
  const aids::BlockMatchTracker bm;
  auto session = bm.start(out.frames, 0, seeds);
  for (std::size_t i = 0; i < gt.tracks.size(); ++i) {
    scene::Track t;
    t.id = gt.tracks[i].id;
    t.object_id = gt.tracks[i].object_id;
    scene::TrackSample s;
    s.pixel = seeds[i];
    s.visible = std::isfinite(seeds[i].u);
    t.samples.push_back(s);
    out.tracks.push_back(std::move(t));
  }
  for (int f = 1; f < static_cast<int>(out.frames.size()); ++f) {
    const auto step = session->advance(f);
    for (std::size_t i = 0; i < out.tracks.size(); ++i) {
      scene::TrackSample s;
      s.pixel = step.pixels[i];
      s.visible = step.reliable[i];
      out.tracks[i].samples.push_back(s);
    }
  }
  return out;
}

aids::PerceptionSuite make_suite(const RunConfig& cfg, const scene::Rollout& r) {
  aids::PerceptionSuite s;
  s.grasp = std::make_shared<aids::AnalyticGraspProposer>();
  if (cfg.suite == "oracle") {
    if (!r.ground_truth) throw InvalidInputError("the oracle suite needs a ground-truth rollout");
    s.grounder = std::make_shared<aids::OracleGrounder>(r.config.end_effector.id);
    s.tracker = std::make_shared<aids::OracleTracker>(r);
    s.pose = std::make_shared<aids::OraclePoseEstimator>(r);
  } else {
    s.grounder = std::make_shared<aids::ColorGrounder>(cfg.aids.max_objects, r.config.end_effector,
                                                       r.config.background.color);
    s.tracker = std::make_shared<aids::BlockMatchTracker>();
    s.pose = std::make_shared<aids::PointCloudPoseEstimator>(r.config.intrinsics);
  }
  return s;
}

}  // namespace geoworld::pipeline
