// geoworld: dataset generation, training, sampling, evaluation and action
// extraction over one JSON run configuration.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 malformed config or usage,
// 3 missing or malformed input, 4 numerical failure, 5 grounding failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "geoworld/aids.hpp"
#include "geoworld/error.hpp"
#include "geoworld/io.hpp"
#include "geoworld/metrics.hpp"
#include "geoworld/pipeline.hpp"
#include "geoworld/png.hpp"
#include "geoworld/world_model.hpp"

namespace fs = std::filesystem;
using namespace geoworld;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::MissingInput:
    case ErrorKind::Format:
    case ErrorKind::InvalidInput: return 3;
    case ErrorKind::Numerical: return 4;
    case ErrorKind::Grounding: return 5;
  }
  return 1;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
};

pipeline::RunConfig load_config(const Common& c, const nlohmann::json& fallback = nlohmann::json::object()) {
  nlohmann::json j = fallback;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw ConfigError("config file not found: " + c.config);
    try {
      j = io::read_json(c.config);
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  pipeline::RunConfig cfg = pipeline::run_config_from_json(j);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void write_effective(const fs::path& out, const std::string& command, const pipeline::RunConfig& cfg,
                     nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j = pipeline::to_json(cfg);
  j["command"] = command;
  for (auto& [k, v] : extra.items()) j[k] = v;
  io::write_json(out / "effective_config.json", j);
}

scene::InstructionId parse_instruction(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("instruction must be TASK:OBJECT, got '" + s + "'");
  try {
    return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("instruction must be TASK:OBJECT, got '" + s + "'");
  }
}

void prepare_out(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  fs::create_directories(out);
}

// -- commands ------------------------------------------------------------------------

int cmd_gen_data(const Common& c, std::optional<int> count) {
  pipeline::RunConfig cfg = load_config(c);
  if (count) cfg.count = *count;
  cfg.validate();
  if (c.out.empty()) throw ConfigError("--out is required");
  const auto rollouts = pipeline::generate_dataset(cfg, cfg.count, cfg.seed, c.jobs);
  std::vector<pipeline::NamedRollout> named;
  for (int i = 0; i < cfg.count; ++i) named.push_back({pipeline::rollout_name(i), rollouts[static_cast<std::size_t>(i)]});
  prepare_out(c.out);
  pipeline::write_dataset(c.out, named, {{"seed", cfg.seed}, {"scene", scene::to_json(cfg.scene)}});
  write_effective(c.out, "gen-data", cfg);
  std::cout << "wrote " << cfg.count << " rollouts to " << c.out << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& dataset, std::optional<int> steps) {
  pipeline::RunConfig cfg = load_config(c);
  if (steps) cfg.optimizer.steps = *steps;
  cfg.validate();
  if (c.out.empty()) throw ConfigError("--out is required");
  const auto data = pipeline::read_dataset(dataset);
  std::vector<scene::Rollout> rollouts;
  std::vector<fs::path> features;
  for (const auto& r : data) {
    rollouts.push_back(r.rollout);
    features.push_back(fs::path(dataset) / r.name / "features.gwf");
  }
  if (cfg.teacher.variant == teacher::Variant::File)
    for (const auto& f : features)
      if (!fs::exists(f)) throw MissingInputError("file teacher: missing " + f.string());
  const auto out = pipeline::train_model(rollouts, cfg, cfg.seed, features);
  prepare_out(c.out);
  save_checkpoint(fs::path(c.out) / "checkpoint.gwc", out.checkpoint);
  io::write_text(fs::path(c.out) / "loss.csv", loss_csv(out.curve));
  write_effective(c.out, "train", cfg);
  const auto& last = out.curve.back().loss;
  std::printf("trained %d steps: L=%.6g L_vid=%.6g L_geo=%.6g\n", out.checkpoint.step, last.total, last.video,
              last.geometry);
  return 0;
}

int cmd_sample(const Common& c, const std::string& ckpt_path, const std::string& scene_path,
               const std::optional<std::string>& instruction, std::optional<int> steps) {
  if (!fs::exists(ckpt_path)) throw MissingInputError("checkpoint not found: " + ckpt_path);
  const Checkpoint ck = load_checkpoint(ckpt_path);
  pipeline::RunConfig cfg = load_config(c, ck.extra.value("run", nlohmann::json::object()));
  if (steps) cfg.sample_steps = *steps;
  cfg.validate();
  if (c.out.empty()) throw ConfigError("--out is required");
  const PatchCodec codec = pipeline::checkpoint_codec(ck);
  const auto scenes = pipeline::read_dataset(scene_path);
  std::optional<scene::InstructionId> instr;
  if (instruction) instr = parse_instruction(*instruction);
  for (const auto& s : scenes)
    if (s.rollout.config.height != codec.height || s.rollout.config.width != codec.width)
      throw InvalidInputError(s.name + " is " + std::to_string(s.rollout.config.height) + "x" +
                              std::to_string(s.rollout.config.width) + ", the model expects " +
                              std::to_string(codec.height) + "x" + std::to_string(codec.width));

  std::vector<pipeline::NamedRollout> preds(scenes.size());
  pipeline::parallel_for(static_cast<int>(scenes.size()), c.jobs, [&](int i) {
    const auto& s = scenes[static_cast<std::size_t>(i)];
    preds[static_cast<std::size_t>(i)] = {
        s.name, pipeline::predict(ck, codec, s.rollout, instr.value_or(s.rollout.config.instruction), cfg.sample_steps,
                                  pipeline::derive_seed(cfg.seed, static_cast<std::uint64_t>(i)))};
  });
  prepare_out(c.out);
  pipeline::write_dataset(c.out, preds, {{"seed", cfg.seed}, {"sample_steps", cfg.sample_steps}});
  std::vector<std::vector<scene::Frame>> rows;
  for (const auto& p : preds) rows.push_back(p.rollout.frames);
  png::write_grid(fs::path(c.out) / "grid.png", rows);
  write_effective(c.out, "sample", cfg);
  std::cout << "sampled " << preds.size() << " rollouts to " << c.out << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& pred_path, const std::string& gt_path) {
  pipeline::RunConfig cfg = load_config(c);
  if (c.out.empty()) throw ConfigError("--out is required");
  const auto pred = pipeline::read_dataset(pred_path);
  const auto gt = pipeline::read_dataset(gt_path);
  std::vector<std::pair<const scene::Rollout*, const scene::Rollout*>> pairs;
  for (const auto& p : pred) {
    const pipeline::NamedRollout* match = nullptr;
    for (const auto& g : gt)
      if (g.name == p.name) match = &g;
    if (!match && pred.size() == 1 && gt.size() == 1) match = &gt[0];
    if (!match) throw MissingInputError("no ground truth for predicted rollout " + p.name);
    if (p.rollout.frames.size() != match->rollout.frames.size())
      throw MissingInputError(p.name + ": frame counts differ: predicted " + std::to_string(p.rollout.frames.size()) +
                              ", ground truth " + std::to_string(match->rollout.frames.size()));
    if (!match->rollout.ground_truth) throw InvalidInputError(match->name + " is not a ground-truth rollout");
    pairs.emplace_back(&p.rollout, &match->rollout);
  }
  std::vector<metrics::MetricReport> reports(pairs.size());
  pipeline::parallel_for(static_cast<int>(pairs.size()), c.jobs, [&](int i) {
    const auto [p, g] = pairs[static_cast<std::size_t>(i)];
    metrics::MetricOptions o = cfg.metrics;
    o.seed = pipeline::derive_seed(cfg.metrics.seed, static_cast<std::uint64_t>(i));
    reports[static_cast<std::size_t>(i)] = metrics::evaluate_rollout(*p, *g, g->config.intrinsics, o);
  });
  std::vector<std::string> names;
  for (const auto& p : pred) names.push_back(p.name);
  prepare_out(c.out);
  io::write_text(fs::path(c.out) / "metrics.csv", metrics::metrics_csv(names, reports));
  write_effective(c.out, "eval", cfg);
  const auto m = metrics::mean_report(reports);
  std::printf("mean over %zu rollouts: psnr=%.4g ssim=%.4g absrel=%.4g delta1=%.4g chamfer=%.4g track=%.4g\n",
              reports.size(), m.psnr, m.ssim, m.absrel, m.delta1, m.chamfer_l1, m.track_delta_avg);
  return 0;
}

int cmd_extract(const Common& c, const std::string& pred_path, const std::optional<std::string>& instruction) {
  pipeline::RunConfig cfg = load_config(c);
  if (c.out.empty()) throw ConfigError("--out is required");
  const auto pred = pipeline::read_dataset(pred_path);
  std::optional<scene::InstructionId> instr;
  if (instruction) instr = parse_instruction(*instruction);
  std::vector<pipeline::NamedRollout> inputs = pred;
  std::vector<aids::PerceptionSuite> suites;
  for (const auto& p : inputs) suites.push_back(pipeline::make_suite(cfg, p.rollout));

  std::vector<aids::ExtractResult> results(inputs.size());
  pipeline::parallel_for(static_cast<int>(inputs.size()), c.jobs, [&](int i) {
    const auto& p = inputs[static_cast<std::size_t>(i)];
    aids::AidsConfig a = cfg.aids;
    a.seed = pipeline::derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    try {
      results[static_cast<std::size_t>(i)] =
          aids::extract(p.rollout.frames, instr.value_or(p.rollout.config.instruction), suites[static_cast<std::size_t>(i)],
                        a, p.rollout.config.intrinsics, p.rollout.config.end_effector);
    } catch (const GroundingError& e) {
      throw GroundingError(p.name + ": " + e.what());
    }
  });
  prepare_out(c.out);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const fs::path dir = fs::path(c.out) / inputs[i].name;
    fs::create_directories(dir);
    io::write_json(dir / "trajectory.json", aids::trajectory_json(results[i].actions));
    io::write_json(dir / "diagnostics.json", {{"format", "geoworld.diagnostics/1"}, {"events", results[i].diagnostics.events}});
  }
  write_effective(c.out, "extract-actions", cfg);
  std::cout << "extracted " << inputs.size() << " trajectories to " << c.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geoworld: geometry-distilled video world model toolkit"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--seed", seed_value, "Global seed (overrides the config)");
    sub->add_option("--out", common.out, "Output directory");
    sub->add_option("--jobs", common.jobs, "Worker threads")->check(CLI::PositiveNumber);
  };

  std::optional<int> count, steps, sample_steps;
  std::string dataset, checkpoint, scene_dir, pred_dir, gt_dir;
  std::optional<std::string> instruction;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic ground-truth rollouts");
  add_common(gen);
  gen->add_option("--count", count, "Number of rollouts (overrides the config)");

  auto* tr = app.add_subcommand("train", "Train the world model on a dataset");
  add_common(tr);
  tr->add_option("dataset", dataset, "Dataset directory")->required();
  tr->add_option("--steps", steps, "Optimizer steps (overrides the config)");

  auto* sa = app.add_subcommand("sample", "Generate rollouts from first frames");
  add_common(sa);
  sa->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  sa->add_option("scene", scene_dir, "Dataset or rollout directory supplying first frames")->required();
  sa->add_option("--instruction", instruction, "TASK:OBJECT override");
  sa->add_option("--steps", sample_steps, "Sampling steps (overrides the config)");

  auto* ev = app.add_subcommand("eval", "Score predicted rollouts against ground truth");
  add_common(ev);
  ev->add_option("pred", pred_dir, "Predicted dataset or rollout directory")->required();
  ev->add_option("gt", gt_dir, "Ground-truth dataset or rollout directory")->required();

  auto* ex = app.add_subcommand("extract-actions", "Extract end-effector waypoints from rollouts");
  add_common(ex);
  ex->add_option("pred", pred_dir, "Dataset or rollout directory")->required();
  ex->add_option("--instruction", instruction, "TASK:OBJECT override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (auto* sub : app.get_subcommands())
    if (sub->count("--seed")) common.seed = seed_value;

  try {
    if (gen->parsed()) return cmd_gen_data(common, count);
    if (tr->parsed()) return cmd_train(common, dataset, steps);
    if (sa->parsed()) return cmd_sample(common, checkpoint, scene_dir, instruction, sample_steps);
    if (ev->parsed()) return cmd_eval(common, pred_dir, gt_dir);
    if (ex->parsed()) return cmd_extract(common, pred_dir, instruction);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
