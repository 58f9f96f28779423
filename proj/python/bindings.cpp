// Python module _geoworld: thin wrappers over the library's main operations.
// JSON-shaped values cross the boundary as dicts, rasters as numpy arrays.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "geoworld/aids.hpp"
#include "geoworld/error.hpp"
#include "geoworld/flow_match.hpp"
#include "geoworld/geometry.hpp"
#include "geoworld/metrics.hpp"
#include "geoworld/pipeline.hpp"
#include "geoworld/scene.hpp"
#include "geoworld/world_model.hpp"

namespace py = pybind11;
using namespace geoworld;

namespace {

nlohmann::json to_nl(const py::handle& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::array_t<double> mat3(const Mat3& m) {
  py::array_t<double> a({3, 3});
  auto r = a.mutable_unchecked<2>();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r(i, k) = m(i, k);
  return a;
}

Mat3 as_mat3(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(0) != 3 || a.shape(1) != 3) throw InvalidInputError("expected a 3x3 matrix");
  Mat3 m;
  auto r = a.unchecked<2>();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) m(i, k) = r(i, k);
  return m;
}

Vec3 as_vec3(const std::vector<double>& v) {
  if (v.size() != 3) throw InvalidInputError("expected 3 values");
  return {v[0], v[1], v[2]};
}

py::dict report_dict(const metrics::MetricReport& r) {
  py::dict d;
  d["psnr"] = r.psnr;
  d["ssim"] = r.ssim;
  d["absrel"] = r.absrel;
  d["delta1"] = r.delta1;
  d["delta2"] = r.delta2;
  d["chamfer_l1"] = r.chamfer_l1;
  d["track_delta_avg"] = r.track_delta_avg;
  return d;
}

const scene::Frame& frame_at(const scene::Rollout& r, int t) {
  if (t < 0 || t >= static_cast<int>(r.frames.size())) throw InvalidInputError("frame index out of range");
  return r.frames[static_cast<std::size_t>(t)];
}

scene::InstructionId instruction_of(const scene::Rollout& r, const std::optional<std::pair<int, int>>& instr) {
  if (!instr) return r.config.instruction;
  return {instr->first, instr->second};
}

py::array_t<double> tracks_array(const scene::Rollout& r) {
  const py::ssize_t n = static_cast<py::ssize_t>(r.tracks.size()), f = static_cast<py::ssize_t>(r.frames.size());
  py::array_t<double> a({n, f, py::ssize_t{3}});
  auto w = a.mutable_unchecked<3>();
  for (py::ssize_t i = 0; i < n; ++i)
    for (py::ssize_t t = 0; t < f; ++t) {
      const auto& s = r.tracks[static_cast<std::size_t>(i)].samples[static_cast<std::size_t>(t)];
      w(i, t, 0) = s.pixel.u;
      w(i, t, 1) = s.pixel.v;
      w(i, t, 2) = s.visible ? 1.0 : 0.0;
    }
  return a;
}

}  // namespace

PYBIND11_MODULE(_geoworld, m) {
  m.doc() = "Geometry-enhanced video world model";

  auto base = py::register_exception<Error>(m, "GeoworldError", PyExc_RuntimeError);
  auto sub = [&](const char* name) { return py::exception<void>(m, name, base.ptr()); };
  static py::exception<void> invalid_input = sub("InvalidInputError"), config = sub("ConfigError"),
                             missing = sub("MissingInputError"), format = sub("FormatError"),
                             numerical = sub("NumericalError"), grounding = sub("GroundingError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      switch (e.kind()) {
        case ErrorKind::InvalidInput: py::set_error(invalid_input, e.what()); break;
        case ErrorKind::Config: py::set_error(config, e.what()); break;
        case ErrorKind::MissingInput: py::set_error(missing, e.what()); break;
        case ErrorKind::Format: py::set_error(format, e.what()); break;
        case ErrorKind::Numerical: py::set_error(numerical, e.what()); break;
        case ErrorKind::Grounding: py::set_error(grounding, e.what()); break;
      }
    }
  });

  // geometry
  m.def("rotation_exp", [](const std::vector<double>& w) { return mat3(rotation_exp(as_vec3(w))); });
  m.def("rotation_log", [](const py::array_t<double>& R) {
    const Vec3 w = rotation_log(as_mat3(R));
    return std::vector<double>{w.x(), w.y(), w.z()};
  });
  m.def("geodesic_distance", [](const py::array_t<double>& a, const py::array_t<double>& b) {
    return geodesic_distance(as_mat3(a), as_mat3(b));
  });
  m.def("slerp", [](const py::array_t<double>& a, const py::array_t<double>& b, double u) {
    return mat3(slerp(as_mat3(a), as_mat3(b), u));
  });
  m.def(
      "project_correspondence",
      [](std::pair<double, double> p, double depth, std::vector<double> K, const py::array_t<double>& R,
         const std::vector<double>& T, const std::vector<double>& flow) -> std::optional<std::pair<double, double>> {
        if (K.size() != 4) throw InvalidInputError("intrinsics must be [fx, fy, cx, cy]");
        const CameraIntrinsics k{K[0], K[1], K[2], K[3]};
        const auto q = project_correspondence({p.first, p.second}, depth, k, RigidTransform(as_mat3(R), as_vec3(T)),
                                              as_vec3(flow));
        if (!q) return std::nullopt;
        return std::make_pair(q->u, q->v);
      },
      py::arg("pixel"), py::arg("depth"), py::arg("intrinsics"), py::arg("R"), py::arg("T"),
      py::arg("flow") = std::vector<double>{0, 0, 0});

  // scenes
  py::class_<scene::Rollout>(m, "Rollout")
      .def_property_readonly("num_frames", [](const scene::Rollout& r) { return r.frames.size(); })
      .def_property_readonly("height", [](const scene::Rollout& r) { return r.config.height; })
      .def_property_readonly("width", [](const scene::Rollout& r) { return r.config.width; })
      .def_property_readonly("ground_truth", [](const scene::Rollout& r) { return r.ground_truth; })
      .def_property_readonly("config", [](const scene::Rollout& r) { return to_py(scene::to_json(r.config)); })
      .def_property_readonly("instruction", [](const scene::Rollout& r) {
        return std::make_pair(r.config.instruction.task, r.config.instruction.target_object);
      })
      .def("rgb",
           [](const scene::Rollout& r, int t) {
             const auto& f = frame_at(r, t);
             py::array_t<float> a({f.height, f.width, 3});
             std::copy(f.rgb.begin(), f.rgb.end(), a.mutable_data());
             return a;
           })
      .def("depth",
           [](const scene::Rollout& r, int t) {
             const auto& f = frame_at(r, t);
             py::array_t<double> a({f.height, f.width});
             std::copy(f.depth.begin(), f.depth.end(), a.mutable_data());
             return a;
           })
      .def("tracks", &tracks_array, "(points, frames, 3) array of u, v, visible");

  m.def(
      "random_rollout",
      [](const py::object& params, std::uint64_t seed) {
        return scene::generate_rollout(scene::random_scene(scene::scene_gen_from_json(to_nl(params)), seed));
      },
      py::arg("params") = py::none(), py::arg("seed") = 0);
  m.def("rollout_from_config", [](const py::object& cfg) {
    return scene::generate_rollout(scene::scene_config_from_json(to_nl(cfg)));
  });
  m.def("read_rollout", &scene::read_rollout);
  m.def("write_rollout", &scene::write_rollout);

  // run configuration and pipeline stages
  m.def("run_config", [](const py::object& j) { return to_py(pipeline::to_json(pipeline::run_config_from_json(to_nl(j)))); },
        "Completes a run configuration with derived fields and defaults.");
  m.def(
      "generate_dataset",
      [](const py::object& cfg, int count, std::uint64_t seed, int jobs) {
        return pipeline::generate_dataset(pipeline::run_config_from_json(to_nl(cfg)), count, seed, jobs);
      },
      py::arg("config"), py::arg("count"), py::arg("seed") = 0, py::arg("jobs") = 1);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_property_readonly("step", [](const Checkpoint& c) { return c.step; })
      .def_property_readonly("model", [](const Checkpoint& c) { return to_py(to_json(c.config)); })
      .def_property_readonly("num_parameters", [](const Checkpoint& c) { return c.params.size(); })
      .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(p, c); });
  m.def("load_checkpoint", &load_checkpoint);

  m.def(
      "train",
      [](const std::vector<scene::Rollout>& rollouts, const py::object& cfg, std::uint64_t seed) {
        const pipeline::RunConfig run = pipeline::run_config_from_json(to_nl(cfg));
        pipeline::TrainOutput out;
        {
          py::gil_scoped_release release;
          out = pipeline::train_model(rollouts, run, seed);
        }
        py::list curve;
        for (const auto& r : out.curve) {
          py::dict d;
          d["step"] = r.step;
          d["L"] = r.loss.total;
          d["L_vid"] = r.loss.video;
          d["L_geo"] = r.loss.geometry;
          curve.append(d);
        }
        return py::make_tuple(out.checkpoint, curve);
      },
      py::arg("rollouts"), py::arg("config"), py::arg("seed") = 0, "Returns (checkpoint, loss curve).");

  m.def(
      "predict",
      [](const Checkpoint& ck, const scene::Rollout& scene, std::optional<std::pair<int, int>> instruction, int steps,
         std::uint64_t seed) {
        const PatchCodec codec = pipeline::checkpoint_codec(ck);
        py::gil_scoped_release release;
        return pipeline::predict(ck, codec, scene, instruction_of(scene, instruction), steps, seed);
      },
      py::arg("checkpoint"), py::arg("scene"), py::arg("instruction") = py::none(), py::arg("steps") = 10,
      py::arg("seed") = 0);

  // metrics
  m.def(
      "evaluate",
      [](const scene::Rollout& pred, const scene::Rollout& gt, bool align, int budget, std::uint64_t seed) {
        metrics::MetricOptions o;
        o.align_depth_scale = align;
        o.point_budget = budget;
        o.seed = seed;
        return report_dict(metrics::evaluate_rollout(pred, gt, gt.config.intrinsics, o));
      },
      py::arg("pred"), py::arg("gt"), py::arg("align_depth_scale") = true, py::arg("point_budget") = 512,
      py::arg("seed") = 0);
  m.def("psnr", &metrics::psnr);
  m.def("absrel", &metrics::absrel, py::arg("pred"), py::arg("gt"), py::arg("align_scale") = true);
  m.def("delta_acc", &metrics::delta_acc, py::arg("pred"), py::arg("gt"), py::arg("threshold") = 1.25,
        py::arg("align_scale") = true);
  m.def("track_delta_avg", [](const std::vector<std::vector<std::pair<double, double>>>& pred,
                              const std::vector<std::vector<std::pair<double, double>>>& gt,
                              const std::vector<std::vector<bool>>& visible) {
    auto conv = [](const std::vector<std::vector<std::pair<double, double>>>& x) {
      std::vector<std::vector<Pixel>> out;
      for (const auto& row : x) {
        std::vector<Pixel> r;
        for (const auto& [u, v] : row) r.push_back({u, v});
        out.push_back(std::move(r));
      }
      return out;
    };
    return metrics::track_delta_avg(conv(pred), conv(gt), visible);
  });

  // action extraction
  m.def("gate_decision", [](double s, double ds, double tau, double delta) {
    return std::string(aids::decision_name(aids::gate_decision(s, ds, aids::GateConfig{tau, delta})));
  }, py::arg("s"), py::arg("ds"), py::arg("tau") = 0.5, py::arg("delta") = 0.4);
  m.def(
      "extract_actions",
      [](const scene::Rollout& r, const py::object& cfg, std::optional<std::pair<int, int>> instruction) {
        const pipeline::RunConfig c = pipeline::run_config_from_json(to_nl(cfg));
        const auto suite = pipeline::make_suite(c, r);
        aids::AidsConfig a = c.aids;
        a.seed = c.seed;
        const auto res = aids::extract(r.frames, instruction_of(r, instruction), suite, a, r.config.intrinsics,
                                       r.config.end_effector);
        return py::make_tuple(to_py(aids::trajectory_json(res.actions)), to_py(res.diagnostics.events));
      },
      py::arg("rollout"), py::arg("config") = py::none(), py::arg("instruction") = py::none(),
      "Returns (trajectory, diagnostic events).");

  // sampler
  m.def(
      "euler_sample",
      [](const std::function<std::vector<double>(const std::vector<double>&, double)>& velocity,
         const std::vector<double>& z1, int steps) {
        LatentTensor z(1, static_cast<int>(z1.size()), 1);
        for (std::size_t i = 0; i < z1.size(); ++i) z.data(static_cast<Eigen::Index>(i), 0) = z1[i];
        const auto out = flow::euler_sample(
            [&](const LatentTensor& x, double t) {
              std::vector<double> in(z1.size());
              for (std::size_t i = 0; i < in.size(); ++i) in[i] = x.data(static_cast<Eigen::Index>(i), 0);
              const auto v = velocity(in, t);
              if (v.size() != in.size()) throw InvalidInputError("velocity has the wrong length");
              LatentTensor w = x;
              for (std::size_t i = 0; i < v.size(); ++i) w.data(static_cast<Eigen::Index>(i), 0) = v[i];
              return w;
            },
            z, steps);
        std::vector<double> r(z1.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = out.data(static_cast<Eigen::Index>(i), 0);
        return r;
      },
      py::arg("velocity"), py::arg("z1"), py::arg("steps"), "Integrates from t = 1 to t = 0.");
}
