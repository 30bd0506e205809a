// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/deformation.hpp>
#include <endosplat/errors.hpp>
#include <endosplat/io.hpp>
#include <endosplat/losses.hpp>
#include <endosplat/metrics.hpp>
#include <endosplat/rasterizer.hpp>
#include <endosplat/service.hpp>
#include <endosplat/simulation.hpp>
#include <endosplat/synthetic.hpp>
#include <endosplat/trainer.hpp>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace endosplat;
using json = nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Image& img) {
  std::vector<py::ssize_t> shape{img.height(), img.width()};
  if (img.channels() > 1) shape.push_back(img.channels());
  Array out(shape);
  std::copy(img.data().begin(), img.data().end(), out.mutable_data());
  return out;
}

Image to_image(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ArgumentError("image must be an H x W or H x W x C array");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1);
  std::copy(a.data(), a.data() + a.size(), img.data().begin());
  return img;
}

template <int N>
Array rows_to_array(const std::vector<Eigen::Matrix<double, N, 1>>& rows) {
  Array out({static_cast<py::ssize_t>(rows.size()), static_cast<py::ssize_t>(N)});
  double* p = out.mutable_data();
  for (const auto& r : rows) p = std::copy(r.data(), r.data() + N, p);
  return out;
}

template <int N>
std::vector<Eigen::Matrix<double, N, 1>> array_to_rows(const Array& a, const char* what) {
  if (a.ndim() != 2 || a.shape(1) != N) throw ArgumentError(std::string(what) + " must be an N x " + std::to_string(N) + " array");
  std::vector<Eigen::Matrix<double, N, 1>> rows(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = Eigen::Map<const Eigen::Matrix<double, N, 1>>(a.data() + i * N);
  return rows;
}

Mat3 to_mat3(const Array& a) {
  if (a.ndim() != 2 || a.shape(0) != 3 || a.shape(1) != 3) throw ArgumentError("expected a 3 x 3 array");
  return Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(a.data());
}

Array from_mat3(const Mat3& m) {
  Array out({3, 3});
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(out.mutable_data()) = m;
  return out;
}

json to_json(const py::object& o) {
  if (o.is_none()) return json::object();
  if (py::isinstance<py::str>(o)) return json::parse(o.cast<std::string>());
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object from_json(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict render_dict(const RenderOutput& r) {
  py::dict d;
  d["rgb"] = to_array(r.rgb);
  d["depth"] = to_array(r.depth);
  d["alpha"] = to_array(r.alpha);
  d["distortion"] = to_array(r.distortion);
  return d;
}

ForceEvent force_from(const py::dict& d) {
  ForceEvent f;
  f.point = d["position"].cast<Vec3>();
  if (d.contains("direction")) f.direction = d["direction"].cast<Vec3>();
  f.magnitude = d["magnitude"].cast<double>();
  if (d.contains("radius")) f.radius = d["radius"].cast<double>();
  f.validate();
  return f;
}

py::dict force_to(const ForceEvent& f) {
  py::dict d;
  d["position"] = f.point;
  d["direction"] = f.direction;
  d["magnitude"] = f.magnitude;
  d["radius"] = f.radius;
  return d;
}

py::dict eval_dict(const EvalResult& e) {
  py::dict d;
  d["psnr"] = e.psnr;
  d["ssim"] = e.ssim;
  d["depth_rmse"] = e.depth_rmse;
  py::list views;
  for (const auto& v : e.views) {
    py::dict row;
    row["view"] = v.view;
    row["psnr"] = v.psnr;
    row["ssim"] = v.ssim;
    row["depth_rmse"] = v.depth_rmse;
    views.append(row);
  }
  d["views"] = views;
  return d;
}

py::tuple loss_pair(const ImageLoss& l) { return py::make_tuple(l.value, to_array(l.grad)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse-view Gaussian splatting and MPM tissue simulation";

  auto base = py::register_exception<std::runtime_error>(m, "EndosplatError");
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<StructuralError>(m, "StructuralError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InitializationError>(m, "InitializationError", base.ptr());
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", base.ptr());
  py::register_exception<SimulationFault>(m, "SimulationFault", base.ptr());
  py::register_exception<NotFoundError>(m, "NotFoundError", base.ptr());

  py::class_<Camera>(m, "Camera")
      .def(py::init<>())
      .def(py::init([](const py::object& j) { return camera_from_json(to_json(j), Camera{}); }), py::arg("params"))
      .def_readwrite("fx", &Camera::fx)
      .def_readwrite("fy", &Camera::fy)
      .def_readwrite("cx", &Camera::cx)
      .def_readwrite("cy", &Camera::cy)
      .def_readwrite("width", &Camera::width)
      .def_readwrite("height", &Camera::height)
      .def_readwrite("qvec", &Camera::qvec)
      .def_readwrite("tvec", &Camera::tvec)
      .def_property_readonly("center", &Camera::center)
      .def("to_dict", [](const Camera& c) { return from_json(camera_to_json(c)); })
      .def_static("from_center",
                  [](const Vec3& center, const Array& r, double fx, double fy, double cx, double cy, int w, int h) {
                    return Camera::from_center(center, to_mat3(r), fx, fy, cx, cy, w, h);
                  },
                  py::arg("center"), py::arg("camera_to_world"), py::arg("fx"), py::arg("fy"), py::arg("cx"),
                  py::arg("cy"), py::arg("width"), py::arg("height"))
      .def("__repr__", [](const Camera& c) { return "Camera(" + camera_to_json(c).dump() + ")"; });

  py::class_<GaussianCloud>(m, "GaussianCloud")
      .def(py::init([](const Array& positions, const Array& rotations, const Array& scales, const Array& opacities,
                       const Array& sh) {
             if (sh.ndim() != 3 || sh.shape(1) != 3) throw ArgumentError("sh must be an N x 3 x K array");
             const int k = static_cast<int>(sh.shape(2));
             int degree = 0;
             while (sh_coeff_count(degree) < k) ++degree;
             if (sh_coeff_count(degree) != k) throw ArgumentError("sh must hold (degree+1)^2 coefficients per channel");
             GaussianCloud c(0, degree);
             c.positions = array_to_rows<3>(positions, "positions");
             c.rotations = array_to_rows<4>(rotations, "rotations");
             c.scales = array_to_rows<3>(scales, "scales");
             c.opacities.assign(opacities.data(), opacities.data() + opacities.size());
             c.sh.assign(sh.data(), sh.data() + sh.size());
             c.set_active_sh_degree(degree);
             c.validate();
             return c;
           }),
           py::arg("positions"), py::arg("rotations"), py::arg("scales"), py::arg("opacities"), py::arg("sh"))
      .def_static("load", [](const std::filesystem::path& p) { return load_cloud(p); }, py::arg("path"))
      .def("save", [](const GaussianCloud& c, const std::filesystem::path& p) { save_cloud(c, p); }, py::arg("path"))
      .def("__len__", &GaussianCloud::size)
      .def_property_readonly("sh_degree", &GaussianCloud::sh_degree)
      .def_property_readonly("positions", [](const GaussianCloud& c) { return rows_to_array(c.positions); })
      .def_property_readonly("rotations", [](const GaussianCloud& c) { return rows_to_array(c.rotations); })
      .def_property_readonly("scales", [](const GaussianCloud& c) { return rows_to_array(c.scales); })
      .def_property_readonly("opacities",
                             [](const GaussianCloud& c) { return Array(static_cast<py::ssize_t>(c.size()), c.opacities.data()); })
      .def_property_readonly("sh", [](const GaussianCloud& c) {
        Array out({static_cast<py::ssize_t>(c.size()), py::ssize_t{3}, static_cast<py::ssize_t>(c.coeffs_per_channel())});
        std::copy(c.sh.begin(), c.sh.end(), out.mutable_data());
        return out;
      });

  py::class_<SceneBundle>(m, "SceneBundle")
      .def_static("load", [](const std::filesystem::path& p) { return load_scene(p); }, py::arg("path"))
      .def("save", [](const SceneBundle& b, const std::filesystem::path& p) { save_scene(b, p); }, py::arg("path"))
      .def("__len__", [](const SceneBundle& b) { return b.records.size(); })
      .def("indices", &SceneBundle::indices, py::arg("protocol"), py::arg("part"))
      .def_property_readonly("splits",
                             [](const SceneBundle& b) {
                               std::vector<std::string> names;
                               for (const auto& [name, s] : b.splits) names.push_back(name);
                               return names;
                             })
      .def("camera", [](const SceneBundle& b, int i) { return b.records.at(static_cast<std::size_t>(i)).camera; })
      .def("image", [](const SceneBundle& b, int i) { return to_array(b.records.at(static_cast<std::size_t>(i)).rgb); })
      .def("depth", [](const SceneBundle& b, int i) -> py::object {
        const auto& d = b.records.at(static_cast<std::size_t>(i)).depth;
        return d ? py::object(to_array(*d)) : py::none();
      });

  m.def("synthesize",
        [](const py::object& spec) {
          const SyntheticSpec s = SyntheticSpec::from_json(to_json(spec).dump());
          SyntheticScene scene = generate(s);
          return py::make_tuple(std::move(scene.bundle), std::move(scene.ground_truth));
        },
        py::arg("spec") = py::none(), "Synthetic scene from a spec; returns (bundle, ground-truth cloud).");

  m.def("render",
        [](const GaussianCloud& cloud, const Camera& camera, const Vec3& background) {
          RenderSettings st;
          st.background = background;
          RenderOutput r;
          {
            py::gil_scoped_release release;
            r = render(cloud, camera, st);
          }
          return render_dict(r);
        },
        py::arg("cloud"), py::arg("camera"), py::arg("background") = Vec3::Zero(),
        "Render color, depth, alpha and distortion images.");

  m.def("default_view", &default_view, py::arg("cloud"), py::arg("width") = 256, py::arg("height") = 256);

  m.def("loss_gs", [](const Array& r, const Array& t, double lambda_dssim) {
    return loss_pair(loss_gs(to_image(r), to_image(t), lambda_dssim));
  }, py::arg("rendered"), py::arg("target"), py::arg("lambda_dssim") = 0.2);
  m.def("loss_depth", [](const Array& r, const Array& t) {
    const Image target = to_image(t);
    return loss_pair(loss_depth(to_image(r), target, valid_depth_mask(target)));
  }, py::arg("rendered"), py::arg("target"), "Masked L1 over pixels where the target depth is positive.");
  m.def("loss_tv", [](const Array& d) { return loss_pair(loss_tv(to_image(d))); }, py::arg("depth"));
  m.def("loss_distortion", [](const Array& d) { return loss_pair(loss_distortion(to_image(d))); }, py::arg("distortion"));
  m.def("psnr", [](const Array& a, const Array& b) { return psnr(to_image(a), to_image(b)); });
  m.def("ssim", [](const Array& a, const Array& b) { return ssim(to_image(a), to_image(b)); });

  m.def("train",
        [](const SceneBundle& bundle, const py::object& config, const std::string& split) {
          const TrainConfig cfg = TrainConfig::from_json(to_json(config).dump());
          const auto views = bundle.indices(split, "train");
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = train(bundle, cfg, views);
          }
          return py::make_tuple(std::move(r.cloud), r.report.to_json_lines());
        },
        py::arg("bundle"), py::arg("config") = py::none(), py::arg("split") = "all",
        "Train on the split's train views; returns (cloud, report as JSON lines).");

  m.def("evaluate",
        [](const GaussianCloud& cloud, const SceneBundle& bundle, const std::vector<int>& views) {
          return eval_dict(evaluate(cloud, bundle, views));
        },
        py::arg("cloud"), py::arg("bundle"), py::arg("views"));

  m.def("polar_decompose", [](const Array& F) {
    const PolarDecomposition d = polar_decompose(to_mat3(F));
    return py::make_tuple(from_mat3(d.R), from_mat3(d.P));
  }, py::arg("F"));
  m.def("farthest_point_sample",
        [](const Array& pts, int n, std::uint64_t seed) { return farthest_point_sample(array_to_rows<3>(pts, "points"), n, seed); },
        py::arg("points"), py::arg("n"), py::arg("seed") = 0);
  m.def("central_poke", [](const GaussianCloud& c, double magnitude) { return force_to(central_poke(c, magnitude)); },
        py::arg("cloud"), py::arg("magnitude"));

  py::class_<SceneSimulation>(m, "Simulation")
      .def(py::init([](const GaussianCloud& cloud, int nodes, const std::string& mode, std::uint64_t seed,
                       const py::object& params) {
             SimulationOptions o;
             o.nodes = nodes;
             o.mode = simulation_mode_from_string(mode);
             o.seed = seed;
             o.material = MaterialParams::from_json(to_json(params));
             return std::make_unique<SceneSimulation>(std::make_shared<const GaussianCloud>(cloud), o);
           }),
           py::arg("cloud"), py::arg("nodes") = 512, py::arg("mode") = "sparse", py::arg("seed") = 0,
           py::arg("params") = py::none())
      .def("advance_frame",
           [](SceneSimulation& s, const py::object& force) {
             if (force.is_none()) {
               s.advance_frame(nullptr);
             } else {
               const ForceEvent f = force_from(force.cast<py::dict>());
               s.advance_frame(&f);
             }
           },
           py::arg("force") = py::none(), "One frame of substeps, optionally under a force {position, direction, magnitude, radius}.")
      .def("reset", &SceneSimulation::reset)
      .def("set_params", [](SceneSimulation& s, const py::object& p) {
        s.set_material(MaterialParams::from_json(to_json(p), s.options().material));
      })
      .def_property_readonly("frame", &SceneSimulation::frame)
      .def_property_readonly("extent", &SceneSimulation::extent)
      .def_property_readonly("node_indices", &SceneSimulation::node_indices)
      .def_property_readonly("kinetic_energy", [](const SceneSimulation& s) { return s.simulator().kinetic_energy(); })
      .def_property_readonly("params", [](const SceneSimulation& s) { return from_json(s.options().material.to_json()); })
      .def("positions", [](const SceneSimulation& s) { return rows_to_array(s.deformed().cloud.positions); })
      .def("displacement", [](const SceneSimulation& s) {
        const auto d = s.displacement();
        return Array(static_cast<py::ssize_t>(d.size()), d.data());
      });

  m.def("bench",
        [](const GaussianCloud& cloud, int nodes, int frames) {
          BenchOptions o;
          o.nodes = nodes;
          o.frames = frames;
          auto c = std::make_shared<const GaussianCloud>(cloud);
          BenchResult r;
          {
            py::gil_scoped_release release;
            r = bench_simulation(c, o);
          }
          return from_json(r.to_json());
        },
        py::arg("cloud"), py::arg("nodes") = 512, py::arg("frames") = 3, "Sparse vs dense frame time.");
}
