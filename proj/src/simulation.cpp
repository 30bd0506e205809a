// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/metrics.hpp>
#include <endosplat/rasterizer.hpp>
#include <endosplat/simulation.hpp>

#include "json_util.hpp"

#include <chrono>
#include <cmath>

namespace endosplat {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void bounds(const GaussianCloud& cloud, Vec3& lo, Vec3& hi) {
  if (cloud.empty()) throw ArgumentError("cloud is empty");
  lo = hi = cloud.positions[0];
  for (const auto& p : cloud.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
}

}  // namespace

SimulationMode simulation_mode_from_string(const std::string& s) {
  if (s == "sparse") return SimulationMode::sparse;
  if (s == "dense") return SimulationMode::dense;
  throw ArgumentError("unknown simulation mode '" + s + "' (expected sparse or dense)");
}

std::string to_string(SimulationMode mode) { return mode == SimulationMode::sparse ? "sparse" : "dense"; }

double box_extent(const GaussianCloud& cloud) {
  Vec3 lo, hi;
  bounds(cloud, lo, hi);
  return (hi - lo).maxCoeff();
}

SceneSimulation::SceneSimulation(std::shared_ptr<const GaussianCloud> rest, const SimulationOptions& options)
    : rest_(std::move(rest)), options_(options) {
  if (!rest_) throw ArgumentError("no cloud");
  options_.material.validate();
  const GaussianCloud& cloud = *rest_;
  if (options_.nodes < 1) throw ArgumentError("node count must be positive");
  if (static_cast<std::size_t>(options_.nodes) > cloud.size()) {
    throw ArgumentError("node count " + std::to_string(options_.nodes) + " exceeds Gaussian count " +
                        std::to_string(cloud.size()));
  }
  Vec3 lo, hi;
  bounds(cloud, lo, hi);
  extent_ = (hi - lo).maxCoeff();
  rest_cov_ = covariances(cloud);

  node_indices_ = farthest_point_sample(cloud.positions, options_.nodes, options_.seed);
  std::vector<Vec3> node_pos;
  node_pos.reserve(node_indices_.size());
  for (int i : node_indices_) node_pos.push_back(cloud.positions[static_cast<std::size_t>(i)]);
  double spacing = mean_nearest_spacing(node_pos);
  if (!(spacing > 0.0)) spacing = extent_ > 0.0 ? extent_ / 8.0 : 1e-2;
  const double node_volume = spacing * spacing * spacing;
  const GridSpec grid = GridSpec::covering(cloud.positions, spacing, options_.material.grid_resolution);

  ControlNodeSet particles;
  if (options_.mode == SimulationMode::sparse) {
    binding_ = bind_nodes(cloud.positions, node_pos, options_.binding);
    particles = ControlNodeSet::at_rest(node_pos, node_volume, options_.material.density);
  } else {
    node_indices_.clear();
    const double v = node_volume * options_.nodes / static_cast<double>(cloud.size());
    particles = ControlNodeSet::at_rest(cloud.positions, v, options_.material.density);
  }
  anchor_box_rim(particles, lo, hi, options_.material.anchor_margin * extent_);
  sim_ = std::make_unique<Simulator>(std::move(particles), options_.material, grid);
}

void SceneSimulation::advance_frame(const ForceEvent* force) {
  sim_->advance_frame(force);
  ++frame_;
}

void SceneSimulation::reset() {
  ControlNodeSet nodes = sim_->nodes();
  nodes.reset_to_rest();
  sim_ = std::make_unique<Simulator>(std::move(nodes), sim_->params(), sim_->grid());
  frame_ = 0;
}

void SceneSimulation::set_material(const MaterialParams& params) {
  sim_->set_params(params);
  options_.material = params;
}

DeformedCloud SceneSimulation::deformed() const {
  if (options_.mode == SimulationMode::sparse) return deform_cloud(*rest_, rest_cov_, sim_->nodes(), binding_);
  const ControlNodeSet& n = sim_->nodes();
  DeformedCloud out{*rest_, std::vector<Mat3>(rest_->size())};
  for (std::size_t j = 0; j < rest_->size(); ++j) {
    out.cloud.positions[j] = n.position[j];
    out.covariances[j] = n.F[j] * rest_cov_[j] * n.F[j].transpose();
  }
  return out;
}

std::vector<double> SceneSimulation::displacement() const {
  const DeformedCloud d = deformed();
  std::vector<double> out(rest_->size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = (d.cloud.positions[j] - rest_->positions[j]).norm();
  return out;
}

const ForceEvent* ForceScript::at(int frame) const {
  const ForceEvent* hit = nullptr;
  for (const auto& e : events) {
    if (frame >= e.start && frame < e.end) hit = &e.event;
  }
  return hit;
}

ForceScript ForceScript::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("force script must be a JSON object");
  detail::reject_unknown(j, {"frames", "events"}, "force script");
  ForceScript s;
  try {
    detail::read_field(j, "frames", s.frames);
    if (j.contains("events")) {
      for (const auto& e : j.at("events")) {
        detail::reject_unknown(e, {"start", "end", "position", "direction", "magnitude", "radius"}, "force event");
        ScriptedForce f;
        f.start = e.at("start").get<int>();
        f.end = e.at("end").get<int>();
        f.event.point = detail::vec3_from_json(e.at("position"), "position");
        f.event.direction = detail::vec3_from_json(e.at("direction"), "direction");
        if (f.event.direction.norm() > 0.0) f.event.direction.normalize();
        f.event.magnitude = e.at("magnitude").get<double>();
        f.event.radius = e.at("radius").get<double>();
        f.event.validate();
        if (f.end < f.start) throw ConfigError("force event ends before it starts");
        s.events.push_back(f);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("force script: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("force script: ") + e.what());
  }
  if (s.frames <= 0) throw ConfigError("force script needs frames > 0");
  return s;
}

json ForceScript::to_json() const {
  json ev = json::array();
  for (const auto& e : events) {
    ev.push_back({{"start", e.start},
                  {"end", e.end},
                  {"position", detail::vec3_to_json(e.event.point)},
                  {"direction", detail::vec3_to_json(e.event.direction)},
                  {"magnitude", e.event.magnitude},
                  {"radius", e.event.radius}});
  }
  return json{{"frames", frames}, {"events", ev}};
}

std::vector<FrameStats> run_script(SceneSimulation& sim, const ForceScript& script) {
  std::vector<FrameStats> out;
  out.reserve(static_cast<std::size_t>(script.frames));
  for (int f = 0; f < script.frames; ++f) {
    const auto t0 = Clock::now();
    sim.advance_frame(script.at(f));
    FrameStats s;
    s.frame = static_cast<int>(sim.frame());
    s.sim_ms = ms_since(t0);
    const ControlNodeSet& n = sim.simulator().nodes();
    for (std::size_t i = 0; i < n.size(); ++i) {
      s.max_displacement = std::max(s.max_displacement, (n.position[i] - n.rest[i]).norm());
    }
    s.kinetic_energy = sim.simulator().kinetic_energy();
    out.push_back(s);
  }
  return out;
}

ForceEvent central_poke(const GaussianCloud& cloud, double magnitude) {
  Vec3 lo, hi;
  bounds(cloud, lo, hi);
  const Vec3 center = 0.5 * (lo + hi);
  int thin = 0;
  (hi - lo).minCoeff(&thin);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Vec3 d = cloud.positions[i] - center;
    d[thin] = 0.0;
    if (d.squaredNorm() < best_d) {
      best_d = d.squaredNorm();
      best = i;
    }
  }
  ForceEvent f;
  f.point = cloud.positions[best];
  f.direction = -Vec3::Unit(thin);
  f.magnitude = magnitude;
  f.radius = 0.1 * (hi - lo).maxCoeff();
  return f;
}

json BenchResult::to_json() const {
  json j{{"gaussians", gaussians},
         {"nodes", nodes},
         {"sparse", {{"ms_per_frame", sparse_ms_per_frame}, {"fps", sparse_fps()}}},
         {"dense", {{"ms_per_frame", dense_ms_per_frame}, {"fps", dense_fps()}}},
         {"speedup", speedup()}};
  j["psnr_sparse_vs_dense"] = psnr_sparse_vs_dense ? json(*psnr_sparse_vs_dense) : json(nullptr);
  return j;
}

BenchResult bench_simulation(std::shared_ptr<const GaussianCloud> cloud, const BenchOptions& options) {
  if (options.frames <= 0) throw ArgumentError("bench needs frames > 0");
  BenchResult r;
  r.gaussians = cloud->size();
  r.nodes = options.nodes;
  const ForceEvent poke = central_poke(*cloud, 0.5);
  std::optional<Image> renders[2];
  for (int m = 0; m < 2; ++m) {
    SimulationOptions so;
    so.mode = m == 0 ? SimulationMode::sparse : SimulationMode::dense;
    so.nodes = options.nodes;
    so.seed = options.seed;
    so.material = options.material;
    SceneSimulation sim(cloud, so);
    const auto t0 = Clock::now();
    DeformedCloud d;
    for (int f = 0; f < options.frames; ++f) {
      sim.advance_frame(&poke);
      d = sim.deformed();
    }
    const double ms = ms_since(t0) / options.frames;
    (m == 0 ? r.sparse_ms_per_frame : r.dense_ms_per_frame) = ms;
    if (options.camera) renders[m] = render(d.cloud, d.covariances, *options.camera).rgb;
  }
  if (renders[0] && renders[1]) r.psnr_sparse_vs_dense = psnr(*renders[0], *renders[1]);
  return r;
}

}  // namespace endosplat
