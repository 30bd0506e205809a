// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/deformation.hpp>
#include <endosplat/scene.hpp>
#include <endosplat/simulator.hpp>

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

namespace endosplat {

enum class SimulationMode { sparse, dense };

SimulationMode simulation_mode_from_string(const std::string& s);
std::string to_string(SimulationMode mode);

struct SimulationOptions {
  SimulationMode mode = SimulationMode::sparse;
  int nodes = 512;
  std::uint64_t seed = 0;
  BindingOptions binding;
  MaterialParams material;
};

/// Largest side of the axis-aligned box around the Gaussian centers.
double box_extent(const GaussianCloud& cloud);

/// A reconstructed cloud driven by MPM. In sparse mode FPS-sampled control
/// nodes carry the physics and the Gaussians follow through their binding; in
/// dense mode every Gaussian is a particle. Both modes share the grid and
/// total mass.
class SceneSimulation {
 public:
  SceneSimulation(std::shared_ptr<const GaussianCloud> rest, const SimulationOptions& options);

  void advance_frame(const ForceEvent* force = nullptr);
  DeformedCloud deformed() const;
  /// Rest state; frame counter back to 0.
  void reset();
  void set_material(const MaterialParams& params);

  const SimulationOptions& options() const { return options_; }
  const Simulator& simulator() const { return *sim_; }
  const GaussianCloud& rest() const { return *rest_; }
  /// FPS indices into the cloud (empty in dense mode).
  const std::vector<int>& node_indices() const { return node_indices_; }
  const BindingTable& binding() const { return binding_; }
  long frame() const { return frame_; }
  double extent() const { return extent_; }

  /// Current displacement of each Gaussian center from rest.
  std::vector<double> displacement() const;

 private:
  std::shared_ptr<const GaussianCloud> rest_;
  SimulationOptions options_;
  std::vector<Mat3> rest_cov_;
  std::vector<int> node_indices_;
  BindingTable binding_;
  std::unique_ptr<Simulator> sim_;
  long frame_ = 0;
  double extent_ = 0.0;
};

/// Timed force events for headless runs: the event is active on frames in
/// [start, end).
struct ScriptedForce {
  int start = 0;
  int end = 0;
  ForceEvent event;
};

struct ForceScript {
  int frames = 60;
  std::vector<ScriptedForce> events;

  /// The active event at `frame`, if any (the last listed wins).
  const ForceEvent* at(int frame) const;
  static ForceScript from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct FrameStats {
  int frame = 0;
  double sim_ms = 0.0;
  double max_displacement = 0.0;
  double kinetic_energy = 0.0;
};

/// Runs the script and returns per-frame statistics.
std::vector<FrameStats> run_script(SceneSimulation& sim, const ForceScript& script);

struct BenchOptions {
  int nodes = 512;
  int frames = 3;
  MaterialParams material;
  std::uint64_t seed = 0;
  /// When set, both modes render this camera after the poke and the PSNR of
  /// sparse against dense is reported.
  std::optional<Camera> camera;
};

struct BenchResult {
  std::size_t gaussians = 0;
  int nodes = 0;
  double sparse_ms_per_frame = 0.0;
  double dense_ms_per_frame = 0.0;
  std::optional<double> psnr_sparse_vs_dense;

  double sparse_fps() const { return 1000.0 / sparse_ms_per_frame; }
  double dense_fps() const { return 1000.0 / dense_ms_per_frame; }
  double speedup() const { return dense_ms_per_frame / sparse_ms_per_frame; }
  nlohmann::json to_json() const;
};

/// Times frames (physics plus deformation, no rendering) under a central poke.
BenchResult bench_simulation(std::shared_ptr<const GaussianCloud> cloud, const BenchOptions& options);

/// A poke at the cloud's center pushing along -z, radius 10% of the extent.
ForceEvent central_poke(const GaussianCloud& cloud, double magnitude);

}  // namespace endosplat
