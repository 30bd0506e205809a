// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/scene.hpp>

#include <json.hpp>

#include <span>
#include <vector>

namespace endosplat {

/// Elastic material and integrator settings.
struct MaterialParams {
  double youngs_modulus = 1.0e4;  // Pa
  double poisson_ratio = 0.45;
  double density = 1000.0;  // kg/m^3
  Vec3 gravity = Vec3::Zero();
  /// Cells along the longest grid axis; 0 derives the cell size from the
  /// node spacing.
  int grid_resolution = 0;
  double dt = 5.0e-4;  // s
  int substeps = 80;
  /// Grid velocities are scaled by exp(-damping dt) every substep (1/s).
  double damping = 10.0;
  /// Nodes closer than this fraction of the extent to the rim of the scene
  /// box (on its two widest axes) are pinned.
  double anchor_margin = 0.05;
  /// Upper bound on dt * p-wave speed / dx.
  double cfl = 0.5;

  void validate() const;
  /// Lame parameters (mu, lambda).
  double mu() const;
  double lambda() const;

  static MaterialParams from_json(const nlohmann::json& j, MaterialParams base);
  static MaterialParams from_json(const nlohmann::json& j) { return from_json(j, MaterialParams{}); }
  nlohmann::json to_json() const;
};

/// External push applied to nodes near `point`.
struct ForceEvent {
  Vec3 point = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double magnitude = 0.0;  // N
  double radius = 1.0;     // m
  bool active = true;

  void validate() const;
};

/// MPM particles. Rest positions are kept for anchoring and binding.
struct ControlNodeSet {
  std::vector<Vec3> rest;
  std::vector<Vec3> position;
  std::vector<Vec3> velocity;
  std::vector<Mat3> F;
  /// APIC affine velocity field.
  std::vector<Mat3> C;
  std::vector<double> mass;
  std::vector<double> volume;
  std::vector<unsigned char> anchored;

  std::size_t size() const { return position.size(); }
  /// Nodes at rest with F = I. Every node gets `volume` and density * volume.
  static ControlNodeSet at_rest(std::span<const Vec3> positions, double volume, double density);
  void reset_to_rest();
};

/// Mean distance from each point to its nearest other point; 0 for < 2 points.
double mean_nearest_spacing(std::span<const Vec3> points);

/// Pins nodes whose rest position lies within `margin` of the box faces
/// normal to the two widest axes of [lo, hi]. Returns the pinned count.
int anchor_box_rim(ControlNodeSet& nodes, const Vec3& lo, const Vec3& hi, double margin);

/// Uniform background grid. Cells are addressed by integer index; node i sits
/// at origin + i * dx.
struct GridSpec {
  Vec3 origin = Vec3::Zero();
  double dx = 1.0;
  Eigen::Vector3i dims = Eigen::Vector3i::Constant(1);

  /// Grid covering `points` with `pad` extra fraction of the box size on each
  /// side (at least 3 cells). The cell size is 2 * spacing unless that would
  /// exceed `max_cells` cells per axis; a positive `resolution` fixes the
  /// number of cells along the longest axis instead.
  static GridSpec covering(std::span<const Vec3> points, double spacing, int resolution = 0, int max_cells = 64,
                           double pad = 0.25);
};

/// Elastic potential of one fixed-corotated element, per unit volume.
double corotated_energy_density(const Mat3& F, double mu, double lambda);

/// MLS-MPM integrator (quadratic B-splines, APIC transfer, fixed-corotated
/// stress, sticky grid border). Grid nodes inside the stencil of an anchored
/// node are held at zero velocity. Serial and deterministic.
class Simulator {
 public:
  Simulator(ControlNodeSet nodes, const MaterialParams& params, const GridSpec& grid);

  /// One substep. `force` may be null or inactive.
  void substep(const ForceEvent* force = nullptr);
  /// params.substeps substeps.
  void advance_frame(const ForceEvent* force = nullptr);

  const ControlNodeSet& nodes() const { return nodes_; }
  ControlNodeSet& mutable_nodes() { return nodes_; }
  const MaterialParams& params() const { return params_; }
  const GridSpec& grid() const { return grid_; }
  /// Replaces the material; the CFL guard is re-checked.
  void set_params(const MaterialParams& params);
  long substeps_taken() const { return substeps_; }

  Vec3 momentum() const;
  double kinetic_energy() const;
  double elastic_energy() const;

  /// Per-node share of the force (N). Nodes within the radius receive
  /// magnitude * (1 - (r/R)^2) / sum of those falloffs.
  std::vector<Vec3> node_forces(const ForceEvent& force) const;

 private:
  void check_cfl() const;
  [[noreturn]] void fault(const std::string& what, std::size_t node) const;

  ControlNodeSet nodes_;
  MaterialParams params_;
  GridSpec grid_;
  // Per grid node: momentum then mass, later velocity.
  std::vector<Eigen::Vector4d> cells_;
  // 1 = touched this substep, 2 = touched by an anchored node.
  std::vector<unsigned char> marked_;
  std::vector<int> touched_;
  long substeps_ = 0;
};

}  // namespace endosplat
