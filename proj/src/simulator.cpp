// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/deformation.hpp>
#include <endosplat/errors.hpp>
#include <endosplat/knn.hpp>
#include <endosplat/simulator.hpp>

#include "json_util.hpp"

#include <algorithm>
#include <cmath>

namespace endosplat {

using json = nlohmann::json;
using detail::read_field;

namespace {

// Grid nodes this close to the border get zero velocity.
constexpr int kBorderCells = 2;

struct Stencil {
  Eigen::Vector3i base;
  Vec3 fx;
  double w[3][3];
};

Stencil stencil_of(const Vec3& x, const GridSpec& g) {
  Stencil s;
  const Vec3 xp = (x - g.origin) / g.dx;
  for (int a = 0; a < 3; ++a) {
    s.base[a] = static_cast<int>(std::floor(xp[a] - 0.5));
    const double f = xp[a] - s.base[a];
    s.fx[a] = f;
    s.w[a][0] = 0.5 * (1.5 - f) * (1.5 - f);
    s.w[a][1] = 0.75 - (f - 1.0) * (f - 1.0);
    s.w[a][2] = 0.5 * (f - 0.5) * (f - 0.5);
  }
  return s;
}

bool inside(const Stencil& s, const GridSpec& g) {
  for (int a = 0; a < 3; ++a) {
    if (s.base[a] < 0 || s.base[a] + 2 >= g.dims[a]) return false;
  }
  return true;
}

}  // namespace

void MaterialParams::validate() const {
  if (!(youngs_modulus > 0.0)) throw ConfigError("Young's modulus must be positive");
  if (!(poisson_ratio >= 0.0 && poisson_ratio < 0.5)) throw ConfigError("Poisson ratio must lie in [0, 0.5)");
  if (!(density > 0.0)) throw ConfigError("density must be positive");
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (substeps <= 0) throw ConfigError("substeps must be positive");
  if (damping < 0.0) throw ConfigError("damping must be nonnegative");
  if (grid_resolution < 0) throw ConfigError("grid_resolution must be nonnegative");
  if (anchor_margin < 0.0) throw ConfigError("anchor_margin must be nonnegative");
  if (!(cfl > 0.0)) throw ConfigError("cfl must be positive");
  if (!gravity.allFinite()) throw ConfigError("gravity must be finite");
}

double MaterialParams::mu() const { return youngs_modulus / (2.0 * (1.0 + poisson_ratio)); }

double MaterialParams::lambda() const {
  return youngs_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
}

MaterialParams MaterialParams::from_json(const json& j, MaterialParams p) {
  if (!j.is_object()) throw ConfigError("material params must be a JSON object");
  detail::reject_unknown(j,
                         {"youngs_modulus", "poisson_ratio", "density", "gravity", "grid_resolution", "dt", "substeps",
                          "damping", "anchor_margin", "cfl"},
                         "material params");
  try {
    read_field(j, "youngs_modulus", p.youngs_modulus);
    read_field(j, "poisson_ratio", p.poisson_ratio);
    read_field(j, "density", p.density);
    if (j.contains("gravity")) p.gravity = detail::vec3_from_json(j.at("gravity"), "gravity");
    read_field(j, "grid_resolution", p.grid_resolution);
    read_field(j, "dt", p.dt);
    read_field(j, "substeps", p.substeps);
    read_field(j, "damping", p.damping);
    read_field(j, "anchor_margin", p.anchor_margin);
    read_field(j, "cfl", p.cfl);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("material params: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  p.validate();
  return p;
}

json MaterialParams::to_json() const {
  return json{{"youngs_modulus", youngs_modulus}, {"poisson_ratio", poisson_ratio},
              {"density", density},               {"gravity", detail::vec3_to_json(gravity)},
              {"grid_resolution", grid_resolution}, {"dt", dt},
              {"substeps", substeps},             {"damping", damping},
              {"anchor_margin", anchor_margin},   {"cfl", cfl}};
}

void ForceEvent::validate() const {
  if (!point.allFinite() || !direction.allFinite()) throw ArgumentError("force point and direction must be finite");
  if (std::abs(direction.norm() - 1.0) > 1e-9) throw ArgumentError("force direction must be a unit vector");
  if (!(magnitude >= 0.0)) throw ArgumentError("force magnitude must be nonnegative");
  if (!(radius > 0.0)) throw ArgumentError("force radius must be positive");
}

ControlNodeSet ControlNodeSet::at_rest(std::span<const Vec3> positions, double volume, double density) {
  if (!(volume > 0.0)) throw ArgumentError("node volume must be positive");
  ControlNodeSet n;
  const std::size_t count = positions.size();
  n.rest.assign(positions.begin(), positions.end());
  n.position = n.rest;
  n.velocity.assign(count, Vec3::Zero());
  n.F.assign(count, Mat3::Identity());
  n.C.assign(count, Mat3::Zero());
  n.volume.assign(count, volume);
  n.mass.assign(count, density * volume);
  n.anchored.assign(count, 0);
  return n;
}

void ControlNodeSet::reset_to_rest() {
  position = rest;
  std::fill(velocity.begin(), velocity.end(), Vec3::Zero());
  std::fill(F.begin(), F.end(), Mat3::Identity());
  std::fill(C.begin(), C.end(), Mat3::Zero());
}

double mean_nearest_spacing(std::span<const Vec3> points) {
  if (points.size() < 2) return 0.0;
  KdTree tree(points);
  double sum = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    sum += tree.nearest(points[i], 1, static_cast<int>(i)).front().distance;
  }
  return sum / static_cast<double>(points.size());
}

int anchor_box_rim(ControlNodeSet& nodes, const Vec3& lo, const Vec3& hi, double margin) {
  const Vec3 size = hi - lo;
  int axes[3] = {0, 1, 2};
  std::sort(axes, axes + 3, [&](int a, int b) { return size[a] > size[b] || (size[a] == size[b] && a < b); });
  int pinned = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Vec3& p = nodes.rest[i];
    bool pin = false;
    for (int t = 0; t < 2; ++t) {
      const int a = axes[t];
      if (p[a] - lo[a] <= margin || hi[a] - p[a] <= margin) pin = true;
    }
    nodes.anchored[i] = pin ? 1 : 0;
    pinned += pin ? 1 : 0;
  }
  return pinned;
}

GridSpec GridSpec::covering(std::span<const Vec3> points, double spacing, int resolution, int max_cells, double pad) {
  if (points.empty()) throw ArgumentError("grid needs at least one point");
  Vec3 lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 size = hi - lo;
  const double longest = size.maxCoeff();
  const double span = longest * (1.0 + 2.0 * pad);
  GridSpec g;
  if (resolution > 0 && longest > 0.0) {
    g.dx = span / resolution;
  } else if (spacing > 0.0) {
    g.dx = 2.0 * spacing;
    const int border = 2 * (kBorderCells + 2);
    if (longest > 0.0 && span / g.dx > max_cells - border) g.dx = span / (max_cells - border);
  } else {
    g.dx = longest > 0.0 ? span / 16.0 : 1.0;
  }
  const double margin = std::max(pad * longest, (kBorderCells + 2) * g.dx);
  g.origin = lo - Vec3::Constant(margin);
  for (int a = 0; a < 3; ++a) g.dims[a] = static_cast<int>(std::ceil((size[a] + 2.0 * margin) / g.dx)) + 1;
  return g;
}

double corotated_energy_density(const Mat3& F, double mu, double lambda) {
  const Mat3 R = polar_decompose(F).R;
  const double J = F.determinant();
  return mu * (F - R).squaredNorm() + 0.5 * lambda * (J - 1.0) * (J - 1.0);
}

Simulator::Simulator(ControlNodeSet nodes, const MaterialParams& params, const GridSpec& grid)
    : nodes_(std::move(nodes)), params_(params), grid_(grid) {
  params_.validate();
  const std::size_t n = nodes_.size();
  if (nodes_.rest.size() != n || nodes_.velocity.size() != n || nodes_.F.size() != n || nodes_.C.size() != n ||
      nodes_.mass.size() != n || nodes_.volume.size() != n || nodes_.anchored.size() != n) {
    throw StructuralError("control node columns differ in length");
  }
  if (!(grid_.dx > 0.0) || (grid_.dims.array() < 3).any()) throw ArgumentError("grid must have positive cell size");
  check_cfl();
  cells_.assign(static_cast<std::size_t>(grid_.dims.prod()), Eigen::Vector4d::Zero());
  marked_.assign(cells_.size(), 0);
}

void Simulator::set_params(const MaterialParams& params) {
  params.validate();
  const MaterialParams old = params_;
  params_ = params;
  try {
    check_cfl();
  } catch (...) {
    params_ = old;
    throw;
  }
}

void Simulator::check_cfl() const {
  const double wave = std::sqrt((params_.lambda() + 2.0 * params_.mu()) / params_.density);
  if (params_.dt * wave > params_.cfl * grid_.dx) {
    throw ConfigError("dt " + std::to_string(params_.dt) + " violates the CFL guard (p-wave speed " +
                      std::to_string(wave) + " m/s, cell " + std::to_string(grid_.dx) + " m)");
  }
}

void Simulator::fault(const std::string& what, std::size_t node) const {
  json d{{"substep", substeps_},
         {"node", node},
         {"position", detail::vec3_to_json(nodes_.position[node])},
         {"velocity", detail::vec3_to_json(nodes_.velocity[node])},
         {"det_F", nodes_.F[node].determinant()}};
  throw SimulationFault(what, d.dump());
}

std::vector<Vec3> Simulator::node_forces(const ForceEvent& force) const {
  std::vector<Vec3> out(nodes_.size(), Vec3::Zero());
  if (!force.active || force.magnitude == 0.0) return out;
  std::vector<double> fall(nodes_.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_.anchored[i]) continue;
    const double r = (nodes_.position[i] - force.point).norm() / force.radius;
    if (r < 1.0) {
      fall[i] = 1.0 - r * r;
      total += fall[i];
    }
  }
  if (total <= 0.0) return out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (fall[i] > 0.0) out[i] = force.direction * (force.magnitude * fall[i] / total);
  }
  return out;
}

void Simulator::substep(const ForceEvent* force) {
  const double dt = params_.dt, dx = grid_.dx;
  const double d_inv = 4.0 / (dx * dx);
  const double mu = params_.mu(), la = params_.lambda();
  const int ny = grid_.dims[1], nz = grid_.dims[2];
  auto cell_index = [&](int i, int j, int k) {
    return (static_cast<std::size_t>(i) * ny + static_cast<std::size_t>(j)) * nz + static_cast<std::size_t>(k);
  };
  std::vector<Vec3> ext;
  if (force != nullptr && force->active && force->magnitude > 0.0) ext = node_forces(*force);

  // Particle to grid.
  for (std::size_t p = 0; p < nodes_.size(); ++p) {
    const Vec3& x = nodes_.position[p];
    if (!x.allFinite() || !nodes_.velocity[p].allFinite()) fault("non-finite node state", p);
    const Stencil s = stencil_of(x, grid_);
    if (!inside(s, grid_)) fault("node left the simulation grid", p);
    const Mat3& F = nodes_.F[p];
    const double J = F.determinant();
    if (!(J > 0.0) || !std::isfinite(J)) fault("inverted deformation gradient", p);
    const Mat3 R = polar_decompose(F).R;
    const Mat3 PFt = 2.0 * mu * (F - R) * F.transpose() + Mat3::Identity() * (la * (J - 1.0) * J);
    const Mat3 affine = (-dt * nodes_.volume[p] * d_inv) * PFt + nodes_.mass[p] * nodes_.C[p];
    Vec3 mv = nodes_.mass[p] * nodes_.velocity[p];
    if (!ext.empty()) mv += dt * ext[p];
    const double m = nodes_.mass[p];
    const bool pinned = nodes_.anchored[p] != 0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double wij = s.w[0][i] * s.w[1][j];
        for (int k = 0; k < 3; ++k) {
          const double w = wij * s.w[2][k];
          const Vec3 dpos = (Vec3(i, j, k) - s.fx) * dx;
          const std::size_t c = cell_index(s.base[0] + i, s.base[1] + j, s.base[2] + k);
          Eigen::Vector4d& cell = cells_[c];
          if (!marked_[c]) {
            marked_[c] = 1;
            touched_.push_back(static_cast<int>(c));
          }
          if (pinned) marked_[c] = 2;
          cell.head<3>() += w * (mv + affine * dpos);
          cell.w() += w * m;
        }
      }
    }
  }

  // Grid update.
  const double keep = std::exp(-params_.damping * dt);
  const Vec3 g_dt = params_.gravity * dt;
  for (int c : touched_) {
    Eigen::Vector4d& cell = cells_[static_cast<std::size_t>(c)];
    if (cell.w() <= 0.0) {
      cell.head<3>().setZero();
      continue;
    }
    Vec3 v = cell.head<3>() / cell.w() + g_dt;
    v *= keep;
    const int i = c / (ny * nz), j = (c / nz) % ny, k = c % nz;
    if (marked_[static_cast<std::size_t>(c)] == 2 || i < kBorderCells || j < kBorderCells || k < kBorderCells ||
        i >= grid_.dims[0] - kBorderCells || j >= ny - kBorderCells || k >= nz - kBorderCells) {
      v.setZero();
    }
    cell.head<3>() = v;
  }

  // Grid to particle.
  double max_speed = 0.0;
  std::size_t fastest = 0;
  for (std::size_t p = 0; p < nodes_.size(); ++p) {
    const Stencil s = stencil_of(nodes_.position[p], grid_);
    Vec3 v = Vec3::Zero();
    Mat3 B = Mat3::Zero();
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double wij = s.w[0][i] * s.w[1][j];
        for (int k = 0; k < 3; ++k) {
          const double w = wij * s.w[2][k];
          const Vec3 dpos = (Vec3(i, j, k) - s.fx) * dx;
          const Vec3 gv = cells_[cell_index(s.base[0] + i, s.base[1] + j, s.base[2] + k)].head<3>();
          v += w * gv;
          B += w * gv * dpos.transpose();
        }
      }
    }
    const Mat3 C = d_inv * B;
    nodes_.F[p] = (Mat3::Identity() + dt * C) * nodes_.F[p];
    if (nodes_.anchored[p]) {
      nodes_.velocity[p].setZero();
      nodes_.C[p].setZero();
      nodes_.position[p] = nodes_.rest[p];
      continue;
    }
    nodes_.velocity[p] = v;
    nodes_.C[p] = C;
    nodes_.position[p] += dt * v;
    const double speed = v.norm();
    if (!(speed <= max_speed)) {
      max_speed = speed;
      fastest = p;
    }
  }
  for (int c : touched_) {
    cells_[static_cast<std::size_t>(c)].setZero();
    marked_[static_cast<std::size_t>(c)] = 0;
  }
  touched_.clear();
  ++substeps_;
  if (!std::isfinite(max_speed)) fault("non-finite node velocity", fastest);
  if (max_speed * dt > dx) fault("node moved more than one cell in a substep", fastest);
}

void Simulator::advance_frame(const ForceEvent* force) {
  for (int s = 0; s < params_.substeps; ++s) substep(force);
}

Vec3 Simulator::momentum() const {
  Vec3 m = Vec3::Zero();
  for (std::size_t p = 0; p < nodes_.size(); ++p) m += nodes_.mass[p] * nodes_.velocity[p];
  return m;
}

double Simulator::kinetic_energy() const {
  double e = 0.0;
  for (std::size_t p = 0; p < nodes_.size(); ++p) e += 0.5 * nodes_.mass[p] * nodes_.velocity[p].squaredNorm();
  return e;
}

double Simulator::elastic_energy() const {
  const double mu = params_.mu(), la = params_.lambda();
  double e = 0.0;
  for (std::size_t p = 0; p < nodes_.size(); ++p) e += nodes_.volume[p] * corotated_energy_density(nodes_.F[p], mu, la);
  return e;
}

}  // namespace endosplat
