// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/scene.hpp>

#include <algorithm>
#include <cmath>

namespace endosplat {

namespace {
constexpr double kShC0 = 0.28209479177387814;
}

Image::Image(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 0 || height < 0 || channels <= 0) {
    throw ArgumentError("image dimensions must be nonnegative with at least one channel");
  }
  data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

std::vector<unsigned char> valid_depth_mask(const DepthMap& depth) {
  std::vector<unsigned char> mask(depth.pixel_count());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double d = depth.data()[i * depth.channels()];
    mask[i] = (std::isfinite(d) && d > 0.0) ? 1 : 0;
  }
  return mask;
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ArgumentError("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ArgumentError("camera image dimensions must be positive");
  if (!(cx > 0.0 && cx < width) || !(cy > 0.0 && cy < height)) {
    throw ArgumentError("camera principal point must lie inside the image");
  }
  if (std::abs(qvec.norm() - 1.0) > 1e-6) throw ArgumentError("camera quaternion is not unit length");
}

Camera Camera::from_center(const Vec3& center, const Mat3& camera_to_world, double fx, double fy,
                           double cx, double cy, int width, int height) {
  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = cx;
  cam.cy = cy;
  cam.width = width;
  cam.height = height;
  const Mat3 world_to_camera = camera_to_world.transpose();
  cam.qvec = matrix_to_quat(world_to_camera);
  cam.tvec = -(quat_to_matrix(cam.qvec) * center);
  return cam;
}

void GaussianPrimitive::validate() const {
  if (std::abs(rotation.norm() - 1.0) > 1e-6) throw ArgumentError("rotation quaternion is not unit length");
  if (!(scale.array() > 0.0).all()) throw ArgumentError("scales must be positive");
  if (!(opacity > 0.0 && opacity < 1.0)) throw ArgumentError("opacity must lie in (0,1)");
}

Mat3 covariance_of(const Quat& rotation, const Vec3& scale) {
  const Mat3 m = quat_to_matrix(rotation) * scale.asDiagonal();
  return m * m.transpose();
}

Mat3 covariance_of(const GaussianPrimitive& primitive) {
  return covariance_of(primitive.rotation, primitive.scale);
}

GaussianCloud::GaussianCloud(std::size_t count, int sh_degree)
    : sh_degree_(sh_degree), active_sh_degree_(sh_degree) {
  if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ArgumentError("SH degree must be in 0..3");
  resize(count);
}

void GaussianCloud::set_active_sh_degree(int degree) {
  active_sh_degree_ = std::clamp(degree, 0, sh_degree_);
}

void GaussianCloud::resize(std::size_t count) {
  positions.resize(count, Vec3::Zero());
  rotations.resize(count, identity_quat());
  scales.resize(count, Vec3::Ones());
  opacities.resize(count, 0.5);
  sh.resize(count * 3 * coeffs_per_channel(), 0.0);
}

GaussianPrimitive GaussianCloud::primitive(std::size_t i) const {
  GaussianPrimitive p;
  p.position = positions[i];
  p.rotation = rotations[i];
  p.scale = scales[i];
  p.opacity = opacities[i];
  const int k = 3 * coeffs_per_channel();
  p.sh.assign(sh_of(i), sh_of(i) + k);
  return p;
}

void GaussianCloud::push_back(const GaussianPrimitive& primitive) {
  const std::size_t k = 3 * coeffs_per_channel();
  if (primitive.sh.size() != k) throw StructuralError("primitive SH length does not match cloud degree");
  positions.push_back(primitive.position);
  rotations.push_back(primitive.rotation);
  scales.push_back(primitive.scale);
  opacities.push_back(primitive.opacity);
  sh.insert(sh.end(), primitive.sh.begin(), primitive.sh.end());
}

GaussianCloud GaussianCloud::gathered(std::span<const std::size_t> order) const {
  GaussianCloud out(order.size(), sh_degree_);
  out.active_sh_degree_ = active_sh_degree_;
  const std::size_t k = 3 * coeffs_per_channel();
  for (std::size_t dst = 0; dst < order.size(); ++dst) {
    const std::size_t src = order[dst];
    out.positions[dst] = positions[src];
    out.rotations[dst] = rotations[src];
    out.scales[dst] = scales[src];
    out.opacities[dst] = opacities[src];
    std::copy_n(sh.begin() + static_cast<std::ptrdiff_t>(src * k), k,
                out.sh.begin() + static_cast<std::ptrdiff_t>(dst * k));
  }
  return out;
}

void GaussianCloud::validate() const {
  const std::size_t n = positions.size();
  if (rotations.size() != n || scales.size() != n || opacities.size() != n ||
      sh.size() != n * 3 * static_cast<std::size_t>(coeffs_per_channel())) {
    throw StructuralError("Gaussian cloud columns have inconsistent lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!positions[i].allFinite()) throw ArgumentError("non-finite Gaussian position");
    if (std::abs(rotations[i].norm() - 1.0) > 1e-6) throw ArgumentError("rotation quaternion is not unit length");
    if (!(scales[i].array() > 0.0).all()) throw ArgumentError("scales must be positive");
    if (!(opacities[i] > 0.0 && opacities[i] < 1.0)) throw ArgumentError("opacity must lie in (0,1)");
  }
}

void GaussianCloud::normalize_rotations() {
  for (auto& q : rotations) q = normalized_quat(q);
}

double rgb_to_sh_dc(double rgb) { return (rgb - 0.5) / kShC0; }
double sh_dc_to_rgb(double dc) { return dc * kShC0 + 0.5; }

void SceneBundle::validate() const {
  if (records.size() < 2) throw ArgumentError("a scene bundle needs at least two records");
  for (const auto& r : records) {
    r.camera.validate();
    if (r.rgb.width() != r.camera.width || r.rgb.height() != r.camera.height) {
      throw StructuralError("image '" + r.name + "' does not match its camera dimensions");
    }
    if (r.depth && (r.depth->width() != r.camera.width || r.depth->height() != r.camera.height)) {
      throw StructuralError("depth map of '" + r.name + "' does not match its camera dimensions");
    }
  }
  for (const auto& [name, split] : splits) {
    for (int i : split.train) {
      if (i < 0 || i >= static_cast<int>(records.size())) throw StructuralError("split '" + name + "' index out of range");
    }
    for (int i : split.test) {
      if (i < 0 || i >= static_cast<int>(records.size())) throw StructuralError("split '" + name + "' index out of range");
    }
  }
}

std::vector<int> SceneBundle::indices(const std::string& protocol, const std::string& part) const {
  if (protocol.empty() || protocol == "all" || part == "all") {
    std::vector<int> all(records.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return all;
  }
  const auto it = splits.find(protocol);
  if (it == splits.end()) throw ConfigError("unknown split protocol '" + protocol + "'");
  if (part == "train") return it->second.train;
  if (part == "test") return it->second.test;
  throw ConfigError("split part must be 'train', 'test' or 'all'");
}

}  // namespace endosplat
