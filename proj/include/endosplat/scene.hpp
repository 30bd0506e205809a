// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/math.hpp>

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace endosplat {

inline constexpr int kMaxShDegree = 3;

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// Row-major H x W x C image of doubles. Depth maps are single-channel images
/// where a value > 0 marks a valid pixel.
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const { return data_.empty(); }

  double& at(int x, int y, int c = 0) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int x, int y, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Image& other) const {
    return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

using DepthMap = Image;

/// Pixels of a depth map holding a positive depth.
std::vector<unsigned char> valid_depth_mask(const DepthMap& depth);

/// Pinhole camera with a COLMAP-style world-to-camera pose
/// (x right, y down, z forward). Pixel (i, j) samples image point (i, j).
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;
  int width = 1;
  int height = 1;
  Quat qvec = identity_quat();
  Vec3 tvec = Vec3::Zero();

  Mat3 rotation() const { return quat_to_matrix(qvec); }
  Vec3 to_camera(const Vec3& world) const { return rotation() * world + tvec; }
  /// Camera center in world coordinates.
  Vec3 center() const { return -(rotation().transpose() * tvec); }

  /// Throws ArgumentError when intrinsics or pose are out of range.
  void validate() const;

  static Camera from_center(const Vec3& center, const Mat3& camera_to_world, double fx, double fy,
                            double cx, double cy, int width, int height);
};

/// One Gaussian with post-activation parameters, as stored in files.
struct GaussianPrimitive {
  Vec3 position = Vec3::Zero();
  Quat rotation = identity_quat();
  Vec3 scale = Vec3::Ones();
  double opacity = 0.5;
  /// 3 channels x (degree+1)^2 coefficients, channel-major.
  std::vector<double> sh;

  void validate() const;
};

/// Sigma = R S S^T R^T.
Mat3 covariance_of(const Quat& rotation, const Vec3& scale);
Mat3 covariance_of(const GaussianPrimitive& primitive);

/// Column store of N Gaussians. Spherical-harmonic storage degree is fixed per
/// cloud; `active_sh_degree` caps which coefficients affect rendering.
class GaussianCloud {
 public:
  GaussianCloud() = default;
  GaussianCloud(std::size_t count, int sh_degree);

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
  int sh_degree() const { return sh_degree_; }
  int coeffs_per_channel() const { return sh_coeff_count(sh_degree_); }
  int active_sh_degree() const { return active_sh_degree_; }
  void set_active_sh_degree(int degree);

  double* sh_of(std::size_t i) { return sh.data() + i * 3 * coeffs_per_channel(); }
  const double* sh_of(std::size_t i) const { return sh.data() + i * 3 * coeffs_per_channel(); }

  GaussianPrimitive primitive(std::size_t i) const;
  void push_back(const GaussianPrimitive& primitive);
  void resize(std::size_t count);

  /// Rows reordered so that row k of the result is row order[k] of this cloud.
  GaussianCloud gathered(std::span<const std::size_t> order) const;

  /// Throws StructuralError on column-length mismatch, ArgumentError on
  /// out-of-range values.
  void validate() const;
  void normalize_rotations();

  std::vector<Vec3> positions;
  std::vector<Quat> rotations;
  std::vector<Vec3> scales;
  std::vector<double> opacities;
  std::vector<double> sh;

 private:
  int sh_degree_ = 0;
  int active_sh_degree_ = 0;
};

/// SH degree-0 coefficient producing `rgb` (renderer adds 0.5 to the SH sum).
double rgb_to_sh_dc(double rgb);
double sh_dc_to_rgb(double dc);

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> colors;  // [0,1]
};

struct TrainingRecord {
  std::string name;
  Camera camera;
  Image rgb;
  std::optional<DepthMap> depth;
};

/// Train/test record indices for one evaluation protocol.
struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

struct SceneBundle {
  std::vector<TrainingRecord> records;
  std::optional<PointCloud> init_points;
  std::map<std::string, Split> splits;

  void validate() const;
  /// Records of the named split part ("train" or "test"); "all" returns all indices.
  std::vector<int> indices(const std::string& protocol, const std::string& part) const;
};

}  // namespace endosplat
