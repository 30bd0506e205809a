// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/scene.hpp>

#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace endosplat {

struct RenderSettings {
  Vec3 background = Vec3::Zero();
  /// Camera-space z at or below which a Gaussian is culled.
  double near_plane = 0.01;
  /// Added to the diagonal of every screen-space covariance (px^2).
  double low_pass = 0.3;
  int tile_size = 16;
  /// Worker threads for the tile loops; 0 picks the hardware concurrency.
  int threads = 1;
};

// Per-pixel blending rules shared by every render path.
inline constexpr double kMinAlpha = 1.0 / 255.0;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinTransmittance = 1e-4;

/// A Gaussian projected to screen space.
struct Splat2D {
  Vec2 mean = Vec2::Zero();
  /// Screen covariance including the low-pass term.
  Mat2 cov = Mat2::Identity();
  /// Camera-space z of the center.
  double depth = 0.0;
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
  /// Half-widths of the box outside which alpha < kMinAlpha.
  Vec2 extent = Vec2::Zero();
};

/// EWA projection of a 3D Gaussian (position, covariance). Returns nullopt when
/// culled: behind the near plane or with a footprint that misses the image.
/// Color is left zero; opacity is taken from the argument.
std::optional<Splat2D> project(const Vec3& position, const Mat3& covariance, double opacity, const Camera& camera,
                               const RenderSettings& settings = {});

/// Projection of a full primitive including its view-dependent SH color.
std::optional<Splat2D> project(const GaussianPrimitive& primitive, int sh_degree, const Camera& camera,
                               const RenderSettings& settings = {});

/// Saved forward state consumed by the backward pass.
struct ForwardState;

struct RenderOutput {
  Image rgb;         // H x W x 3
  Image depth;       // sum_i z_i w_i (not normalized by alpha)
  Image alpha;       // 1 - final transmittance
  Image distortion;  // sum_{i<j} w_i w_j |z_i - z_j|
  std::shared_ptr<const ForwardState> state;
};

/// Tiled forward render. Gaussians are blended front to back in ascending
/// camera z, ties broken by original index.
RenderOutput render(const GaussianCloud& cloud, const Camera& camera, const RenderSettings& settings = {});

/// Render with per-Gaussian covariances supplied directly (deformed scenes).
/// The result has no backward support.
RenderOutput render(const GaussianCloud& cloud, std::span<const Mat3> covariances, const Camera& camera,
                    const RenderSettings& settings = {});

/// Image-space gradients of a scalar loss. Null entries are treated as zero.
struct ImageGradients {
  const Image* rgb = nullptr;
  const Image* depth = nullptr;
  const Image* distortion = nullptr;
  const Image* alpha = nullptr;
};

/// Gradients in the optimizer's parameterization.
struct CloudGradients {
  std::vector<Vec3> positions;
  /// d/d(raw quaternion) evaluated at the stored (normalized) rotation.
  std::vector<Quat> rotations;
  std::vector<Vec3> log_scales;
  std::vector<double> opacity_logits;
  std::vector<double> sh;
  /// |dL/d(mean2d)| in NDC units, accumulated per call; used for densification.
  std::vector<double> screen_grad_norm;
  /// 1 where the Gaussian was visible in the accumulated views.
  std::vector<int> visible_count;

  CloudGradients() = default;
  CloudGradients(std::size_t count, int sh_values_per_gaussian) { reset(count, sh_values_per_gaussian); }
  void reset(std::size_t count, int sh_values_per_gaussian);
  void set_zero();
  std::size_t size() const { return positions.size(); }
};

/// Adds the gradients of the loss whose image-space gradients are supplied to
/// `out`. Throws UsageError if `forward` does not belong to `cloud`.
void render_backward(const GaussianCloud& cloud, const RenderOutput& forward, const ImageGradients& grads,
                     CloudGradients& out);

CloudGradients render_backward(const GaussianCloud& cloud, const RenderOutput& forward, const ImageGradients& grads);

}  // namespace endosplat
