// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/rasterizer.hpp>
#include <endosplat/scene.hpp>

#include <cstdint>
#include <string>

namespace endosplat {

/// Parameters of a synthetic tissue scene: a bumpy heightfield patch covered
/// with flattened Gaussians and viewed from cameras on a shallow arc.
struct SyntheticSpec {
  std::size_t gaussian_count = 4000;
  /// Side length of the square patch (meters).
  double patch_size = 0.1;
  int bump_count = 14;
  /// Peak height of individual bumps (meters).
  double bump_height = 0.008;
  /// Layers of Gaussians stacked below the surface (0 = surface only).
  int subsurface_layers = 0;
  double layer_spacing = 0.004;

  /// Cameras sit on an arc in the x-z plane around the patch center.
  double arc_radius = 0.065;
  double arc_span_deg = 30.0;
  int camera_count = 100;
  int width = 128;
  int height = 128;
  double fov_deg = 60.0;

  /// Multiplicative per-image scale jitter (std) and additive noise (std, meters).
  double depth_scale_jitter = 0.0;
  double depth_noise = 0.0;

  /// Number of points in the SfM-like initialization cloud and their jitter (meters).
  std::size_t init_points = 1500;
  double init_jitter = 0.001;

  std::uint64_t seed = 0;

  void validate() const;
  static SyntheticSpec from_json(const std::string& text);
  std::string to_json() const;
};

struct SyntheticScene {
  GaussianCloud ground_truth;
  SceneBundle bundle;
  /// Noise-free rendered depth per record.
  std::vector<Image> clean_depth;
};

/// Deterministic given spec.seed. Splits hold the protocols "two_view"
/// (first and last camera), "pct_4" and "pct_25" (4% and 25% of the cameras,
/// evenly spaced along the arc) and "dense" (every camera not held out).
/// All share one held-out test set of at most 24 cameras.
SyntheticScene generate(const SyntheticSpec& spec);

/// Heightfield of the generated surface at (x, y).
double synthetic_height(const SyntheticSpec& spec, double x, double y);

}  // namespace endosplat
