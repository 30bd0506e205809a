// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/rasterizer.hpp>
#include <endosplat/scene.hpp>

#include <span>
#include <string>
#include <vector>

namespace endosplat {

inline constexpr double kPsnrCap = 100.0;

/// 20 log10(1 / sqrt(MSE)) for images in [0,1]; kPsnrCap when identical.
double psnr(const Image& a, const Image& b);

/// Mean SSIM, 11x11 Gaussian window with sigma 1.5.
double ssim(const Image& a, const Image& b);

/// Root mean squared difference over mask pixels; 0 for an empty mask.
double depth_rmse(const Image& a, const Image& b, std::span<const unsigned char> mask);

struct ViewMetrics {
  int view = -1;
  double psnr = 0.0;
  double ssim = 0.0;
  double depth_rmse = 0.0;
};

struct EvalResult {
  std::vector<ViewMetrics> views;
  double psnr = 0.0;
  double ssim = 0.0;
  double depth_rmse = 0.0;
};

struct EvalOptions {
  RenderSettings render;
  /// Compare depth / alpha instead of the raw blended depth.
  bool normalize_depth = false;
};

/// Renders each listed record and averages the per-view metrics. Views
/// without a depth map contribute no depth RMSE.
EvalResult evaluate(const GaussianCloud& cloud, const SceneBundle& bundle, std::span<const int> views,
                    const EvalOptions& options = {});

/// Depth image used for comparisons (raw or alpha-normalized).
Image comparable_depth(const RenderOutput& rendered, bool normalize);

}  // namespace endosplat
