// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/rasterizer.hpp>
#include <endosplat/scene.hpp>

#include <span>
#include <vector>

namespace endosplat {

/// Regularization weights of the training objective.
struct LossWeights {
  double depth = 0.5;
  double distortion = 0.1;
  double tv = 1.0;
  /// Mix between L1 and D-SSIM inside the photometric term.
  double dssim = 0.2;

  void validate() const;
};

/// A scalar loss and its gradient with respect to the image it was computed on.
struct ImageLoss {
  double value = 0.0;
  Image grad;
};

struct DepthLoss : ImageLoss {
  /// Set when the mask holds no valid pixel; value is then 0.
  bool no_valid_pixels = false;
};

/// SSIM map statistics, 11x11 Gaussian window (sigma 1.5), zero padding,
/// C1 = 0.01^2, C2 = 0.03^2. Returns the mean SSIM over pixels and channels;
/// `grad_a`, when non-null, receives d(mean SSIM)/d(a).
double ssim_with_grad(const Image& a, const Image& b, Image* grad_a);

/// (1 - dssim) * L1 + dssim * (1 - SSIM) / 2 between rendered and target RGB.
ImageLoss loss_gs(const Image& rendered, const Image& target, double lambda_dssim);

/// Mean |target - rendered| over mask pixels. With `align_scale_shift`, the
/// rendered depth is first mapped through its least-squares affine fit to
/// the target; the gradient accounts for the fit.
DepthLoss loss_depth(const Image& rendered, const Image& target, std::span<const unsigned char> mask,
                     bool align_scale_shift = false);

/// Mean over pixels of |D(x+1,y)-D(x,y)| + |D(x,y+1)-D(x,y)| (anisotropic TV).
ImageLoss loss_tv(const Image& depth);

/// Mean of the per-pixel distortion image. The gradient image is constant.
ImageLoss loss_distortion(const Image& distortion);

struct ObjectiveOptions {
  LossWeights weights;
  bool align_depth = false;
  /// Use depth / alpha in the depth and TV terms instead of the raw blend.
  bool normalize_depth = false;
};

struct LossTerms {
  double gs = 0.0;
  double depth = 0.0;
  double distortion = 0.0;
  double tv = 0.0;
  double total = 0.0;
};

/// Objective value plus image gradients ready for render_backward.
struct ObjectiveResult {
  LossTerms terms;
  Image grad_rgb;
  Image grad_depth;
  Image grad_distortion;
  Image grad_alpha;
  bool depth_missing = false;

  ImageGradients image_gradients() const { return {&grad_rgb, &grad_depth, &grad_distortion, &grad_alpha}; }
};

/// L_GS + w.depth L_depth + w.distortion L_dist + w.tv L_TV on a training view.
/// With no target depth the depth term is dropped.
ObjectiveResult total_loss(const RenderOutput& rendered, const Image& target_rgb, const DepthMap* target_depth,
                           const ObjectiveOptions& options);

/// w.distortion L_dist + w.tv L_TV on a view without ground truth.
ObjectiveResult virtual_loss(const RenderOutput& rendered, const ObjectiveOptions& options);

}  // namespace endosplat
