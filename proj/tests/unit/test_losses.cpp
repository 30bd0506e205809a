// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/losses.hpp>

#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace endosplat;

namespace {

void expect_gradients_close(const Image& analytic, const Image& numeric, double tol, double skip_below = 1e-9) {
  for (std::size_t i = 0; i < analytic.data().size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    if (std::abs(a) < skip_below && std::abs(n) < skip_below) continue;
    EXPECT_LT(std::abs(a - n) / std::max(std::abs(a), std::abs(n)), tol) << "entry " << i << " " << a << " vs " << n;
  }
}

/// Pushes every entry at least `gap` away from the matching entry of `ref`.
Image away_from(const Image& img, const Image& ref, double gap) {
  Image out = img;
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    const double d = out.data()[i] - ref.data()[i];
    if (std::abs(d) < gap) out.data()[i] = ref.data()[i] + (d >= 0 ? gap : -gap);
  }
  return out;
}

RenderOutput fake_render(std::mt19937_64& rng, int w, int h) {
  RenderOutput r;
  r.rgb = oracle::random_image(rng, w, h, 3);
  r.depth = oracle::random_image(rng, w, h, 1, 1.0, 3.0);
  r.alpha = oracle::random_image(rng, w, h, 1, 0.2, 1.0);
  r.distortion = oracle::random_image(rng, w, h, 1, 0.0, 0.1);
  return r;
}

}  // namespace

TEST(LossGs, IdentityIsZero) {
  std::mt19937_64 rng(1);
  const Image a = oracle::random_image(rng, 12, 9, 3);
  EXPECT_NEAR(loss_gs(a, a, 0.2).value, 0.0, 1e-12);
}

TEST(LossGs, PureL1ConstantDifference) {
  const Image a(8, 8, 3, 0.5), b(8, 8, 3, 0.4);
  EXPECT_NEAR(loss_gs(a, b, 0.0).value, 0.1, 1e-12);
}

TEST(LossGs, DimensionMismatch) {
  EXPECT_THROW(loss_gs(Image(4, 4, 3), Image(4, 5, 3), 0.2), ArgumentError);
}

TEST(LossGs, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Image b = oracle::random_image(rng, 13, 11, 3);
    const Image a = away_from(oracle::random_image(rng, 13, 11, 3), b, 1e-3);
    const ImageLoss l = loss_gs(a, b, 0.2);
    const Image fd = oracle::numeric_image_gradient(a, [&](const Image& x) { return loss_gs(x, b, 0.2).value; });
    expect_gradients_close(l.grad, fd, 1e-4);
  }
}

TEST(Ssim, MatchesDirectFormula) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Image a = oracle::random_image(rng, 20, 17, 3), b = oracle::random_image(rng, 20, 17, 3);
    EXPECT_NEAR(ssim_with_grad(a, b, nullptr), oracle::direct_ssim(a, b), 1e-10);
  }
}

TEST(LossDepth, Examples) {
  std::mt19937_64 rng(4);
  const Image r = oracle::random_image(rng, 10, 8, 1, 1, 2);
  std::vector<unsigned char> mask(r.pixel_count(), 1);
  EXPECT_NEAR(loss_depth(r, r, mask).value, 0.0, 1e-15);
  Image t = r;
  for (auto& v : t.data()) v += 0.5;
  EXPECT_NEAR(loss_depth(r, t, mask).value, 0.5, 1e-12);
  Image affine = r;
  for (auto& v : affine.data()) v = 2 * v + 1;
  EXPECT_NEAR(loss_depth(r, affine, mask, true).value, 0.0, 1e-12);
}

TEST(LossDepth, MaskExcludesPixels) {
  Image r(2, 1, 1), t(2, 1, 1);
  r.at(0, 0) = 1;
  r.at(1, 0) = 5;
  t.at(0, 0) = 1.5;
  t.at(1, 0) = 0;
  const std::vector<unsigned char> mask{1, 0};
  const DepthLoss l = loss_depth(r, t, mask);
  EXPECT_NEAR(l.value, 0.5, 1e-12);
  EXPECT_EQ(l.grad.at(1, 0), 0.0);
}

TEST(LossDepth, NoValidPixelsIsZeroWithFlag) {
  const Image r(3, 3, 1, 1.0), t(3, 3, 1, 0.0);
  const DepthLoss l = loss_depth(r, t, valid_depth_mask(t));
  EXPECT_EQ(l.value, 0.0);
  EXPECT_TRUE(l.no_valid_pixels);
}

TEST(LossDepth, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (bool align : {false, true}) {
    const Image t = oracle::random_image(rng, 9, 7, 1, 1, 3);
    Image r = oracle::random_image(rng, 9, 7, 1, 1, 3);
    r = away_from(r, t, 1e-3);
    std::vector<unsigned char> mask(r.pixel_count(), 1);
    mask[3] = mask[10] = 0;
    const DepthLoss l = loss_depth(r, t, mask, align);
    const Image fd = oracle::numeric_image_gradient(r, [&](const Image& x) { return loss_depth(x, t, mask, align).value; });
    expect_gradients_close(l.grad, fd, 1e-4);
  }
}

TEST(LossTv, Examples) {
  EXPECT_EQ(loss_tv(Image(5, 4, 1, 2.0)).value, 0.0);
  Image two(2, 1, 1);
  two.at(1, 0) = 1.0;
  EXPECT_NEAR(loss_tv(two).value, 0.5, 1e-15);
}

TEST(LossTv, MatchesDirectSumAndFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const Image d = oracle::random_image(rng, 11, 9, 1);
    double sum = 0;
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 11; ++x) {
        if (x + 1 < 11) sum += std::abs(d.at(x + 1, y) - d.at(x, y));
        if (y + 1 < 9) sum += std::abs(d.at(x, y + 1) - d.at(x, y));
      }
    const ImageLoss l = loss_tv(d);
    EXPECT_NEAR(l.value, sum / 99.0, 1e-12);
    const Image fd = oracle::numeric_image_gradient(d, [](const Image& x) { return loss_tv(x).value; });
    expect_gradients_close(l.grad, fd, 1e-4);
  }
}

TEST(LossDistortion, MeanAndGradient) {
  std::mt19937_64 rng(7);
  const Image d = oracle::random_image(rng, 6, 5, 1);
  double mean = 0;
  for (double v : d.data()) mean += v;
  mean /= 30.0;
  const ImageLoss l = loss_distortion(d);
  EXPECT_NEAR(l.value, mean, 1e-14);
  const Image fd = oracle::numeric_image_gradient(d, [](const Image& x) { return loss_distortion(x).value; });
  expect_gradients_close(l.grad, fd, 1e-6);
  EXPECT_EQ(loss_distortion(Image(4, 4, 1)).value, 0.0);
}

TEST(TotalLoss, ReducesToGsWithZeroWeights) {
  std::mt19937_64 rng(8);
  const RenderOutput r = fake_render(rng, 12, 10);
  const Image target = oracle::random_image(rng, 12, 10, 3);
  const Image tdepth = oracle::random_image(rng, 12, 10, 1, 1, 3);
  ObjectiveOptions o;
  o.weights = {0.0, 0.0, 0.0, 0.2};
  const ObjectiveResult res = total_loss(r, target, &tdepth, o);
  EXPECT_NEAR(res.terms.total, loss_gs(r.rgb, target, 0.2).value, 1e-14);
  for (double v : res.grad_depth.data()) EXPECT_EQ(v, 0.0);
}

TEST(TotalLoss, SingleDepthTermWithPerfectRgb) {
  std::mt19937_64 rng(9);
  const RenderOutput r = fake_render(rng, 12, 10);
  const Image tdepth = oracle::random_image(rng, 12, 10, 1, 1, 3);
  ObjectiveOptions o;
  o.weights = {1.0, 0.0, 0.0, 0.2};
  const ObjectiveResult res = total_loss(r, r.rgb, &tdepth, o);
  EXPECT_NEAR(res.terms.total, loss_depth(r.depth, tdepth, valid_depth_mask(tdepth)).value, 1e-12);
}

TEST(TotalLoss, RecomposesAndIsLinearInWeights) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 2);
  for (int trial = 0; trial < 10; ++trial) {
    const RenderOutput r = fake_render(rng, 14, 12);
    const Image target = oracle::random_image(rng, 14, 12, 3);
    const Image tdepth = oracle::random_image(rng, 14, 12, 1, 1, 3);
    ObjectiveOptions o;
    o.weights = {u(rng), 100 * u(rng), u(rng), 0.2};
    const ObjectiveResult res = total_loss(r, target, &tdepth, o);
    const double manual = loss_gs(r.rgb, target, 0.2).value +
                          o.weights.depth * loss_depth(r.depth, tdepth, valid_depth_mask(tdepth)).value +
                          o.weights.distortion * loss_distortion(r.distortion).value +
                          o.weights.tv * loss_tv(r.depth).value;
    EXPECT_NEAR(res.terms.total, manual, 1e-12);
    ObjectiveOptions doubled = o;
    doubled.weights.tv *= 2;
    const ObjectiveResult res2 = total_loss(r, target, &tdepth, doubled);
    EXPECT_NEAR(res2.terms.total - res.terms.total, o.weights.tv * res.terms.tv, 1e-12);
  }
}

TEST(TotalLoss, NormalizedDepthGradient) {
  std::mt19937_64 rng(11);
  RenderOutput r = fake_render(rng, 8, 7);
  const Image target = oracle::random_image(rng, 8, 7, 3);
  const Image tdepth = oracle::random_image(rng, 8, 7, 1, 1, 3);
  ObjectiveOptions o;
  o.normalize_depth = true;
  const ObjectiveResult res = total_loss(r, target, &tdepth, o);
  auto value = [&](const Image& depth, const Image& alpha) {
    RenderOutput w = r;
    w.depth = depth;
    w.alpha = alpha;
    return total_loss(w, target, &tdepth, o).terms.total;
  };
  const Image fd_d = oracle::numeric_image_gradient(r.depth, [&](const Image& d) { return value(d, r.alpha); });
  const Image fd_a = oracle::numeric_image_gradient(r.alpha, [&](const Image& a) { return value(r.depth, a); });
  expect_gradients_close(res.grad_depth, fd_d, 1e-4);
  expect_gradients_close(res.grad_alpha, fd_a, 1e-4);
}

TEST(VirtualLoss, Examples) {
  std::mt19937_64 rng(12);
  RenderOutput r = fake_render(rng, 10, 10);
  ObjectiveOptions zero;
  zero.weights = {0.5, 0.0, 0.0, 0.2};
  EXPECT_EQ(virtual_loss(r, zero).terms.total, 0.0);
  ObjectiveOptions o;
  const double expected = o.weights.distortion * loss_distortion(r.distortion).value + o.weights.tv * loss_tv(r.depth).value;
  EXPECT_NEAR(virtual_loss(r, o).terms.total, expected, 1e-12);
  r.depth = Image(10, 10, 1, 2.0);
  EXPECT_NEAR(virtual_loss(r, o).terms.total, o.weights.distortion * loss_distortion(r.distortion).value, 1e-12);
}

TEST(Losses, NonNegative) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const RenderOutput r = fake_render(rng, 12, 12);
    const Image target = oracle::random_image(rng, 12, 12, 3);
    const Image tdepth = oracle::random_image(rng, 12, 12, 1, 0, 3);
    const ObjectiveResult res = total_loss(r, target, &tdepth, {});
    EXPECT_GE(res.terms.gs, 0);
    EXPECT_GE(res.terms.depth, 0);
    EXPECT_GE(res.terms.tv, 0);
    EXPECT_GE(res.terms.distortion, 0);
  }
}

TEST(LossWeights, NegativeRejected) {
  LossWeights w;
  w.tv = -1;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(ObjectiveThroughRenderer, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  const Camera cam = oracle::look_at(Vec3(0.1, -0.1, 0), Vec3(0, 0, 2.5), 24, 32, 32);
  for (int trial = 0; trial < 4; ++trial) {
    const GaussianCloud c = oracle::random_cloud(rng, 10, 0, 2.0, 3.0, 0.08, 0.3);
    const GaussianCloud gt = oracle::random_cloud(rng, 10, 0, 2.0, 3.0, 0.08, 0.3);
    const RenderOutput ref = render(gt, cam);
    Image tdepth = ref.depth;
    ObjectiveOptions o;
    o.weights = {0.5, 10.0, 1.0, 0.2};
    const RenderOutput r = render(c, cam);
    const ObjectiveResult res = total_loss(r, ref.rgb, &tdepth, o);
    const CloudGradients g = render_backward(c, r, res.image_gradients());
    const auto check = oracle::check_cloud_gradients(
        c, g, [&](const GaussianCloud& w) { return total_loss(render(w, cam), ref.rgb, &tdepth, o).terms.total; });
    EXPECT_LE(check.non_smooth, check.checked / 20);
    EXPECT_EQ(check.failed, 0) << check.first_failure << " worst " << check.worst;
  }
}
