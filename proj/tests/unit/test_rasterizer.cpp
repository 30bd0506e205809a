// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/rasterizer.hpp>

#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace endosplat;

namespace {

Camera axis_camera(int w = 64, int h = 64, double f = 100.0) {
  Camera c;
  c.fx = c.fy = f;
  c.cx = 0.5 * w;
  c.cy = 0.5 * h;
  c.width = w;
  c.height = h;
  return c;
}

GaussianCloud single(const Vec3& pos, double opacity, const Vec3& rgb, double scale = 0.05) {
  GaussianCloud c(1, 0);
  c.positions[0] = pos;
  c.scales[0] = Vec3::Constant(scale);
  c.opacities[0] = opacity;
  for (int ch = 0; ch < 3; ++ch) c.sh_of(0)[ch] = rgb_to_sh_dc(rgb[ch]);
  return c;
}

/// Scalar loss sum(w . outputs) with fixed random weight images.
struct Projection {
  Image rgb, depth, dist, alpha;

  Projection(const Camera& cam, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1, 1);
    rgb = Image(cam.width, cam.height, 3);
    depth = dist = alpha = Image(cam.width, cam.height, 1);
    for (auto* img : {&rgb, &depth, &dist, &alpha})
      for (auto& v : img->data()) v = u(rng);
  }

  double operator()(const RenderOutput& r) const {
    double s = 0;
    for (std::size_t i = 0; i < rgb.data().size(); ++i) s += rgb.data()[i] * r.rgb.data()[i];
    for (std::size_t i = 0; i < depth.data().size(); ++i) {
      s += depth.data()[i] * r.depth.data()[i] + dist.data()[i] * r.distortion.data()[i] +
           alpha.data()[i] * r.alpha.data()[i];
    }
    return s;
  }
  ImageGradients grads() const { return {&rgb, &depth, &dist, &alpha}; }
};

}  // namespace

TEST(Project, OnAxisIsotropic) {
  const Camera cam = axis_camera();
  auto s = project(Vec3(0, 0, 2), Mat3::Identity(), 0.5, cam);
  ASSERT_TRUE(s.has_value());
  EXPECT_NEAR(s->mean.x(), cam.cx, 1e-12);
  EXPECT_NEAR(s->mean.y(), cam.cy, 1e-12);
  EXPECT_NEAR(s->cov(0, 0), 2500.0 + 0.3, 1e-9);
  EXPECT_NEAR(s->cov(1, 1), 2500.0 + 0.3, 1e-9);
  EXPECT_NEAR(s->cov(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(s->depth, 2.0, 1e-12);
}

TEST(Project, BehindCameraCulled) {
  EXPECT_FALSE(project(Vec3(0, 0, -1), Mat3::Identity(), 0.5, axis_camera()).has_value());
  EXPECT_FALSE(project(Vec3(0, 0, 0.005), Mat3::Identity() * 1e-6, 0.5, axis_camera()).has_value());
}

TEST(Project, OffscreenCulled) {
  EXPECT_FALSE(project(Vec3(50, 0, 1), Mat3::Identity() * 1e-4, 0.9, axis_camera()).has_value());
}

TEST(Project, MatchesNumericJacobian) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const Camera cam = oracle::look_at(Vec3(u(rng), u(rng), -3 + u(rng)), Vec3(0.2 * u(rng), 0.2 * u(rng), 0), 60, 64, 64);
    const Vec3 mu(0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng));
    Quat q(u(rng), u(rng), u(rng), u(rng));
    const Mat3 sigma = oracle::covariance(q, Vec3(0.1 + 0.1 * u(rng), 0.05, 0.2));
    auto s = project(mu, sigma, 0.9, cam);
    ASSERT_TRUE(s.has_value());
    const Mat2 expected = oracle::numeric_screen_cov(cam, mu, sigma, 0.3);
    EXPECT_LT((s->cov - expected).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, expected.norm()));
    EXPECT_LT((s->mean - oracle::pixel_of(cam, mu)).norm(), 1e-9);
  }
}

TEST(Render, EmptyCloudIsBackground) {
  RenderSettings st;
  st.background = Vec3(0.1, 0.2, 0.3);
  const RenderOutput r = render(GaussianCloud(0, 0), axis_camera(20, 10), st);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 20; ++x) {
      EXPECT_EQ(r.rgb.at(x, y, 2), 0.3);
      EXPECT_EQ(r.alpha.at(x, y), 0.0);
      EXPECT_EQ(r.depth.at(x, y), 0.0);
    }
}

TEST(Render, ZeroSizedCameraRejected) {
  Camera cam = axis_camera();
  cam.width = 0;
  EXPECT_THROW(render(GaussianCloud(0, 0), cam), ArgumentError);
}

TEST(Render, SingleCenterPixel) {
  const Vec3 color(0.2, 0.5, 0.9);
  const RenderOutput r = render(single(Vec3(0, 0, 3), 0.8, color), axis_camera());
  for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(r.rgb.at(32, 32, ch), 0.8 * color[ch], 1e-12);
  EXPECT_NEAR(r.depth.at(32, 32), 0.8 * 3.0, 1e-12);
  EXPECT_NEAR(r.alpha.at(32, 32), 0.8, 1e-12);
  EXPECT_EQ(r.distortion.at(32, 32), 0.0);
}

TEST(Render, TwoSplatDistortion) {
  GaussianCloud c = single(Vec3(0, 0, 2), 0.5, Vec3(1, 0, 0));
  c.push_back(single(Vec3(0, 0, 3), 0.6, Vec3(0, 1, 0)).primitive(0));
  const RenderOutput r = render(c, axis_camera());
  const double w1 = 0.5, w2 = 0.6 * 0.5;
  EXPECT_NEAR(r.distortion.at(32, 32), w1 * w2 * 1.0, 1e-12);
  EXPECT_NEAR(r.depth.at(32, 32), w1 * 2 + w2 * 3, 1e-12);
}

TEST(Render, MatchesBruteForce) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> count(1, 200);
  RenderSettings st;
  st.background = Vec3(0.3, 0.1, 0.7);
  const Camera cam = oracle::look_at(Vec3::Zero(), Vec3(0, 0, 1), 50, 64, 64);
  for (int trial = 0; trial < 20; ++trial) {
    const GaussianCloud c = oracle::random_cloud(rng, static_cast<std::size_t>(count(rng)));
    const RenderOutput r = render(c, cam, st);
    const auto b = oracle::brute_render(c, cam, st.background);
    double worst = 0;
    for (std::size_t i = 0; i < b.rgb.size(); ++i) worst = std::max(worst, std::abs(b.rgb[i] - r.rgb.data()[i]));
    for (std::size_t i = 0; i < b.depth.size(); ++i) {
      worst = std::max(worst, std::abs(b.depth[i] - r.depth.data()[i]));
      worst = std::max(worst, std::abs(b.alpha[i] - r.alpha.data()[i]));
      worst = std::max(worst, std::abs(b.distortion[i] - r.distortion.data()[i]));
    }
    EXPECT_LT(worst, 1e-5) << "trial " << trial;
  }
}

TEST(Render, ThreadedMatchesSerial) {
  std::mt19937_64 rng(9);
  const GaussianCloud c = oracle::random_cloud(rng, 150);
  const Camera cam = oracle::look_at(Vec3::Zero(), Vec3(0, 0, 1), 50, 70, 50);
  RenderSettings par;
  par.threads = 4;
  const RenderOutput a = render(c, cam), b = render(c, cam, par);
  EXPECT_EQ(a.rgb.data(), b.rgb.data());
  EXPECT_EQ(a.distortion.data(), b.distortion.data());
}

TEST(Render, AlphaBoundsAndMonotone) {
  std::mt19937_64 rng(4);
  const Camera cam = oracle::look_at(Vec3::Zero(), Vec3(0, 0, 1), 50, 32, 32);
  GaussianCloud c = oracle::random_cloud(rng, 80);
  // Sorted by depth, adding splats one at a time never lowers accumulated alpha.
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return c.positions[a].z() < c.positions[b].z(); });
  const GaussianCloud sorted = c.gathered(order);
  Image prev(32, 32, 1);
  for (std::size_t k = 1; k <= sorted.size(); k += 7) {
    std::vector<std::size_t> prefix(k);
    std::iota(prefix.begin(), prefix.end(), 0u);
    const RenderOutput r = render(sorted.gathered(prefix), cam);
    for (std::size_t i = 0; i < prev.data().size(); ++i) {
      EXPECT_GE(r.alpha.data()[i], prev.data()[i] - 1e-12);
      EXPECT_LE(r.alpha.data()[i], 1.0);
      EXPECT_GE(r.distortion.data()[i], 0.0);
    }
    prev = r.alpha;
  }
}

TEST(Backward, ZeroGradientsGiveZero) {
  std::mt19937_64 rng(2);
  const GaussianCloud c = oracle::random_cloud(rng, 10);
  const Camera cam = oracle::look_at(Vec3::Zero(), Vec3(0, 0, 1), 30, 32, 32);
  const RenderOutput r = render(c, cam);
  const Image z3(32, 32, 3), z1(32, 32, 1);
  const CloudGradients g = render_backward(c, r, {&z3, &z1, &z1, &z1});
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(g.positions[i], Vec3::Zero());
    EXPECT_EQ(g.opacity_logits[i], 0.0);
  }
  for (double v : g.sh) EXPECT_EQ(v, 0.0);
}

TEST(Backward, CenterPixelDcRed) {
  const GaussianCloud c = single(Vec3(0, 0, 3), 0.7, Vec3(0.4, 0.4, 0.4), 0.1);
  const Camera cam = axis_camera(33, 33);
  const RenderOutput r = render(c, cam);
  Image g(33, 33, 3);
  g.at(16, 16, 0) = 1.0;
  const CloudGradients grads = render_backward(c, r, {&g, nullptr, nullptr, nullptr});
  EXPECT_NEAR(grads.sh[0], r.alpha.at(16, 16) * 0.28209479177387814, 1e-12);
  const double fd = oracle::central_difference([&](double h) {
    GaussianCloud w = c;
    w.sh_of(0)[0] += h;
    return render(w, cam).rgb.at(16, 16, 0);
  }, 0.0, 1e-6);
  EXPECT_NEAR(grads.sh[0], fd, 1e-8);
}

TEST(Backward, MismatchedStateIsUsageError) {
  std::mt19937_64 rng(3);
  const GaussianCloud c = oracle::random_cloud(rng, 10);
  const Camera cam = oracle::look_at(Vec3::Zero(), Vec3(0, 0, 1), 30, 32, 32);
  const RenderOutput r = render(c, cam);
  const GaussianCloud other = oracle::random_cloud(rng, 10);
  EXPECT_THROW(render_backward(other, r, {}), UsageError);
  EXPECT_THROW(render_backward(oracle::random_cloud(rng, 4), r, {}), UsageError);
  std::vector<Mat3> covs(c.size(), Mat3::Identity() * 0.01);
  const RenderOutput nd = render(c, covs, cam);
  EXPECT_THROW(render_backward(c, nd, {}), UsageError);
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const int degree = trial % 4;
    const GaussianCloud c = oracle::random_cloud(rng, 10, degree, 2.0, 3.0, 0.08, 0.3);
    const Camera cam = oracle::look_at(Vec3(0.1, -0.1, 0), Vec3(0, 0, 2.5), 24, 32, 32);
    RenderSettings st;
    st.background = Vec3(0.2, 0.3, 0.4);
    const Projection proj(cam, rng);
    const RenderOutput r = render(c, cam, st);
    const CloudGradients g = render_backward(c, r, proj.grads());
    const auto res = oracle::check_cloud_gradients(c, g, [&](const GaussianCloud& w) { return proj(render(w, cam, st)); });
    EXPECT_GT(res.checked, 50);
    EXPECT_LE(res.non_smooth, res.checked / 20);
    EXPECT_EQ(res.failed, 0) << "trial " << trial << " worst " << res.worst << " " << res.first_failure;
  }
}
