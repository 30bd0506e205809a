// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/metrics.hpp>
#include <endosplat/synthetic.hpp>
#include <endosplat/trainer.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace endosplat;

namespace {

const SyntheticScene& scene() {
  static const SyntheticScene s = [] {
    SyntheticSpec spec;
    spec.gaussian_count = 800;
    spec.width = 40;
    spec.height = 40;
    spec.camera_count = 20;
    spec.init_points = 300;
    spec.seed = 3;
    return generate(spec);
  }();
  return s;
}

TrainConfig quick_config(int iterations) {
  TrainConfig c;
  c.iterations = iterations;
  c.densify.start = 20;
  c.densify.interval = 20;
  c.densify.stop = iterations;
  return c;
}

GaussianPrimitive prim(const Vec3& p, double scale, double opacity) {
  GaussianPrimitive g;
  g.position = p;
  g.scale = Vec3::Constant(scale);
  g.opacity = opacity;
  g.sh = {0.1, 0.2, 0.3};
  return g;
}

}  // namespace

TEST(Initialize, FromPoints) {
  SceneBundle b = scene().bundle;
  b.init_points = PointCloud{{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 2, 0), Vec3(0, 0, 4)},
                             {Vec3(0.2, 0.4, 0.6), Vec3(1, 1, 1), Vec3(0, 0, 0), Vec3(0.5, 0.5, 0.5)}};
  const GaussianCloud c = initialize(b);
  ASSERT_EQ(c.size(), 4u);
  // Mean distance to the three other points.
  EXPECT_NEAR(c.scales[0].x(), (1.0 + 2.0 + 4.0) / 3.0, 1e-12);
  EXPECT_NEAR(c.scales[1].y(), (1.0 + std::sqrt(5.0) + std::sqrt(17.0)) / 3.0, 1e-12);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(c.opacities[i], 0.1, 1e-12);
    EXPECT_EQ(c.rotations[i], identity_quat());
  }
  EXPECT_NEAR(sh_dc_to_rgb(c.sh_of(0)[1]), 0.4, 1e-12);
}

TEST(Initialize, BackProjectsDepth) {
  SceneBundle b = scene().bundle;
  b.init_points.reset();
  const std::vector<int> views{4};
  const GaussianCloud c = initialize(b, views);
  ASSERT_GT(c.size(), 0u);
  const Camera& cam = b.records[4].camera;
  const Image& depth = *b.records[4].depth;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Vec3 pc = cam.to_camera(c.positions[i]);
    const double u = cam.fx * pc.x() / pc.z() + cam.cx, v = cam.fy * pc.y() / pc.z() + cam.cy;
    const int x = static_cast<int>(std::lround(u)), y = static_cast<int>(std::lround(v));
    EXPECT_NEAR(u, x, 1e-9);
    EXPECT_NEAR(v, y, 1e-9);
    EXPECT_EQ(x % 8, 0);
    EXPECT_EQ(y % 8, 0);
    EXPECT_NEAR(pc.z(), depth.at(x, y), 1e-12);
  }
  for (auto& r : b.records) r.depth.reset();
  EXPECT_THROW(initialize(b), InitializationError);
}

TEST(SceneExtent, BoundingSphereAboutCentroid) {
  const std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(2, 0, 0), Vec3(0, 2, 0), Vec3(0, 0, 2)};
  // Centroid (0.5, 0.5, 0.5); farthest point is any of the axis points.
  EXPECT_NEAR(scene_extent(p), std::sqrt(1.5 * 1.5 + 0.25 + 0.25), 1e-12);
}

TEST(Densify, CloneSplitPrune) {
  GaussianCloud c(0, 0);
  c.push_back(prim(Vec3(0, 0, 0), 0.001, 0.5));  // small, high gradient: clone
  c.push_back(prim(Vec3(1, 0, 0), 0.5, 0.5));    // large, high gradient: split
  c.push_back(prim(Vec3(2, 0, 0), 0.001, 0.5));  // low gradient: untouched
  c.push_back(prim(Vec3(3, 0, 0), 0.001, 1e-3)); // transparent: pruned
  const std::vector<double> grad{1.0, 1.0, 0.0, 0.0};
  DensifyConfig cfg;
  std::mt19937_64 rng(1);
  std::vector<long> source;
  const DensifyStats s = densify_and_prune(c, grad, cfg, 1.0, rng, &source);
  EXPECT_EQ(s.cloned, 1u);
  EXPECT_EQ(s.split, 1u);
  EXPECT_EQ(s.pruned, 1u);
  ASSERT_EQ(c.size(), 5u);  // 4 - 1 split + 1 clone + 2 children - 1 pruned
  ASSERT_EQ(source.size(), c.size());
  EXPECT_EQ(source[0], 0);
  EXPECT_EQ(source[1], 2);
  EXPECT_EQ(c.positions[2], Vec3(0, 0, 0));
  EXPECT_EQ(source[2], -1);
  for (int k : {3, 4}) {
    EXPECT_EQ(source[k], -1);
    EXPECT_NEAR(c.scales[k].x(), 0.5 / 1.6, 1e-12);
  }
}

TEST(Densify, PruneCapAndBudget) {
  GaussianCloud c(0, 0);
  for (int i = 0; i < 10; ++i) c.push_back(prim(Vec3(i, 0, 0), 0.001, 1e-4 * (i + 1)));
  DensifyConfig cfg;
  std::mt19937_64 rng(1);
  const std::vector<double> zero(10, 0.0);
  const DensifyStats s = densify_and_prune(c, zero, cfg, 1.0, rng);
  EXPECT_EQ(s.pruned, 5u);
  EXPECT_EQ(c.size(), 5u);
  EXPECT_NEAR(c.opacities[0], 6e-4, 1e-15);  // the most transparent ones went first

  GaussianCloud d(0, 0);
  for (int i = 0; i < 6; ++i) d.push_back(prim(Vec3(i, 0, 0), 0.001, 0.5));
  cfg.max_gaussians = 8;
  const std::vector<double> g{1, 5, 1, 4, 1, 3};
  densify_and_prune(d, g, cfg, 1.0, rng);
  EXPECT_EQ(d.size(), 8u);
  EXPECT_EQ(d.positions[6], Vec3(1, 0, 0));
  EXPECT_EQ(d.positions[7], Vec3(3, 0, 0));
  EXPECT_THROW(densify_and_prune(d, g, cfg, 1.0, rng), ArgumentError);
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
  TrainConfig c = quick_config(50);
  c.sh_degree = 2;
  const TrainConfig r = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(r.to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json(R"({"iters": 5})"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(R"({"iterations": 0})"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json("{"), FormatError);
}

TEST(Train, DeterministicAndLossDecreases) {
  const auto& b = scene().bundle;
  const auto views = b.indices("pct_25", "train");
  const TrainConfig cfg = quick_config(80);
  const TrainResult a = train(b, cfg, views);
  const TrainResult r = train(b, cfg, views);
  EXPECT_EQ(a.cloud.positions, r.cloud.positions);
  EXPECT_EQ(a.cloud.sh, r.cloud.sh);
  ASSERT_EQ(a.report.iterations.size(), 80u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += a.report.iterations[i].real.gs;
    last += a.report.iterations[70 + i].real.gs;
  }
  EXPECT_LT(last, 0.8 * first);
  EXPECT_FALSE(a.report.densify_events.empty());
  EXPECT_EQ(a.report.gaussian_counts.front().second, 300u);
}

TEST(Train, ShCapFreezesHigherBands) {
  const auto& b = scene().bundle;
  TrainConfig cfg = quick_config(15);
  cfg.densify.enabled = false;
  cfg.sh_degree = 2;
  cfg.sh_degree_cap = 0;
  GaussianCloud init = initialize(b, {}, 2);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 0.1);
  const int coeffs = init.coeffs_per_channel();
  for (std::size_t i = 0; i < init.size(); ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      for (int k = 1; k < coeffs; ++k) init.sh_of(i)[ch * coeffs + k] = n(rng);
    }
  }
  const TrainResult r = train(b, cfg, {}, &init);
  ASSERT_EQ(r.cloud.size(), init.size());
  EXPECT_EQ(r.cloud.active_sh_degree(), 0);
  bool dc_moved = false;
  for (std::size_t i = 0; i < init.size(); ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      dc_moved |= r.cloud.sh_of(i)[ch * coeffs] != init.sh_of(i)[ch * coeffs];
      for (int k = 1; k < coeffs; ++k) EXPECT_EQ(r.cloud.sh_of(i)[ch * coeffs + k], init.sh_of(i)[ch * coeffs + k]);
    }
  }
  EXPECT_TRUE(dc_moved);
}

TEST(Train, CallbackStopsEarlyAndBadViewsRejected) {
  const auto& b = scene().bundle;
  const TrainConfig cfg = quick_config(50);
  int calls = 0;
  const TrainResult r = train(b, cfg, {}, nullptr, [&](int it, const IterationRecord&) {
    ++calls;
    return it < 5;
  });
  EXPECT_EQ(calls, 5);
  const std::vector<int> bad{0, 99};
  EXPECT_THROW(train(b, cfg, bad), ArgumentError);
}

TEST(Train, MoreViewsGeneraliseBetter) {
  const auto& b = scene().bundle;
  const TrainConfig cfg = quick_config(150);
  const auto test = b.indices("dense", "test");
  const TrainResult dense = train(b, cfg, b.indices("dense", "train"));
  const TrainResult two = train(b, cfg, b.indices("two_view", "train"));
  EXPECT_GT(evaluate(dense.cloud, b, test).psnr, evaluate(two.cloud, b, test).psnr);
}
