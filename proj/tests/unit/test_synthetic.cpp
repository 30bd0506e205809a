// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/synthetic.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace endosplat;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.gaussian_count = 600;
  s.width = 32;
  s.height = 32;
  s.init_points = 200;
  s.seed = 5;
  return s;
}

}  // namespace

TEST(Synthetic, Deterministic) {
  const SyntheticScene a = generate(small_spec());
  const SyntheticScene b = generate(small_spec());
  EXPECT_EQ(a.ground_truth.positions, b.ground_truth.positions);
  ASSERT_EQ(a.bundle.records.size(), b.bundle.records.size());
  EXPECT_EQ(a.bundle.records[7].rgb.data(), b.bundle.records[7].rgb.data());
  SyntheticSpec other = small_spec();
  other.seed = 6;
  EXPECT_NE(generate(other).ground_truth.positions, a.ground_truth.positions);
}

TEST(Synthetic, CamerasOnArcLookingAtCenter) {
  const SyntheticSpec spec = small_spec();
  const SyntheticScene s = generate(spec);
  ASSERT_EQ(static_cast<int>(s.bundle.records.size()), spec.camera_count);
  const double step = spec.arc_span_deg * M_PI / 180.0 / (spec.camera_count - 1);
  const double chord = 2.0 * spec.arc_radius * std::sin(0.5 * step);
  for (int i = 0; i < spec.camera_count; ++i) {
    const Camera& c = s.bundle.records[i].camera;
    EXPECT_NEAR(c.center().norm(), spec.arc_radius, 1e-12);
    EXPECT_NEAR(c.center().y(), 0.0, 1e-12);
    // Origin projects to the principal point.
    const Vec3 o = c.to_camera(Vec3::Zero());
    EXPECT_NEAR(o.x(), 0.0, 1e-12);
    EXPECT_NEAR(o.y(), 0.0, 1e-12);
    EXPECT_NEAR(o.z(), spec.arc_radius, 1e-12);
    if (i > 0) EXPECT_NEAR((c.center() - s.bundle.records[i - 1].camera.center()).norm(), chord, 1e-12);
  }
}

TEST(Synthetic, NoiseFreeDepthIsRenderedDepth) {
  const SyntheticScene s = generate(small_spec());
  for (std::size_t i = 0; i < s.bundle.records.size(); i += 17) {
    ASSERT_TRUE(s.bundle.records[i].depth);
    EXPECT_EQ(s.bundle.records[i].depth->data(), s.clean_depth[i].data());
  }
  SyntheticSpec noisy = small_spec();
  noisy.depth_noise = 1e-3;
  const SyntheticScene n = generate(noisy);
  EXPECT_NE(n.bundle.records[3].depth->data(), n.clean_depth[3].data());
  EXPECT_EQ(n.bundle.records[3].rgb.data(), s.bundle.records[3].rgb.data());
}

TEST(Synthetic, Splits) {
  const SyntheticScene s = generate(small_spec());
  const auto& sp = s.bundle.splits;
  ASSERT_EQ(sp.size(), 4u);
  EXPECT_EQ(sp.at("two_view").train, (std::vector<int>{0, 99}));
  EXPECT_EQ(sp.at("pct_4").train, (std::vector<int>{0, 33, 66, 99}));
  EXPECT_EQ(sp.at("pct_25").train.size(), 25u);
  const auto& test = sp.at("dense").test;
  EXPECT_GT(test.size(), 0u);
  EXPECT_LE(test.size(), 24u);
  const std::set<int> held(test.begin(), test.end());
  for (const auto& [name, split] : sp) {
    EXPECT_EQ(split.test, test) << name;
    for (int i : split.train) EXPECT_FALSE(held.count(i)) << name << " trains on test view " << i;
  }
  EXPECT_EQ(sp.at("dense").train.size() + test.size(), 100u);
}

TEST(Synthetic, SpecValidationAndJson) {
  SyntheticSpec s = small_spec();
  s.camera_count = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(SyntheticSpec::from_json(R"({"cameras": 3})"), ConfigError);
  const SyntheticSpec r = SyntheticSpec::from_json(small_spec().to_json());
  EXPECT_EQ(r.to_json(), small_spec().to_json());
}
