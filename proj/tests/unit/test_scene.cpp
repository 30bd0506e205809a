// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/image_codec.hpp>
#include <endosplat/io.hpp>
#include <endosplat/rasterizer.hpp>
#include <endosplat/scene.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <numeric>
#include <random>
#include <unistd.h>

#include "oracles.hpp"

using namespace endosplat;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("endosplat_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Random cloud whose values are exactly representable in float32.
GaussianCloud random_f32_cloud(std::mt19937_64& rng, std::size_t n, int degree) {
  GaussianCloud c = oracle::random_cloud(rng, n, degree);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      c.positions[i][k] = f32(c.positions[i][k]);
      c.scales[i][k] = f32(c.scales[i][k]);
    }
    for (int k = 0; k < 4; ++k) c.rotations[i][k] = f32(c.rotations[i][k]);
    c.opacities[i] = f32(c.opacities[i]);
  }
  for (auto& v : c.sh) v = f32(v);
  return c;
}

}  // namespace

TEST(Covariance, IdentityCases) {
  EXPECT_TRUE(covariance_of(identity_quat(), Vec3(1, 1, 1)).isApprox(Mat3::Identity()));
  EXPECT_TRUE(covariance_of(identity_quat(), Vec3(2, 1, 1)).isApprox(Vec3(4, 1, 1).asDiagonal().toDenseMatrix()));
}

TEST(Covariance, RotatedAboutZ) {
  const Quat q = axis_angle_quat(Vec3::UnitZ(), M_PI / 2);
  const Mat3 sigma = covariance_of(q, Vec3(2, 1, 1));
  const Mat3 expected = oracle::covariance(q, Vec3(2, 1, 1));
  EXPECT_LT((sigma - expected).norm(), 1e-12);
  EXPECT_LT((sigma - Mat3(Vec3(1, 4, 1).asDiagonal())).norm(), 1e-12);
}

TEST(Covariance, SymmetricPsdOverRandomPrimitives) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> s(1e-4, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    Quat q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    const Mat3 c = covariance_of(q, Vec3(s(rng), s(rng), s(rng)));
    EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    Eigen::SelfAdjointEigenSolver<Mat3> es(c);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-9);
  }
}

TEST(Primitive, ValidateRejectsOutOfRange) {
  GaussianPrimitive p;
  p.sh.assign(3, 0.0);
  EXPECT_NO_THROW(p.validate());
  p.opacity = 1.0;
  EXPECT_THROW(p.validate(), ArgumentError);
  p.opacity = 0.5;
  p.scale = Vec3(1, 0, 1);
  EXPECT_THROW(p.validate(), ArgumentError);
  p.scale = Vec3::Ones();
  p.rotation = Quat(1, 1, 0, 0);
  EXPECT_THROW(p.validate(), ArgumentError);
}

TEST(CameraType, ValidateAndCenter) {
  Camera c = oracle::look_at(Vec3(1, 2, 3), Vec3::Zero(), 100, 64, 48);
  EXPECT_NO_THROW(c.validate());
  EXPECT_LT((c.center() - Vec3(1, 2, 3)).norm(), 1e-12);
  EXPECT_LT(c.to_camera(Vec3::Zero()).head<2>().norm(), 1e-12);
  c.cx = 70;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.cx = 32;
  c.fx = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(CloudFile, RoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  for (int degree = 0; degree <= 3; ++degree) {
    const GaussianCloud c = random_f32_cloud(rng, 3 + degree * 5, degree);
    const auto bytes = encode_cloud(c);
    const GaussianCloud d = decode_cloud(bytes);
    ASSERT_EQ(d.size(), c.size());
    ASSERT_EQ(d.sh_degree(), degree);
    for (std::size_t i = 0; i < c.size(); ++i) {
      EXPECT_EQ(d.positions[i], c.positions[i]);
      EXPECT_EQ(d.rotations[i], c.rotations[i]);
      EXPECT_EQ(d.scales[i], c.scales[i]);
      EXPECT_EQ(d.opacities[i], c.opacities[i]);
    }
    EXPECT_EQ(d.sh, c.sh);
    EXPECT_EQ(encode_cloud(d), bytes);
  }
}

TEST(CloudFile, SaveLoadThroughDisk) {
  std::mt19937_64 rng(3);
  const GaussianCloud c = random_f32_cloud(rng, 3, 0);
  const auto path = temp_dir("cloud") / "c.gsc";
  save_cloud(c, path);
  const GaussianCloud d = load_cloud(path);
  EXPECT_EQ(d.positions, c.positions);
  EXPECT_EQ(d.sh, c.sh);
}

TEST(CloudFile, EmptyCloudLoads) {
  const GaussianCloud c(0, 0);
  const GaussianCloud d = decode_cloud(encode_cloud(c));
  EXPECT_EQ(d.size(), 0u);
  EXPECT_NO_THROW(d.validate());
}

TEST(CloudFile, CountMismatchIsStructuralError) {
  std::mt19937_64 rng(5);
  const GaussianCloud c = random_f32_cloud(rng, 3, 0);
  auto bytes = encode_cloud(c);
  const std::string header = "{\"magic\":\"GSC1\",\"count\":3,\"sh_degree\":0}";
  const std::string fake = "{\"magic\":\"GSC1\",\"count\":2,\"sh_degree\":0}";
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  std::copy(fake.begin(), fake.end(), bytes.begin());
  EXPECT_THROW(decode_cloud(bytes), StructuralError);
}

TEST(CloudFile, MalformedHeaderReportsOffset) {
  const std::string text = "{\"magic\":\"GSC1\",\"count\":\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  try {
    decode_cloud(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_LE(e.byte_offset(), text.size());
  }
  const std::string wrong_magic = "{\"magic\":\"XXXX\",\"count\":0,\"sh_degree\":0}\n";
  EXPECT_THROW(decode_cloud(std::vector<std::uint8_t>(wrong_magic.begin(), wrong_magic.end())), FormatError);
  EXPECT_THROW(decode_cloud(std::vector<std::uint8_t>{'a', 'b'}), FormatError);
}

TEST(CloudFile, LoadNormalizesRotations) {
  const GaussianCloud c(1, 0);
  auto bytes = encode_cloud(c);
  const auto header_end = static_cast<std::size_t>(std::find(bytes.begin(), bytes.end(), '\n') - bytes.begin()) + 1;
  const float w = 2.0f;
  std::memcpy(bytes.data() + header_end + 12, &w, 4);
  const GaussianCloud d = decode_cloud(bytes);
  EXPECT_NEAR(d.rotations[0].norm(), 1.0, 1e-7);
}

TEST(Pfm, RoundTrip) {
  Image img(5, 3, 1);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) img.at(x, y) = f32(0.1 * x + y);
  const auto path = temp_dir("pfm") / "d.pfm";
  write_pfm(img, path);
  const Image back = read_pfm(path);
  ASSERT_TRUE(back.same_shape(img));
  EXPECT_EQ(back.data(), img.data());
}

TEST(Ply, AsciiAndBinary) {
  PointCloud pc;
  pc.positions = {Vec3(0, 1, 2), Vec3(f32(0.25), -1, 3)};
  pc.colors = {Vec3(1, 0, 0), Vec3(0, 1, 0)};
  const auto dir = temp_dir("ply");
  for (bool binary : {true, false}) {
    const auto path = dir / (binary ? "b.ply" : "a.ply");
    write_ply(pc, path, binary);
    const PointCloud back = read_ply(path);
    ASSERT_EQ(back.positions.size(), 2u);
    EXPECT_EQ(back.positions[1], pc.positions[1]);
    EXPECT_NEAR(back.colors[0].x(), 1.0, 1e-12);
    EXPECT_NEAR(back.colors[1].y(), 1.0, 1e-12);
  }
}

TEST(Png, RoundTripQuantized) {
  Image img(4, 2, 3);
  for (std::size_t i = 0; i < img.data().size(); ++i) img.data()[i] = static_cast<double>(i * 10 % 256) / 255.0;
  const Image back = decode_png(encode_png(img));
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data().size(); ++i) EXPECT_NEAR(back.data()[i], img.data()[i], 1e-12);
  EXPECT_FALSE(encode_jpeg(img).empty());
}

TEST(SceneBundle, SaveLoadRoundTrip) {
  SceneBundle b;
  for (int i = 0; i < 2; ++i) {
    TrainingRecord r;
    r.name = "v" + std::to_string(i);
    r.camera = oracle::look_at(Vec3(i, 0, -2), Vec3::Zero(), 20, 8, 6);
    r.rgb = Image(8, 6, 3, 0.2 * (i + 1));
    r.depth = Image(8, 6, 1, 2.0);
    b.records.push_back(r);
  }
  b.init_points = PointCloud{{Vec3(0, 0, 0)}, {Vec3(1, 1, 1)}};
  b.splits["two_view"] = Split{{0, 1}, {}};
  const auto dir = temp_dir("bundle");
  save_scene(b, dir);
  const SceneBundle back = load_scene(dir);
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_NEAR(back.records[1].camera.tvec.x(), b.records[1].camera.tvec.x(), 1e-12);
  EXPECT_TRUE(back.records[0].depth.has_value());
  EXPECT_TRUE(back.init_points.has_value());
  EXPECT_EQ(back.indices("two_view", "train"), (std::vector<int>{0, 1}));
}

TEST(SceneBundle, RequiresTwoRecords) {
  SceneBundle b;
  b.records.resize(1);
  b.records[0].camera = oracle::look_at(Vec3(0, 0, -2), Vec3::Zero(), 20, 8, 6);
  b.records[0].rgb = Image(8, 6, 3);
  EXPECT_THROW(b.validate(), ArgumentError);
}

TEST(CloudOrder, RenderInvariantUnderPermutation) {
  std::mt19937_64 rng(21);
  Camera cam = oracle::look_at(Vec3::Zero(), Vec3(0, 0, 1), 40, 48, 40);
  for (int trial = 0; trial < 5; ++trial) {
    const GaussianCloud c = oracle::random_cloud(rng, 60);
    std::vector<std::size_t> order(c.size());
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);
    const RenderOutput a = render(c, cam), b = render(c.gathered(order), cam);
    for (std::size_t i = 0; i < a.rgb.data().size(); ++i) EXPECT_NEAR(a.rgb.data()[i], b.rgb.data()[i], 1e-6);
  }
}
