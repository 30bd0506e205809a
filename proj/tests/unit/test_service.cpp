// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/image_codec.hpp>
#include <endosplat/service.hpp>
#include <endosplat/synthetic.hpp>

#include <gtest/gtest.h>

#include <cstring>

using namespace endosplat;
using json = nlohmann::json;

namespace {

const GaussianCloud& tissue() {
  static const GaussianCloud c = [] {
    SyntheticSpec s;
    s.gaussian_count = 1500;
    s.subsurface_layers = 2;
    s.camera_count = 2;
    s.width = s.height = 16;
    s.init_points = 10;
    return generate(s).ground_truth;
  }();
  return c;
}

struct Replies {
  std::vector<Outbound> all;
  Sink sink() {
    return [this](Outbound o) { all.push_back(std::move(o)); };
  }
  const Outbound& last() const { return all.back(); }
};

class Protocol : public ::testing::Test {
 protected:
  Protocol() : store_("") { store_.insert("tissue.gsc", tissue()); }

  Outbound send(Connection& c, const json& msg) {
    const std::size_t before = replies_.all.size();
    c.handle(msg, replies_.sink());
    c.drain();
    EXPECT_EQ(replies_.all.size(), before + 1) << msg.dump();
    return replies_.last();
  }

  json create(Connection& c, const std::string& encoding = "positions", int nodes = 128) {
    json msg{{"type", "create_session"}, {"cloud", "tissue.gsc"}, {"nodes", nodes}, {"encoding", encoding},
             {"params", {{"substeps", 20}}}};
    const Outbound o = send(c, msg);
    EXPECT_EQ(o.header.at("type"), "session_created") << o.header.dump();
    return o.header;
  }

  json poke() const {
    const ForceEvent f = central_poke(tissue(), 0.5);
    return json{{"type", "apply_force"},
                {"position", {f.point.x(), f.point.y(), f.point.z()}},
                {"direction", {f.direction.x(), f.direction.y(), f.direction.z()}},
                {"magnitude", f.magnitude},
                {"radius", f.radius}};
  }

  CloudStore store_;
  Replies replies_;
};

std::vector<float> floats(const std::vector<std::uint8_t>& framed) {
  std::uint32_t n = 0;
  for (int b = 0; b < 4; ++b) n |= static_cast<std::uint32_t>(framed[b]) << (8 * b);
  EXPECT_EQ(n + 4, framed.size());
  std::vector<float> out(n / 4);
  std::memcpy(out.data(), framed.data() + 4, n);
  return out;
}

}  // namespace

TEST_F(Protocol, CreateSessionReplies) {
  Connection c(store_, false);
  const json h = create(c);
  EXPECT_EQ(h.at("node_count"), 128);
  EXPECT_EQ(h.at("gaussian_count"), tissue().size());
  const json h2 = create(c);
  EXPECT_NE(h.at("id"), h2.at("id"));
  EXPECT_EQ(c.session_count(), 2u);

  EXPECT_EQ(send(c, {{"type", "create_session"}, {"cloud", "tissue.gsc"}, {"nodes", 0}}).header.at("code"),
            "invalid_argument");
  EXPECT_EQ(send(c, {{"type", "create_session"}, {"cloud", "tissue.gsc"}, {"nodes", 100000}}).header.at("code"),
            "invalid_argument");
  EXPECT_EQ(send(c, {{"type", "create_session"}, {"cloud", "liver.gsc"}}).header.at("code"), "not_found");
  EXPECT_EQ(
      send(c, {{"type", "create_session"}, {"cloud", "tissue.gsc"}, {"params", {{"stiffness", 1}}}}).header.at("code"),
      "invalid_config");
}

TEST_F(Protocol, MalformedAndUnknownMessagesKeepConnection) {
  Connection c(store_, false);
  c.handle(std::string("{not json"), replies_.sink());
  EXPECT_EQ(replies_.last().header.at("code"), "bad_request");
  EXPECT_EQ(send(c, {{"type", "dance"}}).header.at("code"), "unknown_type");
  EXPECT_EQ(send(c, {{"type", "step"}}).header.at("code"), "no_session");
  create(c);
  EXPECT_EQ(send(c, {{"type", "step"}}).header.at("code"), "not_running");
  EXPECT_EQ(send(c, {{"type", "resume"}}).header.at("type"), "ack");
  EXPECT_EQ(send(c, {{"type", "step"}}).header.at("type"), "frame");
  EXPECT_EQ(send(c, {{"type", "step"}, {"session", "nope"}}).header.at("code"), "no_session");
}

TEST_F(Protocol, ForceValidation) {
  Connection c(store_, false);
  create(c);
  json m = poke();
  m["direction"] = {0, 0, -3};
  Outbound o = send(c, m);
  EXPECT_EQ(o.header.at("type"), "ack");
  EXPECT_EQ(o.header.at("warning"), "direction normalized");
  m["magnitude"] = -1.0;
  EXPECT_EQ(send(c, m).header.at("code"), "invalid_argument");
  m = poke();
  m.erase("radius");
  EXPECT_EQ(send(c, m).header.at("code"), "bad_request");
}

TEST_F(Protocol, FramesCountUpAndCarryLengthPrefixedBuffers) {
  Connection c(store_, false);
  create(c);
  send(c, {{"type", "resume"}});
  send(c, poke());
  for (int i = 1; i <= 60; ++i) {
    const Outbound o = send(c, {{"type", "step"}});
    ASSERT_EQ(o.header.at("type"), "frame");
    EXPECT_EQ(o.header.at("seq"), i);
    EXPECT_EQ(o.header.at("stats").at("frame"), i);
    EXPECT_EQ(o.header.at("encoding"), "positions");
    for (const char* k : {"sim_ms", "render_ms", "fps"}) EXPECT_TRUE(o.header.at("stats").contains(k));
    ASSERT_TRUE(o.binary);
    EXPECT_EQ(floats(*o.binary).size(), tissue().size() * 9);
  }
}

TEST_F(Protocol, RestFrameEqualsStaticRender) {
  Connection c(store_, false);
  const json h = create(c, "png");
  send(c, {{"type", "resume"}});
  const Outbound o = send(c, {{"type", "step"}});
  ASSERT_TRUE(o.binary);
  const Image got = decode_png(std::span<const std::uint8_t>(o.binary->data() + 4, o.binary->size() - 4));
  const Camera cam = camera_from_json(h.at("camera"), Camera{});
  const Image want = decode_png(encode_png(render(tissue(), cam).rgb));
  ASSERT_TRUE(got.same_shape(want));
  for (std::size_t i = 0; i < got.data().size(); ++i) ASSERT_NEAR(got.data()[i], want.data()[i], 1e-6);

  send(c, {{"type", "set_camera"}, {"width", 40}, {"height", 30}, {"cx", 20}, {"cy", 15}});
  const Outbound small = send(c, {{"type", "step"}});
  const Image s = decode_png(std::span<const std::uint8_t>(small.binary->data() + 4, small.binary->size() - 4));
  EXPECT_EQ(s.width(), 40);
  EXPECT_EQ(s.height(), 30);
}

TEST_F(Protocol, JpegFrames) {
  Connection c(store_, false);
  create(c, "jpeg");
  send(c, {{"type", "resume"}});
  const Outbound o = send(c, {{"type", "step"}});
  ASSERT_TRUE(o.binary);
  EXPECT_EQ((*o.binary)[4], 0xFF);
  EXPECT_EQ((*o.binary)[5], 0xD8);
}

TEST_F(Protocol, ZeroForceAndImmediateReleaseChangeNothing) {
  Connection a(store_, false), b(store_, false), r(store_, false);
  for (Connection* c : {&a, &b, &r}) {
    create(*c);
    send(*c, {{"type", "resume"}});
  }
  json zero = poke();
  zero["magnitude"] = 0.0;
  send(a, zero);
  send(r, poke());
  send(r, {{"type", "release_force"}});
  for (int i = 0; i < 3; ++i) {
    const auto fa = floats(*send(a, {{"type", "step"}}).binary);
    const auto fb = floats(*send(b, {{"type", "step"}}).binary);
    const auto fr = floats(*send(r, {{"type", "step"}}).binary);
    EXPECT_EQ(fa, fb);
    EXPECT_EQ(fr, fb);
  }
}

TEST_F(Protocol, PokeDisplacesCenterMoreThanThreeRadiiOut) {
  Connection c(store_, false);
  create(c, "positions", 256);
  send(c, {{"type", "resume"}});
  send(c, poke());
  std::vector<float> f;
  for (int i = 0; i < 15; ++i) f = floats(*send(c, {{"type", "step"}}).binary);
  const ForceEvent p = central_poke(tissue(), 0.5);
  double center = 0.0, far = 0.0;
  int nc = 0, nf = 0;
  for (std::size_t j = 0; j < tissue().size(); ++j) {
    const Vec3& rest = tissue().positions[j];
    const Vec3 now(f[9 * j], f[9 * j + 1], f[9 * j + 2]);
    const double r = (rest - p.point).norm(), d = (now - rest).norm();
    if (r < 0.25 * p.radius) center += d, ++nc;
    if (std::abs(r - 3.0 * p.radius) < 0.25 * p.radius) far += d, ++nf;
  }
  ASSERT_GT(nc, 0);
  ASSERT_GT(nf, 0);
  EXPECT_GT(center / nc, 3.0 * far / nf);
}

TEST_F(Protocol, ResetReproducesFirstFrame) {
  Connection c(store_, false);
  create(c);
  send(c, {{"type", "resume"}});
  send(c, poke());
  const auto first = *send(c, {{"type", "step"}}).binary;
  for (int i = 0; i < 4; ++i) send(c, {{"type", "step"}});
  EXPECT_EQ(send(c, {{"type", "reset"}}).header.at("type"), "ack");
  send(c, poke());
  const Outbound again = send(c, {{"type", "step"}});
  EXPECT_EQ(again.header.at("seq"), 1);
  EXPECT_EQ(*again.binary, first);
}

TEST_F(Protocol, FaultPausesSession) {
  Connection c(store_, false);
  create(c);
  send(c, {{"type", "resume"}});
  json shove = poke();
  shove["magnitude"] = 1e7;
  send(c, shove);
  const Outbound o = send(c, {{"type", "step"}});
  ASSERT_EQ(o.header.at("type"), "fault") << o.header.dump();
  EXPECT_FALSE(o.header.at("running").get<bool>());
  EXPECT_TRUE(o.header.at("diagnostics").contains("node"));
  EXPECT_EQ(send(c, {{"type", "step"}}).header.at("code"), "not_running");
  send(c, {{"type", "reset"}});
  send(c, {{"type", "resume"}});
  EXPECT_EQ(send(c, {{"type", "step"}}).header.at("type"), "frame");
}

TEST_F(Protocol, SetParams) {
  Connection c(store_, false);
  create(c);
  Outbound o = send(c, {{"type", "set_params"}, {"youngs_modulus", 2e4}});
  EXPECT_EQ(o.header.at("params").at("youngs_modulus"), 2e4);
  EXPECT_EQ(o.header.at("params").at("substeps"), 20);
  EXPECT_EQ(send(c, {{"type", "set_params"}, {"params", {{"dt", 1.0}}}}).header.at("code"), "invalid_config");
  EXPECT_EQ(send(c, {{"type", "set_params"}, {"poisson_ratio", 0.7}}).header.at("code"), "invalid_config");
}

TEST_F(Protocol, ConcurrentSessionsAreIsolated) {
  Connection threaded(store_, true), ref(store_, false);
  const json a = create(threaded);
  const json b = create(threaded);
  create(ref);
  send(ref, {{"type", "resume"}});
  for (const json& h : {a, b}) send(threaded, {{"type", "resume"}, {"session", h.at("id")}});
  send(threaded, [&] {
    json m = poke();
    m["session"] = a.at("id");
    return m;
  }());
  std::vector<Outbound> got;
  std::mutex mu;
  Sink sink = [&](Outbound o) {
    std::lock_guard lock(mu);
    got.push_back(std::move(o));
  };
  for (int i = 0; i < 5; ++i) {
    threaded.handle(json{{"type", "step"}, {"session", a.at("id")}}, sink);
    threaded.handle(json{{"type", "step"}, {"session", b.at("id")}}, sink);
  }
  threaded.drain();
  ASSERT_EQ(got.size(), 10u);
  std::vector<std::vector<std::uint8_t>> frames_a, frames_b;
  for (auto& o : got) {
    ASSERT_EQ(o.header.at("type"), "frame");
    (o.header.at("session") == a.at("id") ? frames_a : frames_b).push_back(*o.binary);
  }
  ASSERT_EQ(frames_b.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(frames_b[i], *send(ref, {{"type", "step"}}).binary);
    EXPECT_NE(frames_a[i], frames_b[i]);
  }
}
