// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/image_codec.hpp>
#include <endosplat/io.hpp>
#include <endosplat/service.hpp>

#include "json_util.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>

namespace endosplat {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::atomic<std::uint64_t> g_next_session{1};

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

void put_f32(std::vector<std::uint8_t>& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

/// Maps library exceptions onto wire error codes.
json error_from_current() {
  try {
    throw;
  } catch (const NotFoundError& e) {
    return error_message("not_found", e.what());
  } catch (const ArgumentError& e) {
    return error_message("invalid_argument", e.what());
  } catch (const ConfigError& e) {
    return error_message("invalid_config", e.what());
  } catch (const json::exception& e) {
    return error_message("bad_request", e.what());
  } catch (const std::exception& e) {
    return error_message("internal", e.what());
  }
}

/// Keys of a set_params message other than the envelope.
json params_of(const json& msg) {
  if (msg.contains("params")) return msg.at("params");
  json p = json::object();
  for (auto it = msg.begin(); it != msg.end(); ++it) {
    if (it.key() != "type" && it.key() != "session") p[it.key()] = it.value();
  }
  return p;
}

}  // namespace

json error_message(const std::string& code, const std::string& message) {
  return json{{"type", "error"}, {"code", code}, {"message", message}};
}

CloudStore::CloudStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::vector<std::string> CloudStore::list() const {
  std::vector<std::string> out;
  std::error_code ec;
  if (!dir_.empty() && std::filesystem::is_directory(dir_, ec)) {
    for (const auto& e : std::filesystem::directory_iterator(dir_, ec)) {
      if (e.is_regular_file() && e.path().extension() == ".gsc") out.push_back(e.path().filename().string());
    }
  }
  std::lock_guard lock(mu_);
  for (const auto& [name, cloud] : cache_) {
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::shared_ptr<const GaussianCloud> CloudStore::get(const std::string& name) {
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
  }
  const auto names = list();
  if (std::find(names.begin(), names.end(), name) == names.end()) throw NotFoundError("unknown cloud '" + name + "'");
  auto cloud = std::make_shared<const GaussianCloud>(load_cloud(dir_ / name));
  std::lock_guard lock(mu_);
  return cache_.emplace(name, std::move(cloud)).first->second;
}

void CloudStore::insert(const std::string& name, GaussianCloud cloud) {
  std::lock_guard lock(mu_);
  cache_[name] = std::make_shared<const GaussianCloud>(std::move(cloud));
}

FrameEncoding frame_encoding_from_string(const std::string& s) {
  if (s == "jpeg") return FrameEncoding::jpeg;
  if (s == "png") return FrameEncoding::png;
  if (s == "positions") return FrameEncoding::positions;
  throw ArgumentError("unknown encoding '" + s + "' (expected jpeg, png or positions)");
}

std::string to_string(FrameEncoding e) {
  switch (e) {
    case FrameEncoding::jpeg:
      return "jpeg";
    case FrameEncoding::png:
      return "png";
    case FrameEncoding::positions:
      return "positions";
  }
  return "jpeg";
}

Camera default_view(const GaussianCloud& cloud, int width, int height) {
  if (cloud.empty()) throw ArgumentError("cloud is empty");
  Vec3 lo = cloud.positions[0], hi = lo;
  for (const auto& p : cloud.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 center = 0.5 * (lo + hi);
  int thin = 0;
  (hi - lo).minCoeff(&thin);
  const double half = 0.5 * std::max((hi - lo).maxCoeff(), 1e-6);
  const double f = 0.5 * width / std::tan(M_PI / 6.0);
  const double dist = 1.2 * half / std::tan(M_PI / 6.0) + 0.5 * (hi - lo)[thin];
  const Vec3 z = -Vec3::Unit(thin);
  const Vec3 eye = center - dist * z;
  const Vec3 up_hint = thin == 1 ? Vec3::UnitZ() : Vec3::UnitY();
  const Vec3 x = up_hint.cross(z).normalized();
  Mat3 c2w;
  c2w.col(0) = x;
  c2w.col(1) = z.cross(x);
  c2w.col(2) = z;
  return Camera::from_center(eye, c2w, f, f, 0.5 * width, 0.5 * height, width, height);
}

Camera camera_from_json(const json& j, const Camera& base) {
  detail::reject_unknown(j, {"type", "session", "qvec", "tvec", "fx", "fy", "cx", "cy", "width", "height"}, "camera");
  Camera c = base;
  if (j.contains("qvec")) {
    const auto& q = j.at("qvec");
    if (!q.is_array() || q.size() != 4) throw ArgumentError("qvec must hold 4 numbers");
    c.qvec = normalized_quat(Quat(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>()));
  }
  if (j.contains("tvec")) c.tvec = detail::vec3_from_json(j.at("tvec"), "tvec");
  detail::read_field(j, "fx", c.fx);
  detail::read_field(j, "fy", c.fy);
  detail::read_field(j, "cx", c.cx);
  detail::read_field(j, "cy", c.cy);
  detail::read_field(j, "width", c.width);
  detail::read_field(j, "height", c.height);
  if (c.width > 4096 || c.height > 4096) throw ArgumentError("camera image larger than 4096 px");
  c.validate();
  return c;
}

json camera_to_json(const Camera& c) {
  return json{{"qvec", {c.qvec[0], c.qvec[1], c.qvec[2], c.qvec[3]}},
              {"tvec", detail::vec3_to_json(c.tvec)},
              {"fx", c.fx},
              {"fy", c.fy},
              {"cx", c.cx},
              {"cy", c.cy},
              {"width", c.width},
              {"height", c.height}};
}

std::vector<std::uint8_t> length_prefixed(const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> out;
  out.reserve(payload.size() + 4);
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::vector<std::uint8_t> position_buffer(const DeformedCloud& d) {
  std::vector<std::uint8_t> out;
  out.reserve(d.cloud.size() * 9 * 4);
  for (std::size_t i = 0; i < d.cloud.size(); ++i) {
    const Vec3& p = d.cloud.positions[i];
    const Mat3& s = d.covariances[i];
    for (double v : {p.x(), p.y(), p.z(), s(0, 0), s(0, 1), s(0, 2), s(1, 1), s(1, 2), s(2, 2)}) put_f32(out, v);
  }
  return out;
}

SimSession::SimSession(std::string id, std::string cloud_name, std::shared_ptr<const GaussianCloud> cloud,
                       const SessionSettings& settings)
    : id_(std::move(id)), cloud_name_(std::move(cloud_name)), settings_(settings), sim_(std::move(cloud), settings.sim) {}

json SimSession::created() const {
  const auto& o = sim_.options();
  const std::size_t nodes = o.mode == SimulationMode::sparse ? sim_.node_indices().size() : sim_.rest().size();
  return json{{"type", "session_created"},
              {"id", id_},
              {"cloud", cloud_name_},
              {"node_count", nodes},
              {"gaussian_count", sim_.rest().size()},
              {"mode", to_string(o.mode)},
              {"encoding", to_string(settings_.encoding)},
              {"extent", sim_.extent()},
              {"camera", camera_to_json(settings_.camera)},
              {"params", o.material.to_json()}};
}

Outbound SimSession::ack(const std::string& request) const {
  return Outbound{json{{"type", "ack"}, {"request", request}, {"session", id_}, {"running", running_}}, std::nullopt};
}

Outbound SimSession::handle(const json& msg) {
  const std::string type = msg.at("type").get<std::string>();
  if (type == "apply_force") {
    detail::reject_unknown(msg, {"type", "session", "position", "direction", "magnitude", "radius"}, "apply_force");
    ForceEvent f;
    f.point = detail::vec3_from_json(msg.at("position"), "position");
    f.direction = detail::vec3_from_json(msg.at("direction"), "direction");
    f.magnitude = msg.at("magnitude").get<double>();
    f.radius = msg.at("radius").get<double>();
    std::string warning;
    const double n = f.direction.norm();
    if (f.magnitude != 0.0 && !(n > 0.0)) throw ArgumentError("force direction must be non-zero");
    if (n > 0.0 && std::abs(n - 1.0) > 1e-9) {
      f.direction /= n;
      warning = "direction normalized";
    }
    f.validate();
    force_ = f;
    Outbound out = ack(type);
    if (!warning.empty()) out.header["warning"] = warning;
    return out;
  }
  if (type == "release_force") {
    force_.reset();
    return ack(type);
  }
  if (type == "step") return step();
  if (type == "set_camera") {
    settings_.camera = camera_from_json(msg, settings_.camera);
    Outbound out = ack(type);
    out.header["camera"] = camera_to_json(settings_.camera);
    return out;
  }
  if (type == "reset") {
    sim_.reset();
    force_.reset();
    seq_ = 0;
    return ack(type);
  }
  if (type == "set_params") {
    const MaterialParams p = MaterialParams::from_json(params_of(msg), sim_.options().material);
    sim_.set_material(p);
    Outbound out = ack(type);
    out.header["params"] = p.to_json();
    return out;
  }
  if (type == "resume") {
    running_ = true;
    return ack(type);
  }
  if (type == "pause") {
    running_ = false;
    return ack(type);
  }
  return Outbound{error_message("unknown_type", "unknown message type '" + type + "'"), std::nullopt};
}

Outbound SimSession::step() {
  if (!running_) return Outbound{error_message("not_running", "session " + id_ + " is not running"), std::nullopt};
  const auto t0 = Clock::now();
  try {
    sim_.advance_frame(force_ ? &*force_ : nullptr);
  } catch (const SimulationFault& e) {
    running_ = false;
    json diag = json::parse(e.diagnostics(), nullptr, false);
    if (diag.is_discarded()) diag = e.diagnostics();
    return Outbound{json{{"type", "fault"},
                         {"session", id_},
                         {"frame", sim_.frame() + 1},
                         {"message", e.what()},
                         {"diagnostics", diag},
                         {"running", false}},
                    std::nullopt};
  }
  const double sim_ms = ms_since(t0);
  const DeformedCloud d = sim_.deformed();

  const auto t1 = Clock::now();
  std::vector<std::uint8_t> payload;
  if (settings_.encoding == FrameEncoding::positions) {
    payload = position_buffer(d);
  } else {
    const RenderOutput r = render(d.cloud, d.covariances, settings_.camera, settings_.render);
    payload = settings_.encoding == FrameEncoding::png ? encode_png(r.rgb) : encode_jpeg(r.rgb, 85);
  }
  const double render_ms = ms_since(t1);

  const ControlNodeSet& n = sim_.simulator().nodes();
  double max_disp = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) max_disp = std::max(max_disp, (n.position[i] - n.rest[i]).norm());
  ++seq_;
  const double total = sim_ms + render_ms;
  json stats{{"frame", sim_.frame()},
             {"sim_ms", sim_ms},
             {"render_ms", render_ms},
             {"fps", total > 0.0 ? 1000.0 / total : 0.0},
             {"max_displacement", max_disp},
             {"kinetic_energy", sim_.simulator().kinetic_energy()},
             {"force_active", force_.has_value()}};
  json header{{"type", "frame"}, {"session", id_}, {"seq", seq_}, {"stats", stats}, {"encoding", to_string(settings_.encoding)}};
  if (settings_.encoding == FrameEncoding::positions) header["gaussians"] = d.cloud.size();
  return Outbound{std::move(header), length_prefixed(payload)};
}

SessionWorker::SessionWorker(std::unique_ptr<SimSession> session)
    : session_(std::move(session)), thread_([this] { run(); }) {}

SessionWorker::~SessionWorker() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  thread_.join();
}

void SessionWorker::post(json msg, Sink sink) {
  {
    std::lock_guard lock(mu_);
    queue_.emplace_back(std::move(msg), std::move(sink));
  }
  cv_.notify_all();
}

void SessionWorker::drain() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return queue_.empty() && !busy_; });
}

void SessionWorker::run() {
  for (;;) {
    std::pair<json, Sink> item;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
      if (stop_) return;
      item = std::move(queue_.front());
      queue_.pop_front();
      busy_ = true;
    }
    Outbound out;
    try {
      out = session_->handle(item.first);
    } catch (...) {
      out = Outbound{error_from_current(), std::nullopt};
    }
    item.second(std::move(out));
    {
      std::lock_guard lock(mu_);
      busy_ = false;
    }
    cv_.notify_all();
  }
}

Connection::Connection(CloudStore& store, bool threaded) : store_(store), threaded_(threaded) {}

Connection::~Connection() { sessions_.clear(); }

void Connection::handle(const std::string& text, const Sink& sink) {
  const json msg = json::parse(text, nullptr, false);
  if (msg.is_discarded()) {
    sink(Outbound{error_message("bad_request", "message is not valid JSON"), std::nullopt});
    return;
  }
  handle(msg, sink);
}

void Connection::handle(const json& msg, const Sink& sink) {
  if (!msg.is_object() || !msg.contains("type") || !msg.at("type").is_string()) {
    sink(Outbound{error_message("bad_request", "message needs a string 'type'"), std::nullopt});
    return;
  }
  const std::string type = msg.at("type").get<std::string>();
  if (type == "create_session") {
    try {
      create(msg, sink);
    } catch (...) {
      sink(Outbound{error_from_current(), std::nullopt});
    }
    return;
  }
  static const std::vector<std::string> session_types{"apply_force", "release_force", "step",  "set_camera",
                                                      "reset",       "set_params",    "pause", "resume"};
  if (std::find(session_types.begin(), session_types.end(), type) == session_types.end()) {
    sink(Outbound{error_message("unknown_type", "unknown message type '" + type + "'"), std::nullopt});
    return;
  }
  std::string id = current_;
  if (msg.contains("session")) {
    if (!msg.at("session").is_string()) {
      sink(Outbound{error_message("bad_request", "'session' must be a string"), std::nullopt});
      return;
    }
    id = msg.at("session").get<std::string>();
  }
  auto it = sessions_.find(id);
  if (it == sessions_.end()) {
    sink(Outbound{error_message("no_session", id.empty() ? "no session created yet" : "unknown session '" + id + "'"),
                  std::nullopt});
    return;
  }
  if (it->second.worker) {
    it->second.worker->post(msg, sink);
    return;
  }
  Outbound out;
  try {
    out = it->second.inline_session->handle(msg);
  } catch (...) {
    out = Outbound{error_from_current(), std::nullopt};
  }
  sink(std::move(out));
}

void Connection::create(const json& msg, const Sink& sink) {
  detail::reject_unknown(msg, {"type", "cloud", "nodes", "params", "mode", "seed", "encoding", "camera", "k"},
                         "create_session");
  const std::string name = msg.at("cloud").get<std::string>();
  auto cloud = store_.get(name);
  SessionSettings s;
  s.sim.nodes = msg.value("nodes", 512);
  s.sim.seed = msg.value("seed", std::uint64_t{0});
  if (msg.contains("mode")) s.sim.mode = simulation_mode_from_string(msg.at("mode").get<std::string>());
  if (msg.contains("k")) s.sim.binding.k = msg.at("k").get<int>();
  if (msg.contains("params")) s.sim.material = MaterialParams::from_json(msg.at("params"), s.sim.material);
  if (msg.contains("encoding")) s.encoding = frame_encoding_from_string(msg.at("encoding").get<std::string>());
  s.camera = default_view(*cloud);
  if (msg.contains("camera")) s.camera = camera_from_json(msg.at("camera"), s.camera);
  if (s.sim.nodes < 1) throw ArgumentError("nodes must be at least 1");

  const std::string id = "s" + std::to_string(g_next_session++);
  auto session = std::make_unique<SimSession>(id, name, std::move(cloud), s);
  const json reply = session->created();
  Entry e;
  if (threaded_) {
    e.worker = std::make_unique<SessionWorker>(std::move(session));
  } else {
    e.inline_session = std::move(session);
  }
  sessions_[id] = std::move(e);
  current_ = id;
  sink(Outbound{reply, std::nullopt});
}

void Connection::drain() {
  for (auto& [id, e] : sessions_) {
    if (e.worker) e.worker->drain();
  }
}

}  // namespace endosplat
