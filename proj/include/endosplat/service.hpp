// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/rasterizer.hpp>
#include <endosplat/simulation.hpp>

#include <json.hpp>

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace endosplat {

/// Read-only directory of `.gsc` clouds, loaded on first use and shared by
/// every session.
class CloudStore {
 public:
  explicit CloudStore(std::filesystem::path dir);

  /// File names (with extension), sorted.
  std::vector<std::string> list() const;
  /// Throws NotFoundError for names outside the directory listing.
  std::shared_ptr<const GaussianCloud> get(const std::string& name);
  /// Makes an in-memory cloud available under `name`.
  void insert(const std::string& name, GaussianCloud cloud);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const GaussianCloud>> cache_;
};

enum class FrameEncoding { jpeg, png, positions };

FrameEncoding frame_encoding_from_string(const std::string& s);
std::string to_string(FrameEncoding e);

/// A text message and, for frames, the binary message that follows it.
struct Outbound {
  nlohmann::json header;
  std::optional<std::vector<std::uint8_t>> binary;
};

using Sink = std::function<void(Outbound)>;

/// {"type":"error","code":...,"message":...}
nlohmann::json error_message(const std::string& code, const std::string& message);

/// Camera on the cloud's thin axis looking at its box center, framing the
/// whole extent with a 60 degree field of view.
Camera default_view(const GaussianCloud& cloud, int width = 256, int height = 256);

/// Camera fields as sent on the wire: qvec, tvec and optional intrinsics.
Camera camera_from_json(const nlohmann::json& j, const Camera& base);
nlohmann::json camera_to_json(const Camera& c);

/// Binary frame body: 4-byte little-endian length, then the payload.
std::vector<std::uint8_t> length_prefixed(const std::vector<std::uint8_t>& payload);

/// Per Gaussian: position then covariance (xx, xy, xz, yy, yz, zz), as
/// little-endian float32.
std::vector<std::uint8_t> position_buffer(const DeformedCloud& d);

struct SessionSettings {
  SimulationOptions sim;
  Camera camera;
  FrameEncoding encoding = FrameEncoding::jpeg;
  RenderSettings render;
};

/// One simulation session. Not thread-safe: exactly one owner drives it.
class SimSession {
 public:
  SimSession(std::string id, std::string cloud_name, std::shared_ptr<const GaussianCloud> cloud,
             const SessionSettings& settings);

  /// The session_created reply.
  nlohmann::json created() const;
  /// Handles one client message addressed to this session and returns its
  /// reply (one header, plus a binary body for frames).
  Outbound handle(const nlohmann::json& msg);

  const std::string& id() const { return id_; }
  bool running() const { return running_; }
  std::uint64_t seq() const { return seq_; }
  const SceneSimulation& simulation() const { return sim_; }
  const std::optional<ForceEvent>& active_force() const { return force_; }
  const Camera& camera() const { return settings_.camera; }

 private:
  Outbound step();
  Outbound ack(const std::string& request) const;

  std::string id_;
  std::string cloud_name_;
  SessionSettings settings_;
  SceneSimulation sim_;
  std::optional<ForceEvent> force_;
  bool running_ = false;
  std::uint64_t seq_ = 0;
};

/// Runs one session on its own thread; messages are handled in arrival order
/// between frames.
class SessionWorker {
 public:
  explicit SessionWorker(std::unique_ptr<SimSession> session);
  ~SessionWorker();
  SessionWorker(const SessionWorker&) = delete;
  SessionWorker& operator=(const SessionWorker&) = delete;

  void post(nlohmann::json msg, Sink sink);
  /// Blocks until every queued message has been handled.
  void drain();

 private:
  void run();

  std::unique_ptr<SimSession> session_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::pair<nlohmann::json, Sink>> queue_;
  bool busy_ = false;
  bool stop_ = false;
  std::thread thread_;
};

/// Protocol state of one client connection. Sessions created on a connection
/// belong to it and end with it. Messages may name a session with
/// "session"; otherwise the most recently created one is used.
class Connection {
 public:
  /// With `threaded` false, messages are handled inline on the caller's thread.
  explicit Connection(CloudStore& store, bool threaded = true);
  ~Connection();

  void handle(const std::string& text, const Sink& sink);
  void handle(const nlohmann::json& msg, const Sink& sink);
  /// Blocks until all sessions are idle.
  void drain();

  std::size_t session_count() const { return sessions_.size(); }

 private:
  struct Entry {
    std::unique_ptr<SimSession> inline_session;
    std::unique_ptr<SessionWorker> worker;
  };
  void create(const nlohmann::json& msg, const Sink& sink);

  CloudStore& store_;
  bool threaded_;
  std::map<std::string, Entry> sessions_;
  std::string current_;
};

}  // namespace endosplat
