// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/service.hpp>

#include <filesystem>
#include <memory>
#include <string>

namespace endosplat {

struct ServerOptions {
  std::string address = "127.0.0.1";
  /// 0 binds an ephemeral port; see Server::port().
  unsigned short port = 8080;
  std::filesystem::path clouds;
  /// Served under / when set (the browser viewer bundle).
  std::filesystem::path static_dir;
};

/// HTTP + WebSocket front end: `/ws` speaks the session protocol, GET
/// `/clouds` lists loadable clouds, GET `/healthz` answers {"status":"ok"}.
class Server {
 public:
  explicit Server(const ServerOptions& options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  CloudStore& store();
  /// Serves on the calling thread until stop().
  void run();
  /// Serves on a background thread.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace endosplat
