// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/server.hpp>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <deque>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

namespace endosplat {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using json = nlohmann::json;

namespace {

std::string mime_type(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".html") return "text/html";
  if (ext == ".js" || ext == ".mjs") return "text/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".png") return "image/png";
  if (ext == ".svg") return "image/svg+xml";
  return "application/octet-stream";
}

class WsSession;

struct Registry {
  std::mutex mu;
  std::set<std::shared_ptr<WsSession>> sessions;
};

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket socket, CloudStore& store, Registry& registry)
      : ws_(std::move(socket)), conn_(std::make_unique<Connection>(store)), registry_(registry) {}

  void run(http::request<http::string_body> req) {
    {
      std::lock_guard lock(registry_.mu);
      registry_.sessions.insert(shared_from_this());
    }
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return self->shutdown();
      self->read();
    });
  }

  /// Ends the session's workers and closes the socket; runs on the I/O thread.
  void shutdown() {
    conn_.reset();
    beast::error_code ec;
    beast::get_lowest_layer(ws_).socket().close(ec);
    std::lock_guard lock(registry_.mu);
    registry_.sessions.erase(shared_from_this());
  }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->shutdown();
      self->on_message();
    });
  }

  void on_message() {
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    if (!conn_) return;
    if (!ws_.got_text()) {
      enqueue(Outbound{error_message("bad_request", "binary client messages are not supported"), std::nullopt});
    } else {
      std::weak_ptr<WsSession> weak = shared_from_this();
      auto ex = ws_.get_executor();
      conn_->handle(text, [weak, ex](Outbound out) {
        if (auto self = weak.lock()) {
          net::post(ex, [self, out = std::move(out)]() mutable { self->enqueue(std::move(out)); });
        }
      });
    }
    read();
  }

  void enqueue(Outbound out) {
    queue_.emplace_back(false, out.header.dump());
    if (out.binary) queue_.emplace_back(true, std::string(out.binary->begin(), out.binary->end()));
    if (!writing_) write();
  }

  void write() {
    if (queue_.empty()) {
      writing_ = false;
      return;
    }
    writing_ = true;
    ws_.binary(queue_.front().first);
    ws_.async_write(net::buffer(queue_.front().second), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->shutdown();
      self->queue_.pop_front();
      self->write();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::unique_ptr<Connection> conn_;
  Registry& registry_;
  std::deque<std::pair<bool, std::string>> queue_;
  bool writing_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, CloudStore& store, Registry& registry, const std::filesystem::path& static_dir)
      : stream_(std::move(socket)), store_(store), registry_(registry), static_dir_(static_dir) {}

  void run() { read(); }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      self->on_request();
    });
  }

  void on_request() {
    if (websocket::is_upgrade(req_)) {
      if (req_.target() == "/ws") {
        stream_.expires_never();
        std::make_shared<WsSession>(stream_.release_socket(), store_, registry_)->run(std::move(req_));
        return;
      }
      return send(text_response(http::status::not_found, "text/plain", "no websocket endpoint here\n"));
    }
    if (req_.method() != http::verb::get && req_.method() != http::verb::head) {
      return send(text_response(http::status::method_not_allowed, "text/plain", "GET only\n"));
    }
    const std::string target(req_.target());
    const std::string path = target.substr(0, target.find('?'));
    if (path == "/healthz") return send(text_response(http::status::ok, "application/json", R"({"status":"ok"})"));
    if (path == "/clouds") {
      return send(text_response(http::status::ok, "application/json", json{{"clouds", store_.list()}}.dump()));
    }
    if (!static_dir_.empty() && path.find("..") == std::string::npos) {
      std::filesystem::path file = static_dir_ / (path == "/" ? std::string("index.html") : path.substr(1));
      std::ifstream in(file, std::ios::binary);
      if (in) {
        std::ostringstream ss;
        ss << in.rdbuf();
        return send(text_response(http::status::ok, mime_type(file), ss.str()));
      }
    }
    send(text_response(http::status::not_found, "text/plain", "not found\n"));
  }

  http::response<http::string_body> text_response(http::status status, const std::string& type, std::string body) {
    http::response<http::string_body> res{status, req_.version()};
    res.set(http::field::content_type, type);
    res.keep_alive(req_.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
  }

  void send(http::response<http::string_body> res) {
    auto sp = std::make_shared<http::response<http::string_body>>(std::move(res));
    http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!sp->keep_alive()) {
        beast::error_code ignored;
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->read();
    });
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
  CloudStore& store_;
  Registry& registry_;
  const std::filesystem::path& static_dir_;
};

}  // namespace

struct Server::Impl {
  ServerOptions options;
  net::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  CloudStore store;
  Registry registry;
  std::thread thread;
  bool running = false;

  explicit Impl(const ServerOptions& o) : options(o), store(o.clouds) {
    const tcp::endpoint ep(net::ip::make_address(o.address), o.port);
    acceptor.open(ep.protocol());
    acceptor.set_option(net::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen();
    accept();
  }

  void accept() {
    acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<HttpSession>(std::move(socket), store, registry, options.static_dir)->run();
      accept();
    });
  }

  void close_all() {
    beast::error_code ec;
    acceptor.close(ec);
    std::vector<std::shared_ptr<WsSession>> live;
    {
      std::lock_guard lock(registry.mu);
      live.assign(registry.sessions.begin(), registry.sessions.end());
    }
    for (auto& s : live) s->shutdown();
  }
};

Server::Server(const ServerOptions& options) : impl_(std::make_unique<Impl>(options)) {}

Server::~Server() { stop(); }

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

CloudStore& Server::store() { return impl_->store; }

void Server::run() {
  impl_->running = true;
  impl_->ioc.run();
}

void Server::start() {
  impl_->running = true;
  impl_->thread = std::thread([this] { impl_->ioc.run(); });
}

void Server::stop() {
  if (!impl_) return;
  if (impl_->running && !impl_->ioc.stopped()) {
    net::post(impl_->ioc, [this] {
      impl_->close_all();
      impl_->ioc.stop();
    });
  } else {
    impl_->close_all();
  }
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->running = false;
}

}  // namespace endosplat
