#include "roadnav/server.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

namespace roadnav {

namespace {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using json = nlohmann::json;

constexpr std::size_t kBodyLimit = 64 * 1024 * 1024;
// Unthrottled replay sends this many fixes per scheduling turn.
constexpr int kBurst = 64;

std::vector<std::string> split_path(std::string_view target) {
  if (auto q = target.find('?'); q != std::string_view::npos) target = target.substr(0, q);
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < target.size()) {
    while (i < target.size() && target[i] == '/') ++i;
    auto j = target.find('/', i);
    if (j == std::string_view::npos) j = target.size();
    if (j > i) parts.emplace_back(target.substr(i, j - i));
    i = j;
  }
  return parts;
}

bool has_query_flag(std::string_view target, std::string_view flag) {
  auto q = target.find('?');
  if (q == std::string_view::npos) return false;
  auto query = target.substr(q + 1);
  for (std::size_t i = 0; i <= query.size();) {
    auto j = query.find('&', i);
    if (j == std::string_view::npos) j = query.size();
    auto item = query.substr(i, j - i);
    if (item == flag || item == std::string(flag) + "=1" || item == std::string(flag) + "=true") return true;
    i = j + 1;
  }
  return false;
}

std::string_view target_of(const http::request<http::string_body>& req) {
  return {req.target().data(), req.target().size()};
}

class WsSession;

struct Hub {
  std::mutex mutex;
  std::multimap<std::string, std::weak_ptr<WsSession>> subscribers;
};

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket socket, GuidanceService& service, Hub& hub, std::string session)
      : ws_(std::move(socket)),
        timer_(ws_.get_executor()),
        service_(service),
        hub_(hub),
        session_(std::move(session)) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

  /// Thread-safe: queues a text frame.
  void send(std::string text) {
    asio::post(ws_.get_executor(), [self = shared_from_this(), text = std::move(text)]() mutable {
      self->enqueue(std::move(text));
    });
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    {
      std::lock_guard lock(hub_.mutex);
      hub_.subscribers.emplace(session_, weak_from_this());
    }
    try {
      send_state();
      if (service_.info(session_).playing) schedule(std::chrono::nanoseconds(0));
    } catch (const std::exception& e) {
      enqueue(json{{"type", "error"}, {"error", e.what()}}.dump());
    }
    read();
  }

  void read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      closed_ = true;
      timer_.cancel();
      unsubscribe();
      return;
    }
    const auto text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    handle(text);
    read();
  }

  void handle(const std::string& text) {
    try {
      const auto msg = json::parse(text);
      const auto type = msg.at("type").get<std::string>();
      if (type == "play") {
        service_.set_playing(session_, true);
        send_state();
        schedule(std::chrono::nanoseconds(0));
      } else if (type == "pause") {
        service_.set_playing(session_, false);
        timer_.cancel();
        send_state();
      } else if (type == "seek") {
        service_.seek(session_, msg.at("frame").get<std::int64_t>());
        send_state();
      } else if (type == "speed") {
        const auto& v = msg.at("value");
        service_.set_speed(session_, v.is_string() && v.get<std::string>() == "inf"
                                         ? std::numeric_limits<double>::infinity()
                                         : v.get<double>());
        send_state();
      } else if (type == "drive") {
        auto fix = service_.drive_move(session_, msg.at("delta").get<double>());
        broadcast(fix);
      } else {
        throw ServiceError(ServiceError::Kind::BadRequest, "unknown message type '" + type + "'");
      }
    } catch (const std::exception& e) {
      enqueue(json{{"type", "error"}, {"error", e.what()}}.dump());
    }
  }

  void broadcast(const GuidanceFix& fix) {
    auto j = fix.to_json();
    j["type"] = "fix";
    const auto text = j.dump();
    std::vector<std::shared_ptr<WsSession>> targets;
    {
      std::lock_guard lock(hub_.mutex);
      auto [lo, hi] = hub_.subscribers.equal_range(session_);
      for (auto it = lo; it != hi; ++it) {
        if (auto p = it->second.lock()) targets.push_back(std::move(p));
      }
    }
    for (auto& t : targets) {
      // Our own queue is filled in place so fixes stay ordered with state messages.
      if (t.get() == this) {
        enqueue(text);
      } else {
        t->send(text);
      }
    }
  }

  void send_state() {
    auto j = service_.info(session_).to_json();
    j["type"] = "state";
    enqueue(j.dump());
  }

  void schedule(std::chrono::nanoseconds delay) {
    if (closed_) return;
    timer_.expires_after(delay);
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->tick();
    });
  }

  void tick() {
    try {
      const auto info = service_.info(session_);
      if (!info.playing || info.mode != SessionMode::Replay) return;
      // Wait for the socket to drain rather than queueing the whole stream.
      if (queue_.size() > 256) {
        schedule(std::chrono::milliseconds(5));
        return;
      }
      const int burst = std::isinf(info.speed) ? kBurst : 1;
      for (int i = 0; i < burst; ++i) {
        auto fix = service_.replay_next(session_);
        if (!fix) {
          service_.set_playing(session_, false);
          enqueue(json{{"type", "end"}, {"frames", info.length}}.dump());
          send_state();
          return;
        }
        broadcast(*fix);
      }
      const auto period = std::isinf(info.speed)
                              ? std::chrono::nanoseconds(0)
                              : std::chrono::nanoseconds(static_cast<std::int64_t>(1e9 / (service_.native_fps() * info.speed)));
      schedule(period);
    } catch (const std::exception& e) {
      enqueue(json{{"type", "error"}, {"error", e.what()}}.dump());
    }
  }

  void enqueue(std::string text) {
    if (closed_) return;
    queue_.push_back(std::move(text));
    if (queue_.size() == 1) write();
  }

  void write() {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()),
                    [self = shared_from_this()](beast::error_code ec, std::size_t) {
                      if (ec) {
                        self->closed_ = true;
                        self->queue_.clear();
                        return;
                      }
                      self->queue_.pop_front();
                      if (!self->queue_.empty()) self->write();
                    });
  }

  void unsubscribe() {
    std::lock_guard lock(hub_.mutex);
    auto [lo, hi] = hub_.subscribers.equal_range(session_);
    for (auto it = lo; it != hi;) {
      auto p = it->second.lock();
      if (!p || p.get() == this) {
        it = hub_.subscribers.erase(it);
      } else {
        ++it;
      }
    }
  }

  websocket::stream<beast::tcp_stream> ws_;
  asio::steady_timer timer_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  GuidanceService& service_;
  Hub& hub_;
  std::string session_;
  bool closed_ = false;
};

void publish(Hub& hub, const std::string& session, const GuidanceFix& fix) {
  std::vector<std::shared_ptr<WsSession>> targets;
  {
    std::lock_guard lock(hub.mutex);
    auto [lo, hi] = hub.subscribers.equal_range(session);
    for (auto it = lo; it != hi; ++it) {
      if (auto p = it->second.lock()) targets.push_back(std::move(p));
    }
  }
  if (targets.empty()) return;
  auto j = fix.to_json();
  j["type"] = "fix";
  const auto text = j.dump();
  for (auto& t : targets) t->send(text);
}

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, GuidanceService& service, Hub& hub)
      : stream_(std::move(socket)), service_(service), hub_(hub) {}

  void run() { read(); }

 private:
  void read() {
    parser_.emplace();
    parser_->body_limit(kBodyLimit);
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, *parser_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    auto req = parser_->release();
    if (websocket::is_upgrade(req)) {
      const auto parts = split_path(target_of(req));
      if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "stream") {
        try {
          service_.info(parts[1]);
        } catch (const ServiceError& e) {
          send(error_response(req, e.http_status(), e.what()));
          return;
        }
        stream_.expires_never();
        std::make_shared<WsSession>(stream_.release_socket(), service_, hub_, parts[1])->run(std::move(req));
        return;
      }
      send(error_response(req, 404, "no WebSocket endpoint at " + std::string(req.target())));
      return;
    }
    send(route(req));
  }

  void send(http::response<http::string_body> res) {
    auto sp = std::make_shared<http::response<http::string_body>>(std::move(res));
    http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (sp->need_eof()) {
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
        return;
      }
      self->read();
    });
  }

  static http::response<http::string_body> make(const http::request<http::string_body>& req, int status,
                                                std::string body, const char* type = "application/json") {
    http::response<http::string_body> res{static_cast<http::status>(status), req.version()};
    res.set(http::field::content_type, type);
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
  }

  static http::response<http::string_body> error_response(const http::request<http::string_body>& req, int status,
                                                          const std::string& what) {
    return make(req, status, json{{"error", what}}.dump() + "\n");
  }

  http::response<http::string_body> route(const http::request<http::string_body>& req) {
    try {
      return dispatch(req);
    } catch (const ServiceError& e) {
      return error_response(req, e.http_status(), e.what());
    } catch (const json::exception& e) {
      return error_response(req, 400, std::string("bad JSON: ") + e.what());
    } catch (const std::exception& e) {
      return error_response(req, 500, e.what());
    }
  }

  http::response<http::string_body> dispatch(const http::request<http::string_body>& req) {
    const auto parts = split_path(target_of(req));
    const auto method = req.method();
    auto not_allowed = [&] { return error_response(req, 405, "method not allowed"); };

    if (parts.size() == 1 && parts[0] == "healthz") {
      if (method != http::verb::get) return not_allowed();
      return make(req, 200,
                  json{{"status", "ok"}, {"sessions", service_.session_count()}, {"checkpoints", service_.checkpoints()}}
                          .dump() +
                      "\n");
    }
    if (!parts.empty() && parts[0] == "roadmap" && parts.size() <= 2) {
      if (method != http::verb::get) return not_allowed();
      return make(req, 200, service_.roadmap_text(parts.size() == 2 ? parts[1] : std::string()));
    }
    if (parts.size() == 1 && parts[0] == "sessions") {
      if (method != http::verb::post) return not_allowed();
      const auto body = req.body().empty() ? json::object() : json::parse(req.body());
      const auto id = service_.open_session(SessionOptions::from_json(body));
      return make(req, 201, service_.info(id).to_json().dump() + "\n");
    }
    if (parts.size() == 2 && parts[0] == "sessions") {
      if (method == http::verb::get) return make(req, 200, service_.info(parts[1]).to_json().dump() + "\n");
      if (method == http::verb::delete_) {
        service_.close_session(parts[1]);
        return make(req, 204, "");
      }
      return not_allowed();
    }
    if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "frames") {
      if (method != http::verb::post) return not_allowed();
      const auto fixes = service_.push_text(parts[1], req.body());
      if (fixes.empty()) throw ServiceError(ServiceError::Kind::BadRequest, "no frames in request body");
      for (const auto& f : fixes) publish(hub_, parts[1], f);
      if (has_query_flag(target_of(req), "all")) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& f : fixes) arr.push_back(f.to_json());
        return make(req, 200, arr.dump() + "\n");
      }
      return make(req, 200, fixes.back().to_json().dump() + "\n");
    }
    if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "drive") {
      if (method != http::verb::post) return not_allowed();
      const auto body = json::parse(req.body());
      const auto fix = service_.drive_move(parts[1], body.at("delta").get<double>());
      publish(hub_, parts[1], fix);
      return make(req, 200, fix.to_json().dump() + "\n");
    }
    return error_response(req, 404, "no route for " + std::string(req.target()));
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  std::optional<http::request_parser<http::string_body>> parser_;
  GuidanceService& service_;
  Hub& hub_;
};

}  // namespace

struct Server::Impl {
  Impl(GuidanceService& svc, const std::string& address, std::uint16_t port)
      : service(svc), acceptor(ioc), signals(ioc) {
    const tcp::endpoint ep{asio::ip::make_address(address), port};
    acceptor.open(ep.protocol());
    acceptor.set_option(asio::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen(asio::socket_base::max_listen_connections);
  }

  void accept() {
    acceptor.async_accept(asio::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<HttpSession>(std::move(socket), service, hub)->run();
      accept();
    });
  }

  GuidanceService& service;
  asio::io_context ioc;
  tcp::acceptor acceptor;
  asio::signal_set signals;
  Hub hub;
  std::vector<std::thread> threads;
  std::mutex mutex;
  bool stopped = false;
};

Server::Server(GuidanceService& service, const std::string& address, std::uint16_t port)
    : impl_(std::make_unique<Impl>(service, address, port)) {}

Server::~Server() { stop(); }

void Server::start(std::size_t threads) {
  impl_->accept();
  for (std::size_t i = 0; i < std::max<std::size_t>(threads, 1); ++i) {
    impl_->threads.emplace_back([this] { impl_->ioc.run(); });
  }
}

void Server::stop() {
  std::lock_guard lock(impl_->mutex);
  if (impl_->stopped) return;
  impl_->stopped = true;
  impl_->ioc.stop();
  for (auto& t : impl_->threads) {
    if (t.joinable() && t.get_id() != std::this_thread::get_id()) t.join();
  }
}

void Server::wait() {
  impl_->signals.add(SIGINT);
  impl_->signals.add(SIGTERM);
  impl_->signals.async_wait([this](beast::error_code, int) { impl_->ioc.stop(); });
  for (auto& t : impl_->threads) {
    if (t.joinable()) t.join();
  }
}

std::uint16_t Server::port() const { return impl_->acceptor.local_endpoint().port(); }

}  // namespace roadnav
