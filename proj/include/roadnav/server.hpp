#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "roadnav/service.hpp"

namespace roadnav {

/// HTTP + WebSocket transport for a GuidanceService.
///
///   GET    /healthz
///   POST   /sessions                  {"mode", "checkpoint", "stream", "speed", "seed"}
///   GET    /sessions/{id}
///   DELETE /sessions/{id}             idempotent
///   POST   /sessions/{id}/frames      detection stream records, one per line
///   POST   /sessions/{id}/drive       {"delta": number}
///   GET    /roadmap[/{checkpoint}]
///   WS     /sessions/{id}/stream
///
/// WebSocket clients send {"type": "play" | "pause" | "seek" | "speed" | "drive", ...}
/// and receive {"type": "state" | "fix" | "end" | "error", ...}. A "state"
/// message greets each new connection. Every control
/// message is answered by exactly one "state" or "error" message; drive
/// messages are answered by a "fix".
class Server {
 public:
  Server(GuidanceService& service, const std::string& address = "127.0.0.1", std::uint16_t port = 0);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Starts accepting on background threads.
  void start(std::size_t threads = 2);
  /// Stops accepting and joins the worker threads.
  void stop();
  /// Blocks until stop() is called from another thread or a signal arrives.
  void wait();
  std::uint16_t port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace roadnav
