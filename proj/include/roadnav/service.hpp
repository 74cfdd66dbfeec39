#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadnav/checkpoint.hpp"
#include "roadnav/detection.hpp"
#include "roadnav/roadmap.hpp"
#include "roadnav/simulator.hpp"

namespace roadnav {

enum class SessionMode { Live, Replay, Drive };

std::string to_string(SessionMode mode);
SessionMode parse_session_mode(const std::string& text);

/// Error with an HTTP-like category so transports can map it directly.
class ServiceError : public std::runtime_error {
 public:
  enum class Kind { BadRequest, NotFound, Conflict, Capacity };
  ServiceError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }
  int http_status() const;

 private:
  Kind kind_;
};

struct Forecast {
  std::size_t class_index = 0;
  std::string name;
  double distance = 0.0;  // latent units, >= 0
};

struct GuidanceFix {
  std::string session;
  std::int64_t frame = 0;
  double z = 0.0;                     // canonical latent
  std::vector<std::string> visible;   // present in the latest frame
  std::vector<std::string> expected;  // roadmap intervals containing z
  std::vector<Forecast> ahead;        // z_start > z, nearest first
  std::vector<Forecast> behind;       // z_end < z, nearest first
  double timestamp = 0.0;             // frame / native frame rate, seconds

  nlohmann::ordered_json to_json() const;
};

/// Builds the fix for an encoded frame. Exposed so clients and tests can
/// reproduce the forecast lists from a roadmap alone.
GuidanceFix make_fix(const Roadmap& roadmap, const FrameDetections& latest, double z);

struct ServiceOptions {
  std::size_t max_sessions = 64;
  std::size_t roadmap_grid = kDefaultGrid;
  double roadmap_theta = kDefaultTheta;
  double conf_threshold = kDefaultConfidenceThreshold;
  double native_fps = 25.0;
  std::uint64_t seed = 0;
  std::optional<sim::AnatomyProfile> drive_profile;  // default: benchmark profile sized to the model
};

struct SessionOptions {
  SessionMode mode = SessionMode::Live;
  std::string checkpoint;       // hash or alias; empty selects the default model
  std::string stream;           // replay: detection stream file
  double speed = 1.0;           // replay: multiple of the native frame rate, inf = unthrottled
  std::optional<std::uint64_t> seed;  // drive: render stream seed; default derives one per session

  static SessionOptions from_json(const nlohmann::json& j);
};

struct SessionInfo {
  std::string id;
  SessionMode mode = SessionMode::Live;
  std::string checkpoint;
  std::int64_t frames = 0;  // frames consumed so far
  std::int64_t cursor = 0;  // replay: next frame index
  std::int64_t length = 0;  // replay: total frames
  double position = 0.0;    // drive: simulator path position
  double speed = 1.0;
  bool playing = false;

  nlohmann::ordered_json to_json() const;
};

/// In-memory guidance sessions over a set of loaded models. Thread-safe:
/// calls on different sessions run concurrently, calls on one session are
/// serialized in arrival order.
class GuidanceService {
 public:
  explicit GuidanceService(ServiceOptions options = {});
  ~GuidanceService();
  GuidanceService(const GuidanceService&) = delete;
  GuidanceService& operator=(const GuidanceService&) = delete;

  /// Registers a model and builds its roadmap. Returns the checkpoint hash.
  /// The first model added becomes the default.
  std::string add_checkpoint(Checkpoint ckpt, const std::string& alias = {});
  std::vector<std::string> checkpoints() const;
  /// Resolves a hash, alias, or empty string to a checkpoint hash.
  std::string resolve_checkpoint(const std::string& key) const;
  const Roadmap& roadmap(const std::string& key) const;
  /// Exactly Roadmap::serialize() of the stored roadmap.
  const std::string& roadmap_text(const std::string& key) const;
  const Checkpoint& checkpoint(const std::string& key) const;

  std::string open_session(const SessionOptions& options);
  /// Returns false if the session did not exist.
  bool close_session(const std::string& id);
  SessionInfo info(const std::string& id) const;
  std::size_t session_count() const;
  double native_fps() const { return options_.native_fps; }

  /// Live and drive sessions: appends frames in order, filling skipped frame
  /// indices with empty frames, and returns one fix per record.
  std::vector<GuidanceFix> push_frames(const std::string& id, std::span<const FrameRecord> records);
  /// Parses newline-delimited records against the session's classes first.
  std::vector<GuidanceFix> push_text(const std::string& id, std::string_view ndjson);

  /// Replay: consumes the next frame of the stream, nullopt at the end.
  std::optional<GuidanceFix> replay_next(const std::string& id);
  /// Replay: all remaining frames at once.
  std::vector<GuidanceFix> replay_all(const std::string& id);
  /// Replay: next fix will be for `frame`, with the window refilled from the
  /// stream so it matches a fresh pass.
  void seek(const std::string& id, std::int64_t frame);
  void set_speed(const std::string& id, double speed);
  void set_playing(const std::string& id, bool playing);

  /// Drive: moves the simulated endoscope, renders a frame there and pushes it.
  GuidanceFix drive_move(const std::string& id, double delta);

 private:
  struct Model;
  struct Session;
  std::shared_ptr<const Model> model(const std::string& key) const;
  std::shared_ptr<Session> session(const std::string& id) const;

  ServiceOptions options_;
  mutable std::shared_mutex models_mutex_;
  std::map<std::string, std::shared_ptr<const Model>> models_;
  std::map<std::string, std::string> aliases_;
  std::string default_model_;
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_session_ = 0;
};

}  // namespace roadnav
