#include "roadnav/service.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <sstream>

#include "roadnav/util.hpp"

namespace roadnav {

std::string to_string(SessionMode mode) {
  switch (mode) {
    case SessionMode::Live: return "live";
    case SessionMode::Replay: return "replay";
    case SessionMode::Drive: return "drive";
  }
  return "live";
}

SessionMode parse_session_mode(const std::string& text) {
  if (text == "live") return SessionMode::Live;
  if (text == "replay") return SessionMode::Replay;
  if (text == "drive") return SessionMode::Drive;
  throw ServiceError(ServiceError::Kind::BadRequest, "unknown session mode '" + text + "'");
}

int ServiceError::http_status() const {
  switch (kind_) {
    case Kind::BadRequest: return 400;
    case Kind::NotFound: return 404;
    case Kind::Conflict: return 409;
    case Kind::Capacity: return 503;
  }
  return 500;
}

// ---------------------------------------------------------------------------
// Fixes

nlohmann::ordered_json GuidanceFix::to_json() const {
  auto list = [](const std::vector<Forecast>& items) {
    auto out = nlohmann::ordered_json::array();
    for (const auto& f : items) out.push_back({{"class", f.name}, {"distance", f.distance}});
    return out;
  };
  return {{"session", session}, {"frame", frame},   {"z", z},
          {"visible", visible}, {"expected", expected}, {"ahead", list(ahead)},
          {"behind", list(behind)}, {"timestamp", timestamp}};
}

GuidanceFix make_fix(const Roadmap& roadmap, const FrameDetections& latest, double z) {
  GuidanceFix fix;
  fix.z = z;
  fix.frame = latest.frame_index;
  for (std::size_t i = 0; i < latest.n(); ++i) {
    if (latest.present(i)) fix.visible.push_back(roadmap.class_names.at(i));
  }
  for (std::size_t i = 0; i < roadmap.n(); ++i) {
    const auto& iv = roadmap.intervals[i];
    if (iv.empty) continue;
    if (iv.z_start > z) {
      fix.ahead.push_back({i, roadmap.class_names[i], iv.z_start - z});
    } else if (iv.z_end < z) {
      fix.behind.push_back({i, roadmap.class_names[i], z - iv.z_end});
    } else {
      fix.expected.push_back(roadmap.class_names[i]);
    }
  }
  auto by_distance = [](const Forecast& a, const Forecast& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.class_index < b.class_index;
  };
  std::sort(fix.ahead.begin(), fix.ahead.end(), by_distance);
  std::sort(fix.behind.begin(), fix.behind.end(), by_distance);
  return fix;
}

SessionOptions SessionOptions::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ServiceError(ServiceError::Kind::BadRequest, "session options must be an object");
  SessionOptions o;
  try {
    o.mode = parse_session_mode(j.value("mode", std::string("live")));
    o.checkpoint = j.value("checkpoint", std::string());
    o.stream = j.value("stream", std::string());
    if (j.contains("speed")) {
      const auto& s = j.at("speed");
      o.speed = s.is_string() && s.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                               : s.get<double>();
    }
    if (j.contains("seed")) o.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(ServiceError::Kind::BadRequest, std::string("bad session options: ") + e.what());
  }
  return o;
}

nlohmann::ordered_json SessionInfo::to_json() const {
  nlohmann::ordered_json j = {{"id", id}, {"mode", to_string(mode)}, {"checkpoint", checkpoint}, {"frames", frames}};
  if (mode == SessionMode::Replay) {
    j["cursor"] = cursor;
    j["length"] = length;
    j["speed"] = std::isinf(speed) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(speed);
    j["playing"] = playing;
  }
  if (mode == SessionMode::Drive) j["position"] = position;
  return j;
}

// ---------------------------------------------------------------------------
// State

struct GuidanceService::Model {
  std::string hash;
  Checkpoint ckpt;
  Roadmap roadmap;
  std::string roadmap_text;
  ClassRegistry registry;
};

struct GuidanceService::Session {
  std::mutex mutex;
  std::string id;
  SessionMode mode = SessionMode::Live;
  std::shared_ptr<const Model> model;
  std::deque<FrameDetections> buffer;  // last s frames, oldest first
  std::int64_t consumed = 0;
  std::optional<std::int64_t> last_frame;

  std::vector<FrameDetections> stream;  // replay
  std::int64_t cursor = 0;
  double speed = 1.0;
  bool playing = false;

  sim::AnatomyProfile profile;  // drive
  std::optional<Rng> rng;
  double position = 0.0;
  bool closed = false;
};

namespace {

void check_open(bool closed, const std::string& id) {
  if (closed) throw ServiceError(ServiceError::Kind::NotFound, "session '" + id + "' is closed");
}

}  // namespace

GuidanceService::GuidanceService(ServiceOptions options) : options_(std::move(options)) {}
GuidanceService::~GuidanceService() = default;

std::string GuidanceService::add_checkpoint(Checkpoint ckpt, const std::string& alias) {
  std::vector<ClassEntry> entries;
  for (std::size_t i = 0; i < ckpt.class_names.size(); ++i) {
    entries.push_back({static_cast<int>(i), ckpt.class_names[i], false});
  }
  entries.push_back({static_cast<int>(entries.size()), "Instrument", true});
  auto m = std::make_shared<Model>(Model{checkpoint_hash(ckpt), {}, {}, {}, ClassRegistry(std::move(entries))});
  m->roadmap = build_roadmap(ckpt, options_.roadmap_grid, options_.roadmap_theta);
  m->roadmap_text = m->roadmap.serialize();
  m->ckpt = std::move(ckpt);

  std::unique_lock lock(models_mutex_);
  const auto hash = m->hash;
  models_[hash] = std::move(m);
  if (!alias.empty()) aliases_[alias] = hash;
  if (default_model_.empty()) default_model_ = hash;
  return hash;
}

std::vector<std::string> GuidanceService::checkpoints() const {
  std::shared_lock lock(models_mutex_);
  std::vector<std::string> out;
  for (const auto& [hash, _] : models_) out.push_back(hash);
  return out;
}

std::string GuidanceService::resolve_checkpoint(const std::string& key) const {
  std::shared_lock lock(models_mutex_);
  if (key.empty()) {
    if (default_model_.empty()) throw ServiceError(ServiceError::Kind::NotFound, "no checkpoint loaded");
    return default_model_;
  }
  if (models_.count(key)) return key;
  if (auto it = aliases_.find(key); it != aliases_.end()) return it->second;
  throw ServiceError(ServiceError::Kind::NotFound, "unknown checkpoint '" + key + "'");
}

std::shared_ptr<const GuidanceService::Model> GuidanceService::model(const std::string& key) const {
  const auto hash = resolve_checkpoint(key);
  std::shared_lock lock(models_mutex_);
  return models_.at(hash);
}

const Roadmap& GuidanceService::roadmap(const std::string& key) const { return model(key)->roadmap; }
const std::string& GuidanceService::roadmap_text(const std::string& key) const { return model(key)->roadmap_text; }
const Checkpoint& GuidanceService::checkpoint(const std::string& key) const { return model(key)->ckpt; }

// ---------------------------------------------------------------------------
// Sessions

std::string GuidanceService::open_session(const SessionOptions& options) {
  auto s = std::make_shared<Session>();
  s->mode = options.mode;
  s->model = model(options.checkpoint);
  const auto& mdl = *s->model;

  if (options.mode == SessionMode::Replay) {
    if (options.stream.empty()) throw ServiceError(ServiceError::Kind::BadRequest, "replay needs a stream file");
    if (!(options.speed > 0.0)) throw ServiceError(ServiceError::Kind::BadRequest, "replay speed must be > 0");
    std::vector<FrameRecord> records;
    try {
      records = parse_stream_file(options.stream, mdl.registry);
    } catch (const std::exception& e) {
      throw ServiceError(ServiceError::Kind::BadRequest, "cannot replay '" + options.stream + "': " + e.what());
    }
    s->stream = densify(records, mdl.registry, std::nullopt, options_.conf_threshold);
    s->speed = options.speed;
  }
  if (options.mode == SessionMode::Drive) {
    s->profile = options_.drive_profile ? *options_.drive_profile : sim::AnatomyProfile::benchmark(mdl.ckpt.params.config.n);
    std::vector<std::string> names;
    for (const auto& c : s->profile.classes) names.push_back(c.name);
    if (names != mdl.ckpt.class_names) {
      throw ServiceError(ServiceError::Kind::BadRequest, "drive profile classes do not match the checkpoint");
    }
  }

  std::unique_lock lock(sessions_mutex_);
  if (sessions_.size() >= options_.max_sessions) {
    throw ServiceError(ServiceError::Kind::Capacity,
                       "session capacity (" + std::to_string(options_.max_sessions) + ") exceeded");
  }
  const auto n = next_session_++;
  s->id = "s" + std::to_string(n);
  if (options.mode == SessionMode::Drive) {
    s->rng.emplace(options.seed ? make_rng(*options.seed, "drive", 0) : make_rng(options_.seed, "drive", n));
  }
  sessions_[s->id] = s;
  return s->id;
}

bool GuidanceService::close_session(const std::string& id) {
  std::shared_ptr<Session> s;
  {
    std::unique_lock lock(sessions_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return false;
    s = std::move(it->second);
    sessions_.erase(it);
  }
  std::lock_guard guard(s->mutex);
  s->closed = true;
  return true;
}

std::size_t GuidanceService::session_count() const {
  std::shared_lock lock(sessions_mutex_);
  return sessions_.size();
}

std::shared_ptr<GuidanceService::Session> GuidanceService::session(const std::string& id) const {
  std::shared_lock lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(ServiceError::Kind::NotFound, "unknown session '" + id + "'");
  return it->second;
}

SessionInfo GuidanceService::info(const std::string& id) const {
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  SessionInfo i;
  i.id = s->id;
  i.mode = s->mode;
  i.checkpoint = s->model->hash;
  i.frames = s->consumed;
  i.cursor = s->cursor;
  i.length = static_cast<std::int64_t>(s->stream.size());
  i.position = s->position;
  i.speed = s->speed;
  i.playing = s->playing;
  return i;
}

namespace {

// Appends one frame and encodes the window ending at it. Caller holds the lock.
template <typename S>
double advance(S& s, FrameDetections frame) {
  const auto len = s.model->ckpt.params.config.s;
  s.buffer.push_back(std::move(frame));
  while (s.buffer.size() > len) s.buffer.pop_front();
  s.last_frame = s.buffer.back().frame_index;
  ++s.consumed;
  DetectionWindow w;
  w.frames.reserve(len);
  // Start padding repeats the oldest frame, as window_at does.
  for (std::size_t i = s.buffer.size(); i < len; ++i) w.frames.push_back(s.buffer.front());
  w.frames.insert(w.frames.end(), s.buffer.begin(), s.buffer.end());
  return s.model->ckpt.locate(window_tokens(w));
}

}  // namespace

std::vector<GuidanceFix> GuidanceService::push_frames(const std::string& id, std::span<const FrameRecord> records) {
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  check_open(s->closed, id);
  if (s->mode == SessionMode::Replay) {
    throw ServiceError(ServiceError::Kind::Conflict, "session '" + id + "' is a replay session");
  }
  const auto& mdl = *s->model;
  const auto len = static_cast<std::int64_t>(mdl.ckpt.params.config.s);
  std::vector<GuidanceFix> fixes;
  for (const auto& rec : records) {
    if (s->last_frame && rec.frame <= *s->last_frame) {
      throw ServiceError(ServiceError::Kind::BadRequest, "frame " + std::to_string(rec.frame) +
                                                             " does not follow frame " + std::to_string(*s->last_frame));
    }
    for (const auto& d : rec.detections) {
      if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= mdl.registry.size()) {
        throw ServiceError(ServiceError::Kind::BadRequest, "class id " + std::to_string(d.class_id) +
                                                               " is not in the checkpoint's class list");
      }
    }
    if (s->last_frame && rec.frame > *s->last_frame + 1) {
      // Missing frames are empty; only the last s of them can affect a window.
      const auto gap = rec.frame - *s->last_frame - 1;
      for (auto f = rec.frame - std::min(gap, len); f < rec.frame; ++f) {
        advance(*s, FrameDetections(mdl.ckpt.params.config.n, f, rec.video_id));
      }
    }
    auto frame = collapse_frame(rec.detections, mdl.registry, options_.conf_threshold);
    frame.frame_index = rec.frame;
    frame.video_id = rec.video_id;
    const double z = advance(*s, frame);
    auto fix = make_fix(mdl.roadmap, frame, z);
    fix.session = id;
    fix.timestamp = static_cast<double>(rec.frame) / options_.native_fps;
    fixes.push_back(std::move(fix));
  }
  return fixes;
}

std::vector<GuidanceFix> GuidanceService::push_text(const std::string& id, std::string_view ndjson) {
  const auto s = session(id);
  std::istringstream in{std::string(ndjson)};
  std::vector<FrameRecord> records;
  try {
    records = parse_stream(in, s->model->registry);
  } catch (const std::exception& e) {
    throw ServiceError(ServiceError::Kind::BadRequest, e.what());
  }
  return push_frames(id, records);
}

std::optional<GuidanceFix> GuidanceService::replay_next(const std::string& id) {
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  check_open(s->closed, id);
  if (s->mode != SessionMode::Replay) {
    throw ServiceError(ServiceError::Kind::Conflict, "session '" + id + "' is not a replay session");
  }
  if (s->cursor >= static_cast<std::int64_t>(s->stream.size())) return std::nullopt;
  const auto& frame = s->stream[static_cast<std::size_t>(s->cursor++)];
  const double z = advance(*s, frame);
  auto fix = make_fix(s->model->roadmap, frame, z);
  fix.session = id;
  fix.timestamp = static_cast<double>(frame.frame_index) / options_.native_fps;
  return fix;
}

std::vector<GuidanceFix> GuidanceService::replay_all(const std::string& id) {
  std::vector<GuidanceFix> out;
  while (auto fix = replay_next(id)) out.push_back(std::move(*fix));
  return out;
}

void GuidanceService::seek(const std::string& id, std::int64_t frame) {
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  check_open(s->closed, id);
  if (s->mode != SessionMode::Replay) {
    throw ServiceError(ServiceError::Kind::Conflict, "session '" + id + "' is not a replay session");
  }
  const auto length = static_cast<std::int64_t>(s->stream.size());
  if (frame < 0 || frame >= length) {
    throw ServiceError(ServiceError::Kind::BadRequest,
                       "seek to frame " + std::to_string(frame) + " outside [0, " + std::to_string(length) + ")");
  }
  const auto len = static_cast<std::int64_t>(s->model->ckpt.params.config.s);
  s->buffer.clear();
  s->last_frame.reset();
  for (auto f = std::max<std::int64_t>(0, frame - len + 1); f < frame; ++f) {
    s->buffer.push_back(s->stream[static_cast<std::size_t>(f)]);
  }
  s->cursor = frame;
}

void GuidanceService::set_speed(const std::string& id, double speed) {
  if (!(speed > 0.0)) throw ServiceError(ServiceError::Kind::BadRequest, "replay speed must be > 0");
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  check_open(s->closed, id);
  s->speed = speed;
}

void GuidanceService::set_playing(const std::string& id, bool playing) {
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  check_open(s->closed, id);
  s->playing = playing;
}

GuidanceFix GuidanceService::drive_move(const std::string& id, double delta) {
  if (!std::isfinite(delta)) throw ServiceError(ServiceError::Kind::BadRequest, "drive delta must be finite");
  auto s = session(id);
  std::lock_guard guard(s->mutex);
  check_open(s->closed, id);
  if (s->mode != SessionMode::Drive) {
    throw ServiceError(ServiceError::Kind::Conflict, "session '" + id + "' is not a drive session");
  }
  s->position = std::clamp(s->position + delta, 0.0, 1.0);
  auto frame = sim::render_frame(s->position, s->profile, *s->rng);
  frame.frame_index = s->last_frame ? *s->last_frame + 1 : 0;
  frame.video_id = id;
  const double z = advance(*s, frame);
  auto fix = make_fix(s->model->roadmap, frame, z);
  fix.session = id;
  fix.timestamp = static_cast<double>(frame.frame_index) / options_.native_fps;
  return fix;
}

}  // namespace roadnav
