#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include "fixtures.hpp"
#include "roadnav/service.hpp"

using namespace roadnav;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kS = 8;

Checkpoint small_checkpoint(std::uint64_t seed = 1) {
  ModelConfig c;
  c.s = kS;
  c.n = 5;
  c.n_layers = 1;
  c.n_heads = 5;
  c.encoder_fc_dims = {16, 8};
  c.ffn_dim = 20;
  Checkpoint ck;
  ck.params = ModelParameters::initialize(c, seed);
  ck.class_names = sim::AnatomyProfile::benchmark(5).registry().anatomy_names();
  return ck;
}

ServiceOptions small_options(std::size_t max_sessions = 64) {
  ServiceOptions o;
  o.max_sessions = max_sessions;
  o.roadmap_grid = 50;
  return o;
}

sim::SyntheticVideo sample_video(std::int64_t frames = 120, std::uint64_t seed = 3) {
  sim::TrajectoryConfig t;
  t.n_frames = frames;
  t.speed_mean = 1.0 / static_cast<double>(frames);
  return sim::generate_video(sim::AnatomyProfile::benchmark(5), t, "replay-video", seed);
}

fs::path write_stream(const sim::SyntheticVideo& v, const std::string& name) {
  const auto dir = fs::temp_directory_path() / "roadnav_test_service";
  fs::create_directories(dir);
  const auto path = dir / name;
  std::ofstream out(path);
  serialize_stream(out, v.records, sim::AnatomyProfile::benchmark(5).registry());
  return path;
}

SessionOptions live() { return {}; }

SessionOptions replay(const fs::path& stream) {
  SessionOptions o;
  o.mode = SessionMode::Replay;
  o.stream = stream.string();
  return o;
}

FrameRecord record(std::int64_t frame, std::vector<RawDetection> dets = {}) { return {"live", frame, std::move(dets)}; }

}  // namespace

TEST_CASE("modes and errors") {
  CHECK(parse_session_mode("live") == SessionMode::Live);
  CHECK(parse_session_mode("replay") == SessionMode::Replay);
  CHECK(parse_session_mode("drive") == SessionMode::Drive);
  CHECK(to_string(SessionMode::Drive) == "drive");
  try {
    parse_session_mode("bogus");
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.kind() == ServiceError::Kind::BadRequest);
    CHECK(e.http_status() == 400);
  }
  CHECK(ServiceError(ServiceError::Kind::NotFound, "").http_status() == 404);
  CHECK(ServiceError(ServiceError::Kind::Conflict, "").http_status() == 409);
  CHECK(ServiceError(ServiceError::Kind::Capacity, "").http_status() == 503);
  const auto o = SessionOptions::from_json({{"mode", "replay"}, {"stream", "x.jsonl"}, {"speed", "inf"}});
  CHECK(o.mode == SessionMode::Replay);
  CHECK(std::isinf(o.speed));
}

TEST_CASE("checkpoint registry") {
  GuidanceService svc(small_options());
  CHECK_THROWS_AS(svc.resolve_checkpoint(""), ServiceError);
  const auto a = svc.add_checkpoint(small_checkpoint(1), "first");
  const auto b = svc.add_checkpoint(small_checkpoint(2));
  CHECK(svc.checkpoints().size() == 2);
  CHECK(svc.resolve_checkpoint("") == a);
  CHECK(svc.resolve_checkpoint("first") == a);
  CHECK(svc.resolve_checkpoint(b) == b);
  CHECK(svc.roadmap_text(b) == build_roadmap(small_checkpoint(2), 50).serialize());
  SessionOptions o;
  o.checkpoint = "missing";
  try {
    svc.open_session(o);
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.kind() == ServiceError::Kind::NotFound);
  }
}

TEST_CASE("open and close") {
  GuidanceService svc(small_options(2));
  svc.add_checkpoint(small_checkpoint());
  const auto a = svc.open_session(live());
  const auto b = svc.open_session(live());
  CHECK(a != b);
  CHECK(svc.session_count() == 2);
  try {
    svc.open_session(live());
    FAIL("expected capacity error");
  } catch (const ServiceError& e) {
    CHECK(e.kind() == ServiceError::Kind::Capacity);
  }
  CHECK(svc.close_session(a));
  CHECK_FALSE(svc.close_session(a));
  CHECK(svc.session_count() == 1);
  CHECK_THROWS_AS(svc.info(a), ServiceError);
  CHECK_NOTHROW(svc.open_session(live()));
}

TEST_CASE("first push pads the window with the first frame") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  const auto id = svc.open_session(live());
  const std::vector<FrameRecord> recs = {record(0, {{1, {0.5, 0.5, 0.2, 0.2}, 0.9}})};
  const auto fixes = svc.push_frames(id, recs);
  REQUIRE(fixes.size() == 1);
  const auto& ck = svc.checkpoint("");
  const auto frame = collapse_frame(recs[0].detections, sim::AnatomyProfile::benchmark(5).registry());
  CHECK(fixes[0].z == ck.locate(window_tokens(window_at(std::vector<FrameDetections>{frame}, 0, kS))));
  CHECK(fixes[0].frame == 0);
  CHECK(fixes[0].timestamp == 0.0);
  CHECK(fixes[0].visible == std::vector<std::string>{ck.class_names[1]});
}

TEST_CASE("frame ordering and validation") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  const auto id = svc.open_session(live());
  svc.push_frames(id, std::vector<FrameRecord>{record(3)});
  CHECK_THROWS_AS(svc.push_frames(id, std::vector<FrameRecord>{record(3)}), ServiceError);
  CHECK_THROWS_AS(svc.push_frames(id, std::vector<FrameRecord>{record(2)}), ServiceError);
  CHECK_THROWS_AS(svc.push_frames(id, std::vector<FrameRecord>{record(9, {RawDetection{42, {0.5, 0.5, 0.2, 0.2}, 0.9}})}),
                  ServiceError);
  const auto fixes = svc.push_frames(id, std::vector<FrameRecord>{record(10)});
  REQUIRE(fixes.size() == 1);
  CHECK(fixes[0].frame == 10);
  CHECK(fixes[0].timestamp == doctest::Approx(10.0 / 25.0));
  CHECK_THROWS_AS(svc.push_text(id, "{broken"), ServiceError);
}

TEST_CASE("sessions are isolated") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  const auto v = sample_video(60);
  const auto a = svc.open_session(live());
  const auto b = svc.open_session(live());
  const auto c = svc.open_session(live());
  std::vector<GuidanceFix> fa, fc;
  for (const auto& r : v.records) {
    const auto x = svc.push_frames(a, std::span(&r, 1));
    fa.insert(fa.end(), x.begin(), x.end());
    svc.push_frames(b, std::vector<FrameRecord>{record(r.frame, {RawDetection{0, {0.3, 0.3, 0.1, 0.1}, 0.8}})});
  }
  fc = svc.push_frames(c, v.records);
  REQUIRE(fa.size() == fc.size());
  for (std::size_t k = 0; k < fa.size(); ++k) CHECK(fa[k].z == fc[k].z);
}

TEST_CASE("concurrent sessions give the same fixes as sequential ones") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  const auto v = sample_video(80);
  const auto ref = svc.push_frames(svc.open_session(live()), v.records);
  std::vector<std::vector<GuidanceFix>> got(4);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < got.size(); ++i) {
    threads.emplace_back([&, i] {
      const auto id = svc.open_session(live());
      for (const auto& r : v.records) {
        const auto x = svc.push_frames(id, std::span(&r, 1));
        got[i].insert(got[i].end(), x.begin(), x.end());
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& g : got) {
    REQUIRE(g.size() == ref.size());
    for (std::size_t k = 0; k < g.size(); ++k) CHECK(g[k].z == ref[k].z);
  }
}

TEST_CASE("replay matches library encoding bit for bit") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  const auto v = sample_video(150);
  const auto path = write_stream(v, "replay.jsonl");
  const auto id = svc.open_session(replay(path));
  CHECK(svc.info(id).length == 150);
  const auto fixes = svc.replay_all(id);
  REQUIRE(fixes.size() == 150);
  const VideoTensor video(v.video_id, v.frames);
  const auto z = encode_video(video, svc.checkpoint(""));
  for (std::size_t t = 0; t < fixes.size(); ++t) {
    CHECK(fixes[t].frame == static_cast<std::int64_t>(t));
    CHECK(fixes[t].z == z[t]);
  }
  CHECK_FALSE(svc.replay_next(id));
  CHECK_THROWS_AS(svc.push_frames(id, std::vector<FrameRecord>{record(500)}), ServiceError);

  SUBCASE("seek to 0 equals a fresh session") {
    svc.seek(id, 0);
    const auto again = svc.replay_all(id);
    REQUIRE(again.size() == fixes.size());
    for (std::size_t t = 0; t < again.size(); ++t) CHECK(again[t].z == fixes[t].z);
  }
  SUBCASE("seek to the middle refills the window") {
    svc.seek(id, 70);
    const auto next = svc.replay_next(id);
    REQUIRE(next);
    CHECK(next->frame == 70);
    CHECK(next->z == fixes[70].z);
    CHECK_THROWS_AS(svc.seek(id, 151), ServiceError);
  }
  fs::remove_all(path.parent_path());
}

TEST_CASE("replay of a missing file") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  CHECK_THROWS_AS(svc.open_session(replay("/nonexistent/stream.jsonl")), ServiceError);
}

TEST_CASE("speed and play state") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  const auto path = write_stream(sample_video(20), "speed.jsonl");
  const auto id = svc.open_session(replay(path));
  svc.set_speed(id, 4.0);
  CHECK(svc.info(id).speed == 4.0);
  svc.set_speed(id, std::numeric_limits<double>::infinity());
  CHECK(std::isinf(svc.info(id).speed));
  CHECK_THROWS_AS(svc.set_speed(id, 0.0), ServiceError);
  CHECK_THROWS_AS(svc.set_speed(id, -1.0), ServiceError);
  svc.set_playing(id, true);
  CHECK(svc.info(id).playing);
  fs::remove_all(path.parent_path());
}

TEST_CASE("drive sessions") {
  GuidanceService svc(small_options());
  svc.add_checkpoint(small_checkpoint());
  SessionOptions o;
  o.mode = SessionMode::Drive;
  o.seed = 5;
  const auto id = svc.open_session(o);
  SUBCASE("delta 0 keeps the position") {
    svc.drive_move(id, 0.3);
    const auto before = svc.info(id).position;
    const auto fix = svc.drive_move(id, 0.0);
    CHECK(svc.info(id).position == before);
    CHECK(std::isfinite(fix.z));
  }
  SUBCASE("clamped to the path and nothing left ahead at the end") {
    svc.drive_move(id, -5.0);
    CHECK(svc.info(id).position == 0.0);
    GuidanceFix fix;
    for (int k = 0; k < 40; ++k) fix = svc.drive_move(id, 0.05);
    CHECK(svc.info(id).position == 1.0);
    fix = svc.drive_move(id, 0.0);
    const auto& r = svc.roadmap("");
    for (const auto& f : fix.ahead) CHECK(r.intervals[f.class_index].z_start > fix.z);
  }
  SUBCASE("frame indices advance") {
    const auto f0 = svc.drive_move(id, 0.01);
    const auto f1 = svc.drive_move(id, 0.01);
    CHECK(f1.frame == f0.frame + 1);
  }
  SUBCASE("same seed gives the same frames") {
    const auto other = svc.open_session(o);
    for (int k = 0; k < 10; ++k) CHECK(svc.drive_move(id, 0.02).z == svc.drive_move(other, 0.02).z);
  }
}

TEST_CASE("forecast lists partition the non-empty classes") {
  const auto ck = small_checkpoint(4);
  const auto r = build_roadmap(ck, 50);
  const FrameDetections none(5);
  for (double z : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
    const auto fix = make_fix(r, none, z);
    std::size_t non_empty = 0;
    for (const auto& iv : r.intervals) non_empty += !iv.empty;
    CHECK(fix.expected.size() + fix.ahead.size() + fix.behind.size() == non_empty);
    for (std::size_t k = 1; k < fix.ahead.size(); ++k) CHECK(fix.ahead[k - 1].distance <= fix.ahead[k].distance);
    for (std::size_t k = 1; k < fix.behind.size(); ++k) CHECK(fix.behind[k - 1].distance <= fix.behind[k].distance);
    for (const auto& f : fix.ahead) {
      CHECK(f.distance == doctest::Approx(r.intervals[f.class_index].z_start - z));
      CHECK(f.name == r.class_names[f.class_index]);
    }
    for (const auto& f : fix.behind) CHECK(f.distance == doctest::Approx(z - r.intervals[f.class_index].z_end));
  }
  const auto j = make_fix(r, none, 0.5).to_json();
  CHECK(j.contains("ahead"));
  CHECK(j.contains("expected"));
}
