#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "roadnav/dataset.hpp"
#include "roadnav/simulator.hpp"

using namespace roadnav;
namespace fs = std::filesystem;

namespace {

sim::TrajectoryConfig quiet_trajectory(std::int64_t frames = 500) {
  sim::TrajectoryConfig t;
  t.n_frames = frames;
  t.retraction_mean = 0.0;
  return t;
}

sim::AnatomyProfile noiseless(std::size_t n = 6) {
  auto p = sim::AnatomyProfile::benchmark(n, 0.5, 0.0, 0.0);
  p.instrument_rate = 0.0;
  return p;
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), dir).string()] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

}  // namespace

TEST_CASE("trajectory examples") {
  SUBCASE("zero speed stays at the start") {
    auto t = quiet_trajectory(200);
    t.speed_mean = 0.0;
    t.speed_sd = 0.0;
    const auto p = sim::sample_trajectory(t);
    CHECK(p.size() == 200);
    CHECK(std::all_of(p.begin(), p.end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("no retractions is non-decreasing") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto t = quiet_trajectory(1500);
      t.seed = seed;
      const auto p = sim::sample_trajectory(t);
      CHECK(p.front() == 0.0);
      CHECK(std::is_sorted(p.begin(), p.end()));
    }
  }
  SUBCASE("same seed, same sequence") {
    sim::TrajectoryConfig t;
    t.seed = 42;
    CHECK(sim::sample_trajectory(t) == sim::sample_trajectory(t));
  }
  SUBCASE("positions stay in [0, 1] and retractions reach 0 within 5 frames") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      sim::TrajectoryConfig t;
      t.seed = seed;
      t.retraction_mean = 4.0;
      const auto p = sim::sample_trajectory(t);
      CHECK(*std::min_element(p.begin(), p.end()) >= 0.0);
      CHECK(*std::max_element(p.begin(), p.end()) <= 1.0);
      // A drop larger than normal jitter starts a retraction; it must reach 0 soon.
      for (std::size_t i = 1; i < p.size(); ++i) {
        if (p[i] < p[i - 1] - 1e-12) {
          bool reached = false;
          for (std::size_t k = i; k < std::min(p.size(), i + 5); ++k) reached = reached || p[k] == 0.0;
          CHECK(reached);
          while (i < p.size() && p[i] < p[i - 1]) ++i;
        }
      }
    }
  }
  SUBCASE("dwell zones slow the endoscope") {
    auto t = quiet_trajectory(4000);
    t.speed_sd = 0.0;
    t.dwell = {{0.5, 3.0, 0.05}};
    const auto p = sim::sample_trajectory(t);
    auto frames_in = [&](double lo, double hi) {
      return std::count_if(p.begin(), p.end(), [&](double v) { return v >= lo && v < hi; });
    };
    CHECK(frames_in(0.45, 0.55) > 2 * frames_in(0.15, 0.25));
  }
}

TEST_CASE("render_frame examples") {
  const auto profile = noiseless();
  Rng rng(1);
  SUBCASE("outside every interval") {
    auto p = profile;
    for (auto& c : p.classes) {
      c.start = std::max(c.start, 0.5);
      c.end = std::max(c.end, 0.6);
    }
    CHECK(sim::render_frame(0.1, p, rng).count_present() == 0);
  }
  SUBCASE("size at interval start is the base size") {
    const auto& c = profile.classes[2];
    const auto f = sim::render_frame(c.start, profile, rng);
    REQUIRE(f.present(2));
    CHECK(f.boxes[2].w == doctest::Approx(c.base_w).epsilon(1e-12));
    CHECK(f.boxes[2].h == doctest::Approx(c.base_h).epsilon(1e-12));
  }
  SUBCASE("boxes grow along the interval") {
    for (std::size_t i = 0; i < profile.classes.size(); ++i) {
      const auto& c = profile.classes[i];
      const auto early = sim::render_frame(c.start + 0.1 * (c.end - c.start), profile, rng);
      const auto late = sim::render_frame(c.start + 0.9 * (c.end - c.start), profile, rng);
      REQUIRE(early.present(i));
      REQUIRE(late.present(i));
      CHECK(late.boxes[i].area() > early.boxes[i].area());
    }
  }
  SUBCASE("area non-decreasing in p") {
    const auto& c = profile.classes[3];
    double prev = 0.0;
    for (int k = 0; k <= 50; ++k) {
      const double p = c.start + (c.end - c.start) * k / 50.0;
      const auto f = sim::render_frame(p, profile, rng);
      REQUIRE(f.present(3));
      CHECK(f.boxes[3].area() >= prev);
      prev = f.boxes[3].area();
    }
  }
  SUBCASE("boxes stay inside the frame") {
    auto p = sim::AnatomyProfile::benchmark(10, 0.55, 0.2, 0.1);
    for (int k = 0; k < 500; ++k) {
      const auto f = sim::render_frame(k / 499.0, p, rng);
      for (std::size_t i = 0; i < f.n(); ++i) {
        if (!f.present(i)) continue;
        const auto& b = f.boxes[i];
        CHECK(b.cx - b.w / 2 >= -1e-12);
        CHECK(b.cx + b.w / 2 <= 1 + 1e-12);
        CHECK(b.cy - b.h / 2 >= -1e-12);
        CHECK(b.cy + b.h / 2 <= 1 + 1e-12);
      }
    }
  }
}

TEST_CASE("benchmark profile intervals overlap and cover the path") {
  const auto p = sim::AnatomyProfile::benchmark(10, 0.55);
  CHECK(p.classes.size() == 10);
  CHECK(p.classes.front().start == 0.0);
  CHECK(p.classes.back().end == doctest::Approx(1.0));
  for (std::size_t i = 1; i < p.classes.size(); ++i) {
    CHECK(p.classes[i].start > p.classes[i - 1].start);
    CHECK(p.classes[i].start < p.classes[i - 1].end);
  }
  CHECK_THROWS(sim::AnatomyProfile::benchmark(0));
}

TEST_CASE("first appearances follow interval order on monotone paths") {
  const auto profile = noiseless(8);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto v = sim::generate_video(profile, quiet_trajectory(2500), "v", seed);
    std::vector<std::size_t> first(profile.classes.size(), v.frames.size());
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      for (std::size_t i = 0; i < first.size(); ++i) {
        if (v.frames[t].present(i) && first[i] == v.frames.size()) first[i] = t;
      }
    }
    for (std::size_t i = 1; i < first.size(); ++i) CHECK(first[i - 1] < first[i]);
  }
}

TEST_CASE("generate_dataset") {
  const auto root = fs::temp_directory_path() / "roadnav_test_sim";
  fs::remove_all(root);
  sim::DatasetConfig cfg;
  cfg.profile = sim::AnatomyProfile::benchmark(5);
  cfg.trajectory.n_frames = 120;
  cfg.n_videos = 3;
  cfg.holdout = 1;

  SUBCASE("same seed, identical bytes") {
    sim::generate_dataset(cfg, 9, root / "a");
    sim::generate_dataset(cfg, 9, root / "b");
    const auto a = read_tree(root / "a");
    CHECK(a.size() > 4);
    CHECK(a == read_tree(root / "b"));
    sim::generate_dataset(cfg, 10, root / "c");
    CHECK(a != read_tree(root / "c"));
  }
  SUBCASE("streams re-parse and ground truth aligns") {
    sim::generate_dataset(cfg, 3, root / "d");
    const auto ds = load_dataset(root / "d");
    CHECK(ds.videos.size() == 3);
    CHECK(ds.registry.n_anatomy() == 5);
    for (const auto& v : ds.videos) {
      CHECK(v.frames.size() == 120);
      CHECK(v.positions.size() == 120);
    }
    const auto test = load_dataset(root / "d" / "test");
    CHECK(test.videos.size() == 1);
    const auto manifest = nlohmann::json::parse(std::ifstream(root / "d" / "manifest.json"));
    CHECK(manifest.at("seed") == 3);
    CHECK(manifest.at("config_hash") == cfg.hash());
  }
  SUBCASE("zero videos gives an empty dataset with a manifest") {
    cfg.n_videos = 0;
    cfg.holdout = 0;
    sim::generate_dataset(cfg, 1, root / "e");
    CHECK(fs::exists(root / "e" / "manifest.json"));
    CHECK(load_dataset(root / "e").videos.empty());
  }
  fs::remove_all(root);
}

TEST_CASE("generated frames match the collapsed records") {
  const auto profile = sim::AnatomyProfile::benchmark(6);
  const auto v = sim::generate_video(profile, quiet_trajectory(300), "v", 5);
  const auto reg = profile.registry();
  const auto dense = densify(v.records, reg, static_cast<std::int64_t>(v.frames.size()));
  REQUIRE(dense.size() == v.frames.size());
  for (std::size_t t = 0; t < dense.size(); ++t) {
    CHECK(dense[t].presence == v.frames[t].presence);
    CHECK(dense[t].boxes == v.frames[t].boxes);
  }
}
