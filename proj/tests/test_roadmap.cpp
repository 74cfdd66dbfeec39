#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "roadnav/checkpoint.hpp"
#include "roadnav/roadmap.hpp"
#include "roadnav/simulator.hpp"
#include "roadnav/stats.hpp"

using namespace roadnav;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::size_t n) {
  ModelConfig c;
  c.s = 8;
  c.n = n;
  c.n_layers = 1;
  c.n_heads = 5;
  c.encoder_fc_dims = {16, 8};
  c.ffn_dim = 20;
  return c;
}

Checkpoint random_checkpoint(std::size_t n = 4, std::uint64_t seed = 1) {
  Checkpoint c;
  c.params = ModelParameters::initialize(tiny_config(n), seed);
  for (std::size_t i = 0; i < n; ++i) c.class_names.push_back("C" + std::to_string(i));
  return c;
}

struct Trained {
  Checkpoint ckpt;
  std::vector<VideoTensor> videos;
};

// A briefly trained model on a small simulated set; shared across cases.
const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    const auto profile = sim::AnatomyProfile::benchmark(5);
    sim::TrajectoryConfig traj;
    traj.n_frames = 600;
    traj.speed_mean = 1.0 / 600;
    for (std::uint64_t v = 0; v < 4; ++v) {
      const auto vid = sim::generate_video(profile, traj, "v" + std::to_string(v), 100 + v);
      out.videos.emplace_back(vid.video_id, vid.frames);
    }
    TrainConfig tc;
    tc.epochs = 8;
    tc.warmup_epochs = 2;
    tc.peak_lr = 1e-3;
    tc.stride = 4;
    tc.batch_size = 16;
    tc.val_fraction = 0.0;
    out.ckpt.params = train(out.videos, tiny_config(5), tc).params;
    out.ckpt.class_names = profile.registry().anatomy_names();
    return out;
  }();
  return t;
}

}  // namespace

TEST_CASE("grid and shapes for K=2") {
  const auto r = build_roadmap(random_checkpoint(), 2);
  REQUIRE(r.k() == 2);
  CHECK(r.z_grid[0] == doctest::Approx(1.0 / 3));
  CHECK(r.z_grid[1] == doctest::Approx(2.0 / 3));
  CHECK(r.confidence.rows() == 4);
  CHECK(r.confidence.cols() == 2);
  CHECK(r.boxes.size() == 4);
  CHECK(r.boxes[0].rows() == 2);
  CHECK_THROWS(build_roadmap(random_checkpoint(), 1));
  CHECK_THROWS(build_roadmap(random_checkpoint(), 10, 0.0));
  CHECK_THROWS(build_roadmap(random_checkpoint(), 10, 1.0));
}

TEST_CASE("constant and empty confidence rows") {
  auto ckpt = random_checkpoint();
  auto w2 = ckpt.params.block(ckpt.params.layout.class_w2);
  auto b2 = ckpt.params.block(ckpt.params.layout.class_b2);
  w2.row(1).setZero();
  b2(1, 0) = 0.3;
  w2.row(2).setZero();
  b2(2, 0) = -100.0;
  const auto r = build_roadmap(ckpt, 50);
  CHECK((r.confidence_normalized.row(1).array() == 1.0).all());
  CHECK_FALSE(r.intervals[1].empty);
  CHECK(r.intervals[1].k_start == 0);
  CHECK(r.intervals[1].k_end == 49);
  CHECK(r.intervals[2].empty);
  CHECK(std::isnan(alignment_score(r, 2, 0.5)));
}

TEST_CASE("normalization and interval invariants") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = build_roadmap(random_checkpoint(6, seed), 100, 0.5);
    for (std::size_t i = 0; i < r.n(); ++i) {
      const auto& iv = r.intervals[i];
      if (iv.empty) continue;
      CHECK(r.confidence_normalized.row(static_cast<Eigen::Index>(i)).maxCoeff() == 1.0);
      CHECK(iv.z_start <= iv.z_end);
      CHECK(iv.k_start <= iv.k_end);
      for (std::size_t k = iv.k_start; k <= iv.k_end; ++k) {
        CHECK(r.confidence_normalized(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) >= 0.5);
      }
    }
  }
}

TEST_CASE("roadmap json round trip is byte stable") {
  const auto r = build_roadmap(random_checkpoint(), 30);
  const auto text = r.serialize();
  const auto back = Roadmap::from_json(nlohmann::json::parse(text));
  CHECK(back.serialize() == text);
  CHECK(back.intervals.size() == r.intervals.size());
}

TEST_CASE("flag flip mirrors intervals and keeps alignment scores") {
  auto ckpt = random_checkpoint(5, 3);
  const auto a = build_roadmap(ckpt, 60);
  ckpt.orientation_flipped = true;
  const auto b = build_roadmap(ckpt, 60);
  for (std::size_t i = 0; i < a.n(); ++i) {
    REQUIRE(a.intervals[i].empty == b.intervals[i].empty);
    if (a.intervals[i].empty) continue;
    CHECK(b.intervals[i].k_start == 59 - a.intervals[i].k_end);
    CHECK(b.intervals[i].k_end == 59 - a.intervals[i].k_start);
    CHECK(b.intervals[i].z_start == doctest::Approx(1.0 - a.intervals[i].z_end));
  }
}

TEST_CASE("canonicalize_orientation on a model with an inverted latent") {
  const auto& t = trained();
  auto canon = t.ckpt;
  const auto first = canonicalize_orientation(canon, t.videos, 4);
  CHECK(first.r_after > 0.0);
  CHECK(first.r_after == doctest::Approx(std::abs(first.r_before)));

  SUBCASE("idempotent") {
    auto again = canon;
    const auto second = canonicalize_orientation(again, t.videos, 4);
    CHECK_FALSE(second.flipped);
    CHECK(again.orientation_flipped == canon.orientation_flipped);
  }
  SUBCASE("negated final layer") {
    // Encoder emits 1 - z; decoders read 1 - z, so the model is a mirror image.
    auto inverted = t.ckpt;
    auto& p = inverted.params;
    p.block(p.layout.latent_w) *= -1.0;
    p.block(p.layout.latent_b) *= -1.0;
    for (auto [w, b] : {std::pair{p.layout.class_w1, p.layout.class_b1}, std::pair{p.layout.bbox_w1, p.layout.bbox_b1}}) {
      p.block(b) += p.block(w);
      p.block(w) *= -1.0;
    }
    const auto res = canonicalize_orientation(inverted, t.videos, 4);
    CHECK(res.r_before == doctest::Approx(-first.r_before).epsilon(1e-9));
    CHECK(res.r_after > 0.0);
    CHECK(inverted.orientation_flipped != canon.orientation_flipped);
    // Both canonical checkpoints now place every window at the same z.
    const auto za = encode_video(t.videos[0], canon, 25);
    const auto zb = encode_video(t.videos[0], inverted, 25);
    for (std::size_t k = 0; k < za.size(); ++k) CHECK(zb[k] == doctest::Approx(za[k]).epsilon(1e-12));
    const auto ra = build_roadmap(canon, 80);
    const auto rb = build_roadmap(inverted, 80);
    for (std::size_t i = 0; i < ra.n(); ++i) {
      CHECK(ra.intervals[i].k_start == rb.intervals[i].k_start);
      CHECK(ra.intervals[i].k_end == rb.intervals[i].k_end);
    }
    for (const auto& f : first_appearances(t.videos[1], canon)) {
      if (ra.intervals[f.class_index].empty) continue;
      CHECK(alignment_score(ra, f.class_index, f.z) ==
            doctest::Approx(alignment_score(rb, f.class_index, f.z)).epsilon(1e-9));
    }
  }
}

TEST_CASE("first_encoding_correlation examples") {
  SUBCASE("increasing trace gives r = 1") {
    std::vector<double> z;
    for (int t = 0; t < 500; ++t) z.push_back(0.001 + 0.998 * t / 499.0);
    const auto e = first_encoding_correlation(z, 100);
    CHECK(e.r == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(e.points.size() == 100);
  }
  SUBCASE("constant trace is degenerate") {
    const std::vector<double> z(50, 0.42);
    CHECK_THROWS_WITH_AS(first_encoding_correlation(z, 100), "degenerate: 1 bin", stats::DegenerateSample);
  }
  SUBCASE("decreasing trace gives r near -1") {
    std::vector<double> z;
    for (int t = 0; t < 300; ++t) z.push_back(0.95 - 0.9 * t / 299.0);
    CHECK(first_encoding_correlation(z, 50).r < -0.9999);
  }
  SUBCASE("only the first hit of a bin counts") {
    const std::vector<double> z = {0.05, 0.55, 0.06, 0.95, 0.54};
    const auto e = first_encoding_correlation(z, 10);
    REQUIRE(e.points.size() == 3);
    CHECK(e.points[0].t == 0.0);
    CHECK(e.points[1].t == 0.25);
    CHECK(e.points[2].t == 0.75);
    CHECK(e.points[2].z_bin == doctest::Approx(0.95));
  }
}

TEST_CASE("first appearances and alignment") {
  const auto& t = trained();
  const auto firsts = first_appearances(t.videos[0], t.ckpt);
  CHECK(!firsts.empty());
  CHECK(firsts.size() <= 5);
  for (const auto& f : firsts) {
    CHECK(f.frame < t.videos[0].n_frames());
    CHECK(t.videos[0].frame(f.frame).present(f.class_index));
    for (std::size_t k = 0; k < f.frame; ++k) CHECK_FALSE(t.videos[0].frame(k).present(f.class_index));
    CHECK(f.z == t.ckpt.locate(t.videos[0].window(f.frame, 8)));
  }
  const auto r = build_roadmap(t.ckpt, 50);
  for (const auto& a : align(firsts, r)) {
    CHECK(a.score >= 0.0);
    CHECK(a.score <= 1.0);
  }
  CHECK(alignment_score(r, 0, 1.0) == doctest::Approx(1.0));
  CHECK(alignment_score(r, 0, 0.0) == 0.0);
}

TEST_CASE("classes that never appear are excluded") {
  std::vector<FrameDetections> frames(20, FrameDetections(4));
  for (auto& f : frames) f.set(1, {0.5, 0.5, 0.2, 0.2});
  const VideoTensor video("only-one", frames);
  const auto firsts = first_appearances(video, random_checkpoint());
  REQUIRE(firsts.size() == 1);
  CHECK(firsts[0].class_index == 1);
  CHECK(firsts[0].frame == 0);
  CHECK(firsts[0].z > 0.0);
  CHECK(firsts[0].z < 1.0);
}

TEST_CASE("evaluation report") {
  const auto& t = trained();
  const auto roadmap = build_roadmap(t.ckpt, 50);
  std::vector<std::vector<double>> positions(t.videos.size());
  for (std::size_t v = 0; v < t.videos.size(); ++v) {
    for (std::size_t k = 0; k < t.videos[v].n_frames(); ++k) positions[v].push_back(k * 1.0);
  }
  const auto report = evaluate_embedding(t.ckpt, roadmap, t.videos, positions, 50);
  CHECK(report.videos.size() == 4);
  for (const auto& v : report.videos) {
    REQUIRE(v.first_encoding_r);
    CHECK(std::abs(*v.first_encoding_r) <= 1.0);
    REQUIRE(v.spearman);
  }
  REQUIRE(report.videos[0].first_encoding_r);
  CHECK(*report.videos[0].first_encoding_r == time_z_correlation(t.videos[0], t.ckpt, 50).r);
  CHECK(report.mean_spearman.has_value());
  const auto j = report.to_json();
  CHECK(j.at("videos").size() == 4);
}

TEST_CASE("roadmap sweep") {
  auto ckpt = random_checkpoint(4, 9);
  auto b2 = ckpt.params.block(ckpt.params.layout.class_b2);
  ckpt.params.block(ckpt.params.layout.class_w2).row(3).setZero();
  b2(3, 0) = -100.0;
  const auto r = build_roadmap(ckpt, 40);
  REQUIRE(r.intervals[3].empty);
  const auto frames = roadmap_sweep(r);
  REQUIRE(frames.size() == 40);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    CHECK(frames[k].k == k);
    CHECK(frames[k].z == r.z_grid[k]);
    for (const auto& item : frames[k].items) {
      CHECK(item.class_index != 3);
      const auto& iv = r.intervals[item.class_index];
      CHECK(k >= iv.k_start);
      CHECK(k <= iv.k_end);
    }
  }
  const auto dir = fs::temp_directory_path() / "roadnav_test_sweep";
  fs::remove_all(dir);
  export_roadmap_sweep(r, dir, 8);
  CHECK(fs::exists(dir / "sweep.svg"));
  const auto j = nlohmann::json::parse(std::ifstream(dir / "sweep.json"));
  CHECK(j.at("frames").size() == 40);
  fs::remove_all(dir);
}
