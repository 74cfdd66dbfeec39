#include "roadnav/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roadnav/dataset.hpp"

namespace roadnav::sim {

// ---------------------------------------------------------------------------
// Profiles

void AnatomyProfile::validate() const {
  if (classes.empty()) throw std::invalid_argument("anatomy profile has no classes");
  for (const auto& c : classes) {
    if (!(c.start >= 0.0 && c.start < c.end && c.end <= 1.0)) {
      throw std::invalid_argument("class '" + c.name + "': interval must satisfy 0 <= start < end <= 1");
    }
    if (!(c.base_w > 0.0 && c.base_w < 1.0 && c.base_h > 0.0 && c.base_h < 1.0)) {
      throw std::invalid_argument("class '" + c.name + "': base size must lie in (0, 1)");
    }
    if (c.growth < 0.0) throw std::invalid_argument("class '" + c.name + "': growth must be >= 0");
    if (c.jitter_sd < 0.0) throw std::invalid_argument("class '" + c.name + "': jitter must be >= 0");
    const double norm = std::hypot(c.drift_x, c.drift_y);
    if (norm != 0.0 && std::abs(norm - 1.0) > 1e-9) {
      throw std::invalid_argument("class '" + c.name + "': drift must be a unit vector or zero");
    }
  }
  if (dropout < 0.0 || dropout > 1.0) throw std::invalid_argument("dropout must lie in [0, 1]");
  if (instrument_rate < 0.0 || instrument_rate > 1.0) {
    throw std::invalid_argument("instrument_rate must lie in [0, 1]");
  }
  if (min_confidence < 0.0 || min_confidence > 1.0) {
    throw std::invalid_argument("min_confidence must lie in [0, 1]");
  }
}

ClassRegistry AnatomyProfile::registry() const {
  std::vector<ClassEntry> entries;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    entries.push_back({static_cast<int>(i), classes[i].name, false});
  }
  entries.push_back({static_cast<int>(classes.size()), "Instrument", true});
  return ClassRegistry(std::move(entries));
}

AnatomyProfile AnatomyProfile::benchmark(std::size_t n_classes, double overlap, double jitter_sd,
                                         double dropout) {
  if (n_classes == 0) throw std::invalid_argument("benchmark profile needs at least one class");
  if (overlap < 0.0 || overlap >= 1.0) throw std::invalid_argument("overlap must lie in [0, 1)");
  const auto names = ClassRegistry::standard_subset(std::min<std::size_t>(n_classes, 15)).anatomy_names();
  const double n = static_cast<double>(n_classes);
  const double width = 1.0 / ((n - 1.0) * (1.0 - overlap) + 1.0);
  const double spacing = width * (1.0 - overlap);

  AnatomyProfile p;
  p.dropout = dropout;
  for (std::size_t i = 0; i < n_classes; ++i) {
    ClassProfile c;
    c.name = i < names.size() ? names[i] : "Class" + std::to_string(i);
    c.start = std::min(static_cast<double>(i) * spacing, 1.0 - width);
    c.end = std::min(c.start + width, 1.0);
    // Deterministic variety in size and drift across classes.
    c.base_w = 0.10 + 0.03 * static_cast<double>(i % 4);
    c.base_h = 0.09 + 0.025 * static_cast<double>((i + 2) % 4);
    c.growth = 1.5;
    if (i % 3 != 1) {
      const double angle = 2.39996322972865332 * static_cast<double>(i);  // golden angle
      c.drift_x = std::cos(angle);
      c.drift_y = std::sin(angle);
    }
    c.jitter_sd = jitter_sd;
    p.classes.push_back(std::move(c));
  }
  return p;
}

void TrajectoryConfig::validate() const {
  if (n_frames < 1) throw std::invalid_argument("trajectory needs at least one frame");
  if (speed_mean < 0.0 || speed_sd < 0.0) throw std::invalid_argument("speeds must be >= 0");
  if (retraction_mean < 0.0) throw std::invalid_argument("retraction_mean must be >= 0");
  if (max_retraction_frames < 1 || max_retraction_frames > 5) {
    throw std::invalid_argument("max_retraction_frames must lie in 1..5");
  }
  if (reinsertion_speedup <= 0.0) throw std::invalid_argument("reinsertion_speedup must be > 0");
  for (const auto& d : dwell) {
    if (d.strength < 0.0 || d.width <= 0.0) throw std::invalid_argument("invalid dwell zone");
  }
}

std::string DatasetConfig::hash() const {
  nlohmann::json j = *this;
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const ClassProfile& c) {
  j = {{"name", c.name},     {"start", c.start},     {"end", c.end},
       {"base_w", c.base_w}, {"base_h", c.base_h},   {"growth", c.growth},
       {"drift_x", c.drift_x}, {"drift_y", c.drift_y}, {"jitter_sd", c.jitter_sd}};
}

void from_json(const nlohmann::json& j, ClassProfile& c) {
  ClassProfile d;
  c.name = j.at("name").get<std::string>();
  c.start = j.at("start").get<double>();
  c.end = j.at("end").get<double>();
  c.base_w = j.value("base_w", d.base_w);
  c.base_h = j.value("base_h", d.base_h);
  c.growth = j.value("growth", d.growth);
  c.drift_x = j.value("drift_x", d.drift_x);
  c.drift_y = j.value("drift_y", d.drift_y);
  c.jitter_sd = j.value("jitter_sd", d.jitter_sd);
}

void to_json(nlohmann::json& j, const AnatomyProfile& p) {
  j = {{"classes", p.classes},
       {"dropout", p.dropout},
       {"drift_scale", p.drift_scale},
       {"instrument_rate", p.instrument_rate},
       {"min_confidence", p.min_confidence}};
}

void from_json(const nlohmann::json& j, AnatomyProfile& p) {
  AnatomyProfile d;
  p.classes = j.at("classes").get<std::vector<ClassProfile>>();
  p.dropout = j.value("dropout", d.dropout);
  p.drift_scale = j.value("drift_scale", d.drift_scale);
  p.instrument_rate = j.value("instrument_rate", d.instrument_rate);
  p.min_confidence = j.value("min_confidence", d.min_confidence);
}

void to_json(nlohmann::json& j, const DwellZone& d) {
  j = {{"center", d.center}, {"strength", d.strength}, {"width", d.width}};
}

void from_json(const nlohmann::json& j, DwellZone& d) {
  d.center = j.at("center").get<double>();
  d.strength = j.at("strength").get<double>();
  d.width = j.value("width", 0.05);
}

void to_json(nlohmann::json& j, const TrajectoryConfig& c) {
  j = {{"n_frames", c.n_frames},
       {"speed_mean", c.speed_mean},
       {"speed_sd", c.speed_sd},
       {"dwell", c.dwell},
       {"retraction_mean", c.retraction_mean},
       {"max_retraction_frames", c.max_retraction_frames},
       {"reinsertion_speedup", c.reinsertion_speedup},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrajectoryConfig& c) {
  TrajectoryConfig d;
  c.n_frames = j.value("n_frames", d.n_frames);
  c.speed_mean = j.value("speed_mean", d.speed_mean);
  c.speed_sd = j.value("speed_sd", d.speed_sd);
  c.dwell = j.contains("dwell") ? j.at("dwell").get<std::vector<DwellZone>>() : d.dwell;
  c.retraction_mean = j.value("retraction_mean", d.retraction_mean);
  c.max_retraction_frames = j.value("max_retraction_frames", d.max_retraction_frames);
  c.reinsertion_speedup = j.value("reinsertion_speedup", d.reinsertion_speedup);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"profile", c.profile},
       {"trajectory", c.trajectory},
       {"n_videos", c.n_videos},
       {"holdout", c.holdout}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.profile = j.contains("profile") ? j.at("profile").get<AnatomyProfile>() : d.profile;
  c.trajectory = j.contains("trajectory") ? j.at("trajectory").get<TrajectoryConfig>() : d.trajectory;
  c.n_videos = j.value("n_videos", d.n_videos);
  c.holdout = j.value("holdout", d.holdout);
}

// ---------------------------------------------------------------------------
// Trajectory

std::vector<double> sample_trajectory(const TrajectoryConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto T = static_cast<std::size_t>(cfg.n_frames);

  std::vector<std::size_t> events;
  if (cfg.retraction_mean > 0.0 && T > 10) {
    const auto count = std::poisson_distribution<int>(cfg.retraction_mean)(rng);
    std::uniform_int_distribution<std::size_t> when(T / 10, T - 1);
    for (int k = 0; k < count; ++k) events.push_back(when(rng));
    std::sort(events.begin(), events.end());
    events.erase(std::unique(events.begin(), events.end()), events.end());
  }

  enum class Phase { Forward, Retracting, Reinserting };
  Phase phase = Phase::Forward;
  double p = 0.0;
  double retract_from = 0.0;
  int retract_len = 1;
  int retract_step = 0;
  std::size_t next_event = 0;

  std::vector<double> positions(T, 0.0);
  for (std::size_t t = 1; t < T; ++t) {
    while (next_event < events.size() && events[next_event] < t) ++next_event;
    if (phase == Phase::Forward && next_event < events.size() && events[next_event] == t) {
      ++next_event;
      if (p > 0.05) {
        phase = Phase::Retracting;
        retract_from = p;
        retract_len = std::uniform_int_distribution<int>(1, cfg.max_retraction_frames)(rng);
        retract_step = 0;
      }
    }
    switch (phase) {
      case Phase::Forward: {
        double slow = 1.0;
        for (const auto& z : cfg.dwell) {
          const double d = (p - z.center) / z.width;
          slow += z.strength * std::exp(-0.5 * d * d);
        }
        const double v = std::max(0.0, normal(rng, cfg.speed_mean, cfg.speed_sd));
        p += v / slow;
        break;
      }
      case Phase::Retracting: {
        ++retract_step;
        p = retract_from * (1.0 - static_cast<double>(retract_step) / retract_len);
        if (retract_step >= retract_len) {
          p = 0.0;
          phase = Phase::Reinserting;
        }
        break;
      }
      case Phase::Reinserting: {
        const double v = std::max(0.0, normal(rng, cfg.speed_mean, cfg.speed_sd));
        p += v * cfg.reinsertion_speedup;
        if (p >= retract_from) {
          p = retract_from;
          phase = Phase::Forward;
        }
        break;
      }
    }
    p = std::clamp(p, 0.0, 1.0);
    positions[t] = p;
  }
  return positions;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

Box render_box(double p, const ClassProfile& c, double drift_scale, Rng& rng) {
  const double u = (p - c.start) / (c.end - c.start);
  const double scale = 1.0 + c.growth * u;
  double w = c.base_w * scale * (1.0 + normal(rng, 0.0, c.jitter_sd));
  double h = c.base_h * scale * (1.0 + normal(rng, 0.0, c.jitter_sd));
  w = std::clamp(w, 0.01, 1.0);
  h = std::clamp(h, 0.01, 1.0);
  double cx = 0.5 + c.drift_x * u * drift_scale + normal(rng, 0.0, c.jitter_sd);
  double cy = 0.5 + c.drift_y * u * drift_scale + normal(rng, 0.0, c.jitter_sd);
  cx = std::clamp(cx, w / 2.0, 1.0 - w / 2.0);
  cy = std::clamp(cy, h / 2.0, 1.0 - h / 2.0);
  return {cx, cy, w, h};
}

}  // namespace

std::vector<RawDetection> render_detections(double p, const AnatomyProfile& profile,
                                            const ClassRegistry& registry, Rng& rng) {
  std::vector<RawDetection> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < profile.classes.size(); ++i) {
    const auto& c = profile.classes[i];
    if (p < c.start || p > c.end) continue;
    if (unit(rng) < profile.dropout) continue;
    const Box box = render_box(p, c, profile.drift_scale, rng);
    const double conf = profile.min_confidence + (1.0 - profile.min_confidence) * unit(rng);
    out.push_back({registry.anatomy_id(i), box, conf});
  }
  if (auto inst = registry.instrument_id(); inst && unit(rng) < profile.instrument_rate) {
    const double w = 0.1 + 0.3 * unit(rng);
    const double h = 0.1 + 0.3 * unit(rng);
    const double cx = w / 2.0 + (1.0 - w) * unit(rng);
    const double cy = h / 2.0 + (1.0 - h) * unit(rng);
    out.push_back({*inst, {cx, cy, w, h}, 0.5 + 0.5 * unit(rng)});
  }
  return out;
}

FrameDetections render_frame(double p, const AnatomyProfile& profile, Rng& rng) {
  const auto registry = profile.registry();
  const auto raws = render_detections(p, profile, registry, rng);
  // Rendered confidences never fall below min_confidence; keep everything here.
  return collapse_frame(raws, registry, 0.0);
}

SyntheticVideo generate_video(const AnatomyProfile& profile, TrajectoryConfig traj,
                              std::string video_id, std::uint64_t seed) {
  profile.validate();
  traj.seed = derive_seed(seed, "trajectory");
  SyntheticVideo v;
  v.video_id = std::move(video_id);
  v.seed = seed;
  v.positions = sample_trajectory(traj);

  const auto registry = profile.registry();
  Rng rng(derive_seed(seed, "render"));
  v.frames.reserve(v.positions.size());
  for (std::size_t t = 0; t < v.positions.size(); ++t) {
    auto raws = render_detections(v.positions[t], profile, registry, rng);
    auto frame = collapse_frame(raws, registry, kDefaultConfidenceThreshold);
    frame.frame_index = static_cast<std::int64_t>(t);
    frame.video_id = v.video_id;
    v.frames.push_back(std::move(frame));
    // Every frame gets a record so a stream's length equals the video's.
    v.records.push_back({v.video_id, static_cast<std::int64_t>(t), std::move(raws)});
  }
  return v;
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

void write_split(const DatasetConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir,
                 std::size_t first_index, std::size_t count) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "videos");
  const auto registry = cfg.profile.registry();

  nlohmann::ordered_json manifest;
  manifest["format"] = kDatasetFormat;
  manifest["version"] = kDatasetVersion;
  manifest["seed"] = seed;
  manifest["config_hash"] = cfg.hash();
  manifest["config"] = nlohmann::json(cfg);
  manifest["classes"] = registry.to_json();
  manifest["ground_truth"] = "ground_truth.jsonl";
  auto videos = nlohmann::ordered_json::array();

  std::ofstream gt(dir / "ground_truth.jsonl", std::ios::binary | std::ios::trunc);
  if (!gt) throw std::runtime_error("cannot write ground truth in '" + dir.string() + "'");

  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t index = first_index + k;
    char id[32];
    std::snprintf(id, sizeof id, "vid_%03zu", index);
    const std::uint64_t video_seed = derive_seed(seed, "video", index);
    const auto video = generate_video(cfg.profile, cfg.trajectory, id, video_seed);

    const std::string rel = std::string("videos/") + id + ".jsonl";
    std::ofstream out(dir / rel, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + (dir / rel).string() + "'");
    serialize_stream(out, video.records, registry);
    if (!out) throw std::runtime_error("write failed for '" + (dir / rel).string() + "'");

    for (std::size_t t = 0; t < video.positions.size(); ++t) {
      nlohmann::ordered_json g;
      g["video_id"] = video.video_id;
      g["frame"] = t;
      g["p"] = video.positions[t];
      gt << g.dump() << '\n';
    }
    videos.push_back({{"video_id", video.video_id},
                      {"file", rel},
                      {"seed", video_seed},
                      {"n_frames", video.positions.size()}});
  }
  if (!gt) throw std::runtime_error("write failed for ground truth");
  manifest["videos"] = std::move(videos);
  write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

}  // namespace

DatasetSummary generate_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& dir) {
  cfg.profile.validate();
  cfg.trajectory.validate();
  write_split(cfg, seed, dir, 0, cfg.n_videos);
  if (cfg.holdout > 0) write_split(cfg, seed, dir / "test", cfg.n_videos, cfg.holdout);
  return {dir, cfg.n_videos, cfg.holdout, cfg.hash()};
}

}  // namespace roadnav::sim
