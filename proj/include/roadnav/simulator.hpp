#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "roadnav/detection.hpp"
#include "roadnav/util.hpp"

// Synthetic endoscopy: a 1D tunnel traversal rendered as detection streams
// with ground-truth path positions.
namespace roadnav::sim {

struct ClassProfile {
  std::string name;
  double start = 0.0;  // visibility interval on the path
  double end = 1.0;
  double base_w = 0.15;
  double base_h = 0.15;
  double growth = 1.0;
  // Unit direction the box center drifts toward; (0, 0) keeps it centered.
  double drift_x = 0.0;
  double drift_y = 0.0;
  double jitter_sd = 0.02;
};

struct AnatomyProfile {
  std::vector<ClassProfile> classes;
  double dropout = 0.1;
  double drift_scale = 0.3;
  double instrument_rate = 0.3;
  double min_confidence = 0.3;

  void validate() const;
  /// Anatomy classes in profile order followed by "Instrument".
  ClassRegistry registry() const;

  /// Evenly staggered intervals covering [0, 1]; `overlap` is the fraction of
  /// each interval shared with the next one.
  static AnatomyProfile benchmark(std::size_t n_classes = 10, double overlap = 0.55,
                                  double jitter_sd = 0.02, double dropout = 0.1);
};

struct DwellZone {
  double center = 0.5;
  double strength = 1.0;
  double width = 0.05;
};

struct TrajectoryConfig {
  std::int64_t n_frames = 2000;
  double speed_mean = 1.0 / 900.0;
  double speed_sd = 0.0005;
  std::vector<DwellZone> dwell = {{0.2, 1.0, 0.05}, {0.6, 1.0, 0.05}};
  double retraction_mean = 2.0;  // Poisson mean of retraction events per video
  int max_retraction_frames = 5;
  double reinsertion_speedup = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetConfig {
  AnatomyProfile profile = AnatomyProfile::benchmark();
  TrajectoryConfig trajectory;
  std::size_t n_videos = 30;
  std::size_t holdout = 5;

  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const ClassProfile& c);
void from_json(const nlohmann::json& j, ClassProfile& c);
void to_json(nlohmann::json& j, const AnatomyProfile& p);
void from_json(const nlohmann::json& j, AnatomyProfile& p);
void to_json(nlohmann::json& j, const DwellZone& d);
void from_json(const nlohmann::json& j, DwellZone& d);
void to_json(nlohmann::json& j, const TrajectoryConfig& c);
void from_json(const nlohmann::json& j, TrajectoryConfig& c);
void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct SyntheticVideo {
  std::string video_id;
  std::uint64_t seed = 0;
  std::vector<double> positions;
  std::vector<FrameRecord> records;      // raw detector-style output, one per frame, instrument included
  std::vector<FrameDetections> frames;   // collapsed, one per frame
};

/// Ground-truth path positions, p[0] = 0, all in [0, 1]. Seeded by cfg.seed.
std::vector<double> sample_trajectory(const TrajectoryConfig& cfg);

/// Detector-style output for path position p (anatomy + optional instrument).
std::vector<RawDetection> render_detections(double p, const AnatomyProfile& profile,
                                            const ClassRegistry& registry, Rng& rng);
FrameDetections render_frame(double p, const AnatomyProfile& profile, Rng& rng);

SyntheticVideo generate_video(const AnatomyProfile& profile, TrajectoryConfig traj,
                              std::string video_id, std::uint64_t seed);

struct DatasetSummary {
  std::filesystem::path dir;
  std::size_t n_videos = 0;
  std::size_t n_holdout = 0;
  std::string config_hash;
};

/// Writes `n_videos` streams to `dir` and `holdout` more to `dir/test`, each
/// with ground truth and a manifest. Same (config, seed) gives identical bytes.
DatasetSummary generate_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& dir);

}  // namespace roadnav::sim
