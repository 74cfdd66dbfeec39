#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "roadnav/checkpoint.hpp"
#include "roadnav/detection.hpp"

namespace roadnav {

/// Latent range over which a class's normalized confidence stays >= theta
/// (longest contiguous run of grid points).
struct ClassInterval {
  bool empty = true;
  double z_start = 0.0;
  double z_end = 0.0;
  std::size_t k_start = 0;
  std::size_t k_end = 0;
};

/// Decoder output sampled on a uniform grid of canonical latent values.
struct Roadmap {
  std::vector<std::string> class_names;
  std::vector<double> z_grid;                // K interior points (k + 1) / (K + 1)
  Eigen::MatrixXd confidence;                // n x K
  Eigen::MatrixXd confidence_normalized;     // n x K, each non-empty row peaks at exactly 1
  std::vector<Eigen::MatrixXd> boxes;        // n entries of K x 4
  std::vector<ClassInterval> intervals;      // n
  double theta = 0.5;
  bool orientation_flipped = false;
  std::string checkpoint;                    // checkpoint content hash

  std::size_t n() const { return class_names.size(); }
  std::size_t k() const { return z_grid.size(); }

  nlohmann::ordered_json to_json() const;
  static Roadmap from_json(const nlohmann::json& j);
  /// Canonical text form; identical roadmaps give identical bytes.
  std::string serialize() const;
};

inline constexpr std::size_t kDefaultGrid = 200;
inline constexpr double kDefaultTheta = 0.5;
inline constexpr std::size_t kDefaultBins = 100;

Roadmap build_roadmap(const Checkpoint& ckpt, std::size_t grid = kDefaultGrid, double theta = kDefaultTheta);

/// Canonical z for every `stride`-th frame of a video (window ending at that frame).
std::vector<double> encode_video(const VideoTensor& video, const Checkpoint& ckpt, std::size_t stride = 1);

struct OrientationResult {
  double r_before = 0.0;
  double r_after = 0.0;
  bool flipped = false;  // whether this call toggled the flag
};

/// Mean over probe videos of Pearson(frame time, canonical z). If negative,
/// toggles ckpt.orientation_flipped so that z = 0 is the path start. Applying
/// it to an already canonical checkpoint changes nothing.
OrientationResult canonicalize_orientation(Checkpoint& ckpt, std::span<const VideoTensor> probes,
                                           std::size_t stride = 1);

struct FirstAppearance {
  std::string video_id;
  std::size_t class_index = 0;
  std::size_t frame = 0;
  double z = 0.0;
};

/// First frame of each class that ever appears, encoded with the window that
/// ends at that frame.
std::vector<FirstAppearance> first_appearances(const VideoTensor& video, const Checkpoint& ckpt);

/// Fraction of a class's confidence mass at grid points z' <= z. NaN for an
/// empty class.
double alignment_score(const Roadmap& roadmap, std::size_t class_index, double z);

struct Alignment {
  FirstAppearance first;
  double score = 0.0;
};
/// Scores each first appearance; classes with an empty interval are skipped.
std::vector<Alignment> align(std::span<const FirstAppearance> firsts, const Roadmap& roadmap);

struct FirstEncoding {
  double t = 0.0;      // frame / (frames - 1)
  double z_bin = 0.0;  // bin center
};

struct CorrelationEntry {
  std::string video_id;
  double r = 0.0;
  std::vector<FirstEncoding> points;
};

/// For each z bin, the earliest frame whose z falls in it; Pearson r between
/// those times and the bin centers. Throws stats::DegenerateSample when fewer
/// than two bins are occupied.
CorrelationEntry first_encoding_correlation(std::span<const double> z_trace, std::size_t n_bins,
                                            std::string video_id = {});
CorrelationEntry time_z_correlation(const VideoTensor& video, const Checkpoint& ckpt,
                                    std::size_t n_bins = kDefaultBins);

struct CorrelationReport {
  std::vector<CorrelationEntry> entries;
  double mean_r = 0.0;
  double mean_abs_r = 0.0;
};
CorrelationReport summarize(std::vector<CorrelationEntry> entries);

struct VideoEvaluation {
  std::string video_id;
  std::optional<double> first_encoding_r;  // absent when fewer than two bins are hit
  std::optional<double> spearman;          // canonical z vs ground truth, when known
  std::vector<Alignment> alignments;
};

struct EvaluationReport {
  std::vector<VideoEvaluation> videos;
  double mean_first_encoding_r = 0.0;
  double mean_abs_first_encoding_r = 0.0;
  std::optional<double> mean_spearman;
  std::optional<double> median_alignment;
  std::size_t n_bins = kDefaultBins;

  nlohmann::ordered_json to_json() const;
};

/// Runs the correlation and alignment suites over a set of videos.
/// `positions[i]` holds per-frame ground truth for videos[i] or is empty.
EvaluationReport evaluate_embedding(const Checkpoint& ckpt, const Roadmap& roadmap,
                                    std::span<const VideoTensor> videos,
                                    std::span<const std::vector<double>> positions = {},
                                    std::size_t n_bins = kDefaultBins);

struct SweepFrame {
  std::size_t k = 0;
  double z = 0.0;
  struct Item {
    std::size_t class_index;
    double confidence;
    Box box;
  };
  std::vector<Item> items;
};

/// One frame per grid point with the decoded boxes of every class whose
/// interval covers that point.
std::vector<SweepFrame> roadmap_sweep(const Roadmap& roadmap);

/// Writes sweep.json (all frames) and sweep.svg (a strip of box overlays).
void export_roadmap_sweep(const Roadmap& roadmap, const std::filesystem::path& dir,
                          std::size_t svg_frames = 20);

}  // namespace roadnav
