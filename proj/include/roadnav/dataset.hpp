#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadnav/detection.hpp"

namespace roadnav {

inline constexpr const char* kDatasetFormat = "roadnav-dataset";
inline constexpr int kDatasetVersion = 1;

struct VideoData {
  std::string video_id;
  std::vector<FrameDetections> frames;  // dense, frame k at index k
  std::vector<double> positions;        // ground-truth path positions; empty when unknown
};

/// A directory of detection streams described by manifest.json.
struct Dataset {
  std::filesystem::path dir;
  ClassRegistry registry;
  nlohmann::json config;  // generator config, null for external data
  std::vector<VideoData> videos;
};

Dataset load_dataset(const std::filesystem::path& dir,
                     double conf_threshold = kDefaultConfidenceThreshold);

}  // namespace roadnav
