#include "roadnav/dataset.hpp"

#include <fstream>
#include <map>

#include "roadnav/util.hpp"

namespace roadnav {

Dataset load_dataset(const std::filesystem::path& dir, double conf_threshold) {
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid manifest '" + manifest_path.string() + "': " + e.what());
  }
  if (manifest.value("format", std::string{}) != kDatasetFormat) {
    throw std::runtime_error("'" + manifest_path.string() + "' is not a dataset manifest");
  }
  if (manifest.value("version", 0) != kDatasetVersion) {
    throw std::runtime_error("unsupported dataset version in '" + manifest_path.string() + "'");
  }

  Dataset ds{dir, ClassRegistry::from_json(manifest.at("classes")),
             manifest.value("config", nlohmann::json{}), {}};

  std::map<std::string, std::vector<double>> truth;
  if (manifest.contains("ground_truth")) {
    std::ifstream gt(dir / manifest.at("ground_truth").get<std::string>());
    std::string line;
    while (gt && std::getline(gt, line)) {
      if (line.empty()) continue;
      const auto g = nlohmann::json::parse(line);
      auto& v = truth[g.at("video_id").get<std::string>()];
      const auto frame = g.at("frame").get<std::size_t>();
      if (v.size() <= frame) v.resize(frame + 1, 0.0);
      v[frame] = g.at("p").get<double>();
    }
  }

  for (const auto& entry : manifest.at("videos")) {
    VideoData video;
    video.video_id = entry.at("video_id").get<std::string>();
    const auto records = parse_stream_file((dir / entry.at("file").get<std::string>()).string(), ds.registry);
    std::optional<std::int64_t> n_frames;
    if (entry.contains("n_frames")) n_frames = entry.at("n_frames").get<std::int64_t>();
    video.frames = densify(records, ds.registry, n_frames, conf_threshold);
    for (auto& f : video.frames) f.video_id = video.video_id;
    if (video.frames.empty()) throw std::runtime_error("video '" + video.video_id + "' has no frames");
    if (auto it = truth.find(video.video_id); it != truth.end()) {
      video.positions = std::move(it->second);
      video.positions.resize(video.frames.size(), video.positions.empty() ? 0.0 : video.positions.back());
    }
    ds.videos.push_back(std::move(video));
  }
  return ds;
}

}  // namespace roadnav
