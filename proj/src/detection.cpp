#include "roadnav/detection.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace roadnav {

namespace {

const std::vector<std::string>& standard_anatomy_names() {
  static const std::vector<std::string> names = {
      "Septum",          "SupM",          "MidM",
      "InfM",            "Coana",         "Floor",
      "RecSphEthm",      "Ostium",        "Rostrum",
      "Sphenoidal Sinus", "Sella Floor",  "Clival Recess",
      "Planum",          "Osseous Carotis Left", "Osseous Carotis Right"};
  return names;
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

// ---------------------------------------------------------------------------
// ClassRegistry

ClassRegistry::ClassRegistry(std::vector<ClassEntry> entries) : entries_(std::move(entries)) {
  std::unordered_set<std::string> names;
  slot_of_id_.resize(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.id != static_cast<int>(i)) {
      throw std::invalid_argument("class ids must be contiguous from 0 (entry " +
                                  std::to_string(i) + " has id " + std::to_string(e.id) + ")");
    }
    if (e.name.empty()) throw std::invalid_argument("class name must not be empty");
    if (!names.insert(e.name).second) {
      throw std::invalid_argument("duplicate class name '" + e.name + "'");
    }
    if (e.is_instrument) {
      if (instrument_id_) throw std::invalid_argument("at most one instrument class allowed");
      instrument_id_ = e.id;
    } else {
      slot_of_id_[i] = anatomy_ids_.size();
      anatomy_ids_.push_back(e.id);
    }
  }
  if (anatomy_ids_.empty()) throw std::invalid_argument("registry needs at least one anatomy class");
}

ClassRegistry ClassRegistry::standard() { return standard_subset(standard_anatomy_names().size()); }

ClassRegistry ClassRegistry::standard_subset(std::size_t n_anatomy) {
  const auto& names = standard_anatomy_names();
  if (n_anatomy == 0 || n_anatomy > names.size()) {
    throw std::invalid_argument("standard registry supports 1.." + std::to_string(names.size()) +
                                " anatomy classes");
  }
  std::vector<ClassEntry> entries;
  for (std::size_t i = 0; i < n_anatomy; ++i) {
    entries.push_back({static_cast<int>(i), names[i], false});
  }
  entries.push_back({static_cast<int>(n_anatomy), "Instrument", true});
  return ClassRegistry(std::move(entries));
}

ClassRegistry ClassRegistry::from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("class registry must be a JSON array");
  std::vector<ClassEntry> entries;
  for (const auto& e : j) {
    entries.push_back({e.at("id").get<int>(), e.at("name").get<std::string>(),
                       e.value("instrument", false)});
  }
  return ClassRegistry(std::move(entries));
}

nlohmann::json ClassRegistry::to_json() const {
  auto j = nlohmann::json::array();
  for (const auto& e : entries_) {
    j.push_back({{"id", e.id}, {"name", e.name}, {"instrument", e.is_instrument}});
  }
  return j;
}

const ClassEntry& ClassRegistry::at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    throw std::out_of_range("unknown class id " + std::to_string(id));
  }
  return entries_[static_cast<std::size_t>(id)];
}

std::optional<int> ClassRegistry::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.id;
  }
  return std::nullopt;
}

std::optional<std::size_t> ClassRegistry::anatomy_slot(int id) const {
  at(id);
  return slot_of_id_[static_cast<std::size_t>(id)];
}

std::vector<std::string> ClassRegistry::anatomy_names() const {
  std::vector<std::string> out;
  out.reserve(anatomy_ids_.size());
  for (int id : anatomy_ids_) out.push_back(entries_[static_cast<std::size_t>(id)].name);
  return out;
}

// ---------------------------------------------------------------------------
// FrameDetections

FrameDetections::FrameDetections(std::size_t n_anatomy, std::int64_t frame, std::string video)
    : presence(n_anatomy, 0), boxes(n_anatomy), frame_index(frame), video_id(std::move(video)) {}

void FrameDetections::set(std::size_t i, const Box& box) {
  presence.at(i) = 1;
  boxes.at(i) = box;
}

void FrameDetections::clear(std::size_t i) {
  presence.at(i) = 0;
  boxes.at(i) = Box{};
}

std::size_t FrameDetections::count_present() const {
  return static_cast<std::size_t>(std::count(presence.begin(), presence.end(), 1));
}

// ---------------------------------------------------------------------------
// Stream format

FrameRecord parse_record(std::string_view line, const ClassRegistry& registry, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw StreamError(line_no, std::string("malformed record: ") + e.what());
  }
  FrameRecord rec;
  try {
    if (!j.is_object()) throw StreamError(line_no, "malformed record: expected an object");
    rec.video_id = j.at("video_id").get<std::string>();
    rec.frame = j.at("frame").get<std::int64_t>();
    if (rec.frame < 0) throw StreamError(line_no, "negative frame index");
    const auto& dets = j.at("detections");
    if (!dets.is_array()) throw StreamError(line_no, "malformed record: detections must be an array");
    for (const auto& d : dets) {
      RawDetection det;
      const auto& cls = d.at("class");
      if (cls.is_string()) {
        auto id = registry.find(cls.get<std::string>());
        if (!id) throw StreamError(line_no, "unknown class name '" + cls.get<std::string>() + "'");
        det.class_id = *id;
      } else if (cls.is_number_integer()) {
        det.class_id = cls.get<int>();
        if (det.class_id < 0 || static_cast<std::size_t>(det.class_id) >= registry.size()) {
          throw StreamError(line_no, "unknown class id " + std::to_string(det.class_id));
        }
      } else {
        throw StreamError(line_no, "malformed record: class must be a name or an integer id");
      }
      det.box = {d.at("cx").get<double>(), d.at("cy").get<double>(), d.at("w").get<double>(),
                 d.at("h").get<double>()};
      det.confidence = d.at("conf").get<double>();
      const auto& b = det.box;
      if (!in_unit(b.cx) || !in_unit(b.cy) || !in_unit(b.w) || !in_unit(b.h)) {
        throw StreamError(line_no, "coordinate out of range");
      }
      if (b.w <= 0.0 || b.h <= 0.0) throw StreamError(line_no, "box width and height must be positive");
      if (!in_unit(det.confidence)) throw StreamError(line_no, "confidence out of range");
      rec.detections.push_back(det);
    }
  } catch (const nlohmann::json::exception& e) {
    throw StreamError(line_no, std::string("malformed record: ") + e.what());
  }
  return rec;
}

std::vector<FrameRecord> parse_stream(std::istream& in, const ClassRegistry& registry) {
  std::vector<FrameRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_record(line, registry, line_no));
  }
  return out;
}

std::vector<FrameRecord> parse_stream_file(const std::string& path, const ClassRegistry& registry) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open detection stream '" + path + "'");
  return parse_stream(in, registry);
}

void write_record(std::ostream& out, const FrameRecord& record, const ClassRegistry& registry) {
  nlohmann::ordered_json j;
  j["video_id"] = record.video_id;
  j["frame"] = record.frame;
  auto dets = nlohmann::ordered_json::array();
  for (const auto& d : record.detections) {
    nlohmann::ordered_json dj;
    dj["class"] = registry.at(d.class_id).name;
    dj["cx"] = d.box.cx;
    dj["cy"] = d.box.cy;
    dj["w"] = d.box.w;
    dj["h"] = d.box.h;
    dj["conf"] = d.confidence;
    dets.push_back(std::move(dj));
  }
  j["detections"] = std::move(dets);
  out << j.dump() << '\n';
}

void serialize_stream(std::ostream& out, std::span<const FrameRecord> records,
                      const ClassRegistry& registry) {
  for (const auto& r : records) write_record(out, r, registry);
}

// ---------------------------------------------------------------------------
// Collapsing and windowing

FrameDetections collapse_frame(std::span<const RawDetection> raws, const ClassRegistry& registry,
                               double conf_threshold) {
  FrameDetections out(registry.n_anatomy());
  std::vector<double> best(registry.n_anatomy(), -1.0);
  for (const auto& d : raws) {
    auto slot = registry.anatomy_slot(d.class_id);
    if (!slot || d.confidence < conf_threshold) continue;
    if (d.confidence > best[*slot]) {
      best[*slot] = d.confidence;
      out.set(*slot, d.box);
    }
  }
  return out;
}

std::vector<FrameDetections> densify(std::span<const FrameRecord> records,
                                     const ClassRegistry& registry,
                                     std::optional<std::int64_t> n_frames, double conf_threshold) {
  std::int64_t total = n_frames.value_or(0);
  for (const auto& r : records) total = std::max(total, r.frame + 1);
  const std::string video = records.empty() ? std::string{} : records.front().video_id;
  std::vector<FrameDetections> out;
  out.reserve(static_cast<std::size_t>(total));
  for (std::int64_t t = 0; t < total; ++t) {
    out.emplace_back(registry.n_anatomy(), t, video);
  }
  for (const auto& r : records) {
    auto f = collapse_frame(r.detections, registry, conf_threshold);
    f.frame_index = r.frame;
    f.video_id = r.video_id;
    out[static_cast<std::size_t>(r.frame)] = std::move(f);
  }
  return out;
}

FrameRecord to_record(const FrameDetections& frame, const ClassRegistry& registry,
                      double confidence) {
  FrameRecord rec{frame.video_id, frame.frame_index, {}};
  for (std::size_t i = 0; i < frame.n(); ++i) {
    if (frame.present(i)) rec.detections.push_back({registry.anatomy_id(i), frame.boxes[i], confidence});
  }
  return rec;
}

DetectionWindow window_at(std::span<const FrameDetections> frames, std::size_t target,
                          std::size_t s) {
  if (frames.empty()) throw std::invalid_argument("cannot window an empty frame list");
  if (s == 0) throw std::invalid_argument("window length must be >= 1");
  if (target >= frames.size()) throw std::out_of_range("window target beyond last frame");
  DetectionWindow w;
  w.frames.reserve(s);
  for (std::size_t k = 0; k < s; ++k) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(target) - static_cast<std::ptrdiff_t>(s - 1 - k);
    w.frames.push_back(frames[src < 0 ? 0 : static_cast<std::size_t>(src)]);
  }
  return w;
}

std::vector<DetectionWindow> make_windows(std::span<const FrameDetections> frames, std::size_t s,
                                          std::size_t stride) {
  if (frames.empty()) throw std::invalid_argument("cannot window an empty frame list");
  if (s == 0 || stride == 0) throw std::invalid_argument("window length and stride must be >= 1");
  std::vector<DetectionWindow> out;
  for (std::size_t t = 0; t < frames.size(); t += stride) out.push_back(window_at(frames, t, s));
  return out;
}

Eigen::RowVectorXd frame_row(const FrameDetections& frame) {
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(5 * frame.n()));
  for (std::size_t i = 0; i < frame.n(); ++i) {
    const auto& b = frame.boxes[i];
    const auto c = static_cast<Eigen::Index>(5 * i);
    row(c) = frame.present(i) ? 1.0 : 0.0;
    row(c + 1) = b.cx;
    row(c + 2) = b.cy;
    row(c + 3) = b.w;
    row(c + 4) = b.h;
  }
  return row;
}

Eigen::MatrixXd window_tokens(const DetectionWindow& window) {
  if (window.frames.empty()) throw std::invalid_argument("empty window");
  const auto n = window.frames.front().n();
  Eigen::MatrixXd tokens(static_cast<Eigen::Index>(window.length()), static_cast<Eigen::Index>(5 * n));
  for (std::size_t k = 0; k < window.length(); ++k) {
    if (window.frames[k].n() != n) throw std::invalid_argument("window frames disagree on class count");
    tokens.row(static_cast<Eigen::Index>(k)) = frame_row(window.frames[k]);
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// VideoTensor

VideoTensor::VideoTensor(std::string video_id, std::span<const FrameDetections> frames)
    : video_id_(std::move(video_id)) {
  if (frames.empty()) throw std::invalid_argument("video has no frames");
  const auto n = frames.front().n();
  rows_.resize(static_cast<Eigen::Index>(frames.size()), static_cast<Eigen::Index>(5 * n));
  for (std::size_t t = 0; t < frames.size(); ++t) {
    rows_.row(static_cast<Eigen::Index>(t)) = frame_row(frames[t]);
  }
}

Eigen::MatrixXd VideoTensor::window(std::size_t target, std::size_t s) const {
  if (target >= n_frames()) throw std::out_of_range("window target beyond last frame");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(s), rows_.cols());
  for (std::size_t k = 0; k < s; ++k) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(target) - static_cast<std::ptrdiff_t>(s - 1 - k);
    out.row(static_cast<Eigen::Index>(k)) = rows_.row(src < 0 ? 0 : src);
  }
  return out;
}

FrameDetections VideoTensor::frame(std::size_t t) const {
  FrameDetections f(n_classes(), static_cast<std::int64_t>(t), video_id_);
  const auto row = rows_.row(static_cast<Eigen::Index>(t));
  for (std::size_t i = 0; i < n_classes(); ++i) {
    const auto c = static_cast<Eigen::Index>(5 * i);
    if (row(c) != 0.0) f.set(i, {row(c + 1), row(c + 2), row(c + 3), row(c + 4)});
  }
  return f;
}

}  // namespace roadnav
