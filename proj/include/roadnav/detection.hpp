#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

namespace roadnav {

/// Normalized box (center x, center y, width, height), all relative to the frame.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct ClassEntry {
  int id = 0;
  std::string name;
  bool is_instrument = false;
};

/// Ordered set of detector classes. At most one instrument class; the
/// remaining (anatomy) classes are assigned consecutive anatomy slots in
/// registry order, which is the row order used by FrameDetections.
class ClassRegistry {
 public:
  explicit ClassRegistry(std::vector<ClassEntry> entries);

  /// 15 anatomy classes followed by "Instrument".
  static ClassRegistry standard();
  /// First `n_anatomy` names of the standard registry plus "Instrument".
  static ClassRegistry standard_subset(std::size_t n_anatomy);

  static ClassRegistry from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  std::size_t size() const { return entries_.size(); }
  std::size_t n_anatomy() const { return anatomy_ids_.size(); }
  const ClassEntry& at(int id) const;
  const std::vector<ClassEntry>& entries() const { return entries_; }

  std::optional<int> find(std::string_view name) const;
  std::optional<int> instrument_id() const { return instrument_id_; }

  /// Anatomy slot of a registry id, or nullopt for the instrument class.
  std::optional<std::size_t> anatomy_slot(int id) const;
  /// Registry id of an anatomy slot.
  int anatomy_id(std::size_t slot) const { return anatomy_ids_.at(slot); }
  std::vector<std::string> anatomy_names() const;

 private:
  std::vector<ClassEntry> entries_;
  std::vector<int> anatomy_ids_;
  std::vector<std::optional<std::size_t>> slot_of_id_;
  std::optional<int> instrument_id_;
};

struct RawDetection {
  int class_id = 0;
  Box box;
  double confidence = 0.0;

  friend bool operator==(const RawDetection&, const RawDetection&) = default;
};

/// One line of a detection stream.
struct FrameRecord {
  std::string video_id;
  std::int64_t frame = 0;
  std::vector<RawDetection> detections;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

/// Per-frame anatomy state: presence vector plus one box row per class.
/// Absent classes always carry an all-zero box.
struct FrameDetections {
  std::vector<std::uint8_t> presence;
  std::vector<Box> boxes;
  std::int64_t frame_index = 0;
  std::string video_id;

  FrameDetections() = default;
  explicit FrameDetections(std::size_t n_anatomy, std::int64_t frame = 0, std::string video = {});

  std::size_t n() const { return presence.size(); }
  bool present(std::size_t i) const { return presence[i] != 0; }
  void set(std::size_t i, const Box& box);
  void clear(std::size_t i);
  std::size_t count_present() const;

  friend bool operator==(const FrameDetections&, const FrameDetections&) = default;
};

/// s consecutive frames ending at the target frame (last element).
struct DetectionWindow {
  std::vector<FrameDetections> frames;

  std::size_t length() const { return frames.size(); }
  const FrameDetections& target() const { return frames.back(); }
};

class StreamError : public std::runtime_error {
 public:
  StreamError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline constexpr double kDefaultConfidenceThreshold = 0.25;

/// Parses newline-delimited detection records. Blank lines are skipped.
std::vector<FrameRecord> parse_stream(std::istream& in, const ClassRegistry& registry);
std::vector<FrameRecord> parse_stream_file(const std::string& path, const ClassRegistry& registry);
FrameRecord parse_record(std::string_view line, const ClassRegistry& registry, std::size_t line_no = 1);

void write_record(std::ostream& out, const FrameRecord& record, const ClassRegistry& registry);
void serialize_stream(std::ostream& out, std::span<const FrameRecord> records,
                      const ClassRegistry& registry);

/// Drops the instrument and low-confidence detections, then keeps the most
/// confident detection per anatomy class.
FrameDetections collapse_frame(std::span<const RawDetection> raws, const ClassRegistry& registry,
                               double conf_threshold = kDefaultConfidenceThreshold);

/// Collapses every record and fills absent frames with empty ones, giving a
/// dense list for frames 0..max(n_frames, last record + 1) - 1.
std::vector<FrameDetections> densify(std::span<const FrameRecord> records,
                                     const ClassRegistry& registry,
                                     std::optional<std::int64_t> n_frames = std::nullopt,
                                     double conf_threshold = kDefaultConfidenceThreshold);

/// Inverse of collapse_frame for emitting streams: one detection per present class.
FrameRecord to_record(const FrameDetections& frame, const ClassRegistry& registry,
                      double confidence = 1.0);

/// Window ending at `target` with start padding by the first frame.
DetectionWindow window_at(std::span<const FrameDetections> frames, std::size_t target,
                          std::size_t s);
std::vector<DetectionWindow> make_windows(std::span<const FrameDetections> frames, std::size_t s,
                                          std::size_t stride = 1);

/// Model input layout: one row per frame, per class [presence, cx, cy, w, h].
Eigen::MatrixXd window_tokens(const DetectionWindow& window);
Eigen::RowVectorXd frame_row(const FrameDetections& frame);

/// Dense (frames x 5n) matrix of one video, the compact form used for training.
class VideoTensor {
 public:
  VideoTensor() = default;
  VideoTensor(std::string video_id, std::span<const FrameDetections> frames);

  const std::string& video_id() const { return video_id_; }
  std::size_t n_frames() const { return static_cast<std::size_t>(rows_.rows()); }
  std::size_t n_classes() const { return static_cast<std::size_t>(rows_.cols()) / 5; }
  const Eigen::MatrixXd& rows() const { return rows_; }

  /// Same layout and padding rule as window_tokens(window_at(...)).
  Eigen::MatrixXd window(std::size_t target, std::size_t s) const;
  FrameDetections frame(std::size_t t) const;

 private:
  std::string video_id_;
  Eigen::MatrixXd rows_;
};

}  // namespace roadnav
