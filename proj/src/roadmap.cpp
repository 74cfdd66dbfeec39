#include "roadnav/roadmap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "roadnav/stats.hpp"
#include "roadnav/util.hpp"

namespace roadnav {

namespace {

constexpr const char* kRoadmapFormat = "roadnav-roadmap";
constexpr double kEmptyRow = 1e-9;

std::vector<double> row_vector(const Eigen::MatrixXd& m, Eigen::Index r) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index k = 0; k < m.cols(); ++k) out[static_cast<std::size_t>(k)] = m(r, k);
  return out;
}

ClassInterval longest_run(const Eigen::MatrixXd& norm, Eigen::Index row, const std::vector<double>& grid,
                          double theta) {
  ClassInterval best;
  std::size_t run_start = 0;
  std::size_t best_len = 0;
  bool in_run = false;
  const auto K = static_cast<std::size_t>(norm.cols());
  for (std::size_t k = 0; k <= K; ++k) {
    const bool above = k < K && norm(row, static_cast<Eigen::Index>(k)) >= theta;
    if (above && !in_run) {
      run_start = k;
      in_run = true;
    } else if (!above && in_run) {
      in_run = false;
      if (k - run_start > best_len) {
        best_len = k - run_start;
        best.k_start = run_start;
        best.k_end = k - 1;
      }
    }
  }
  if (best_len > 0) {
    best.empty = false;
    best.z_start = grid[best.k_start];
    best.z_end = grid[best.k_end];
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// Roadmap

nlohmann::ordered_json Roadmap::to_json() const {
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    nlohmann::ordered_json box_rows = nlohmann::ordered_json::array();
    for (Eigen::Index k = 0; k < boxes[i].rows(); ++k) {
      box_rows.push_back({boxes[i](k, 0), boxes[i](k, 1), boxes[i](k, 2), boxes[i](k, 3)});
    }
    nlohmann::ordered_json interval = nullptr;
    if (!intervals[i].empty) {
      interval = {{"z_start", intervals[i].z_start},
                  {"z_end", intervals[i].z_end},
                  {"k_start", intervals[i].k_start},
                  {"k_end", intervals[i].k_end}};
    }
    classes.push_back({{"name", class_names[i]},
                       {"empty", intervals[i].empty},
                       {"interval", interval},
                       {"confidence", row_vector(confidence, r)},
                       {"confidence_normalized", row_vector(confidence_normalized, r)},
                       {"boxes", box_rows}});
  }
  return {{"format", kRoadmapFormat},
          {"checkpoint", checkpoint},
          {"orientation_flipped", orientation_flipped},
          {"theta", theta},
          {"z_grid", z_grid},
          {"classes", classes}};
}

Roadmap Roadmap::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != kRoadmapFormat) throw std::invalid_argument("not a roadmap document");
  Roadmap r;
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.orientation_flipped = j.at("orientation_flipped").get<bool>();
  r.theta = j.at("theta").get<double>();
  r.z_grid = j.at("z_grid").get<std::vector<double>>();
  const auto& classes = j.at("classes");
  const auto n = static_cast<Eigen::Index>(classes.size());
  const auto K = static_cast<Eigen::Index>(r.z_grid.size());
  r.confidence.resize(n, K);
  r.confidence_normalized.resize(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = classes[static_cast<std::size_t>(i)];
    r.class_names.push_back(c.at("name").get<std::string>());
    const auto conf = c.at("confidence").get<std::vector<double>>();
    const auto norm = c.at("confidence_normalized").get<std::vector<double>>();
    const auto box_rows = c.at("boxes").get<std::vector<std::array<double, 4>>>();
    if (static_cast<Eigen::Index>(conf.size()) != K || static_cast<Eigen::Index>(norm.size()) != K ||
        static_cast<Eigen::Index>(box_rows.size()) != K) {
      throw std::invalid_argument("roadmap class '" + r.class_names.back() + "' has arrays of the wrong length");
    }
    Eigen::MatrixXd boxes(K, 4);
    for (Eigen::Index k = 0; k < K; ++k) {
      r.confidence(i, k) = conf[static_cast<std::size_t>(k)];
      r.confidence_normalized(i, k) = norm[static_cast<std::size_t>(k)];
      for (Eigen::Index q = 0; q < 4; ++q) boxes(k, q) = box_rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(q)];
    }
    r.boxes.push_back(std::move(boxes));
    ClassInterval iv;
    iv.empty = c.at("empty").get<bool>();
    if (!iv.empty) {
      const auto& ij = c.at("interval");
      iv.z_start = ij.at("z_start").get<double>();
      iv.z_end = ij.at("z_end").get<double>();
      iv.k_start = ij.at("k_start").get<std::size_t>();
      iv.k_end = ij.at("k_end").get<std::size_t>();
    }
    r.intervals.push_back(iv);
  }
  return r;
}

std::string Roadmap::serialize() const { return to_json().dump(1) + "\n"; }

Roadmap build_roadmap(const Checkpoint& ckpt, std::size_t grid, double theta) {
  if (grid < 2) throw std::invalid_argument("roadmap grid needs at least 2 points");
  if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("roadmap threshold must lie in (0, 1)");
  const auto n = static_cast<Eigen::Index>(ckpt.params.config.n);
  const auto K = static_cast<Eigen::Index>(grid);

  Roadmap r;
  r.class_names = ckpt.class_names;
  r.theta = theta;
  r.orientation_flipped = ckpt.orientation_flipped;
  r.checkpoint = checkpoint_hash(ckpt);
  r.confidence.resize(n, K);
  r.boxes.assign(static_cast<std::size_t>(n), Eigen::MatrixXd(K, 4));
  for (Eigen::Index k = 0; k < K; ++k) {
    const double z = static_cast<double>(k + 1) / static_cast<double>(K + 1);
    r.z_grid.push_back(z);
    const auto rec = ckpt.reconstruct(z);
    r.confidence.col(k) = rec.class_probs;
    for (Eigen::Index i = 0; i < n; ++i) r.boxes[static_cast<std::size_t>(i)].row(k) = rec.boxes.row(i);
  }

  r.confidence_normalized = Eigen::MatrixXd::Zero(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double peak = r.confidence.row(i).maxCoeff();
    if (peak < kEmptyRow) {
      r.intervals.emplace_back();
      continue;
    }
    for (Eigen::Index k = 0; k < K; ++k) {
      // The argmax divides by itself, so the row peaks at exactly 1.
      r.confidence_normalized(i, k) = r.confidence(i, k) / peak;
    }
    r.intervals.push_back(longest_run(r.confidence_normalized, i, r.z_grid, theta));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Encoding and orientation

std::vector<double> encode_video(const VideoTensor& video, const Checkpoint& ckpt, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("stride must be >= 1");
  std::vector<double> zs;
  zs.reserve(video.n_frames() / stride + 1);
  for (std::size_t t = 0; t < video.n_frames(); t += stride) {
    zs.push_back(ckpt.locate(video.window(t, ckpt.params.config.s)));
  }
  return zs;
}

namespace {

double mean_time_correlation(const Checkpoint& ckpt, std::span<const VideoTensor> probes, std::size_t stride) {
  std::vector<double> rs;
  for (const auto& video : probes) {
    const auto zs = encode_video(video, ckpt, stride);
    std::vector<double> ts(zs.size());
    for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = static_cast<double>(i * stride);
    try {
      rs.push_back(stats::pearson(ts, zs));
    } catch (const stats::DegenerateSample&) {
    }
  }
  if (rs.empty()) throw stats::DegenerateSample("orientation: no probe video gives a usable correlation");
  return stats::mean(rs);
}

}  // namespace

OrientationResult canonicalize_orientation(Checkpoint& ckpt, std::span<const VideoTensor> probes,
                                           std::size_t stride) {
  OrientationResult out;
  out.r_before = mean_time_correlation(ckpt, probes, stride);
  out.r_after = out.r_before;
  if (out.r_before < 0.0) {
    ckpt.orientation_flipped = !ckpt.orientation_flipped;
    out.flipped = true;
    out.r_after = -out.r_before;
  }
  return out;
}

// ---------------------------------------------------------------------------
// First appearances and alignment

std::vector<FirstAppearance> first_appearances(const VideoTensor& video, const Checkpoint& ckpt) {
  std::vector<FirstAppearance> out;
  const auto& rows = video.rows();
  const auto n = video.n_classes();
  for (std::size_t c = 0; c < n; ++c) {
    for (Eigen::Index t = 0; t < rows.rows(); ++t) {
      if (rows(t, static_cast<Eigen::Index>(5 * c)) > 0.5) {
        const auto frame = static_cast<std::size_t>(t);
        out.push_back({video.video_id(), c, frame, ckpt.locate(video.window(frame, ckpt.params.config.s))});
        break;
      }
    }
  }
  return out;
}

double alignment_score(const Roadmap& roadmap, std::size_t class_index, double z) {
  if (class_index >= roadmap.n()) throw std::out_of_range("class index out of range");
  if (roadmap.intervals[class_index].empty) return std::numeric_limits<double>::quiet_NaN();
  const auto row = roadmap.confidence_normalized.row(static_cast<Eigen::Index>(class_index));
  double below = 0.0;
  for (std::size_t k = 0; k < roadmap.k(); ++k) {
    if (roadmap.z_grid[k] <= z) below += row(static_cast<Eigen::Index>(k));
  }
  return below / row.sum();
}

std::vector<Alignment> align(std::span<const FirstAppearance> firsts, const Roadmap& roadmap) {
  std::vector<Alignment> out;
  for (const auto& f : firsts) {
    if (f.class_index >= roadmap.n() || roadmap.intervals[f.class_index].empty) continue;
    out.push_back({f, alignment_score(roadmap, f.class_index, f.z)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Time / z correlation

CorrelationEntry first_encoding_correlation(std::span<const double> z_trace, std::size_t n_bins,
                                            std::string video_id) {
  if (n_bins < 2) throw std::invalid_argument("need at least 2 bins");
  CorrelationEntry entry;
  entry.video_id = std::move(video_id);
  std::vector<std::ptrdiff_t> first(n_bins, -1);
  for (std::size_t t = 0; t < z_trace.size(); ++t) {
    const double z = std::clamp(z_trace[t], 0.0, 1.0);
    const auto bin = std::min(n_bins - 1, static_cast<std::size_t>(z * static_cast<double>(n_bins)));
    if (first[bin] < 0) first[bin] = static_cast<std::ptrdiff_t>(t);
  }
  const double span = z_trace.size() > 1 ? static_cast<double>(z_trace.size() - 1) : 1.0;
  std::vector<double> ts, zs;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (first[b] < 0) continue;
    const double t = static_cast<double>(first[b]) / span;
    const double center = (static_cast<double>(b) + 0.5) / static_cast<double>(n_bins);
    entry.points.push_back({t, center});
    ts.push_back(t);
    zs.push_back(center);
  }
  if (entry.points.size() < 2) {
    throw stats::DegenerateSample("degenerate: " + std::to_string(entry.points.size()) + " bin");
  }
  entry.r = stats::pearson(ts, zs);
  return entry;
}

CorrelationEntry time_z_correlation(const VideoTensor& video, const Checkpoint& ckpt, std::size_t n_bins) {
  const auto zs = encode_video(video, ckpt);
  return first_encoding_correlation(zs, n_bins, video.video_id());
}

CorrelationReport summarize(std::vector<CorrelationEntry> entries) {
  CorrelationReport report;
  report.entries = std::move(entries);
  if (report.entries.empty()) return report;
  for (const auto& e : report.entries) {
    report.mean_r += e.r;
    report.mean_abs_r += std::abs(e.r);
  }
  report.mean_r /= static_cast<double>(report.entries.size());
  report.mean_abs_r /= static_cast<double>(report.entries.size());
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation

EvaluationReport evaluate_embedding(const Checkpoint& ckpt, const Roadmap& roadmap,
                                    std::span<const VideoTensor> videos,
                                    std::span<const std::vector<double>> positions, std::size_t n_bins) {
  if (!positions.empty() && positions.size() != videos.size()) {
    throw std::invalid_argument("ground truth given for " + std::to_string(positions.size()) + " of " +
                                std::to_string(videos.size()) + " videos");
  }
  EvaluationReport report;
  report.n_bins = n_bins;
  std::vector<double> rs, spearmans, scores;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const auto& video = videos[v];
    VideoEvaluation ev;
    ev.video_id = video.video_id();
    const auto zs = encode_video(video, ckpt);
    try {
      ev.first_encoding_r = first_encoding_correlation(zs, n_bins).r;
      rs.push_back(*ev.first_encoding_r);
    } catch (const stats::DegenerateSample&) {
    }
    if (!positions.empty() && positions[v].size() == zs.size()) {
      try {
        ev.spearman = stats::spearman(zs, positions[v]);
        spearmans.push_back(*ev.spearman);
      } catch (const stats::DegenerateSample&) {
      }
    }
    // The window ending at a frame is the one encoded in the trace.
    std::vector<FirstAppearance> firsts;
    const auto& rows = video.rows();
    for (std::size_t c = 0; c < video.n_classes(); ++c) {
      for (Eigen::Index t = 0; t < rows.rows(); ++t) {
        if (rows(t, static_cast<Eigen::Index>(5 * c)) > 0.5) {
          firsts.push_back({ev.video_id, c, static_cast<std::size_t>(t), zs[static_cast<std::size_t>(t)]});
          break;
        }
      }
    }
    ev.alignments = align(firsts, roadmap);
    for (const auto& a : ev.alignments) scores.push_back(a.score);
    report.videos.push_back(std::move(ev));
  }
  if (!rs.empty()) {
    report.mean_first_encoding_r = stats::mean(rs);
    for (double r : rs) report.mean_abs_first_encoding_r += std::abs(r);
    report.mean_abs_first_encoding_r /= static_cast<double>(rs.size());
  }
  if (!spearmans.empty()) report.mean_spearman = stats::mean(spearmans);
  if (!scores.empty()) report.median_alignment = stats::median(scores);
  return report;
}

nlohmann::ordered_json EvaluationReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json per_video = nlohmann::ordered_json::array();
  for (const auto& v : videos) {
    nlohmann::ordered_json al = nlohmann::ordered_json::array();
    for (const auto& a : v.alignments) {
      al.push_back({{"class", a.first.class_index}, {"frame", a.first.frame}, {"z", a.first.z}, {"score", a.score}});
    }
    per_video.push_back({{"video_id", v.video_id},
                         {"first_encoding_r", opt(v.first_encoding_r)},
                         {"spearman", opt(v.spearman)},
                         {"alignments", al}});
  }
  return {{"n_bins", n_bins},
          {"mean_first_encoding_r", mean_first_encoding_r},
          {"mean_abs_first_encoding_r", mean_abs_first_encoding_r},
          {"mean_spearman", opt(mean_spearman)},
          {"median_alignment", opt(median_alignment)},
          {"videos", per_video}};
}

// ---------------------------------------------------------------------------
// Sweep

std::vector<SweepFrame> roadmap_sweep(const Roadmap& roadmap) {
  std::vector<SweepFrame> frames;
  frames.reserve(roadmap.k());
  for (std::size_t k = 0; k < roadmap.k(); ++k) {
    SweepFrame f{k, roadmap.z_grid[k], {}};
    for (std::size_t i = 0; i < roadmap.n(); ++i) {
      const auto& iv = roadmap.intervals[i];
      if (iv.empty || k < iv.k_start || k > iv.k_end) continue;
      const auto& b = roadmap.boxes[i];
      const auto kk = static_cast<Eigen::Index>(k);
      f.items.push_back({i, roadmap.confidence(static_cast<Eigen::Index>(i), kk), Box{b(kk, 0), b(kk, 1), b(kk, 2), b(kk, 3)}});
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

void export_roadmap_sweep(const Roadmap& roadmap, const std::filesystem::path& dir, std::size_t svg_frames) {
  std::filesystem::create_directories(dir);
  const auto frames = roadmap_sweep(roadmap);

  nlohmann::ordered_json doc = {{"checkpoint", roadmap.checkpoint}, {"classes", roadmap.class_names}};
  auto& out_frames = doc["frames"] = nlohmann::ordered_json::array();
  for (const auto& f : frames) {
    nlohmann::ordered_json items = nlohmann::ordered_json::array();
    for (const auto& it : f.items) {
      items.push_back({{"class", roadmap.class_names[it.class_index]},
                       {"confidence", it.confidence},
                       {"box", {it.box.cx, it.box.cy, it.box.w, it.box.h}}});
    }
    out_frames.push_back({{"k", f.k}, {"z", f.z}, {"boxes", items}});
  }
  write_file((dir / "sweep.json").string(), doc.dump(1) + "\n");

  constexpr int cell = 120;
  constexpr int pad = 8;
  const std::size_t panels = std::min(std::max<std::size_t>(svg_frames, 1), frames.size());
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << panels * (cell + pad) + pad << "\" height=\""
      << cell + 2 * pad + 16 << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  for (std::size_t p = 0; p < panels; ++p) {
    const std::size_t k = panels == 1 ? 0 : p * (frames.size() - 1) / (panels - 1);
    const auto& f = frames[k];
    const auto x0 = static_cast<double>(pad + p * (cell + pad));
    svg << " <g transform=\"translate(" << x0 << "," << pad << ")\">\n"
        << "  <rect width=\"" << cell << "\" height=\"" << cell << "\" fill=\"#111\"/>\n";
    for (const auto& it : f.items) {
      const double hue = 360.0 * static_cast<double>(it.class_index) / static_cast<double>(roadmap.n());
      svg << "  <rect x=\"" << (it.box.cx - it.box.w / 2) * cell << "\" y=\"" << (it.box.cy - it.box.h / 2) * cell
          << "\" width=\"" << it.box.w * cell << "\" height=\"" << it.box.h * cell
          << "\" fill=\"none\" stroke=\"hsl(" << hue << ",80%,60%)\"><title>" << roadmap.class_names[it.class_index]
          << "</title></rect>\n";
    }
    svg << "  <text y=\"" << cell + 12 << "\">z=" << f.z << "</text>\n </g>\n";
  }
  svg << "</svg>\n";
  write_file((dir / "sweep.svg").string(), svg.str());
}

}  // namespace roadnav
