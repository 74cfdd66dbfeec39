#include "roadnav/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "roadnav/checkpoint.hpp"
#include "roadnav/dataset.hpp"
#include "roadnav/roadmap.hpp"
#include "roadnav/server.hpp"
#include "roadnav/service.hpp"
#include "roadnav/simulator.hpp"
#include "roadnav/training.hpp"
#include "roadnav/util.hpp"

namespace roadnav::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flag values as parsed; unset flags fall back to the config file, then to defaults.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, data, ckpt;
  std::optional<std::size_t> epochs, stride, bins;
  std::optional<std::uint16_t> port;
  std::optional<std::string> speed;
};

template <typename T>
std::optional<T> config_value(const json& cfg, const char* key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) return std::nullopt;
  return cfg.at(key).get<T>();
}

// flag > config > default
template <typename T>
T pick(const std::optional<T>& flag, const json& cfg, const char* key, T fallback) {
  if (flag) return *flag;
  if (auto v = config_value<T>(cfg, key)) return *v;
  return fallback;
}

std::string require(const std::optional<std::string>& flag, const json& cfg, const char* key) {
  if (flag) return *flag;
  if (auto v = config_value<std::string>(cfg, key)) return *v;
  throw UsageError(std::string("--") + key + " is required");
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  try {
    auto j = json::parse(in);
    if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw UsageError("config file '" + path + "': " + e.what());
  }
}

json section(const json& cfg, const char* name) { return cfg.contains(name) ? cfg.at(name) : json::object(); }

sim::DatasetConfig dataset_config(const json& cfg) {
  auto d = section(cfg, "dataset");
  sim::DatasetConfig out = d.get<sim::DatasetConfig>();
  if (d.contains("benchmark")) {
    const auto& b = d.at("benchmark");
    out.profile = sim::AnatomyProfile::benchmark(b.value("n_classes", std::size_t{10}), b.value("overlap", 0.55),
                                                 b.value("jitter_sd", 0.02), b.value("dropout", 0.1));
  }
  return out;
}

double parse_speed(const std::string& text) {
  if (text == "inf" || text == "max") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || !(v > 0.0)) throw UsageError("--speed must be a positive number or 'inf'");
  return v;
}

std::vector<VideoTensor> tensors(const Dataset& ds) {
  std::vector<VideoTensor> out;
  for (const auto& v : ds.videos) out.emplace_back(v.video_id, v.frames);
  return out;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path.string(), j.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen(const Flags& f, const json& cfg, std::ostream& out) {
  const auto dir = require(f.out, cfg, "out");
  const auto seed = pick(f.seed, cfg, "seed", std::uint64_t{0});
  const auto summary = sim::generate_dataset(dataset_config(cfg), seed, dir);
  out << "wrote " << summary.n_videos << " videos";
  if (summary.n_holdout > 0) out << " + " << summary.n_holdout << " held out";
  out << " to " << summary.dir.string() << " (config " << summary.config_hash.substr(0, 12) << ")\n";
  return kExitOk;
}

int cmd_train(const Flags& f, const json& cfg, std::ostream& out) {
  const fs::path data = require(f.data, cfg, "data");
  const fs::path dir = require(f.out, cfg, "out");
  auto tc = section(cfg, "train").get<TrainConfig>();
  if (auto s = f.seed ? f.seed : config_value<std::uint64_t>(cfg, "seed")) tc.seed = *s;
  tc.epochs = pick(f.epochs, cfg, "epochs", tc.epochs);
  tc.stride = pick(f.stride, cfg, "stride", tc.stride);
  tc.validate();

  const auto ds = load_dataset(data);
  auto mc = section(cfg, "model").get<ModelConfig>();
  mc.n = ds.registry.n_anatomy();
  const auto videos = tensors(ds);

  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  auto result = train(videos, mc, tc, [&](const EpochLog& e) {
    log << to_json(e).dump() << "\n";
    log.flush();
    out << "epoch " << e.epoch << " lr " << e.lr << " train " << e.train_loss;
    if (e.val_loss) out << " val " << *e.val_loss;
    out << "\n";
  });

  Checkpoint ckpt{std::move(result.params), ds.registry.anatomy_names(), false};
  const auto orient = canonicalize_orientation(ckpt, videos, tc.stride);
  const auto hash = save_checkpoint(ckpt, dir / "final.ckpt");
  json meta = {{"checkpoint", hash},
                                 {"model", ckpt.params.config},
                                 {"train", tc},
                                 {"steps", result.steps},
                                 {"train_videos", result.train_videos},
                                 {"val_videos", result.val_videos},
                                 {"orientation", {{"r_before", orient.r_before},
                                                  {"r_after", orient.r_after},
                                                  {"flipped", ckpt.orientation_flipped}}}};
  write_file((dir / "train_summary.json").string(), meta.dump(1) + "\n");
  out << "checkpoint " << (dir / "final.ckpt").string() << " " << hash << "\n";
  return kExitOk;
}

Roadmap make_roadmap(const Checkpoint& ckpt, const json& cfg) {
  const auto r = section(cfg, "roadmap");
  return build_roadmap(ckpt, r.value("grid", kDefaultGrid), r.value("theta", kDefaultTheta));
}

int cmd_roadmap(const Flags& f, const json& cfg, std::ostream& out) {
  const auto ckpt = load_checkpoint(require(f.ckpt, cfg, "ckpt"));
  fs::path dest = require(f.out, cfg, "out");
  if (fs::is_directory(dest) || dest.extension().empty()) dest /= "roadmap.json";
  const auto roadmap = make_roadmap(ckpt, cfg);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_file(dest.string(), roadmap.serialize());
  for (std::size_t i = 0; i < roadmap.n(); ++i) {
    const auto& iv = roadmap.intervals[i];
    out << roadmap.class_names[i] << ": ";
    if (iv.empty) {
      out << "empty\n";
    } else {
      out << "[" << iv.z_start << ", " << iv.z_end << "]\n";
    }
  }
  out << "roadmap " << dest.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Flags& f, const json& cfg, std::ostream& out) {
  const auto ds = load_dataset(require(f.data, cfg, "data"));
  const auto ckpt = load_checkpoint(require(f.ckpt, cfg, "ckpt"), ds.registry);
  const auto bins = pick(f.bins, cfg, "bins", kDefaultBins);
  const auto roadmap = make_roadmap(ckpt, cfg);
  const auto videos = tensors(ds);
  std::vector<std::vector<double>> positions;
  for (const auto& v : ds.videos) positions.push_back(v.positions);
  const auto report = evaluate_embedding(ckpt, roadmap, videos, positions, bins);

  auto j = report.to_json();
  j["checkpoint"] = roadmap.checkpoint;
  if (f.out || cfg.contains("out")) {
    fs::path dest = require(f.out, cfg, "out");
    if (fs::is_directory(dest) || dest.extension().empty()) dest /= "eval_report.json";
    write_json(dest, j);
    out << "report " << dest.string() << "\n";
  }
  out << "videos " << report.videos.size() << "\n";
  out << "mean first-encoding r " << report.mean_first_encoding_r << " (|r| " << report.mean_abs_first_encoding_r
      << ", " << bins << " bins)\n";
  if (report.mean_spearman) out << "mean spearman vs ground truth " << *report.mean_spearman << "\n";
  if (report.median_alignment) out << "median alignment score " << *report.median_alignment << "\n";
  return kExitOk;
}

int cmd_sweep(const Flags& f, const json& cfg, std::ostream& out) {
  const auto ckpt = load_checkpoint(require(f.ckpt, cfg, "ckpt"));
  const fs::path dir = require(f.out, cfg, "out");
  const auto roadmap = make_roadmap(ckpt, cfg);
  export_roadmap_sweep(roadmap, dir, section(cfg, "sweep").value("panels", std::size_t{20}));
  out << "sweep " << (dir / "sweep.json").string() << " " << (dir / "sweep.svg").string() << "\n";
  return kExitOk;
}

ServiceOptions service_options(const Flags& f, const json& cfg) {
  ServiceOptions opts;
  const auto r = section(cfg, "roadmap");
  opts.roadmap_grid = r.value("grid", kDefaultGrid);
  opts.roadmap_theta = r.value("theta", kDefaultTheta);
  opts.seed = pick(f.seed, cfg, "seed", std::uint64_t{0});
  if (f.data || cfg.contains("data")) {
    const fs::path data = require(f.data, cfg, "data");
    if (fs::is_directory(data)) {
      const auto manifest = json::parse(read_file((data / "manifest.json").string()));
      if (manifest.contains("config") && manifest.at("config").contains("profile")) {
        opts.drive_profile = manifest.at("config").at("profile").get<sim::AnatomyProfile>();
      }
    }
  }
  return opts;
}

int cmd_serve(const Flags& f, const json& cfg, std::ostream& out) {
  GuidanceService service(service_options(f, cfg));
  const fs::path ckpt_path = require(f.ckpt, cfg, "ckpt");
  const auto hash = service.add_checkpoint(load_checkpoint(ckpt_path), resolve_checkpoint_path(ckpt_path).stem().string());
  Server server(service, section(cfg, "serve").value("address", std::string("127.0.0.1")),
                pick(f.port, cfg, "port", std::uint16_t{8080}));
  server.start(section(cfg, "serve").value("threads", std::size_t{4}));
  out << "serving checkpoint " << hash << " on port " << server.port() << std::endl;
  server.wait();
  return kExitOk;
}

int cmd_replay(const Flags& f, const json& cfg, std::ostream& out) {
  Flags g = f;
  g.data.reset();  // the stream file is not a dataset directory
  GuidanceService service(service_options(g, json::object()));
  service.add_checkpoint(load_checkpoint(require(f.ckpt, cfg, "ckpt")));
  SessionOptions so;
  so.mode = SessionMode::Replay;
  so.stream = require(f.data, cfg, "data");
  so.speed = parse_speed(pick(f.speed, cfg, "speed", std::string("inf")));
  const auto id = service.open_session(so);

  std::ofstream file;
  std::ostream* sink = &out;
  if (f.out || cfg.contains("out")) {
    const fs::path dest = require(f.out, cfg, "out");
    if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
    file.open(dest, std::ios::binary);
    if (!file) throw std::runtime_error("cannot write '" + dest.string() + "'");
    sink = &file;
  }
  const auto period = std::isinf(so.speed) ? std::chrono::nanoseconds(0)
                                           : std::chrono::nanoseconds(static_cast<std::int64_t>(
                                                 1e9 / (service.native_fps() * so.speed)));
  auto next = std::chrono::steady_clock::now();
  std::size_t count = 0;
  while (auto fix = service.replay_next(id)) {
    *sink << fix->to_json().dump() << "\n";
    ++count;
    if (period.count() > 0) {
      next += period;
      std::this_thread::sleep_until(next);
    }
  }
  if (sink != &out) out << "replayed " << count << " frames\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Surgical roadmap embedding: data generation, training, evaluation and live guidance.", "roadnav"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");
  Flags f;

  auto add_common = [&](CLI::App* sub) { sub->add_option("--config", f.config, "JSON config file (flags override it)"); };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", f.seed, "Master seed for all random streams"); };
  auto add_out = [&](CLI::App* sub, const std::string& what) { sub->add_option("--out", f.out, what); };
  auto add_data = [&](CLI::App* sub, const std::string& what) { sub->add_option("--data", f.data, what); };
  auto add_ckpt = [&](CLI::App* sub) { sub->add_option("--ckpt", f.ckpt, "Checkpoint file or prefix (.ckpt appended)"); };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic detection dataset");
  add_common(gen);
  add_seed(gen);
  add_out(gen, "Output dataset directory");

  auto* trn = app.add_subcommand("train", "Train the embedding model");
  add_common(trn);
  add_seed(trn);
  add_data(trn, "Dataset directory");
  add_out(trn, "Output directory for final.ckpt and train_log.jsonl");
  trn->add_option("--epochs", f.epochs, "Training epochs");
  trn->add_option("--stride", f.stride, "Window stride in frames");

  auto* rmap = app.add_subcommand("roadmap", "Build the roadmap of a checkpoint");
  add_common(rmap);
  add_ckpt(rmap);
  add_out(rmap, "Roadmap file or directory");

  auto* ev = app.add_subcommand("eval", "Correlation, first-appearance and alignment reports");
  add_common(ev);
  add_data(ev, "Dataset directory to evaluate");
  add_ckpt(ev);
  add_out(ev, "Report file or directory");
  ev->add_option("--bins", f.bins, "Latent bins for the first-encoding correlation");

  auto* sw = app.add_subcommand("sweep", "Export decoded boxes along the latent axis");
  add_common(sw);
  add_ckpt(sw);
  add_out(sw, "Output directory for sweep.json and sweep.svg");

  auto* srv = app.add_subcommand("serve", "Run the guidance service");
  add_common(srv);
  add_seed(srv);
  add_ckpt(srv);
  add_data(srv, "Dataset directory whose profile drives simulator sessions");
  srv->add_option("--port", f.port, "TCP port (0 picks a free one)");

  auto* rep = app.add_subcommand("replay", "Replay a detection stream through the service headlessly");
  add_common(rep);
  add_ckpt(rep);
  add_data(rep, "Detection stream file");
  add_out(rep, "Fix output file (default: standard output)");
  rep->add_option("--speed", f.speed, "Multiple of the native frame rate, or 'inf'");

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    const auto cfg = load_config(f.config);
    CLI::App* chosen = app.get_subcommands().front();
    const auto& name = chosen->get_name();
    if (name == "gen") return cmd_gen(f, cfg, out);
    if (name == "train") return cmd_train(f, cfg, out);
    if (name == "roadmap") return cmd_roadmap(f, cfg, out);
    if (name == "eval") return cmd_eval(f, cfg, out);
    if (name == "sweep") return cmd_sweep(f, cfg, out);
    if (name == "serve") return cmd_serve(f, cfg, out);
    if (name == "replay") return cmd_replay(f, cfg, out);
    err << "error: unknown subcommand '" << name << "'\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

}  // namespace roadnav::cli
