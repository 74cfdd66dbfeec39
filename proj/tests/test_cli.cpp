#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "roadnav/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "roadnav");
  std::ostringstream out, err;
  const int code = roadnav::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "roadnav_test_cli") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(1); }

json small_config() {
  return {{"seed", 3},
          {"dataset", {{"benchmark", {{"n_classes", 5}}}, {"trajectory", {{"n_frames", 60}}}, {"n_videos", 3}, {"holdout", 1}}},
          {"model",
           {{"s", 4}, {"n_layers", 1}, {"n_heads", 5}, {"encoder_fc_dims", {8}}, {"ffn_dim", 12}}},
          {"train", {{"epochs", 3}, {"warmup_epochs", 1}, {"batch_size", 16}, {"stride", 2}, {"val_fraction", 0.0}}},
          {"roadmap", {{"grid", 20}}}};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("help matches the golden file and lists every flag") {
  const auto r = run({"--help-all"});
  CHECK(r.code == roadnav::cli::kExitOk);
  CHECK(r.out == slurp(fs::path(ROADNAV_SOURCE_DIR) / "tests" / "golden" / "help.txt"));
  for (const char* flag : {"--config", "--seed", "--out", "--data", "--ckpt", "--epochs", "--stride", "--bins", "--port",
                           "--speed"}) {
    CHECK(r.out.find(flag) != std::string::npos);
  }
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("exit codes") {
  TempDir tmp;
  CHECK(run({}).code == roadnav::cli::kExitUsage);
  CHECK(run({"bogus"}).code == roadnav::cli::kExitUsage);
  CHECK(run({"gen", "--nope"}).code == roadnav::cli::kExitUsage);
  CHECK(run({"eval", "--ckpt", "x"}).code == roadnav::cli::kExitUsage);
  CHECK(run({"gen", "--config", (tmp / "missing.json").string(), "--out", (tmp / "d").string()}).code ==
        roadnav::cli::kExitUsage);
  const auto r = run({"roadmap", "--ckpt", (tmp / "missing").string(), "--out", (tmp / "r").string()});
  CHECK(r.code == roadnav::cli::kExitRuntime);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(run({"train", "--data", (tmp / "nowhere").string(), "--out", (tmp / "c").string()}).code ==
        roadnav::cli::kExitRuntime);
}

TEST_CASE("gen is deterministic and the seed precedence is flag > config > default") {
  TempDir tmp;
  write_json(tmp / "cfg.json", small_config());
  auto seed_of = [&](const std::string& dir) {
    return json::parse(slurp(tmp / dir / "manifest.json")).at("seed").get<std::uint64_t>();
  };
  REQUIRE(run({"gen", "--config", (tmp / "cfg.json").string(), "--out", (tmp / "a").string()}).code == 0);
  REQUIRE(run({"gen", "--config", (tmp / "cfg.json").string(), "--out", (tmp / "b").string()}).code == 0);
  CHECK(read_tree(tmp / "a") == read_tree(tmp / "b"));
  CHECK(seed_of("a") == 3);
  REQUIRE(run({"gen", "--config", (tmp / "cfg.json").string(), "--seed", "5", "--out", (tmp / "c").string()}).code == 0);
  CHECK(seed_of("c") == 5);
  CHECK(read_tree(tmp / "a") != read_tree(tmp / "c"));
  auto no_seed = small_config();
  no_seed.erase("seed");
  no_seed["out"] = (tmp / "d").string();
  write_json(tmp / "noseed.json", no_seed);
  REQUIRE(run({"gen", "--config", (tmp / "noseed.json").string()}).code == 0);
  CHECK(seed_of("d") == 0);
}

TEST_CASE("pipeline with flag and config overrides") {
  TempDir tmp;
  auto cfg = small_config();
  cfg["epochs"] = 2;
  write_json(tmp / "cfg.json", cfg);
  const auto c = (tmp / "cfg.json").string();
  REQUIRE(run({"gen", "--config", c, "--out", (tmp / "data").string()}).code == 0);

  // config top level beats the train section; the flag beats both.
  REQUIRE(run({"train", "--config", c, "--data", (tmp / "data").string(), "--out", (tmp / "ck").string()}).code == 0);
  CHECK(count_lines(slurp(tmp / "ck" / "train_log.jsonl")) == 2);
  const auto r = run({"train", "--config", c, "--epochs", "1", "--data", (tmp / "data").string(), "--out",
                      (tmp / "ck1").string()});
  REQUIRE(r.code == 0);
  CHECK(count_lines(slurp(tmp / "ck1" / "train_log.jsonl")) == 1);
  CHECK(fs::exists(tmp / "ck1" / "final.ckpt"));
  CHECK(json::parse(slurp(tmp / "ck1" / "train_summary.json")).contains("checkpoint"));

  REQUIRE(run({"roadmap", "--config", c, "--ckpt", (tmp / "ck" / "final").string(), "--out", (tmp / "rep").string()})
              .code == 0);
  const auto roadmap = json::parse(slurp(tmp / "rep" / "roadmap.json"));
  CHECK(roadmap.at("z_grid").size() == 20);

  const auto e = run({"eval", "--config", c, "--bins", "10", "--data", (tmp / "data" / "test").string(), "--ckpt",
                      (tmp / "ck" / "final").string(), "--out", (tmp / "rep").string()});
  REQUIRE(e.code == 0);
  CHECK(e.out.find("mean first-encoding r") != std::string::npos);
  CHECK(json::parse(slurp(tmp / "rep" / "eval_report.json")).at("n_bins") == 10);

  REQUIRE(run({"sweep", "--config", c, "--ckpt", (tmp / "ck" / "final").string(), "--out", (tmp / "sw").string()}).code ==
          0);
  CHECK(fs::exists(tmp / "sw" / "sweep.svg"));

  fs::path stream;
  for (const auto& entry : fs::directory_iterator(tmp / "data" / "test" / "videos")) {
    if (entry.path().extension() == ".jsonl") stream = entry.path();
  }
  REQUIRE(!stream.empty());
  const auto rp = run({"replay", "--config", c, "--ckpt", (tmp / "ck" / "final").string(), "--data", stream.string()});
  REQUIRE(rp.code == 0);
  CHECK(count_lines(rp.out) == 60);
  CHECK(json::parse(rp.out.substr(0, rp.out.find('\n'))).at("frame") == 0);
}
