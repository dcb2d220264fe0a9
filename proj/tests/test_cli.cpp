#include "test_main.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "daqe/cli.hpp"

using namespace daqe;
using cli::RunConfig;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.images = 5;
  c.real_images = 1;
  c.held_out = 1;
  c.height = c.width = 64;
  c.qualities = {20, 35, 50, 65};
  c.model.patch_size = 16;
  c.model.width = 4;
  c.model.depth = 1;
  c.model.head_dim = 4;
  c.model.denet_width = 4;
  c.model.denet_depth = 1;
  c.train.denet_epochs = 1;
  c.train.enhancer_epochs = 1;
  c.train.crop = 32;
  c.bench_images = 1;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "daqe");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("RunConfig JSON round trip and validation") {
  RunConfig c = small_config();
  c.seed = 12345678901234ULL;
  c.train.lr = 0.1 + 0.2;
  c.model.blind = true;
  c.model.fixed_exit = 1;
  c.model.cluster_feature = model::ClusterFeature::Frequency;
  const json j = c.to_json();
  CHECK(RunConfig::from_json(j).to_json() == j);
  CHECK(RunConfig::from_json(json::parse(j.dump())).to_json().dump() == j.dump());

  json bad = j;
  bad["colour"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  bad = j;
  bad["train"]["momentum"] = 0.9;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  bad = j;
  bad["model"]["fixed_exit"] = 9;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  bad = j;
  bad["qualities"] = json::array();
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  bad = j;
  bad["images"] = "many";
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
}

TEST_CASE("synth and compress are deterministic; bdrate of a corpus against itself is zero") {
  TempDir dir("daqe_test_cli");
  const RunConfig c = small_config();
  for (const char* run : {"a", "b"}) {
    cli::cmd_synth(c, dir.path / run);
    cli::cmd_compress(c, dir.path / run, dir.path / run / "rd");
  }
  for (const auto& e : fs::recursive_directory_iterator(dir.path / "a"))
    if (e.is_regular_file()) CHECK(slurp(e.path()) == slurp(dir.path / "b" / fs::relative(e.path(), dir.path / "a")));
  const json r = cli::cmd_bdrate(dir.path / "a" / "rd", dir.path / "b" / "rd");
  CHECK(r["images"].size() == c.images);
  for (const auto& row : r["images"]) {
    CHECK(row["bd_rate_psnr"].get<double>() == 0.0);
    CHECK(row["bd_rate_ssim"].get<double>() == 0.0);
  }
  CHECK(cli::load_corpus(dir.path / "a", 35).size() == c.images);
  CHECK_THROWS_AS(cli::load_corpus(dir.path / "a", 90), FormatError);
}

TEST_CASE("command line: flags override the config, errors give a non-zero exit") {
  TempDir dir("daqe_test_cli_args");
  const fs::path cfg = dir.path / "config.json";
  cli::write_json(cfg, small_config().to_json());
  CHECK(run_cli({"synth", "--config", cfg.string(), "--seed", "3", "--out", (dir.path / "c").string()}) == 0);
  const json rep = json::parse(slurp(dir.path / "c" / "report.json"));
  CHECK(rep["schema"] == cli::kReportSchema);
  CHECK(rep["config"]["seed"] == 3);
  CHECK(rep["dispersion"]["mean_cv"].get<double>() > 0.0);

  CHECK(run_cli({"analyze", "--config", cfg.string(), "--corpus", (dir.path / "c").string(), "--out",
                 (dir.path / "x").string()}) == 1);  // not compressed yet
  CHECK(run_cli({"synth", "--config", (dir.path / "missing.json").string(), "--out", (dir.path / "y").string()}) == 1);
  CHECK(run_cli({"bench", "--config", cfg.string(), "--blind", "--fixed-exit", "1", "--out",
                 (dir.path / "bench").string()}) == 0);
  const json bench = json::parse(slurp(dir.path / "bench" / "report.json"));
  CHECK(bench["config"]["model"]["blind"] == true);
  CHECK(bench["config"]["model"]["fixed_exit"] == 1);
  CHECK(fs::exists(dir.path / "bench" / "timing.json"));
  CHECK_FALSE(bench.dump().find("fps") != std::string::npos);
}
