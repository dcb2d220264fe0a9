#pragma once

// Batch front end: corpus synthesis, compression, analysis, training,
// enhancement, BD-rate tables and benchmarks.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "daqe/pipeline.hpp"
#include "json.hpp"

namespace daqe::cli {

inline constexpr const char* kReportSchema = "daqe-report/1";

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t images = 24;       // labeled scenes written by synth
  std::size_t real_images = 8;   // unlabeled scenes for the adversarial domain
  std::size_t held_out = 6;      // trailing labeled scenes kept out of training
  std::size_t height = 128, width = 128;
  std::string layout = "mixed";
  std::vector<int> qualities{30};
  std::size_t bench_images = 4;
  model::ModelConfig model;
  pipeline::TrainConfig train;

  nlohmann::json to_json() const;
  /// Rejects unknown keys and invalid values.
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;
};

/// Synthesizes the labeled and unlabeled scenes under `root`.
nlohmann::json cmd_synth(const RunConfig& cfg, const std::filesystem::path& root);
/// Codes every scene at every configured quality and writes `rd.json`.
nlohmann::json cmd_compress(const RunConfig& cfg, const std::filesystem::path& corpus,
                            const std::filesystem::path& out);
/// Observation report at the first configured quality.
nlohmann::json cmd_analyze(const RunConfig& cfg, const std::filesystem::path& corpus);
/// Staged training; writes `model.daqm` under `out`.
nlohmann::json cmd_train(const RunConfig& cfg, const std::filesystem::path& corpus,
                         const std::filesystem::path& out);
/// Enhances the held-out scenes (or all with `all`) at every configured
/// quality; writes images, `rd.json` and returns the report. Wall-clock
/// throughput goes to `timing`.
nlohmann::json cmd_enhance(const RunConfig& cfg, const std::filesystem::path& model,
                           const std::filesystem::path& corpus, const std::filesystem::path& out,
                           bool all, nlohmann::json& timing);
/// Per-image and mean BD-rate of `test` against `anchor` (both hold rd.json).
nlohmann::json cmd_bdrate(const std::filesystem::path& anchor, const std::filesystem::path& test);
/// FLOPs per exit level and per ablation configuration on synthetic scenes.
/// Without a model, patches are routed by k-means over ground-truth defocus.
/// With a corpus, every ablation is also trained and evaluated.
nlohmann::json cmd_bench(const RunConfig& cfg, const std::filesystem::path* model,
                         const std::filesystem::path* corpus, nlohmann::json& timing);

/// Loads the labeled scenes at one quality.
std::vector<analysis::CorpusImage> load_corpus(const std::filesystem::path& corpus, int quality);

/// Writes pretty JSON with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// Entry point of the `daqe` executable.
int run(int argc, char** argv);

}  // namespace daqe::cli
