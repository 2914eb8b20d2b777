#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "warm/episode.hpp"
#include "warm/fps.hpp"
#include "warm/trainer.hpp"

namespace warm {

// Everything a CLI verb needs. JSON sections: generator, train, eval, plus
// top-level method, fps_tokens, seeds, fps_seeds, token_counts. Unknown keys
// are rejected.
struct ExperimentConfig {
  GeneratorConfig generator;
  TrainConfig train;
  EvalConfig eval;
  std::string method = "warm";  // warm | naive | fps-min-dist | ablation:<mode>,<on|off>
  std::uint32_t fps_tokens = 100;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};  // training seeds
  std::uint32_t fps_seeds = 100;
  std::vector<std::uint32_t> token_counts = {1, 10, 50, 100};

  void validate() const;
  bool is_fps() const { return method == "fps-min-dist"; }
  // train with method/seed filled in.
  TrainConfig train_config(const std::string& method_name, std::uint64_t seed) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Parses a config file; JSON syntax errors name line and column.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(const std::string& text);

struct TrainedRun {
  TrainResult training;
  EvalReport eval;
};

TrainedRun train_and_evaluate(const ExperimentConfig& cfg, const std::string& method_name,
                              std::uint64_t seed, const std::vector<Episode>& eval_episodes,
                              unsigned threads = 1);

// Per-seed FPS + min-dist results on the config's evaluation episodes.
SeedSweepResult run_fps_sweep(const ExperimentConfig& cfg, const std::vector<Episode>& eval_episodes,
                              std::uint32_t num_seeds, unsigned threads = 1);

struct AblationRow {
  std::string label;  // table row letter (a)-(g)
  Method method;
  std::uint64_t seed = 0;
  double qk_dist = 0.0;
  double miou = 0.0;
  double attn_entropy = 0.0;
};

// Trains every ablation variant for every seed; rows ordered seed-major then (a)-(g).
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg,
                                      const std::vector<Episode>& eval_episodes, unsigned threads = 1);

struct TokenSweepRow {
  std::uint32_t tokens = 0;
  double miou_mean = 0.0;
  double miou_std = 0.0;
};

std::vector<TokenSweepRow> run_token_sweep(const ExperimentConfig& cfg,
                                           const std::vector<Episode>& eval_episodes,
                                           unsigned threads = 1);

// CSV writers (fixed column order).
void write_sweep_csv(const SeedSweepResult& r, const std::filesystem::path& path);
void write_metrics_csv(const std::string& experiment, const EvalReport& report,
                       const std::filesystem::path& path);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);
void write_token_sweep_csv(const std::vector<TokenSweepRow>& rows, const std::filesystem::path& path);

// JSON sidecar {command, config, config_hash, ...extra}.
void write_sidecar(const std::filesystem::path& path, const std::string& command,
                   const ExperimentConfig& cfg, const nlohmann::json& extra = nlohmann::json::object());

}  // namespace warm
