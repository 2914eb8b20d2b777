#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "warm/episode.hpp"
#include "warm/metrics.hpp"
#include "warm/model.hpp"
#include "warm/warm.hpp"

namespace warm {

struct TrainConfig {
  std::uint32_t epochs = 3;
  std::uint32_t episodes_per_epoch = 100;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double lr_decay_factor = 0.1;
  std::vector<double> lr_milestones = {0.6, 0.8};  // fractions of total steps
  double lambda = 0.5;
  double margin = 0.0;
  double eps = kDefaultEps;
  std::uint32_t tokens_per_class = 100;
  double token_std = 0.02;
  bool use_bias = false;
  bool scale_logits = false;
  double grad_clip = 0.0;  // max global L2 norm; 0 disables
  std::string method = "warm";
  std::uint64_t seed = 0;

  void validate() const;
  Method parsed_method() const { return Method::parse(method); }
  AttentionOptions attention() const { return {scale_logits}; }
  LossOptions loss() const { return {lambda, margin}; }
  std::uint64_t total_steps() const { return static_cast<std::uint64_t>(epochs) * episodes_per_epoch; }
  // Step-decay schedule over global episode steps.
  double lr_at(std::uint64_t step) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct OptimizerState {
  WarmParams first;   // moment accumulators, parameter-shaped
  WarmParams second;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerState for_params(const WarmParams& p);
};

// Decoupled weight decay then a bias-corrected moment step. Pure.
struct UpdateResult {
  WarmParams params;
  OptimizerState state;
};
UpdateResult apply_update(const WarmParams& params, const WarmGrads& grads,
                          const OptimizerState& state, double lr, double weight_decay);

double l2_norm(const WarmParams& p);

struct TrainLogRow {
  std::uint64_t episode_idx = 0;
  double loss_margin = 0.0;
  double loss_sim = 0.0;
  double loss_total = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
};

// Seed of training episode `index` for a run seeded with `seed`.
std::uint64_t train_episode_seed(std::uint64_t seed, std::uint64_t index);

// Episodic training on base classes. Throws Numeric (message carries the
// episode seed) on a non-finite loss or gradient.
TrainResult train(const TrainConfig& cfg, const GeneratorConfig& gen,
                  const std::function<void(const TrainLogRow&)>& on_step = {});

// Deterministic CSV writers; the timing file is kept apart so the training
// log itself is reproducible byte for byte.
void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);
void write_train_timing(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

struct EvalConfig {
  std::uint32_t episodes = 100;
  std::uint64_t seed = 900000;  // episode i uses Rng(seed + i)

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

// Evaluation episodes drawn from novel classes.
std::vector<Episode> make_eval_episodes(const GeneratorConfig& gen, const EvalConfig& eval);

struct EvalReport {
  MetricsReport metrics;
  bool dispersion_complete = true;  // false when d_intra or d_inter had no pairs
  std::size_t episodes = 0;
};

// Frozen-parameter evaluation: nearest-prototype prediction on every query
// cloud, IoU accumulated per class over all episodes, attention and
// alignment diagnostics averaged over support clouds.
EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Episode>& episodes, double eps = kDefaultEps,
                    unsigned threads = 1);

// Same protocol with externally supplied prototypes per episode (e.g. class means).
MiouResult evaluate_prototypes(const std::vector<Episode>& episodes,
                               const std::function<std::vector<Matrix>(const Episode&)>& make);

}  // namespace warm
