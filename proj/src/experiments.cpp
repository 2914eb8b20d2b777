#include "warm/experiments.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "warm/error.hpp"
#include "warm/json_util.hpp"
#include "warm/parallel.hpp"

namespace warm {

void ExperimentConfig::validate() const {
  generator.validate();
  train.validate();
  eval.validate();
  if (!is_fps()) (void)Method::parse(method);
  if (fps_tokens == 0) fail(ErrorKind::Config, "fps_tokens must be >= 1");
  if (seeds.empty()) fail(ErrorKind::Config, "seeds must not be empty");
  if (fps_seeds == 0) fail(ErrorKind::Config, "fps_seeds must be >= 1");
  if (token_counts.empty()) fail(ErrorKind::Config, "token_counts must not be empty");
  for (auto m : token_counts)
    if (m == 0) fail(ErrorKind::Config, "token_counts entries must be >= 1");
}

TrainConfig ExperimentConfig::train_config(const std::string& method_name, std::uint64_t seed) const {
  TrainConfig t = train;
  t.method = method_name;
  t.seed = seed;
  return t;
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"generator", c.generator},   {"train", c.train},
                     {"eval", c.eval},             {"method", c.method},
                     {"fps_tokens", c.fps_tokens}, {"seeds", c.seeds},
                     {"fps_seeds", c.fps_seeds},   {"token_counts", c.token_counts}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  constexpr std::string_view s = "config";
  reject_unknown_keys(j, s,
                      {"generator", "train", "eval", "method", "fps_tokens", "seeds", "fps_seeds",
                       "token_counts"});
  if (j.contains("generator")) from_json(j.at("generator"), c.generator);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("eval")) from_json(j.at("eval"), c.eval);
  read_field(j, s, "method", c.method);
  read_field(j, s, "fps_tokens", c.fps_tokens);
  read_field(j, s, "seeds", c.seeds);
  read_field(j, s, "fps_seeds", c.fps_seeds);
  read_field(j, s, "token_counts", c.token_counts);
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // nlohmann reports line/column inside what().
    fail(ErrorKind::Config, std::string("config parse error: ") + e.what());
  }
  ExperimentConfig c;
  from_json(j, c);
  c.train.method = c.is_fps() ? std::string("warm") : c.method;
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::Io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_experiment_config(ss.str());
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

TrainedRun train_and_evaluate(const ExperimentConfig& cfg, const std::string& method_name,
                              std::uint64_t seed, const std::vector<Episode>& eval_episodes,
                              unsigned threads) {
  TrainedRun run;
  run.training = train(cfg.train_config(method_name, seed), cfg.generator);
  run.eval = evaluate(run.training.checkpoint, eval_episodes, cfg.train.eps, threads);
  return run;
}

SeedSweepResult run_fps_sweep(const ExperimentConfig& cfg, const std::vector<Episode>& eval_episodes,
                              std::uint32_t num_seeds, unsigned threads) {
  std::vector<std::uint64_t> seeds(num_seeds);
  std::iota(seeds.begin(), seeds.end(), std::uint64_t{0});
  return fps_seed_sweep(eval_episodes, cfg.fps_tokens, seeds, threads);
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg,
                                      const std::vector<Episode>& eval_episodes, unsigned threads) {
  const auto grid = ablation_grid();
  std::vector<AblationRow> rows(cfg.seeds.size() * grid.size());
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    const std::size_t si = i / grid.size();
    const std::size_t gi = i % grid.size();
    const auto run = train_and_evaluate(cfg, grid[gi].name(), cfg.seeds[si], eval_episodes, 1);
    rows[i] = {std::string("(") + static_cast<char>('a' + gi) + ")", grid[gi], cfg.seeds[si],
               run.eval.metrics.qk_dist, run.eval.metrics.miou, run.eval.metrics.attn_entropy};
  });
  return rows;
}

std::vector<TokenSweepRow> run_token_sweep(const ExperimentConfig& cfg,
                                           const std::vector<Episode>& eval_episodes,
                                           unsigned threads) {
  const std::size_t per = cfg.seeds.size();
  std::vector<double> miou(cfg.token_counts.size() * per);
  parallel_for(miou.size(), threads, [&](std::size_t i) {
    ExperimentConfig c = cfg;
    c.train.tokens_per_class = cfg.token_counts[i / per];
    miou[i] = train_and_evaluate(c, cfg.method, cfg.seeds[i % per], eval_episodes, 1).eval.metrics.miou;
  });
  std::vector<TokenSweepRow> rows;
  for (std::size_t t = 0; t < cfg.token_counts.size(); ++t) {
    const double* v = miou.data() + t * per;
    const double mean = std::accumulate(v, v + per, 0.0) / static_cast<double>(per);
    double ss = 0.0;
    for (std::size_t k = 0; k < per; ++k) ss += (v[k] - mean) * (v[k] - mean);
    rows.push_back({cfg.token_counts[t], mean, per > 1 ? std::sqrt(ss / static_cast<double>(per - 1)) : 0.0});
  }
  return rows;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  return f;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string class_column(std::int64_t key) {
  return key == IouAccumulator::kBackground ? "iou_bg" : "iou_" + std::to_string(key);
}

}  // namespace

void write_sweep_csv(const SeedSweepResult& r, const std::filesystem::path& path) {
  auto f = open_out(path);
  std::size_t ncls = 0;
  for (const auto& c : r.class_iou) ncls = std::max(ncls, c.size());
  f << "seed,mean_miou";
  for (std::size_t c = 0; c < ncls; ++c) f << ",iou_" << c;
  f << "\n";
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    f << r.seeds[i] << "," << num(r.miou[i]);
    for (std::size_t c = 0; c < ncls; ++c) f << "," << (c < r.class_iou[i].size() ? num(r.class_iou[i][c]) : "");
    f << "\n";
  }
  f << "summary,best=" << num(r.max) << ";worst=" << num(r.min) << ";mean=" << num(r.mean)
    << ";stdev=" << num(r.stdev) << "\n";
}

void write_metrics_csv(const std::string& experiment, const EvalReport& report,
                       const std::filesystem::path& path) {
  auto f = open_out(path);
  const auto& m = report.metrics;
  f << "experiment,miou";
  for (const auto& [k, v] : m.per_class_iou) f << "," << class_column(k);
  f << ",d_intra,d_inter,d_instance,attn_entropy,attn_diversity,qk_dist\n";
  f << experiment << "," << num(m.miou);
  for (const auto& [k, v] : m.per_class_iou) f << "," << num(v);
  f << "," << num(m.d_intra) << "," << num(m.d_inter) << "," << num(m.d_instance) << ","
    << num(m.attn_entropy) << "," << num(m.attn_diversity) << "," << num(m.qk_dist) << "\n";
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "row,variant,seed,qk_dist,miou,attn_entropy\n";
  for (const auto& r : rows)
    f << r.label << "," << r.method.name() << "," << r.seed << "," << num(r.qk_dist) << ","
      << num(r.miou) << "," << num(r.attn_entropy) << "\n";
}

void write_token_sweep_csv(const std::vector<TokenSweepRow>& rows, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "M,miou_mean,miou_std\n";
  for (const auto& r : rows) f << r.tokens << "," << num(r.miou_mean) << "," << num(r.miou_std) << "\n";
}

void write_sidecar(const std::filesystem::path& path, const std::string& command,
                   const ExperimentConfig& cfg, const nlohmann::json& extra) {
  nlohmann::json config = cfg;
  nlohmann::json j{{"command", command}, {"config", config}, {"config_hash", hash_hex(content_hash(config))}};
  for (const auto& item : extra.items()) j[item.key()] = item.value();
  auto f = open_out(path);
  f << j.dump(2) << "\n";
}

}  // namespace warm
