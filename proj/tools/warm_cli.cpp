#include <algorithm>
#include <cstdio>
#include <map>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "warm/error.hpp"
#include "warm/experiments.hpp"
#include "warm/json_util.hpp"
#include "warm/parallel.hpp"

namespace fs = std::filesystem;
using namespace warm;

namespace {

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> seeds;
  std::string data;
  std::string checkpoint;
  std::string method;
};

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Numeric: return 2;
    case ErrorKind::Io:
    case ErrorKind::Format:
    case ErrorKind::Checkpoint: return 3;
    default: return 1;
  }
}

ExperimentConfig load_config(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? parse_experiment_config("{}") : load_experiment_config(o.config);
  if (!o.method.empty()) {
    cfg.method = o.method;
    cfg.train.method = cfg.is_fps() ? std::string("warm") : cfg.method;
    cfg.validate();
  }
  return cfg;
}

fs::path prepare_out(const Options& o) {
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec || !fs::is_directory(o.out)) fail(ErrorKind::Io, "cannot create output directory " + o.out);
  return fs::path(o.out);
}

std::string episode_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "episode_%05zu.wep", i);
  return buf;
}

std::string file_hash(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c; f.get(c);) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return hash_hex(h);
}

// Evaluation episodes: a gen directory (or single .wep) when --data is given,
// otherwise regenerated from the config.
std::vector<Episode> eval_episodes(const ExperimentConfig& cfg, const Options& o) {
  if (o.data.empty()) return make_eval_episodes(cfg.generator, cfg.eval);
  const fs::path p(o.data);
  std::vector<Episode> out;
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(p))
      if (e.path().extension() == ".wep") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) fail(ErrorKind::Io, "no .wep files in " + p.string());
    for (const auto& f : files) out.push_back(load_features(f));
  } else {
    out.push_back(load_features(p));
  }
  return out;
}

std::vector<std::uint64_t> seed_list(const ExperimentConfig& cfg, const Options& o) {
  if (!o.seeds) return cfg.seeds;
  std::vector<std::uint64_t> s(*o.seeds);
  std::iota(s.begin(), s.end(), o.seed.value_or(0));
  return s;
}

nlohmann::json metrics_json(const EvalReport& r) {
  const auto& m = r.metrics;
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [k, v] : m.per_class_iou) per[k == IouAccumulator::kBackground ? "bg" : std::to_string(k)] = v;
  return {{"miou", m.miou},         {"per_class_iou", per},        {"d_intra", m.d_intra},
          {"d_inter", m.d_inter},   {"d_instance", m.d_instance},  {"attn_entropy", m.attn_entropy},
          {"attn_diversity", m.attn_diversity}, {"qk_dist", m.qk_dist}, {"episodes", r.episodes},
          {"dispersion_complete", r.dispersion_complete}};
}

int cmd_gen(const Options& o) {
  const auto cfg = load_config(o);
  const auto out = prepare_out(o);
  EvalConfig ec = cfg.eval;
  if (o.seed) ec.seed = *o.seed;
  const auto episodes = make_eval_episodes(cfg.generator, ec);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto path = out / episode_name(i);
    save_episode(episodes[i], path);
    files.push_back({{"file", episode_name(i)}, {"seed", ec.seed + i}, {"hash", file_hash(path)}});
  }
  write_sidecar(out / "gen.json", "gen", cfg, {{"generator", cfg.generator}, {"episode_seed", ec.seed}, {"files", files}});
  std::cout << "wrote " << episodes.size() << " episodes to " << out.string() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  auto cfg = load_config(o);
  if (cfg.is_fps()) fail(ErrorKind::Config, "train: method fps-min-dist has no learnable parameters");
  const auto out = prepare_out(o);
  auto tc = cfg.train_config(cfg.method, o.seed.value_or(cfg.train.seed));
  const auto result = train(tc, cfg.generator, [&](const TrainLogRow& r) {
    if ((r.episode_idx + 1) % 50 == 0)
      std::cerr << "step " << r.episode_idx + 1 << "/" << tc.total_steps() << " loss " << r.loss_total << "\n";
  });
  save_checkpoint(result.checkpoint, out / "checkpoint.json");
  write_train_log(result.log, out / "train_log.csv");
  write_train_timing(result.log, out / "train_timing.csv");
  nlohmann::json extra{{"method", tc.method}, {"seed", tc.seed}, {"steps", result.log.size()},
                       {"checkpoint_hash", result.checkpoint.config_hash}};
  if (!result.log.empty()) {
    extra["initial_loss"] = result.log.front().loss_total;
    extra["final_loss"] = result.log.back().loss_total;
  }
  write_sidecar(out / "train.json", "train", cfg, extra);
  std::cout << "checkpoint " << (out / "checkpoint.json").string() << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const auto cfg = load_config(o);
  const auto out = prepare_out(o);
  const auto episodes = eval_episodes(cfg, o);
  if (cfg.is_fps()) {
    EvalReport rep;
    rep.episodes = episodes.size();
    IouAccumulator acc;
    Rng rng(o.seed.value_or(0));
    for (const auto& ep : episodes) {
      const auto protos = fps_prototypes(ep, cfg.fps_tokens, rng);
      for (const auto& q : ep.query)
        acc.add(min_dist_classify(q.features, protos), q.labels, episode_label_keys(ep.class_ids));
    }
    const auto res = acc.result();
    rep.metrics.miou = res.miou;
    rep.metrics.per_class_iou = res.per_class;
    std::vector<EpisodeFgSample> samples;
    for (const auto& ep : episodes)
      for (std::uint32_t w = 0; w < ep.n_way; ++w)
        for (std::uint32_t s = 0; s < ep.k_shot; ++s)
          samples.push_back({ep.class_ids[w], split_fg_bg(ep.support_cloud(w, s), w + 1).fg});
    const auto d = dispersion_metrics(samples);
    rep.metrics.d_intra = d.d_intra.value_or(0.0);
    rep.metrics.d_inter = d.d_inter.value_or(0.0);
    rep.metrics.d_instance = d.d_instance;
    rep.dispersion_complete = d.d_intra && d.d_inter;
    // FPS has no attention; those columns stay zero.
    write_metrics_csv("fps-min-dist", rep, out / "metrics.csv");
    write_sidecar(out / "eval.json", "eval", cfg, {{"metrics", metrics_json(rep)}, {"fps_seed", o.seed.value_or(0)}});
    std::cout << "miou " << rep.metrics.miou << "\n";
    return 0;
  }
  if (o.checkpoint.empty()) fail(ErrorKind::Usage, "eval: --checkpoint is required for learned methods");
  const auto ckpt = load_checkpoint(o.checkpoint);
  const auto rep = evaluate(ckpt, episodes, cfg.train.eps, worker_count());
  write_metrics_csv(ckpt.method.name(), rep, out / "metrics.csv");
  write_sidecar(out / "eval.json", "eval", cfg,
                {{"metrics", metrics_json(rep)}, {"checkpoint", o.checkpoint}, {"checkpoint_hash", ckpt.config_hash}});
  std::cout << "miou " << rep.metrics.miou << "\n";
  return 0;
}

int cmd_sweep_fps(const Options& o) {
  const auto cfg = load_config(o);
  const auto out = prepare_out(o);
  const auto episodes = eval_episodes(cfg, o);
  std::vector<std::uint64_t> seeds(o.seeds.value_or(cfg.fps_seeds));
  if (seeds.empty()) fail(ErrorKind::Usage, "sweep-fps: --seeds must be >= 1");
  std::iota(seeds.begin(), seeds.end(), o.seed.value_or(0));
  const auto r = fps_seed_sweep(episodes, cfg.fps_tokens, seeds, worker_count());
  write_sweep_csv(r, out / "sweep_fps.csv");
  write_sidecar(out / "sweep_fps.json", "sweep-fps", cfg,
                {{"seeds", seeds.size()},
                 {"first_seed", seeds.front()},
                 {"best", r.max},
                 {"worst", r.min},
                 {"mean", r.mean},
                 {"stdev", r.stdev}});
  std::cout << "best " << r.max << " worst " << r.min << " mean " << r.mean << " stdev " << r.stdev << "\n";
  return 0;
}

int cmd_ablate(const Options& o) {
  auto cfg = load_config(o);
  cfg.seeds = seed_list(cfg, o);
  const auto out = prepare_out(o);
  const auto episodes = eval_episodes(cfg, o);
  const auto rows = run_ablation(cfg, episodes, worker_count());
  write_ablation_csv(rows, out / "ablation.csv");
  write_sidecar(out / "ablation.json", "ablate", cfg, {{"rows", rows.size()}});
  for (const auto& r : rows)
    std::cout << r.label << " " << r.method.name() << " seed " << r.seed << " qk " << r.qk_dist << " miou "
              << r.miou << "\n";
  return 0;
}

int cmd_token_sweep(const Options& o) {
  auto cfg = load_config(o);
  if (cfg.is_fps()) fail(ErrorKind::Config, "token-sweep needs a learned method");
  cfg.seeds = seed_list(cfg, o);
  const auto out = prepare_out(o);
  const auto episodes = eval_episodes(cfg, o);
  const auto rows = run_token_sweep(cfg, episodes, worker_count());
  write_token_sweep_csv(rows, out / "token_sweep.csv");
  write_sidecar(out / "token_sweep.json", "token-sweep", cfg, {{"rows", rows.size()}});
  for (const auto& r : rows) std::cout << "M=" << r.tokens << " miou " << r.miou_mean << " +- " << r.miou_std << "\n";
  return 0;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream f(p);
  if (!f) fail(ErrorKind::Io, "cannot open " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// Collects whatever experiment CSVs exist under --out into report.json.
int cmd_report(const Options& o) {
  const fs::path dir(o.out);
  if (!fs::is_directory(dir)) fail(ErrorKind::Io, "report: no output directory " + o.out);
  nlohmann::json rep = nlohmann::json::object();
  for (const char* name : {"metrics.csv", "sweep_fps.csv", "ablation.csv", "token_sweep.csv"}) {
    const auto p = dir / name;
    if (!fs::exists(p)) continue;
    const auto rows = read_csv(p);
    if (rows.empty()) continue;
    nlohmann::json table = nlohmann::json::array();
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (!rows[r].empty() && rows[r][0] == "summary") {
        rep[std::string(name) + ":summary"] = rows[r].size() > 1 ? rows[r][1] : "";
        continue;
      }
      nlohmann::json row = nlohmann::json::object();
      for (std::size_t c = 0; c < rows[0].size() && c < rows[r].size(); ++c) row[rows[0][c]] = rows[r][c];
      table.push_back(row);
    }
    rep[name] = table;
  }
  if (rep.empty()) fail(ErrorKind::Io, "report: no experiment outputs in " + o.out);

  // ablation: best variant per seed
  if (rep.contains("ablation.csv")) {
    std::map<std::string, std::pair<double, std::string>> best;
    for (const auto& row : rep["ablation.csv"]) {
      const double m = std::stod(row["miou"].get<std::string>());
      auto& b = best[row["seed"].get<std::string>()];
      if (b.second.empty() || m > b.first) b = {m, row["variant"].get<std::string>()};
    }
    nlohmann::json winners = nlohmann::json::object();
    for (const auto& [seed, b] : best) winners[seed] = b.second;
    rep["ablation_best_by_seed"] = winners;
  }
  std::ofstream f(dir / "report.json");
  if (!f) fail(ErrorKind::Io, "cannot write report.json");
  f << rep.dump(2) << "\n";
  std::cout << rep.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WARM prototype generation: synthetic few-shot episodes, training, evaluation and sweeps"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "seed override (training seed, FPS seed, or first episode seed)");
    sub->add_option("--seeds", o.seeds, "number of seeds (sweeps)");
    sub->add_option("--data", o.data, "episode directory or .wep file from gen");
    sub->add_option("--method", o.method, "method override: warm | naive | fps-min-dist | ablation:<mode>,<on|off>");
  };
  struct Verb {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
  };
  const Verb verbs[] = {{"gen", "write evaluation episodes as WARM-EP1 files", cmd_gen},
                        {"train", "episodic training on base classes", cmd_train},
                        {"eval", "evaluate a checkpoint (or FPS) on novel-class episodes", cmd_eval},
                        {"sweep-fps", "FPS + min-dist over many FPS seeds", cmd_sweep_fps},
                        {"ablate", "train and evaluate the seven alignment variants", cmd_ablate},
                        {"token-sweep", "mIoU against the number of tokens per class", cmd_token_sweep},
                        {"report", "summarize experiment CSVs in --out", cmd_report}};
  int (*chosen)(const Options&) = nullptr;
  for (const auto& v : verbs) {
    auto* sub = app.add_subcommand(v.name, v.help);
    common(sub);
    if (std::string(v.name) == "eval") sub->add_option("--checkpoint", o.checkpoint, "checkpoint JSON");
    sub->callback([&chosen, fn = v.fn] { chosen = fn; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    return chosen(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
