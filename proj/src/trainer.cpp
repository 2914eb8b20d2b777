#include "warm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "warm/error.hpp"
#include "warm/json_util.hpp"
#include "warm/parallel.hpp"

namespace warm {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::Config, "train: " + m); };
  if (!(lr >= 0.0) || !std::isfinite(lr)) bad("lr must be >= 0");
  if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) bad("lr_decay_factor must lie in (0, 1]");
  for (double m : lr_milestones)
    if (!(m > 0.0 && m < 1.0)) bad("lr milestones must lie strictly inside (0, 1)");
  if (!(lambda >= 0.0)) bad("lambda must be >= 0");
  if (!(eps > 0.0)) bad("eps must be > 0");
  if (tokens_per_class == 0) bad("tokens_per_class must be >= 1");
  if (!(token_std >= 0.0)) bad("token_std must be >= 0");
  if (!(grad_clip >= 0.0)) bad("grad_clip must be >= 0");
  (void)Method::parse(method);
}

double TrainConfig::lr_at(std::uint64_t step) const {
  const double total = static_cast<double>(std::max<std::uint64_t>(total_steps(), 1));
  double out = lr;
  for (double m : lr_milestones)
    if (static_cast<double>(step) >= m * total) out *= lr_decay_factor;
  return out;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"episodes_per_epoch", c.episodes_per_epoch},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"lr_milestones", c.lr_milestones},
                     {"lambda", c.lambda},
                     {"margin", c.margin},
                     {"eps", c.eps},
                     {"tokens_per_class", c.tokens_per_class},
                     {"token_std", c.token_std},
                     {"use_bias", c.use_bias},
                     {"scale_logits", c.scale_logits},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  constexpr std::string_view s = "train";
  reject_unknown_keys(j, s,
                      {"epochs", "episodes_per_epoch", "lr", "weight_decay", "lr_decay_factor",
                       "lr_milestones", "lambda", "margin", "eps", "tokens_per_class", "token_std",
                       "use_bias", "scale_logits", "grad_clip", "seed"});
  read_field(j, s, "epochs", c.epochs);
  read_field(j, s, "episodes_per_epoch", c.episodes_per_epoch);
  read_field(j, s, "lr", c.lr);
  read_field(j, s, "weight_decay", c.weight_decay);
  read_field(j, s, "lr_decay_factor", c.lr_decay_factor);
  read_field(j, s, "lr_milestones", c.lr_milestones);
  read_field(j, s, "lambda", c.lambda);
  read_field(j, s, "margin", c.margin);
  read_field(j, s, "eps", c.eps);
  read_field(j, s, "tokens_per_class", c.tokens_per_class);
  read_field(j, s, "token_std", c.token_std);
  read_field(j, s, "use_bias", c.use_bias);
  read_field(j, s, "scale_logits", c.scale_logits);
  read_field(j, s, "grad_clip", c.grad_clip);
  read_field(j, s, "seed", c.seed);
}

void EvalConfig::validate() const {
  if (episodes == 0) fail(ErrorKind::Config, "eval: episodes must be >= 1");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"episodes", c.episodes}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  reject_unknown_keys(j, "eval", {"episodes", "seed"});
  read_field(j, "eval", "episodes", c.episodes);
  read_field(j, "eval", "seed", c.seed);
}

// ---------------------------------------------------------------------------
// Optimizer

OptimizerState OptimizerState::for_params(const WarmParams& p) {
  OptimizerState s;
  s.first = WarmParams::zeros_like(p);
  s.second = WarmParams::zeros_like(p);
  return s;
}

UpdateResult apply_update(const WarmParams& params, const WarmGrads& grads,
                          const OptimizerState& state, double lr, double weight_decay) {
  require(grads.num_values() == params.num_values() && state.first.num_values() == params.num_values(),
          ErrorKind::Argument, "apply_update: shape mismatch");
  UpdateResult out{params, state};
  out.state.step = state.step + 1;
  const double t = static_cast<double>(out.state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);

  auto p = params.flatten();
  const auto g = grads.flatten();
  auto m = state.first.flatten();
  auto v = state.second.flatten();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
    v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    p[i] -= lr * weight_decay * p[i];
    p[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
  out.params.assign_flat(p);
  out.state.first.assign_flat(m);
  out.state.second.assign_flat(v);
  return out;
}

double l2_norm(const WarmParams& p) {
  double s = 0.0;
  for (double v : p.flatten()) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Training

std::uint64_t train_episode_seed(std::uint64_t seed, std::uint64_t index) {
  return derive_seed(seed, index);
}

TrainResult train(const TrainConfig& cfg, const GeneratorConfig& gen,
                  const std::function<void(const TrainLogRow&)>& on_step) {
  cfg.validate();
  const EpisodeGenerator generator(gen);
  const Method method = cfg.parsed_method();
  const auto attn = cfg.attention();
  const auto loss_opts = cfg.loss();
  const std::set<std::uint32_t> base(gen.base_classes.begin(), gen.base_classes.end());

  Rng init_rng(derive_seed(cfg.seed, 0xA11CE));
  WarmParams params = WarmParams::init(gen.feature_dim, cfg.tokens_per_class, init_rng, cfg.token_std,
                                       cfg.use_bias);
  OptimizerState opt = OptimizerState::for_params(params);

  TrainResult result;
  const std::uint64_t steps = cfg.total_steps();
  result.log.reserve(steps);
  for (std::uint64_t step = 0; step < steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t episode_seed = train_episode_seed(cfg.seed, step);
    Rng rng(episode_seed);
    const Episode ep = generator.sample(rng, Split::Base);
    for (auto c : ep.class_ids)
      if (!base.count(c))
        fail(ErrorKind::Numeric, "training episode drew non-base class " + std::to_string(c));

    auto lg = loss_and_grads(params, ep, method, cfg.eps, attn, loss_opts);
    double gnorm = l2_norm(lg.grads);
    if (!std::isfinite(lg.report.total) || !std::isfinite(gnorm))
      fail(ErrorKind::Numeric, "non-finite loss or gradient at step " + std::to_string(step) +
                                   " (episode seed " + std::to_string(episode_seed) + ")");
    if (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip) {
      const auto scale = cfg.grad_clip / gnorm;
      auto flat = lg.grads.flatten();
      for (double& v : flat) v *= scale;
      lg.grads.assign_flat(flat);
    }

    const double lr = cfg.lr_at(step);
    auto upd = apply_update(params, lg.grads, opt, lr, cfg.weight_decay);
    params = std::move(upd.params);
    opt = std::move(upd.state);

    TrainLogRow row{step, lg.report.margin, lg.report.simplification, lg.report.total, gnorm, lr, 0.0};
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    if (on_step) on_step(row);
  }

  result.checkpoint.params = std::move(params);
  result.checkpoint.seed = cfg.seed;
  result.checkpoint.method = method;
  result.checkpoint.attention = attn;
  nlohmann::json provenance{{"train", cfg}, {"method", cfg.method}, {"generator", gen}};
  result.checkpoint.config_hash = hash_hex(content_hash(provenance));
  return result;
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  f << "episode_idx,loss_margin,loss_sim,loss_total,grad_norm,lr\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.episode_idx), r.loss_margin, r.loss_sim,
                  r.loss_total, r.grad_norm, r.lr);
    f << buf;
  }
  if (!f) fail(ErrorKind::Io, "write failed for " + path.string());
}

void write_train_timing(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  f << "episode_idx,wall_ms\n";
  char buf[64];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%llu,%.3f\n", static_cast<unsigned long long>(r.episode_idx),
                  r.wall_ms);
    f << buf;
  }
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<Episode> make_eval_episodes(const GeneratorConfig& gen, const EvalConfig& eval) {
  eval.validate();
  const EpisodeGenerator generator(gen);
  std::vector<Episode> out;
  out.reserve(eval.episodes);
  for (std::uint32_t i = 0; i < eval.episodes; ++i) {
    Rng rng(eval.seed + i);
    out.push_back(generator.sample(rng, Split::Novel));
  }
  return out;
}

namespace {

struct EpisodeDiagnostics {
  IouAccumulator iou;
  double entropy = 0.0;
  double diversity = 0.0;
  double qk = 0.0;
  std::size_t pools = 0;
  std::size_t diversity_pools = 0;
};

}  // namespace

EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Episode>& episodes, double eps,
                    unsigned threads) {
  require(!episodes.empty(), ErrorKind::Argument, "evaluate: no episodes");
  const auto& params = ckpt.params;
  for (const auto& ep : episodes)
    if (ep.feature_dim() != params.dim())
      fail(ErrorKind::Checkpoint, "checkpoint D=" + std::to_string(params.dim()) +
                                      " does not match episode D=" + std::to_string(ep.feature_dim()));

  std::vector<EpisodeDiagnostics> per(episodes.size());
  parallel_for(episodes.size(), threads, [&](std::size_t i) {
    const Episode& ep = episodes[i];
    const auto fwd = forward_episode(params, ep, ckpt.method, eps, ckpt.attention);
    auto& d = per[i];
    const auto keys = episode_label_keys(ep.class_ids);
    for (const auto& q : ep.query) {
      const auto pred = predict(point_distances(q.features, fwd.prototypes.classes));
      d.iou.add(pred, q.labels, keys);
    }
    for (const auto& shot : fwd.shots) {
      for (const ClassTrace* t : {&shot.fg, &shot.bg}) {
        d.entropy += attention_entropy(t->weights);
        if (t->weights.rows() >= 2) {
          d.diversity += attention_diversity(t->weights);
          ++d.diversity_pools;
        }
        d.qk += qk_distance(t->tokens, t->keys_in, params);
        ++d.pools;
      }
    }
  });

  EvalReport report;
  report.episodes = episodes.size();
  IouAccumulator total;
  double entropy = 0.0, diversity = 0.0, qk = 0.0;
  std::size_t pools = 0, diversity_pools = 0;
  for (const auto& d : per) {
    total.merge(d.iou);
    entropy += d.entropy;
    diversity += d.diversity;
    qk += d.qk;
    pools += d.pools;
    diversity_pools += d.diversity_pools;
  }
  const auto res = total.result();
  auto& m = report.metrics;
  m.miou = res.miou;
  m.per_class_iou = res.per_class;
  m.attn_entropy = entropy / static_cast<double>(pools);
  m.attn_diversity = diversity_pools ? diversity / static_cast<double>(diversity_pools) : 0.0;
  m.qk_dist = qk / static_cast<double>(pools);

  std::vector<EpisodeFgSample> samples;
  for (const auto& ep : episodes)
    for (std::uint32_t w = 0; w < ep.n_way; ++w)
      for (std::uint32_t s = 0; s < ep.k_shot; ++s)
        samples.push_back({ep.class_ids[w], split_fg_bg(ep.support_cloud(w, s), w + 1).fg});
  const auto disp = dispersion_metrics(samples);
  m.d_intra = disp.d_intra.value_or(0.0);
  m.d_inter = disp.d_inter.value_or(0.0);
  m.d_instance = disp.d_instance;
  report.dispersion_complete = disp.d_intra.has_value() && disp.d_inter.has_value();
  m.validate();
  return report;
}

MiouResult evaluate_prototypes(const std::vector<Episode>& episodes,
                               const std::function<std::vector<Matrix>(const Episode&)>& make) {
  IouAccumulator acc;
  for (const auto& ep : episodes) {
    const auto protos = make(ep);
    const auto keys = episode_label_keys(ep.class_ids);
    for (const auto& q : ep.query)
      acc.add(predict(point_distances(q.features, protos)), q.labels, keys);
  }
  return acc.result();
}

}  // namespace warm
