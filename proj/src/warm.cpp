#include "warm/warm.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "warm/error.hpp"
#include "warm/json_util.hpp"
#include "warm/linalg.hpp"
#include "warm/metrics.hpp"

namespace warm {

namespace {

Matrix centered(const Matrix& f, std::span<const double> mean) {
  Matrix out = f;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= mean[c];
  }
  return out;
}

Matrix covariance(const Matrix& centered_f) {
  Matrix cov = matmul_tn(centered_f, centered_f);
  cov *= 1.0 / static_cast<double>(centered_f.rows() - 1);
  for (std::size_t i = 0; i < cov.rows(); ++i)
    for (std::size_t j = i + 1; j < cov.cols(); ++j) cov(j, i) = cov(i, j);
  return cov;
}

void add_colsum(const Matrix& m, std::vector<double>& acc) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc[c] += row[c];
  }
}

Matrix project(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out = matmul(x, w);
  return b.empty() ? out : add_row_vector(std::move(out), b);
}

Matrix rows_range(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, m.cols());
  std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
            m.data().begin() + static_cast<std::ptrdiff_t>(end * m.cols()), out.data().begin());
  return out;
}

double logit_scale(std::size_t dim, const AttentionOptions& opts) {
  return opts.scale_logits ? 1.0 / std::sqrt(static_cast<double>(dim)) : 1.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Whitening and coloring

WhitenStats compute_stats(const Matrix& features, double eps) {
  require(features.rows() >= 2, ErrorKind::Argument,
          "compute_stats: need at least 2 points, got " + std::to_string(features.rows()));
  WhitenStats s;
  s.eps = eps;
  s.mean = column_means(features);
  s.cov = covariance(centered(features, s.mean));
  auto powers = mat_half_powers(s.cov, eps);
  s.sqrt = std::move(powers.sqrt);
  s.inv_sqrt = std::move(powers.inv_sqrt);
  return s;
}

Matrix whiten(const Matrix& features, const WhitenStats& stats) {
  require(features.cols() == stats.mean.size(), ErrorKind::Argument, "whiten: dimension mismatch");
  return matmul(centered(features, stats.mean), stats.inv_sqrt);
}

Matrix color(const Matrix& whitened, const WhitenStats& stats) {
  require(whitened.cols() == stats.mean.size(), ErrorKind::Argument, "color: dimension mismatch");
  whitened.check_finite("color");
  return add_row_vector(matmul(whitened, stats.sqrt), stats.mean);
}

// ---------------------------------------------------------------------------
// Parameters

Matrix WarmParams::fg_tokens() const { return rows_range(tokens, 0, tokens_per_class()); }
Matrix WarmParams::bg_tokens() const {
  return rows_range(tokens, tokens_per_class(), 2 * tokens_per_class());
}

WarmParams WarmParams::init(std::size_t dim, std::size_t tokens_per_class, Rng& rng,
                            double token_std, bool with_bias) {
  require(dim >= 1 && tokens_per_class >= 1, ErrorKind::Argument, "WarmParams::init: empty shape");
  WarmParams p;
  p.tokens = Matrix(2 * tokens_per_class, dim);
  for (double& v : p.tokens.data()) v = token_std * rng.gaussian();
  const double w_std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Matrix* w : {&p.wq, &p.wk, &p.wv}) {
    *w = Matrix(dim, dim);
    for (double& v : w->data()) v = w_std * rng.gaussian();
  }
  if (with_bias) {
    p.bq.assign(dim, 0.0);
    p.bk.assign(dim, 0.0);
    p.bv.assign(dim, 0.0);
  }
  return p;
}

WarmParams WarmParams::zeros_like(const WarmParams& p) {
  WarmParams z;
  z.tokens = Matrix(p.tokens.rows(), p.tokens.cols());
  z.wq = Matrix(p.wq.rows(), p.wq.cols());
  z.wk = Matrix(p.wk.rows(), p.wk.cols());
  z.wv = Matrix(p.wv.rows(), p.wv.cols());
  z.bq.assign(p.bq.size(), 0.0);
  z.bk.assign(p.bk.size(), 0.0);
  z.bv.assign(p.bv.size(), 0.0);
  return z;
}

std::vector<double> WarmParams::flatten() const {
  std::vector<double> out;
  out.reserve(num_values());
  for (const Matrix* m : {&tokens, &wq, &wk, &wv}) out.insert(out.end(), m->data().begin(), m->data().end());
  for (const auto* b : {&bq, &bk, &bv}) out.insert(out.end(), b->begin(), b->end());
  return out;
}

void WarmParams::assign_flat(const std::vector<double>& flat) {
  require(flat.size() == num_values(), ErrorKind::Argument, "assign_flat: length mismatch");
  auto it = flat.begin();
  for (Matrix* m : {&tokens, &wq, &wk, &wv})
    for (double& v : m->data()) v = *it++;
  for (auto* b : {&bq, &bk, &bv})
    for (double& v : *b) v = *it++;
}

std::size_t WarmParams::num_values() const {
  return tokens.size() + wq.size() + wk.size() + wv.size() + bq.size() + bk.size() + bv.size();
}

void WarmParams::validate() const {
  const std::size_t d = dim();
  require(tokens.rows() >= 2 && tokens.rows() % 2 == 0, ErrorKind::Argument,
          "WarmParams: token count must be 2M with M >= 1");
  for (const Matrix* w : {&wq, &wk, &wv})
    require(w->rows() == d && w->cols() == d, ErrorKind::Argument, "WarmParams: projections must be D x D");
  require(bq.size() == bk.size() && bk.size() == bv.size() && (bq.empty() || bq.size() == d),
          ErrorKind::Argument, "WarmParams: bias vectors must all be empty or length D");
  for (const Matrix* m : {&tokens, &wq, &wk, &wv}) m->check_finite("WarmParams");
  for (const auto* b : {&bq, &bk, &bv})
    for (double v : *b)
      if (!std::isfinite(v)) fail(ErrorKind::Numeric, "WarmParams: non-finite bias");
}

// ---------------------------------------------------------------------------
// Attention

AttentionOutput cross_attention(const Matrix& queries, const Matrix& keys, const WarmParams& params,
                                const AttentionOptions& opts) {
  require(keys.rows() > 0, ErrorKind::Argument, "cross_attention: empty keys");
  require(queries.cols() == params.dim() && keys.cols() == params.dim(), ErrorKind::Argument,
          "cross_attention: dimension mismatch");
  const Matrix q = project(queries, params.wq, params.bq);
  const Matrix k = project(keys, params.wk, params.bk);
  const Matrix v = project(keys, params.wv, params.bv);
  Matrix logits = matmul_nt(q, k);
  logits *= logit_scale(params.dim(), opts);
  AttentionOutput out;
  out.weights = softmax_rows(logits);
  out.attended = matmul(out.weights, v);
  return out;
}

// ---------------------------------------------------------------------------
// Variants

std::string Method::name() const {
  if (*this == warm()) return "warm";
  if (*this == naive()) return "naive";
  std::string base;
  switch (align) {
    case Alignment::None: base = "none"; break;
    case Alignment::Center: base = "center"; break;
    case Alignment::Normalize: base = "normalize"; break;
    case Alignment::Whiten: base = "whiten"; break;
  }
  return base + (restore ? "+restore" : "");
}

Method Method::parse(const std::string& s) {
  if (s == "warm") return warm();
  if (s == "naive") return naive();
  std::string body = s;
  const std::string prefix = "ablation:";
  if (body.rfind(prefix, 0) == 0) body = body.substr(prefix.size());
  Method m;
  std::string mode = body;
  m.restore = false;
  for (const std::string suffix : {"+restore", ",restore", ",on"}) {
    if (body.size() > suffix.size() && body.compare(body.size() - suffix.size(), suffix.size(), suffix) == 0) {
      mode = body.substr(0, body.size() - suffix.size());
      m.restore = true;
    }
  }
  for (const std::string suffix : {",off"}) {
    if (body.size() > suffix.size() && body.compare(body.size() - suffix.size(), suffix.size(), suffix) == 0)
      mode = body.substr(0, body.size() - suffix.size());
  }
  if (mode == "center") m.align = Alignment::Center;
  else if (mode == "normalize") m.align = Alignment::Normalize;
  else if (mode == "whiten") m.align = Alignment::Whiten;
  else if (mode == "none" && !m.restore) m.align = Alignment::None;
  else fail(ErrorKind::Config, "unknown method '" + s + "'");
  return m;
}

std::vector<Method> ablation_grid() {
  return {Method::naive(),
          {Alignment::Center, false},
          {Alignment::Normalize, false},
          {Alignment::Whiten, false},
          {Alignment::Center, true},
          {Alignment::Normalize, true},
          {Alignment::Whiten, true}};
}

ClassTransform make_transform(const Matrix& features, Method method, double eps) {
  ClassTransform t;
  if (method.align == Alignment::None) return t;
  require(features.rows() >= 2, ErrorKind::Argument,
          "alignment needs at least 2 points per class, got " + std::to_string(features.rows()));
  const auto mean = column_means(features);
  t.shift = mean;
  if (method.restore) t.offset = mean;
  switch (method.align) {
    case Alignment::Center:
      break;
    case Alignment::Normalize: {
      const Matrix cov = covariance(centered(features, mean));
      std::vector<double> sigma(cov.rows()), inv(cov.rows());
      for (std::size_t i = 0; i < cov.rows(); ++i) {
        sigma[i] = std::sqrt(std::max(cov(i, i), eps));
        inv[i] = 1.0 / sigma[i];
      }
      t.forward = Matrix::diagonal(inv);
      if (method.restore) t.restore = Matrix::diagonal(sigma);
      break;
    }
    case Alignment::Whiten: {
      t.stats = compute_stats(features, eps);
      t.forward = t.stats->inv_sqrt;
      if (method.restore) t.restore = t.stats->sqrt;
      break;
    }
    case Alignment::None:
      break;
  }
  return t;
}

Matrix apply_forward(const Matrix& features, const ClassTransform& t) {
  Matrix x = t.shift.empty() ? features : centered(features, t.shift);
  return t.forward.empty() ? x : matmul(x, t.forward);
}

Matrix apply_restore(const Matrix& attended_tokens, const ClassTransform& t) {
  Matrix p = t.restore.empty() ? attended_tokens : matmul(attended_tokens, t.restore);
  return t.offset.empty() ? p : add_row_vector(std::move(p), t.offset);
}

ClassTrace class_forward(const WarmParams& params, const Matrix& features, bool fg_pool,
                         Method method, double eps, const AttentionOptions& opts) {
  require(features.rows() > 0, ErrorKind::Argument, "class_forward: class has no points");
  require(features.cols() == params.dim(), ErrorKind::Argument,
          "class_forward: feature dim " + std::to_string(features.cols()) + " != parameter dim " +
              std::to_string(params.dim()));
  ClassTrace t;
  t.fg = fg_pool;
  t.tokens = fg_pool ? params.fg_tokens() : params.bg_tokens();
  t.transform = make_transform(features, method, eps);
  t.keys_in = apply_forward(features, t.transform);
  t.q = project(t.tokens, params.wq, params.bq);
  t.k = project(t.keys_in, params.wk, params.bk);
  t.v = project(t.keys_in, params.wv, params.bv);
  Matrix logits = matmul_nt(t.q, t.k);
  logits *= logit_scale(params.dim(), opts);
  t.weights = softmax_rows(logits);
  t.refined = t.tokens + matmul(t.weights, t.v);
  t.prototypes = apply_restore(t.refined, t.transform);
  t.prototypes.check_finite("class_forward");
  return t;
}

void class_backward(const WarmParams& params, const ClassTrace& trace,
                    const Matrix& grad_prototypes, const AttentionOptions& opts, WarmGrads& grads) {
  require(grad_prototypes.rows() == trace.prototypes.rows() &&
              grad_prototypes.cols() == trace.prototypes.cols(),
          ErrorKind::Argument, "class_backward: gradient shape mismatch");
  require(!trace.weights.empty(), ErrorKind::Usage, "class_backward: missing forward trace");

  // Restore map is symmetric (sqrt of covariance or diagonal), but transpose anyway.
  const Matrix d_refined = trace.transform.restore.empty()
                               ? grad_prototypes
                               : matmul_nt(grad_prototypes, trace.transform.restore);

  const std::size_t m = params.tokens_per_class();
  const std::size_t row0 = trace.fg ? 0 : m;
  Matrix d_tokens = d_refined;  // residual path

  const Matrix d_weights = matmul_nt(d_refined, trace.v);  // M x L
  const Matrix d_v = matmul_tn(trace.weights, d_refined);   // L x D
  grads.wv += matmul_tn(trace.keys_in, d_v);
  if (!grads.bv.empty()) add_colsum(d_v, grads.bv);

  // Softmax Jacobian per row: dS = A * (dA - <A, dA>).
  Matrix d_logits(trace.weights.rows(), trace.weights.cols());
  const double scale = logit_scale(params.dim(), opts);
  for (std::size_t r = 0; r < trace.weights.rows(); ++r) {
    auto a = trace.weights.row(r);
    auto da = d_weights.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) dot += a[c] * da[c];
    auto out = d_logits.row(r);
    for (std::size_t c = 0; c < a.size(); ++c) out[c] = a[c] * (da[c] - dot) * scale;
  }

  const Matrix d_q = matmul(d_logits, trace.k);     // M x D
  const Matrix d_k = matmul_tn(d_logits, trace.q);  // L x D
  grads.wq += matmul_tn(trace.tokens, d_q);
  grads.wk += matmul_tn(trace.keys_in, d_k);
  if (!grads.bq.empty()) {
    add_colsum(d_q, grads.bq);
    add_colsum(d_k, grads.bk);
  }
  d_tokens += matmul_nt(d_q, params.wq);

  for (std::size_t r = 0; r < m; ++r) {
    auto src = d_tokens.row(r);
    auto dst = grads.tokens.row(row0 + r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Warm: return "warm";
    case Provenance::Naive: return "naive";
    case Provenance::Fps: return "fps";
    case Provenance::Centered: return "centered";
    case Provenance::Normalized: return "normalized";
    case Provenance::WhitenedNoRestore: return "whitened-no-restore";
  }
  return "unknown";
}

Provenance provenance_of(Method m) {
  switch (m.align) {
    case Alignment::None: return Provenance::Naive;
    case Alignment::Center: return Provenance::Centered;
    case Alignment::Normalize: return Provenance::Normalized;
    case Alignment::Whiten: return m.restore ? Provenance::Warm : Provenance::WhitenedNoRestore;
  }
  return Provenance::Warm;
}

void PrototypeSet::validate() const {
  require(!classes.empty(), ErrorKind::Argument, "PrototypeSet: no classes");
  for (const auto& c : classes) {
    require(c.rows() > 0, ErrorKind::Argument, "PrototypeSet: empty class");
    c.check_finite("PrototypeSet");
  }
}

AttentionOutput SupportForward::attention(bool fg_pool) const {
  const ClassTrace& t = fg_pool ? fg : bg;
  return {t.refined - t.tokens, t.weights};
}

const WhitenStats& SupportForward::stats(bool fg_pool) const {
  const ClassTrace& t = fg_pool ? fg : bg;
  if (!t.transform.stats) fail(ErrorKind::Usage, "SupportForward::stats: variant did not whiten");
  return *t.transform.stats;
}

SupportForward ablation_forward(const WarmParams& params, const Matrix& fg, const Matrix& bg,
                                Method method, double eps, const AttentionOptions& opts) {
  params.validate();
  SupportForward out;
  out.bg = class_forward(params, bg, false, method, eps, opts);
  out.fg = class_forward(params, fg, true, method, eps, opts);
  out.prototypes.classes = {out.bg.prototypes, out.fg.prototypes};
  out.prototypes.provenance = provenance_of(method);
  return out;
}

SupportForward warm_forward(const WarmParams& params, const Matrix& fg, const Matrix& bg, double eps,
                            const AttentionOptions& opts) {
  return ablation_forward(params, fg, bg, Method::warm(), eps, opts);
}

PrototypeSet naive_forward(const WarmParams& params, const Matrix& fg, const Matrix& bg,
                           const AttentionOptions& opts) {
  return ablation_forward(params, fg, bg, Method::naive(), kDefaultEps, opts).prototypes;
}

PrototypeSet average_shots(const std::vector<PrototypeSet>& sets) {
  require(!sets.empty(), ErrorKind::Argument, "average_shots: no sets");
  PrototypeSet out = sets.front();
  for (std::size_t i = 1; i < sets.size(); ++i) {
    require(sets[i].provenance == out.provenance, ErrorKind::Argument, "average_shots: provenance mismatch");
    require(sets[i].classes.size() == out.classes.size(), ErrorKind::Argument,
            "average_shots: class count mismatch");
    for (std::size_t c = 0; c < out.classes.size(); ++c) out.classes[c] += sets[i].classes[c];
  }
  const double inv = 1.0 / static_cast<double>(sets.size());
  for (auto& c : out.classes) c *= inv;
  return out;
}

WarmGrads warm_backward(const WarmParams& params, const SupportForward& trace,
                        const std::array<Matrix, 2>& grad_prototypes, const AttentionOptions& opts) {
  WarmGrads grads = WarmParams::zeros_like(params);
  class_backward(params, trace.bg, grad_prototypes[0], opts, grads);
  class_backward(params, trace.fg, grad_prototypes[1], opts, grads);
  return grads;
}

double qk_distance(const Matrix& tokens, const Matrix& keys, const WarmParams& params) {
  return mean_pairwise_distance(project(tokens, params.wq, params.bq),
                                project(keys, params.wk, params.bk));
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  const auto& p = ckpt.params;
  nlohmann::json j{
      {"version", 1},
      {"D", p.dim()},
      {"M", p.tokens_per_class()},
      {"seed", ckpt.seed},
      {"method", ckpt.method.name()},
      {"scale_logits", ckpt.attention.scale_logits},
      {"P0", matrix_to_json(p.tokens)},
      {"Wq", matrix_to_json(p.wq)},
      {"Wk", matrix_to_json(p.wk)},
      {"Wv", matrix_to_json(p.wv)},
      {"config_hash", ckpt.config_hash},
  };
  if (p.has_bias()) {
    j["bq"] = p.bq;
    j["bk"] = p.bk;
    j["bv"] = p.bv;
  }
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  try {
    if (j.at("version").get<int>() != 1) fail(ErrorKind::Checkpoint, "checkpoint: unsupported version");
    const auto d = j.at("D").get<std::size_t>();
    const auto m = j.at("M").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.method = Method::parse(j.at("method").get<std::string>());
    c.attention.scale_logits = j.value("scale_logits", false);
    c.config_hash = j.value("config_hash", std::string{});
    c.params.tokens = matrix_from_json(j.at("P0"), "P0");
    c.params.wq = matrix_from_json(j.at("Wq"), "Wq");
    c.params.wk = matrix_from_json(j.at("Wk"), "Wk");
    c.params.wv = matrix_from_json(j.at("Wv"), "Wv");
    if (j.contains("bq")) {
      c.params.bq = j.at("bq").get<std::vector<double>>();
      c.params.bk = j.at("bk").get<std::vector<double>>();
      c.params.bv = j.at("bv").get<std::vector<double>>();
    }
    if (c.params.dim() != d || c.params.tokens_per_class() != m || c.params.tokens.rows() != 2 * m)
      fail(ErrorKind::Checkpoint, "checkpoint: array shapes disagree with D=" + std::to_string(d) +
                                      ", M=" + std::to_string(m));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Checkpoint, std::string("checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Checkpoint) throw;
    fail(ErrorKind::Checkpoint, std::string("checkpoint: ") + e.what());
  }
  try {
    c.params.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Checkpoint, std::string("checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot open " + tmp + " for writing");
    f << checkpoint_to_json(ckpt).dump(1) << '\n';
    if (!f) fail(ErrorKind::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::Io, "cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Checkpoint, path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace warm
