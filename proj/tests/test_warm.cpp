#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "warm/error.hpp"
#include "warm/linalg.hpp"
#include "warm/model.hpp"
#include "warm/warm.hpp"

using namespace warm;
using testutil::random_matrix;
using testutil::ref_matmul;

namespace {

// Exactly zero-mean rows +-c e_i with per-channel scales; covariance is diagonal.
Matrix axis_cloud(const std::vector<double>& sigma) {
  const std::size_t d = sigma.size();
  const double l = 2.0 * static_cast<double>(d);
  Matrix f(2 * d, d);
  for (std::size_t i = 0; i < d; ++i) {
    const double c = sigma[i] * std::sqrt((l - 1.0) / 2.0);
    f(2 * i, i) = c;
    f(2 * i + 1, i) = -c;
  }
  return f;
}

Matrix ref_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) z += std::exp(m(r, c));
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = std::exp(m(r, c)) / z;
  }
  return out;
}

// softmax(T Wq (K Wk)^T) K Wv written out from scratch
Matrix ref_attend(const Matrix& tokens, const Matrix& keys, const WarmParams& p) {
  const Matrix q = ref_matmul(tokens, p.wq);
  const Matrix k = ref_matmul(keys, p.wk);
  const Matrix v = ref_matmul(keys, p.wv);
  return ref_matmul(ref_softmax(ref_matmul(q, k.transpose())), v);
}

Matrix ref_cov(const Matrix& f, std::vector<double>& mean) {
  const std::size_t n = f.rows(), d = f.cols();
  mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += f(r, c) / static_cast<double>(n);
  Matrix cov(d, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        cov(i, j) += (f(r, i) - mean[i]) * (f(r, j) - mean[j]) / static_cast<double>(n - 1);
  return cov;
}

WarmParams small_params(std::size_t d, std::size_t m, std::uint64_t seed, bool bias = false) {
  Rng rng(seed);
  auto p = WarmParams::init(d, m, rng, 0.5, bias);
  if (bias)
    for (auto* b : {&p.bq, &p.bk, &p.bv})
      for (auto& v : *b) v = 0.3 * rng.gaussian();
  return p;
}

Episode tiny_episode(std::uint64_t seed, std::size_t d = 4, std::size_t per_class = 6) {
  Rng rng(seed);
  Episode ep;
  ep.class_ids = {3};
  auto cloud = [&](double shift) {
    PointCloud c{Matrix(2 * per_class, d), {}};
    for (std::size_t r = 0; r < 2 * per_class; ++r) {
      const bool fg = r % 2 == 0;
      c.labels.push_back(fg ? 1 : 0);
      for (std::size_t k = 0; k < d; ++k)
        c.features(r, k) = rng.gaussian() * (1.0 + 0.3 * k) + (fg ? shift : -shift) + 0.5 * k;
    }
    return c;
  };
  ep.support.push_back(cloud(1.0));
  ep.query.push_back(cloud(0.8));
  return ep;
}

}  // namespace

TEST_SUITE("warm") {

TEST_CASE("compute_stats examples") {
  const auto s = compute_stats(Matrix::from_rows({{1, 2}, {3, 4}}));
  CHECK(s.mean == std::vector<double>{2, 3});

  const auto t = compute_stats(Matrix::from_rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}}));
  CHECK(std::abs(t.mean[0]) < 1e-15);
  CHECK(max_abs_diff(t.cov, Matrix::from_rows({{2.0 / 3, 0}, {0, 2.0 / 3}})) < 1e-15);

  const auto c = compute_stats(Matrix(5, 3, 2.0));
  CHECK(frobenius_norm(c.cov) == 0.0);
  CHECK(max_abs_diff(c.inv_sqrt, Matrix::identity(3) * 100.0) < 1e-9);

  CHECK_THROWS_AS(compute_stats(Matrix(1, 3)), Error);
}

TEST_CASE("stats invariants") {
  Rng rng(31);
  const Matrix f = random_matrix(40, 5, rng);
  const auto s = compute_stats(f);
  std::vector<double> mu;
  const Matrix cov = ref_cov(f, mu);
  CHECK(max_abs_diff(s.cov, cov) < 1e-12);
  CHECK(max_abs_diff(s.cov, s.cov.transpose()) <= 1e-10);
  CHECK(frobenius_norm(matmul(matmul(s.inv_sqrt, s.cov), s.inv_sqrt) - Matrix::identity(5)) < 1e-6);
  CHECK(frobenius_norm(matmul(s.sqrt, s.inv_sqrt) - Matrix::identity(5)) < 1e-6);
}

TEST_CASE("whiten examples") {
  const Matrix f = Matrix::from_rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}});
  const auto s = compute_stats(f);
  const Matrix z = whiten(f, s);
  CHECK(max_abs_diff(z, f * std::sqrt(1.5)) < 1e-12);
  CHECK(max_abs_diff(matmul_tn(z, z) * (1.0 / 3.0), Matrix::identity(2)) < 1e-12);

  const Matrix white = axis_cloud({1, 1, 1});
  CHECK(max_abs_diff(whiten(white, compute_stats(white)), white) < 1e-12);

  CHECK_THROWS_AS(whiten(Matrix(4, 3), s), Error);
}

TEST_CASE("whitening identity and round trip on random full-rank inputs") {
  Rng rng(32);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + rng.below(6);
    Matrix f = random_matrix(30, d, rng);
    const Matrix mix = random_matrix(d, d, rng);
    f = matmul(f, mix);
    for (auto& v : f.data()) v += 3.0;
    const auto s = compute_stats(f);
    // the clamp changes near-singular spectra by design
    const auto ev = sym_eig(s.cov).values;
    if (*std::min_element(ev.begin(), ev.end()) < 1e-3) continue;
    const Matrix z = whiten(f, s);
    for (double m : column_means(z)) CHECK(std::abs(m) < 1e-8);
    const Matrix g = matmul_tn(z, z) * (1.0 / 29.0);
    CHECK(frobenius_norm(g - Matrix::identity(d)) / std::sqrt(double(d)) < 1e-4);
    CHECK(max_abs_diff(color(z, s), f) < 1e-6);
  }
}

TEST_CASE("color examples") {
  Rng rng(33);
  const Matrix f = random_matrix(10, 3, rng);
  auto s = compute_stats(f);
  CHECK(max_abs_diff(color(Matrix(2, 3), s), Matrix::from_rows({s.mean, s.mean})) < 1e-15);
  WhitenStats id;
  id.mean = {0, 0, 0};
  id.cov = id.sqrt = id.inv_sqrt = Matrix::identity(3);
  CHECK(max_abs_diff(color(f, id), f) == 0.0);
  CHECK_THROWS_AS(color(Matrix(2, 4), s), Error);
}

TEST_CASE("cross_attention examples") {
  auto p = small_params(4, 3, 1);
  Rng rng(34);
  const Matrix key = random_matrix(1, 4, rng);
  const auto one = cross_attention(random_matrix(1, 4, rng), key, p);
  CHECK(one.weights == Matrix::from_rows({{1.0}}));
  CHECK(max_abs_diff(one.attended, ref_matmul(key, p.wv)) < 1e-14);

  auto z = p;
  z.wq = Matrix(4, 4);
  z.wk = Matrix(4, 4);
  const Matrix keys = random_matrix(5, 4, rng);
  const auto u = cross_attention(random_matrix(3, 4, rng), keys, z);
  for (double w : u.weights.data()) CHECK(w == doctest::Approx(0.2));
  const auto vm = column_means(ref_matmul(keys, z.wv));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(u.attended(r, c) == doctest::Approx(vm[c]));

  CHECK_THROWS_AS(cross_attention(random_matrix(3, 4, rng), Matrix(0, 4), p), Error);
}

TEST_CASE("cross_attention equals a from-scratch softmax(QK^T)V") {
  auto p = small_params(4, 3, 2);
  Rng rng(35);
  const Matrix tokens = random_matrix(3, 4, rng);
  const Matrix keys = random_matrix(6, 4, rng);
  const auto out = cross_attention(tokens, keys, p);
  CHECK(max_abs_diff(out.attended, ref_attend(tokens, keys, p)) < 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (double w : out.weights.row(r)) {
      CHECK(w >= 0.0);
      s += w;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  const auto scaled = cross_attention(tokens, keys, p, {true});
  auto p2 = p;
  p2.wq *= 0.5;  // 1/sqrt(4)
  CHECK(max_abs_diff(scaled.attended, ref_attend(tokens, keys, p2)) < 1e-12);
}

TEST_CASE("warm_forward collapses to naive_forward on white data") {
  const auto p = small_params(4, 3, 3);
  const Matrix fg = axis_cloud({1, 1, 1, 1});
  std::vector<std::size_t> rev;
  for (std::size_t r = fg.rows(); r-- > 0;) rev.push_back(r);
  const Matrix bg = fg.select_rows(rev);
  const auto w = warm_forward(p, fg, bg);
  const auto n = naive_forward(p, fg, bg);
  for (std::size_t c = 0; c < 2; ++c) CHECK(max_abs_diff(w.prototypes.classes[c], n.classes[c]) <= 1e-10);
  CHECK(n.provenance == Provenance::Naive);
  CHECK(w.prototypes.provenance == Provenance::Warm);
}

TEST_CASE("zero projections isolate the coloring step") {
  auto p = small_params(4, 3, 4);
  p.wq = p.wk = p.wv = Matrix(4, 4);
  Rng rng(36);
  const Matrix fg = random_matrix(9, 4, rng), bg = random_matrix(7, 4, rng);
  const auto w = warm_forward(p, fg, bg);
  const auto sf = compute_stats(fg), sb = compute_stats(bg);
  CHECK(max_abs_diff(w.prototypes.classes[1], color(p.fg_tokens(), sf)) < 1e-12);
  CHECK(max_abs_diff(w.prototypes.classes[0], color(p.bg_tokens(), sb)) < 1e-12);
}

TEST_CASE("warm_forward equals the stage-by-stage composition") {
  const auto p = small_params(4, 3, 5);
  Rng rng(37);
  const Matrix fg = random_matrix(6, 4, rng);
  const Matrix bg = matmul(random_matrix(6, 4, rng), random_matrix(4, 4, rng));
  const auto w = warm_forward(p, fg, bg);
  const Matrix* feats[2] = {&bg, &fg};
  const Matrix toks[2] = {p.bg_tokens(), p.fg_tokens()};
  for (int c = 0; c < 2; ++c) {
    std::vector<double> mu;
    const Matrix cov = ref_cov(*feats[c], mu);
    const Matrix isq = mat_pow_half(cov, HalfPower::Negative);
    const Matrix sq = mat_pow_half(cov, HalfPower::Positive);
    Matrix centered = *feats[c];
    for (std::size_t r = 0; r < centered.rows(); ++r)
      for (std::size_t k = 0; k < 4; ++k) centered(r, k) -= mu[k];
    const Matrix z = ref_matmul(centered, isq);
    const Matrix refined = toks[c] + ref_attend(toks[c], z, p);
    Matrix want = ref_matmul(refined, sq);
    for (std::size_t r = 0; r < want.rows(); ++r)
      for (std::size_t k = 0; k < 4; ++k) want(r, k) += mu[k];
    CHECK(max_abs_diff(w.prototypes.classes[c], want) < 1e-9);
    CHECK(max_abs_diff(w.attention(c == 1).attended, ref_attend(toks[c], z, p)) < 1e-9);
  }
  const auto again = warm_forward(p, fg, bg);
  CHECK(again.prototypes.classes == w.prototypes.classes);
}

TEST_CASE("naive_forward examples") {
  auto p = small_params(3, 2, 6);
  Rng rng(38);
  const Matrix fg = random_matrix(5, 3, rng), bg = random_matrix(4, 3, rng);
  auto z = p;
  z.wv = Matrix(3, 3);
  const auto out = naive_forward(z, fg, bg);
  CHECK(out.classes[1] == z.fg_tokens());
  CHECK(out.classes[0] == z.bg_tokens());

  const Matrix f1 = random_matrix(1, 3, rng);
  const auto single = naive_forward(p, f1, f1);
  const Matrix v = ref_matmul(f1, p.wv);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(single.classes[1](r, k) == doctest::Approx(p.fg_tokens()(r, k) + v(0, k)));
}

TEST_CASE("ablation variants") {
  const auto p = small_params(4, 3, 7);
  Rng rng(39);
  const Matrix fg = random_matrix(10, 4, rng), bg = random_matrix(8, 4, rng);
  const auto w = warm_forward(p, fg, bg);
  const auto a = ablation_forward(p, fg, bg, Method::parse("ablation:whiten,on"));
  CHECK(a.prototypes.classes == w.prototypes.classes);

  const Matrix zm = axis_cloud({2, 0.5, 1, 3});
  const auto n = naive_forward(p, zm, zm);
  for (auto restore : {false, true}) {
    const auto c = ablation_forward(p, zm, zm, {Alignment::Center, restore});
    for (int k = 0; k < 2; ++k) CHECK(max_abs_diff(c.prototypes.classes[k], n.classes[k]) < 1e-12);
  }

  Matrix diag = axis_cloud({2, 0.5, 1, 3});
  for (auto& v : diag.data()) v += 1.5;
  for (auto restore : {false, true}) {
    const auto nm = ablation_forward(p, diag, diag, {Alignment::Normalize, restore});
    const auto wh = ablation_forward(p, diag, diag, {Alignment::Whiten, restore});
    for (int k = 0; k < 2; ++k) CHECK(max_abs_diff(nm.prototypes.classes[k], wh.prototypes.classes[k]) < 1e-9);
  }

  // normalize scales each channel by 1/sigma, sigma^2 the clamped variance
  const auto t = make_transform(diag, {Alignment::Normalize, true}, 1e-4);
  CHECK(t.forward(0, 0) == doctest::Approx(0.5));
  CHECK(t.forward(1, 1) == doctest::Approx(2.0));
  CHECK(t.restore(3, 3) == doctest::Approx(3.0));
  CHECK(t.offset[0] == doctest::Approx(1.5));
  const auto off = make_transform(diag, {Alignment::Whiten, false}, 1e-4);
  CHECK(off.restore.empty());
  CHECK(off.offset.empty());
}

TEST_CASE("method names and the ablation grid") {
  const auto grid = ablation_grid();
  REQUIRE(grid.size() == 7);
  const std::vector<std::string> names = {"naive",          "center",           "normalize",     "whiten",
                                          "center+restore", "normalize+restore", "warm"};
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(grid[i].name() == names[i]);
    CHECK(Method::parse(grid[i].name()) == grid[i]);
  }
  CHECK(Method::parse("ablation:center,off") == Method{Alignment::Center, false});
  CHECK(Method::parse("ablation:normalize,on") == Method{Alignment::Normalize, true});
  CHECK_THROWS_AS(Method::parse("bogus"), Error);
  CHECK_THROWS_AS(Method::parse("ablation:rotate,on"), Error);
  CHECK(to_string(provenance_of(grid[3])) == "whitened-no-restore");
  CHECK(to_string(provenance_of(grid[1])) == "centered");
}

TEST_CASE("average_shots") {
  Rng rng(40);
  PrototypeSet a{{random_matrix(3, 2, rng), random_matrix(3, 2, rng)}, Provenance::Warm};
  CHECK(average_shots({a}).classes == a.classes);
  CHECK(average_shots({a, a}).classes == a.classes);
  PrototypeSet neg = a;
  for (auto& m : neg.classes) m *= -1.0;
  for (const auto& m : average_shots({a, neg}).classes) CHECK(frobenius_norm(m) == 0.0);
  PrototypeSet other = a;
  other.provenance = Provenance::Naive;
  CHECK_THROWS_AS(average_shots({a, other}), Error);
  PrototypeSet small{{random_matrix(2, 2, rng), random_matrix(3, 2, rng)}, Provenance::Warm};
  CHECK_THROWS_AS(average_shots({a, small}), Error);
  CHECK_THROWS_AS(average_shots({}), Error);
}

TEST_CASE("backward with a zero upstream gradient is zero") {
  const auto p = small_params(4, 3, 8);
  Rng rng(41);
  const auto fwd = warm_forward(p, random_matrix(6, 4, rng), random_matrix(6, 4, rng));
  const auto g = warm_backward(p, fwd, {Matrix(3, 4), Matrix(3, 4)});
  for (double v : g.flatten()) CHECK(v == 0.0);
}

TEST_CASE("uniform-attention W_v gradient has the closed form") {
  auto p = small_params(4, 3, 9);
  p.wq = Matrix(4, 4);
  p.wk = Matrix(4, 4);
  Rng rng(42);
  const Matrix fg = random_matrix(6, 4, rng), bg = random_matrix(5, 4, rng);
  const Matrix gfg = random_matrix(3, 4, rng), gbg = random_matrix(3, 4, rng);

  // naive: P = T + 1 (mean x)^T Wv, so dWv = sum_c mean(x_c) (1^T G_c)
  const auto nf = ablation_forward(p, fg, bg, Method::naive());
  const auto gn = warm_backward(p, nf, {gbg, gfg});
  Matrix want(4, 4);
  for (const auto& [x, g] : {std::pair{&fg, &gfg}, std::pair{&bg, &gbg}}) {
    const auto xm = column_means(*x);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t r = 0; r < 3; ++r) want(i, j) += xm[i] * (*g)(r, j);
  }
  CHECK(max_abs_diff(gn.wv, want) < 1e-12);

  // warm: keys are centered so their mean vanishes and with it the W_v gradient
  const auto wf = warm_forward(p, fg, bg);
  const auto gw = warm_backward(p, wf, {gbg, gfg});
  CHECK(frobenius_norm(gw.wv) < 1e-12);
  // token gradient passes through Sigma^{1/2}: dT = G Sigma^{1/2}
  const Matrix dt = matmul(gfg, wf.stats(true).sqrt);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 4; ++k) CHECK(gw.tokens(r, k) == doctest::Approx(dt(r, k)).epsilon(1e-9));
}

TEST_CASE("full-loss gradients match finite differences") {
  struct Case {
    Method method;
    bool bias;
    bool scale;
  };
  const std::vector<Case> cases = {{Method::warm(), false, false},
                                   {Method::naive(), false, false},
                                   {{Alignment::Center, true}, false, false},
                                   {{Alignment::Normalize, true}, true, false},
                                   {{Alignment::Whiten, false}, false, true},
                                   {Method::warm(), true, true}};
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const auto& cs = cases[ci];
    CAPTURE(cs.method.name());
    const Episode ep = tiny_episode(100 + ci);
    const WarmParams p = small_params(4, 3, 200 + ci, cs.bias);
    const AttentionOptions attn{cs.scale};
    const LossOptions lo{0.5, 0.0};
    const auto lg = loss_and_grads(p, ep, cs.method, kDefaultEps, attn, lo);
    CHECK(lg.report.total > 0.0);
    const ScalarFunction f = [&](const std::vector<double>& x) {
      WarmParams q = p;
      q.assign_flat(x);
      return loss_and_grads(q, ep, cs.method, kDefaultEps, attn, lo).report.total;
    };
    CHECK(grad_check(f, p.flatten(), lg.grads.flatten()) < 1e-3);
  }
}

TEST_CASE("params flatten round trip and validation") {
  auto p = small_params(3, 2, 10, true);
  auto flat = p.flatten();
  CHECK(flat.size() == p.num_values());
  CHECK(flat.size() == 4 * 3 + 3 * 9 + 3 * 3);
  WarmParams q = WarmParams::zeros_like(p);
  q.assign_flat(flat);
  CHECK(q == p);
  flat.pop_back();
  CHECK_THROWS_AS(q.assign_flat(flat), Error);
  Rng rng(1);
  const auto init = WarmParams::init(32, 100, rng);
  CHECK(init.tokens.rows() == 200);
  CHECK(frobenius_norm(init.tokens) / std::sqrt(200.0 * 32.0) == doctest::Approx(0.02).epsilon(0.05));
  CHECK(frobenius_norm(init.wq) / 32.0 == doctest::Approx(1.0 / std::sqrt(32.0)).epsilon(0.05));
}

TEST_CASE("qk_distance examples") {
  WarmParams p;
  p.tokens = Matrix(2, 2);
  p.wq = p.wk = p.wv = Matrix::identity(2);
  CHECK(qk_distance(Matrix::from_rows({{0, 0}}), Matrix::from_rows({{3, 0}, {0, 5}}), p) == doctest::Approx(4.0));
  CHECK(qk_distance(Matrix::from_rows({{1, 2}, {1, 2}}), Matrix::from_rows({{1, 2}}), p) == 0.0);
}

TEST_CASE("checkpoint round trip is exact and saving is atomic") {
  Checkpoint c{small_params(4, 3, 11, true), 17, Method::parse("normalize+restore"), {true}, "abc123"};
  const auto j = checkpoint_to_json(c);
  for (const char* key : {"version", "D", "M", "seed", "method", "P0", "Wq", "Wk", "Wv", "config_hash"})
    CHECK(j.contains(key));
  const auto dir = std::filesystem::temp_directory_path() / "warm_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "ckpt.json";
  save_checkpoint(c, path);
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  const auto back = load_checkpoint(path);
  CHECK(back.params == c.params);
  CHECK(back.seed == 17);
  CHECK(back.method == c.method);
  CHECK(back.attention.scale_logits);
  CHECK(back.config_hash == "abc123");

  auto broken = j;
  broken["Wq"] = nlohmann::json::array({{1.0, 2.0}});
  try {
    checkpoint_from_json(broken);
    FAIL("expected a checkpoint error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Checkpoint);
  }
  std::ofstream(dir / "junk.json") << "{not json";
  try {
    load_checkpoint(dir / "junk.json");
    FAIL("expected a checkpoint error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Checkpoint);
  }
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
