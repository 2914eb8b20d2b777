#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "warm/error.hpp"
#include "warm/metrics.hpp"

using namespace warm;
using testutil::random_matrix;

TEST_SUITE("metrics") {

TEST_CASE("miou examples") {
  const std::vector<std::uint32_t> cls{0, 1};
  const std::vector<std::uint32_t> t{1, 0, 1, 0};
  CHECK(miou(t, t, cls).miou == 1.0);
  const std::vector<std::uint32_t> inv{0, 1, 0, 1};
  CHECK(miou(inv, t, cls).miou == 0.0);
  const std::vector<std::uint32_t> p{1, 1, 0, 0};
  const auto r = miou(p, t, cls);
  CHECK(r.miou == doctest::Approx(1.0 / 3.0));
  CHECK(r.per_class.at(0) == doctest::Approx(1.0 / 3.0));
  CHECK(r.per_class.at(1) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("miou skips absent classes and rejects empty inclusion") {
  const std::vector<std::uint32_t> p{0, 0}, t{0, 0};
  const std::vector<std::uint32_t> cls{0, 1, 2};
  const auto r = miou(p, t, cls);
  CHECK(r.per_class.size() == 1);
  CHECK(r.miou == 1.0);
  const std::vector<std::uint32_t> none{5};
  CHECK_THROWS_AS(miou(p, t, none), Error);
  const std::vector<std::uint32_t> shorter{0};
  CHECK_THROWS_AS(miou(shorter, t, cls), Error);
}

TEST_CASE("miou invariance under point permutation and joint relabeling") {
  Rng rng(61);
  std::vector<std::uint32_t> p(50), t(50);
  for (std::size_t i = 0; i < 50; ++i) {
    p[i] = static_cast<std::uint32_t>(rng.below(3));
    t[i] = static_cast<std::uint32_t>(rng.below(3));
  }
  const std::vector<std::uint32_t> cls{0, 1, 2};
  const double base = miou(p, t, cls).miou;
  auto pp = p, tt = t;
  for (std::size_t i = 49; i > 0; --i) {
    const std::size_t j = rng.below(i + 1);
    std::swap(pp[i], pp[j]);
    std::swap(tt[i], tt[j]);
  }
  CHECK(miou(pp, tt, cls).miou == doctest::Approx(base).epsilon(1e-15));
  for (auto* v : {&pp, &tt})
    for (auto& x : *v) x = (x + 1) % 3;
  CHECK(miou(pp, tt, cls).miou == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("IoU accumulator pools counts per global class") {
  IouAccumulator acc;
  const auto k1 = episode_label_keys(std::vector<std::uint32_t>{12});
  CHECK(k1 == std::vector<std::int64_t>{IouAccumulator::kBackground, 12});
  acc.add(std::vector<std::uint32_t>{1, 1, 0}, std::vector<std::uint32_t>{1, 0, 0}, k1);
  IouAccumulator other;
  const auto k2 = episode_label_keys(std::vector<std::uint32_t>{13});
  other.add(std::vector<std::uint32_t>{1, 0}, std::vector<std::uint32_t>{1, 0}, k2);
  acc.merge(other);
  const auto r = acc.result();
  // class 12: tp1 fp1 -> 1/2; class 13: 1; bg: tp 2, fn 1 -> 2/3
  CHECK(r.per_class.at(12) == doctest::Approx(0.5));
  CHECK(r.per_class.at(13) == doctest::Approx(1.0));
  CHECK(r.per_class.at(IouAccumulator::kBackground) == doctest::Approx(2.0 / 3.0));
  CHECK(r.miou == doctest::Approx((0.5 + 1.0 + 2.0 / 3.0) / 3.0));
  CHECK_THROWS_AS(IouAccumulator{}.result(), Error);
}

TEST_CASE("dispersion examples") {
  const Matrix a = Matrix::from_rows({{0, 0}, {0, 0}});
  const Matrix b = Matrix::from_rows({{3, 4}});
  std::vector<EpisodeFgSample> same = {{1, a}, {1, a}};
  const auto d1 = dispersion_metrics(same);
  CHECK(*d1.d_intra == 0.0);
  CHECK_FALSE(d1.d_inter.has_value());
  CHECK(d1.d_instance == 0.0);

  std::vector<EpisodeFgSample> diff = {{1, a}, {2, b}};
  const auto d2 = dispersion_metrics(diff);
  CHECK(*d2.d_inter == 5.0);
  CHECK_FALSE(d2.d_intra.has_value());

  // instance spread: points at distance 1 and 3 from their mean
  std::vector<EpisodeFgSample> inst = {{1, Matrix::from_rows({{-1, 0}, {1, 0}})},
                                       {1, Matrix::from_rows({{0, -3}, {0, 3}})}};
  CHECK(dispersion_metrics(inst).d_instance == doctest::Approx(2.0));
}

TEST_CASE("dispersion is invariant under a rotation") {
  Rng rng(62);
  std::vector<EpisodeFgSample> s;
  for (std::uint32_t i = 0; i < 6; ++i) s.push_back({i % 3, random_matrix(5, 2, rng)});
  const double th = 0.7;
  const Matrix rot = Matrix::from_rows({{std::cos(th), -std::sin(th)}, {std::sin(th), std::cos(th)}});
  auto r = s;
  for (auto& e : r) e.fg = matmul(e.fg, rot);
  const auto a = dispersion_metrics(s), b = dispersion_metrics(r);
  CHECK(*a.d_intra == doctest::Approx(*b.d_intra).epsilon(1e-12));
  CHECK(*a.d_inter == doctest::Approx(*b.d_inter).epsilon(1e-12));
  CHECK(a.d_instance == doctest::Approx(b.d_instance).epsilon(1e-12));
}

TEST_CASE("attention entropy examples") {
  CHECK(attention_entropy(Matrix::from_rows({{0.25, 0.25, 0.25, 0.25}})) == doctest::Approx(1.0));
  CHECK(attention_entropy(Matrix::from_rows({{0, 1, 0}})) == 0.0);
  CHECK(attention_entropy(Matrix::from_rows({{0.5, 0.5, 0, 0}})) == doctest::Approx(0.5));
  bool flag = false;
  CHECK(attention_entropy(Matrix::from_rows({{1}}), &flag) == 1.0);
  CHECK(flag);
}

TEST_CASE("attention diversity examples") {
  CHECK(attention_diversity(Matrix::from_rows({{0.2, 0.8}, {0.2, 0.8}})) == doctest::Approx(0.0));
  CHECK(attention_diversity(Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}})) == doctest::Approx(1.0));
  CHECK(attention_diversity(Matrix::from_rows({{1, 0}, {0.5, 0.5}})) == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)));
  CHECK_THROWS_AS(attention_diversity(Matrix::from_rows({{1, 0}})), Error);
}

TEST_CASE("attention metrics are bounded and column-permutation invariant") {
  Rng rng(63);
  for (int trial = 0; trial < 30; ++trial) {
    Matrix a = random_matrix(4, 7, rng);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (auto& v : a.row(r)) s += (v = std::exp(2.0 * v));
      for (auto& v : a.row(r)) v /= s;
    }
    const double e = attention_entropy(a), d = attention_diversity(a);
    CHECK(e >= 0.0);
    CHECK(e <= 1.0 + 1e-12);
    CHECK(d >= -1e-12);
    CHECK(d <= 1.0);
    Matrix p = a.transpose();
    std::vector<std::size_t> perm{6, 2, 4, 0, 1, 5, 3};
    p = p.select_rows(perm).transpose();
    CHECK(attention_entropy(p) == doctest::Approx(e).epsilon(1e-13));
    CHECK(attention_diversity(p) == doctest::Approx(d).epsilon(1e-13));
  }
}

TEST_CASE("mean pairwise distance") {
  CHECK(mean_pairwise_distance(Matrix::from_rows({{0, 0}}), Matrix::from_rows({{3, 0}, {0, 5}})) == doctest::Approx(4.0));
  CHECK(mean_pairwise_distance(Matrix::from_rows({{1, 1}}), Matrix::from_rows({{1, 1}})) == 0.0);
}

TEST_CASE("metrics report validation") {
  MetricsReport r;
  r.miou = 0.5;
  r.attn_entropy = 0.4;
  r.attn_diversity = 0.3;
  CHECK_NOTHROW(r.validate());
  r.attn_entropy = 1.5;
  CHECK_THROWS_AS(r.validate(), Error);
  r.attn_entropy = 0.4;
  r.qk_dist = NAN;
  CHECK_THROWS_AS(r.validate(), Error);
}

}  // TEST_SUITE
