#include <limits>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "warm/error.hpp"
#include "warm/fps.hpp"
#include "warm/trainer.hpp"

using namespace warm;
using testutil::random_matrix;

namespace {

// Exhaustive greedy reference: recompute every candidate's min distance to
// the chosen set from scratch, keep the first maximizer.
std::vector<std::size_t> brute_fps(const Matrix& f, std::size_t count, std::size_t start) {
  std::vector<std::size_t> chosen{start};
  while (chosen.size() < count) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < f.rows(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double mind = std::numeric_limits<double>::infinity();
      for (auto c : chosen) mind = std::min(mind, testutil::ref_dist(f, i, f, c));
      if (mind > best) {
        best = mind;
        arg = i;
      }
    }
    chosen.push_back(arg);
  }
  return chosen;
}

}  // namespace

TEST_SUITE("fps") {

TEST_CASE("1-D example picks the far end") {
  const Matrix f = Matrix::from_rows({{0}, {1}, {10}});
  const auto r = farthest_point_sampling_from(f, 2, 0);
  CHECK(r.indices == std::vector<std::size_t>{0, 2});
  CHECK(r.subset == Matrix::from_rows({{0}, {10}}));
}

TEST_CASE("ties go to the smallest index") {
  const Matrix f = Matrix::from_rows({{0}, {-1}, {1}});
  CHECK(farthest_point_sampling_from(f, 2, 0).indices == std::vector<std::size_t>{0, 1});
  const Matrix same = Matrix::from_rows({{2, 2}, {2, 2}, {2, 2}});
  CHECK(farthest_point_sampling_from(same, 3, 1).indices == std::vector<std::size_t>{1, 0, 2});
}

TEST_CASE("greedy selection matches the exhaustive oracle") {
  Rng rng(21);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t L = 1 + rng.below(8);
    const std::size_t D = 1 + rng.below(3);
    Matrix f = random_matrix(L, D, rng);
    if (inst % 4 == 0)  // integer grids force ties
      for (auto& v : f.data()) v = static_cast<double>(rng.below(3));
    for (std::size_t start = 0; start < L; ++start)
      CHECK(farthest_point_sampling_from(f, L, start).indices == brute_fps(f, L, start));
  }
}

TEST_CASE("full subset and determinism") {
  Rng rng(22);
  const Matrix f = random_matrix(12, 3, rng);
  Rng a(5), b(5);
  const auto r1 = farthest_point_sampling(f, 12, a);
  const auto r2 = farthest_point_sampling(f, 12, b);
  CHECK(r1.indices == r2.indices);
  std::set<std::size_t> all(r1.indices.begin(), r1.indices.end());
  CHECK(all.size() == 12);
}

TEST_CASE("picked points are spread out") {
  // the min pairwise distance of the FPS subset dominates half of any random subset's
  Rng rng(23);
  const Matrix f = random_matrix(60, 2, rng);
  const auto r = farthest_point_sampling_from(f, 6, 0);
  auto min_pair = [](const Matrix& m) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = i + 1; j < m.rows(); ++j) best = std::min(best, testutil::ref_dist(m, i, m, j));
    return best;
  };
  std::vector<std::size_t> first{0, 1, 2, 3, 4, 5};
  CHECK(min_pair(r.subset) >= 0.5 * min_pair(f.select_rows(first)));
}

TEST_CASE("argument errors") {
  const Matrix f = Matrix::from_rows({{0}, {1}});
  CHECK_THROWS_AS(farthest_point_sampling_from(f, 3, 0), Error);
  CHECK_THROWS_AS(farthest_point_sampling_from(f, 0, 0), Error);
  CHECK_THROWS_AS(farthest_point_sampling_from(f, 1, 2), Error);
  CHECK_THROWS_AS(min_dist_classify(f, {}), Error);
}

TEST_CASE("min_dist_classify follows the nearest prototype row") {
  const Matrix q = Matrix::from_rows({{0, 0}, {5, 5}, {2.5, 2.5}});
  const std::vector<Matrix> protos = {Matrix::from_rows({{0, 1}, {9, 9}}), Matrix::from_rows({{5, 4}})};
  // third point is equidistant-ish: distances sqrt(2.5^2+1.5^2) vs sqrt(2.5^2+1.5^2) -> tie, class 0
  CHECK(min_dist_classify(q, protos) == std::vector<std::uint32_t>{0, 1, 0});
}

TEST_CASE("FPS prototypes beat the random-guess baseline") {
  GeneratorConfig g;
  const auto episodes = make_eval_episodes(g, {20, 100});
  const auto r = fps_seed_sweep(episodes, 100, {0});
  CHECK(r.miou[0] > 0.5);  // 1/(N+1) for one way
  CHECK(r.min == r.max);
  CHECK(r.stdev == 0.0);
}

TEST_CASE("fps_prototypes clamps T and pools background across shots") {
  GeneratorConfig g;
  g.feature_dim = 3;
  g.points_per_cloud = 100;
  g.k_shot = 2;
  Rng rng(24);
  const Episode ep = gen_episode(g, rng);
  Rng frng(0);
  const auto protos = fps_prototypes(ep, 1000, frng);
  REQUIRE(protos.size() == 2);
  std::size_t fg = 0, bg = 0;
  for (const auto& c : ep.support)
    for (auto l : c.labels) (l ? fg : bg)++;
  CHECK(protos[1].rows() == fg);
  CHECK(protos[0].rows() == bg);
}

TEST_CASE("seed sweep degenerate cases have zero spread") {
  // identical points: the subset cannot depend on the start
  Episode ep;
  ep.class_ids = {10};
  ep.support.push_back({Matrix(6, 2, 1.0), {1, 1, 1, 0, 0, 0}});
  for (std::size_t r = 3; r < 6; ++r) ep.support[0].features(r, 0) = -1.0;
  ep.query.push_back({Matrix::from_rows({{1, 1}, {-1, 1}, {0.9, 1}}), {1, 0, 0}});
  const auto r = fps_seed_sweep({ep}, 2, {0, 1, 2, 3});
  CHECK(r.max - r.min == 0.0);
  CHECK(r.stdev == 0.0);

  // T equal to the class size exhausts the pool
  GeneratorConfig g;
  g.points_per_cloud = 128;
  const auto eps = make_eval_episodes(g, {5, 7});
  const auto full = fps_seed_sweep(eps, 128, {0, 1, 2, 3, 4});
  CHECK(full.max - full.min == 0.0);
}

TEST_CASE("seed sweep is deterministic, order-stable under threads, and varies with the seed") {
  GeneratorConfig g;
  const auto eps = make_eval_episodes(g, {20, 100});
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 12; ++s) seeds.push_back(s);
  const auto a = fps_seed_sweep(eps, 100, seeds, 1);
  const auto b = fps_seed_sweep(eps, 100, seeds, 3);
  CHECK(a.miou == b.miou);
  CHECK(a.class_iou == b.class_iou);
  CHECK(a.max - a.min > 0.0);
  CHECK(a.min <= a.mean);
  CHECK(a.mean <= a.max);
}

}  // TEST_SUITE
