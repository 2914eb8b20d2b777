#pragma once

#include <cstdint>
#include <vector>

#include "warm/episode.hpp"
#include "warm/matrix.hpp"
#include "warm/rng.hpp"

namespace warm {

struct FpsResult {
  std::vector<std::size_t> indices;
  Matrix subset;  // rows of the input at `indices`
};

// Farthest point sampling in feature space. The start row is drawn uniformly
// from rng; each later pick maximizes the min distance to the picked set,
// ties to the smallest index. Throws Argument unless 1 <= count <= rows.
FpsResult farthest_point_sampling(const Matrix& features, std::size_t count, Rng& rng);
// Same, with an explicit start row.
FpsResult farthest_point_sampling_from(const Matrix& features, std::size_t count,
                                       std::size_t start);

// Nearest-prototype labels: argmin over classes of the min row distance,
// ties to the lower class index. prototypes[c] holds class c's rows.
std::vector<std::uint32_t> min_dist_classify(const Matrix& query,
                                             const std::vector<Matrix>& prototypes);

// FPS prototypes per class for an episode: index 0 is background (pooled
// over every support cloud), index w + 1 is way w (pooled over its shots).
std::vector<Matrix> fps_prototypes(const Episode& ep, std::size_t count, Rng& rng);

struct SeedSweepResult {
  std::vector<std::uint64_t> seeds;
  std::vector<double> miou;                       // per seed
  std::vector<std::vector<double>> class_iou;     // per seed, per class (0 = background)
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double stdev = 0.0;  // sample stdev; 0 for a single seed
};

// Evaluates FPS + min-dist on identical episodes for each seed; only the FPS
// rng changes between seeds. Per-seed mIoU accumulates intersections and
// unions per class over every episode.
SeedSweepResult fps_seed_sweep(const std::vector<Episode>& episodes, std::size_t count,
                               const std::vector<std::uint64_t>& seeds, unsigned threads = 1);

}  // namespace warm
