#include "warm/fps.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "warm/error.hpp"
#include "warm/metrics.hpp"
#include "warm/parallel.hpp"

namespace warm {

FpsResult farthest_point_sampling_from(const Matrix& features, std::size_t count,
                                       std::size_t start) {
  const std::size_t n = features.rows();
  require(count >= 1 && count <= n, ErrorKind::Argument,
          "farthest_point_sampling: need 1 <= T <= L (T=" + std::to_string(count) +
              ", L=" + std::to_string(n) + ")");
  require(start < n, ErrorKind::Argument, "farthest_point_sampling: start index out of range");

  FpsResult out;
  out.indices.reserve(count);
  out.indices.push_back(start);
  // Squared distances keep the argmax identical and skip the sqrt.
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  taken[start] = true;
  std::size_t last = start;
  while (out.indices.size() < count) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d[i] = std::min(min_d[i], squared_distance(features.row(i), features.row(last)));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    taken[best] = true;
    out.indices.push_back(best);
    last = best;
  }
  out.subset = features.select_rows(out.indices);
  return out;
}

FpsResult farthest_point_sampling(const Matrix& features, std::size_t count, Rng& rng) {
  require(features.rows() > 0, ErrorKind::Argument, "farthest_point_sampling: empty input");
  const std::size_t start = rng.below(features.rows());
  return farthest_point_sampling_from(features, count, start);
}

std::vector<std::uint32_t> min_dist_classify(const Matrix& query,
                                             const std::vector<Matrix>& prototypes) {
  require(!prototypes.empty(), ErrorKind::Argument, "min_dist_classify: no classes");
  for (const auto& p : prototypes) {
    require(p.rows() > 0, ErrorKind::Argument, "min_dist_classify: empty prototype set");
    require(p.cols() == query.cols(), ErrorKind::Argument, "min_dist_classify: dimension mismatch");
  }
  std::vector<std::uint32_t> labels(query.rows());
  for (std::size_t l = 0; l < query.rows(); ++l) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < prototypes[c].rows(); ++m)
        d = std::min(d, squared_distance(query.row(l), prototypes[c].row(m)));
      if (d < best) {
        best = d;
        arg = static_cast<std::uint32_t>(c);
      }
    }
    labels[l] = arg;
  }
  return labels;
}

std::vector<Matrix> fps_prototypes(const Episode& ep, std::size_t count, Rng& rng) {
  std::vector<Matrix> bg_parts;
  std::vector<Matrix> protos(ep.n_way + 1);
  for (std::uint32_t w = 0; w < ep.n_way; ++w) {
    std::vector<Matrix> fg_parts;
    for (std::uint32_t s = 0; s < ep.k_shot; ++s) {
      auto split = split_fg_bg(ep.support_cloud(w, s), w + 1);
      fg_parts.push_back(std::move(split.fg));
      if (!split.bg_empty) bg_parts.push_back(std::move(split.bg));
    }
    const Matrix fg = vstack(fg_parts);
    protos[w + 1] = farthest_point_sampling(fg, std::min(count, fg.rows()), rng).subset;
  }
  require(!bg_parts.empty(), ErrorKind::Argument, "fps_prototypes: support has no background points");
  const Matrix bg = vstack(bg_parts);
  protos[0] = farthest_point_sampling(bg, std::min(count, bg.rows()), rng).subset;
  return protos;
}

SeedSweepResult fps_seed_sweep(const std::vector<Episode>& episodes, std::size_t count,
                               const std::vector<std::uint64_t>& seeds, unsigned threads) {
  require(!seeds.empty(), ErrorKind::Argument, "fps_seed_sweep: no seeds");
  require(!episodes.empty(), ErrorKind::Argument, "fps_seed_sweep: no episodes");
  SeedSweepResult out;
  out.seeds = seeds;
  out.miou.assign(seeds.size(), 0.0);
  out.class_iou.assign(seeds.size(), {});

  parallel_for(seeds.size(), threads, [&](std::size_t si) {
    Rng rng(seeds[si]);
    IouAccumulator acc;
    for (const auto& ep : episodes) {
      const auto protos = fps_prototypes(ep, count, rng);
      const auto keys = episode_label_keys(ep.class_ids);
      for (const auto& q : ep.query) {
        const auto pred = min_dist_classify(q.features, protos);
        acc.add(pred, q.labels, keys);
      }
    }
    const auto res = acc.result();
    out.miou[si] = res.miou;
    for (const auto& [k, v] : res.per_class) out.class_iou[si].push_back(v);
  });

  const double n = static_cast<double>(seeds.size());
  out.mean = std::accumulate(out.miou.begin(), out.miou.end(), 0.0) / n;
  out.min = *std::min_element(out.miou.begin(), out.miou.end());
  out.max = *std::max_element(out.miou.begin(), out.miou.end());
  double ss = 0.0;
  for (double v : out.miou) ss += (v - out.mean) * (v - out.mean);
  out.stdev = seeds.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return out;
}

}  // namespace warm
