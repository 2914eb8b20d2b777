#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "warm/matrix.hpp"

namespace warm {

struct MiouResult {
  double miou = 0.0;
  std::map<std::int64_t, double> per_class;  // only classes present in pred or truth
};

// IoU = TP / (TP + FP + FN) per class in class_set; classes absent from both
// pred and truth are skipped. Throws Argument when nothing remains.
MiouResult miou(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth,
                std::span<const std::uint32_t> class_set);

// Accumulates TP/FP/FN per global class key across episodes.
class IouAccumulator {
 public:
  static constexpr std::int64_t kBackground = -1;

  // Local label l maps to key local_to_key[l].
  void add(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth,
           std::span<const std::int64_t> local_to_key);
  void merge(const IouAccumulator& other);
  MiouResult result() const;

 private:
  struct Counts {
    std::uint64_t tp = 0, fp = 0, fn = 0;
  };
  std::map<std::int64_t, Counts> counts_;
};

// Key mapping for an episode: label 0 -> background, label w+1 -> class_ids[w].
std::vector<std::int64_t> episode_label_keys(std::span<const std::uint32_t> class_ids);

struct Dispersion {
  std::optional<double> d_intra;  // empty when no same-class pair exists
  std::optional<double> d_inter;  // empty when no different-class pair exists
  double d_instance = 0.0;
};

struct EpisodeFgSample {
  std::uint32_t class_id = 0;
  Matrix fg;  // foreground features of one support cloud
};

// Mean pairwise center distance over same-class / different-class pairs and
// the mean point-to-center distance averaged over samples.
Dispersion dispersion_metrics(std::span<const EpisodeFgSample> samples);

// Mean over rows of normalized entropy -sum p ln p / ln L (0 ln 0 = 0).
// For L == 1 every row scores 1 and *single_column is set when provided.
double attention_entropy(const Matrix& attention, bool* single_column = nullptr);

// 1 - mean cosine similarity over distinct row pairs. Throws Argument for < 2 rows.
double attention_diversity(const Matrix& attention);

// Mean Euclidean distance between every projected query row and key row.
double mean_pairwise_distance(const Matrix& projected_queries, const Matrix& projected_keys);

struct MetricsReport {
  double miou = 0.0;
  std::map<std::int64_t, double> per_class_iou;
  double d_intra = 0.0;
  double d_inter = 0.0;
  double d_instance = 0.0;
  double attn_entropy = 0.0;
  double attn_diversity = 0.0;
  double qk_dist = 0.0;

  // Throws Numeric if a field is non-finite or a bounded field is out of range.
  void validate() const;
};

}  // namespace warm
