#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "warm/matrix.hpp"
#include "warm/rng.hpp"

namespace warm {

// Label 0 is background; labels 1..N are the episode's ways in class_ids order.
struct PointCloud {
  Matrix features;  // L x D
  std::vector<std::uint32_t> labels;

  std::size_t num_points() const { return features.rows(); }
  std::size_t feature_dim() const { return features.cols(); }
};

struct Episode {
  std::uint32_t n_way = 1;
  std::uint32_t k_shot = 1;
  // Way-major: support[way * k_shot + shot]. Each support cloud labels its
  // way's points with way + 1 and everything else 0.
  std::vector<PointCloud> support;
  std::vector<PointCloud> query;
  std::vector<std::uint32_t> class_ids;  // global class id per way

  const PointCloud& support_cloud(std::size_t way, std::size_t shot) const {
    return support[way * k_shot + shot];
  }
  std::size_t feature_dim() const;
  std::size_t points_per_cloud() const;
};

enum class Split { Base, Novel };

struct GeneratorConfig {
  std::uint32_t feature_dim = 32;
  std::uint32_t points_per_cloud = 512;
  std::uint32_t n_way = 1;
  std::uint32_t k_shot = 1;
  std::uint32_t num_query = 1;
  double inter_class_scale = 10.0;
  double intra_class_scale = 3.0;
  double instance_spread = 2.0;
  double channel_corr_strength = 0.8;
  std::vector<std::uint32_t> base_classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<std::uint32_t> novel_classes = {10, 11, 12, 13, 14};
  // Background is a mixture of instances drawn from this many distractor classes.
  std::uint32_t num_distractor_classes = 12;
  std::uint32_t distractors_per_cloud = 3;
  double fg_fraction_min = 0.25;
  double fg_fraction_max = 0.5;
  std::uint32_t min_fg_points = 32;
  std::uint64_t seed = 2024;  // class centers; fixed per benchmark

  // Throws Config on any violated invariant.
  void validate() const;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
// Strict: unknown keys are rejected with a Config error naming the key.
void from_json(const nlohmann::json& j, GeneratorConfig& c);

// Holds the per-benchmark class centers so episodes can be sampled cheaply.
class EpisodeGenerator {
 public:
  explicit EpisodeGenerator(GeneratorConfig cfg);

  const GeneratorConfig& config() const noexcept { return cfg_; }
  // Center of a base/novel class (global id) or of distractor j (distractor_center).
  std::span<const double> class_center(std::uint32_t class_id) const;
  std::span<const double> distractor_center(std::uint32_t j) const;

  // Samples distinct way classes from the split's pool.
  Episode sample(Rng& rng, Split split) const;
  // Samples with the way classes fixed (one id per way).
  Episode sample_with_classes(Rng& rng, const std::vector<std::uint32_t>& class_ids) const;

 private:
  struct Instance {
    std::vector<double> center;
    Matrix mixing;  // unit-norm rows, lower triangular
  };
  Instance make_instance(Rng& rng, std::span<const double> class_center) const;
  void emit_points(Rng& rng, const Instance& inst, std::size_t count, std::uint32_t label,
                   PointCloud& out, std::size_t& cursor) const;
  PointCloud make_cloud(Rng& rng, const std::vector<std::uint32_t>& fg_classes,
                        const std::vector<std::uint32_t>& fg_labels) const;

  GeneratorConfig cfg_;
  std::uint32_t max_class_id_ = 0;
  Matrix class_centers_;       // indexed by global class id
  Matrix distractor_centers_;  // num_distractor_classes x D
};

Episode gen_episode(const GeneratorConfig& cfg, Rng& rng, Split split = Split::Novel);

struct FgBgSplit {
  Matrix fg;
  Matrix bg;
  bool bg_empty = false;
};

// Rows with label == class_label go to fg, the rest to bg, order preserved.
// Throws Argument when no row carries class_label.
FgBgSplit split_fg_bg(const PointCloud& cloud, std::uint32_t class_label);

// Binary episode container "WARM-EP1" (little-endian); see README.
void save_episode(const Episode& ep, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_episode(const Episode& ep);
// Throws Format with the byte offset of the first inconsistency.
Episode load_features(const std::filesystem::path& path);
Episode decode_episode(std::span<const std::uint8_t> bytes);

}  // namespace warm
