#include "warm/episode.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "warm/error.hpp"
#include "warm/json_util.hpp"

namespace warm {

static_assert(std::endian::native == std::endian::little,
              "episode container I/O assumes a little-endian host");

std::size_t Episode::feature_dim() const {
  if (!support.empty()) return support.front().feature_dim();
  return query.empty() ? 0 : query.front().feature_dim();
}

std::size_t Episode::points_per_cloud() const {
  if (!support.empty()) return support.front().num_points();
  return query.empty() ? 0 : query.front().num_points();
}

// ---------------------------------------------------------------------------
// Config

void GeneratorConfig::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorKind::Config, "generator: " + msg); };
  if (feature_dim == 0) bad("feature_dim must be >= 1");
  if (n_way == 0 || k_shot == 0 || num_query == 0) bad("n_way, k_shot and num_query must be >= 1");
  if (inter_class_scale < 0 || intra_class_scale < 0 || instance_spread < 0)
    bad("scales must be >= 0");
  if (!(channel_corr_strength >= 0.0 && channel_corr_strength < 1.0))
    bad("channel_corr_strength must lie in [0, 1)");
  if (!(fg_fraction_min > 0.0 && fg_fraction_min <= fg_fraction_max && fg_fraction_max < 1.0))
    bad("fg fractions must satisfy 0 < min <= max < 1");
  if (distractors_per_cloud == 0 || distractors_per_cloud > num_distractor_classes)
    bad("distractors_per_cloud must lie in [1, num_distractor_classes]");
  if (min_fg_points < 2) bad("min_fg_points must be >= 2");
  // Each query cloud hosts every way plus background.
  if (static_cast<std::uint64_t>(min_fg_points) * n_way + 2 > points_per_cloud)
    bad("points_per_cloud too small for min_fg_points * n_way plus background");
  std::set<std::uint32_t> base(base_classes.begin(), base_classes.end());
  std::set<std::uint32_t> novel(novel_classes.begin(), novel_classes.end());
  if (base.size() != base_classes.size() || novel.size() != novel_classes.size())
    bad("class lists must not contain duplicates");
  for (auto c : novel)
    if (base.count(c)) bad("base and novel class sets overlap at id " + std::to_string(c));
  if (base.size() < n_way || novel.size() < n_way) bad("each class split needs at least n_way classes");
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{
      {"feature_dim", c.feature_dim},
      {"points_per_cloud", c.points_per_cloud},
      {"n_way", c.n_way},
      {"k_shot", c.k_shot},
      {"num_query", c.num_query},
      {"inter_class_scale", c.inter_class_scale},
      {"intra_class_scale", c.intra_class_scale},
      {"instance_spread", c.instance_spread},
      {"channel_corr_strength", c.channel_corr_strength},
      {"base_classes", c.base_classes},
      {"novel_classes", c.novel_classes},
      {"num_distractor_classes", c.num_distractor_classes},
      {"distractors_per_cloud", c.distractors_per_cloud},
      {"fg_fraction_min", c.fg_fraction_min},
      {"fg_fraction_max", c.fg_fraction_max},
      {"min_fg_points", c.min_fg_points},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  constexpr std::string_view s = "generator";
  reject_unknown_keys(j, s,
                      {"feature_dim", "points_per_cloud", "n_way", "k_shot", "num_query",
                       "inter_class_scale", "intra_class_scale", "instance_spread",
                       "channel_corr_strength", "base_classes", "novel_classes",
                       "num_distractor_classes", "distractors_per_cloud", "fg_fraction_min",
                       "fg_fraction_max", "min_fg_points", "seed"});
  read_field(j, s, "feature_dim", c.feature_dim);
  read_field(j, s, "points_per_cloud", c.points_per_cloud);
  read_field(j, s, "n_way", c.n_way);
  read_field(j, s, "k_shot", c.k_shot);
  read_field(j, s, "num_query", c.num_query);
  read_field(j, s, "inter_class_scale", c.inter_class_scale);
  read_field(j, s, "intra_class_scale", c.intra_class_scale);
  read_field(j, s, "instance_spread", c.instance_spread);
  read_field(j, s, "channel_corr_strength", c.channel_corr_strength);
  read_field(j, s, "base_classes", c.base_classes);
  read_field(j, s, "novel_classes", c.novel_classes);
  read_field(j, s, "num_distractor_classes", c.num_distractor_classes);
  read_field(j, s, "distractors_per_cloud", c.distractors_per_cloud);
  read_field(j, s, "fg_fraction_min", c.fg_fraction_min);
  read_field(j, s, "fg_fraction_max", c.fg_fraction_max);
  read_field(j, s, "min_fg_points", c.min_fg_points);
  read_field(j, s, "seed", c.seed);
}

// ---------------------------------------------------------------------------
// Generator

EpisodeGenerator::EpisodeGenerator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (auto c : cfg_.base_classes) max_class_id_ = std::max(max_class_id_, c);
  for (auto c : cfg_.novel_classes) max_class_id_ = std::max(max_class_id_, c);

  const std::size_t d = cfg_.feature_dim;
  Rng rng(cfg_.seed);
  class_centers_ = Matrix(max_class_id_ + 1, d);
  for (double& v : class_centers_.data()) v = cfg_.inter_class_scale * rng.gaussian();
  distractor_centers_ = Matrix(cfg_.num_distractor_classes, d);
  for (double& v : distractor_centers_.data()) v = cfg_.inter_class_scale * rng.gaussian();
}

std::span<const double> EpisodeGenerator::class_center(std::uint32_t class_id) const {
  require(class_id <= max_class_id_, ErrorKind::Argument,
          "class_center: unknown class id " + std::to_string(class_id));
  return class_centers_.row(class_id);
}

std::span<const double> EpisodeGenerator::distractor_center(std::uint32_t j) const {
  require(j < distractor_centers_.rows(), ErrorKind::Argument, "distractor_center: index out of range");
  return distractor_centers_.row(j);
}

EpisodeGenerator::Instance EpisodeGenerator::make_instance(
    Rng& rng, std::span<const double> class_center) const {
  const std::size_t d = cfg_.feature_dim;
  Instance inst{std::vector<double>(d), Matrix(d, d)};
  for (std::size_t i = 0; i < d; ++i)
    inst.center[i] = class_center[i] + cfg_.intra_class_scale * rng.gaussian();
  for (std::size_t r = 0; r < d; ++r) {
    double norm2 = 0.0;
    for (std::size_t c = 0; c <= r; ++c) {
      const double v = rng.gaussian();
      inst.mixing(r, c) = v;
      norm2 += v * v;
    }
    const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
    for (std::size_t c = 0; c <= r; ++c) inst.mixing(r, c) *= inv;
  }
  return inst;
}

// Point noise = spread * (sqrt(1 - rho) * g_a + sqrt(rho) * B g_b) with unit-norm
// rows in B, so every channel keeps variance spread^2 and rho sets the
// off-diagonal correlation mass.
void EpisodeGenerator::emit_points(Rng& rng, const Instance& inst, std::size_t count,
                                   std::uint32_t label, PointCloud& out,
                                   std::size_t& cursor) const {
  const std::size_t d = cfg_.feature_dim;
  const double rho = cfg_.channel_corr_strength;
  const double a = std::sqrt(1.0 - rho);
  const double b = std::sqrt(rho);
  std::vector<double> ga(d), gb(d);
  for (std::size_t n = 0; n < count; ++n, ++cursor) {
    for (std::size_t i = 0; i < d; ++i) ga[i] = rng.gaussian();
    for (std::size_t i = 0; i < d; ++i) gb[i] = rng.gaussian();
    auto row = out.features.row(cursor);
    for (std::size_t r = 0; r < d; ++r) {
      double mixed = 0.0;
      for (std::size_t c = 0; c <= r; ++c) mixed += inst.mixing(r, c) * gb[c];
      row[r] = inst.center[r] + cfg_.instance_spread * (a * ga[r] + b * mixed);
    }
    out.labels[cursor] = label;
  }
}

PointCloud EpisodeGenerator::make_cloud(Rng& rng, const std::vector<std::uint32_t>& fg_classes,
                                        const std::vector<std::uint32_t>& fg_labels) const {
  const std::size_t L = cfg_.points_per_cloud;
  const std::size_t ways = fg_classes.size();

  // Foreground counts per hosted class.
  std::vector<std::size_t> fg_counts(ways);
  std::size_t fg_total = 0;
  for (std::size_t w = 0; w < ways; ++w) {
    const double frac = rng.uniform(cfg_.fg_fraction_min, cfg_.fg_fraction_max) /
                        static_cast<double>(ways);
    std::size_t n = static_cast<std::size_t>(std::lround(frac * static_cast<double>(L)));
    fg_counts[w] = std::max<std::size_t>(n, cfg_.min_fg_points);
    fg_total += fg_counts[w];
  }
  // Keep at least two background points.
  while (fg_total + 2 > L) {
    auto it = std::max_element(fg_counts.begin(), fg_counts.end());
    --*it;
    --fg_total;
  }
  const std::size_t bg_total = L - fg_total;

  PointCloud cloud{Matrix(L, cfg_.feature_dim), std::vector<std::uint32_t>(L, 0)};
  std::size_t cursor = 0;
  for (std::size_t w = 0; w < ways; ++w) {
    const Instance inst = make_instance(rng, class_center(fg_classes[w]));
    emit_points(rng, inst, fg_counts[w], fg_labels[w], cloud, cursor);
  }

  // Background: a mixture of distinct distractor instances with random shares.
  std::vector<std::uint32_t> pool(cfg_.num_distractor_classes);
  std::iota(pool.begin(), pool.end(), 0u);
  const std::size_t k = cfg_.distractors_per_cloud;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<double> weights(k);
  double wsum = 0.0;
  for (auto& w : weights) {
    w = 0.5 + rng.uniform();
    wsum += w;
  }
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t n = (i + 1 == k)
                        ? bg_total - assigned
                        : static_cast<std::size_t>(std::floor(weights[i] / wsum *
                                                              static_cast<double>(bg_total)));
    const Instance inst = make_instance(rng, distractor_center(pool[i]));
    emit_points(rng, inst, n, 0, cloud, cursor);
    assigned += n;
  }

  // Shuffle point order (Fisher-Yates with our own rng for portability).
  std::vector<std::size_t> perm(L);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = L - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  PointCloud shuffled{cloud.features.select_rows(perm), std::vector<std::uint32_t>(L)};
  for (std::size_t i = 0; i < L; ++i) shuffled.labels[i] = cloud.labels[perm[i]];
  return shuffled;
}

Episode EpisodeGenerator::sample_with_classes(Rng& rng,
                                              const std::vector<std::uint32_t>& class_ids) const {
  require(class_ids.size() == cfg_.n_way, ErrorKind::Argument,
          "sample_with_classes: expected one class id per way");
  Episode ep;
  ep.n_way = cfg_.n_way;
  ep.k_shot = cfg_.k_shot;
  ep.class_ids = class_ids;
  for (std::uint32_t w = 0; w < cfg_.n_way; ++w)
    for (std::uint32_t s = 0; s < cfg_.k_shot; ++s)
      ep.support.push_back(make_cloud(rng, {class_ids[w]}, {w + 1}));
  std::vector<std::uint32_t> labels(cfg_.n_way);
  std::iota(labels.begin(), labels.end(), 1u);
  for (std::uint32_t q = 0; q < cfg_.num_query; ++q)
    ep.query.push_back(make_cloud(rng, class_ids, labels));
  return ep;
}

Episode EpisodeGenerator::sample(Rng& rng, Split split) const {
  std::vector<std::uint32_t> pool = split == Split::Base ? cfg_.base_classes : cfg_.novel_classes;
  for (std::size_t i = 0; i < cfg_.n_way; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(cfg_.n_way);
  return sample_with_classes(rng, pool);
}

Episode gen_episode(const GeneratorConfig& cfg, Rng& rng, Split split) {
  return EpisodeGenerator(cfg).sample(rng, split);
}

FgBgSplit split_fg_bg(const PointCloud& cloud, std::uint32_t class_label) {
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < cloud.labels.size(); ++i)
    (cloud.labels[i] == class_label ? fg : bg).push_back(i);
  if (fg.empty())
    fail(ErrorKind::Argument,
         "split_fg_bg: class " + std::to_string(class_label) + " has no points");
  FgBgSplit out;
  out.fg = cloud.features.select_rows(fg);
  out.bg = cloud.features.select_rows(bg);
  out.bg_empty = bg.empty();
  return out;
}

// ---------------------------------------------------------------------------
// Binary container

namespace {

constexpr char kMagic[8] = {'W', 'A', 'R', 'M', '-', 'E', 'P', '1'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8 + 2 + 5 * 4;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size())
      fail(ErrorKind::Format, std::string("episode file truncated at byte offset ") +
                                  std::to_string(pos_) + " while reading " + what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void check_cloud_shape(const PointCloud& c, std::size_t L, std::size_t D) {
  require(c.num_points() == L && c.feature_dim() == D && c.labels.size() == L,
          ErrorKind::Format, "encode_episode: clouds must share L and D");
}

}  // namespace

std::vector<std::uint8_t> encode_episode(const Episode& ep) {
  require(ep.support.size() == static_cast<std::size_t>(ep.n_way) * ep.k_shot, ErrorKind::Format,
          "encode_episode: support size != n_way * k_shot");
  require(ep.class_ids.size() == ep.n_way, ErrorKind::Format,
          "encode_episode: class_ids size != n_way");
  const std::size_t L = ep.points_per_cloud();
  const std::size_t D = ep.feature_dim();

  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put<std::uint16_t>(out, kVersion);
  put<std::uint32_t>(out, ep.n_way);
  put<std::uint32_t>(out, ep.k_shot);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ep.query.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(L));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(D));
  for (auto id : ep.class_ids) put<std::uint32_t>(out, id);
  auto write_cloud = [&](const PointCloud& c) {
    check_cloud_shape(c, L, D);
    for (double v : c.features.data()) put<double>(out, v);
    for (auto l : c.labels) put<std::uint32_t>(out, l);
  };
  for (const auto& c : ep.support) write_cloud(c);
  for (const auto& c : ep.query) write_cloud(c);
  return out;
}

void save_episode(const Episode& ep, const std::filesystem::path& path) {
  const auto bytes = encode_episode(ep);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::Io, "write failed for " + path.string());
}

Episode decode_episode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto ch = r.get<char>("magic");
    if (ch != kMagic[i])
      fail(ErrorKind::Format, "bad magic at byte offset " + std::to_string(i) + " (expected WARM-EP1)");
  }
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVersion)
    fail(ErrorKind::Format, "unsupported version " + std::to_string(version) + " at byte offset 8");
  Episode ep;
  ep.n_way = r.get<std::uint32_t>("N");
  ep.k_shot = r.get<std::uint32_t>("K");
  const auto U = r.get<std::uint32_t>("U");
  const auto L = r.get<std::uint32_t>("L");
  const auto D = r.get<std::uint32_t>("D");
  if (ep.n_way == 0 || ep.k_shot == 0 || L == 0 || D == 0)
    fail(ErrorKind::Format, "header at byte offset 10: N, K, L and D must be nonzero");

  const std::uint64_t clouds = static_cast<std::uint64_t>(ep.n_way) * ep.k_shot + U;
  const std::uint64_t cloud_bytes = static_cast<std::uint64_t>(L) * (8ULL * D + 4ULL);
  const std::uint64_t expected = kHeaderBytes + 4ULL * ep.n_way + clouds * cloud_bytes;
  if (expected != bytes.size()) {
    const std::uint64_t header_part = kHeaderBytes + 4ULL * ep.n_way;
    if (bytes.size() > header_part && clouds > 0) {
      const std::uint64_t payload = bytes.size() - header_part;
      if (payload % clouds == 0) {
        const std::uint64_t per_cloud = payload / clouds;
        if (per_cloud % L == 0 && (per_cloud / L) > 4 && ((per_cloud / L) - 4) % 8 == 0) {
          const std::uint64_t implied_d = ((per_cloud / L) - 4) / 8;
          if (implied_d != D)
            fail(ErrorKind::Format, "feature dimension mismatch: header D=" + std::to_string(D) +
                                        " but payload holds D=" + std::to_string(implied_d) +
                                        " (size mismatch detected at byte offset " +
                                        std::to_string(header_part) + ")");
        }
      }
    }
    if (bytes.size() < expected)
      fail(ErrorKind::Format, "episode file truncated: " + std::to_string(bytes.size()) +
                                  " bytes, header implies " + std::to_string(expected) +
                                  " (data ends at byte offset " + std::to_string(bytes.size()) + ")");
    fail(ErrorKind::Format, "episode file has trailing data after byte offset " +
                                std::to_string(expected));
  }

  for (std::uint32_t i = 0; i < ep.n_way; ++i) ep.class_ids.push_back(r.get<std::uint32_t>("class id"));
  auto read_cloud = [&]() {
    PointCloud c{Matrix(L, D), std::vector<std::uint32_t>(L)};
    const std::size_t start = r.pos();
    for (double& v : c.features.data()) v = r.get<double>("features");
    if (!c.features.all_finite())
      fail(ErrorKind::Format, "non-finite feature in block at byte offset " + std::to_string(start));
    for (auto& l : c.labels) {
      const std::size_t at = r.pos();
      l = r.get<std::uint32_t>("labels");
      if (l > ep.n_way)
        fail(ErrorKind::Format, "label " + std::to_string(l) + " exceeds N at byte offset " +
                                    std::to_string(at));
    }
    return c;
  };
  for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(ep.n_way) * ep.k_shot; ++i)
    ep.support.push_back(read_cloud());
  for (std::uint32_t i = 0; i < U; ++i) ep.query.push_back(read_cloud());
  return ep;
}

Episode load_features(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open episode file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_episode(bytes);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Format) fail(ErrorKind::Format, path.string() + ": " + e.what());
    throw;
  }
}

}  // namespace warm
