#include "warm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "warm/error.hpp"

namespace warm {

MiouResult miou(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth,
                std::span<const std::uint32_t> class_set) {
  require(pred.size() == truth.size(), ErrorKind::Argument, "miou: pred/truth length mismatch");
  std::map<std::uint32_t, std::uint64_t> tp, fp, fn;
  std::set<std::uint32_t> allowed(class_set.begin(), class_set.end());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(allowed.count(pred[i]) && allowed.count(truth[i]), ErrorKind::Argument,
            "miou: label outside class set");
    if (pred[i] == truth[i]) {
      ++tp[pred[i]];
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  MiouResult out;
  double sum = 0.0;
  for (auto c : allowed) {
    const std::uint64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp[c]) / static_cast<double>(denom);
    out.per_class[c] = iou;
    sum += iou;
  }
  require(!out.per_class.empty(), ErrorKind::Argument, "miou: no class present; metric undefined");
  out.miou = sum / static_cast<double>(out.per_class.size());
  return out;
}

void IouAccumulator::add(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth,
                         std::span<const std::int64_t> local_to_key) {
  require(pred.size() == truth.size(), ErrorKind::Argument, "IouAccumulator: length mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(pred[i] < local_to_key.size() && truth[i] < local_to_key.size(), ErrorKind::Argument,
            "IouAccumulator: label without key");
    const auto p = local_to_key[pred[i]];
    const auto t = local_to_key[truth[i]];
    if (p == t) {
      ++counts_[p].tp;
    } else {
      ++counts_[p].fp;
      ++counts_[t].fn;
    }
  }
}

void IouAccumulator::merge(const IouAccumulator& other) {
  for (const auto& [k, c] : other.counts_) {
    auto& mine = counts_[k];
    mine.tp += c.tp;
    mine.fp += c.fp;
    mine.fn += c.fn;
  }
}

MiouResult IouAccumulator::result() const {
  MiouResult out;
  double sum = 0.0;
  for (const auto& [k, c] : counts_) {
    const std::uint64_t denom = c.tp + c.fp + c.fn;
    if (denom == 0) continue;
    const double iou = static_cast<double>(c.tp) / static_cast<double>(denom);
    out.per_class[k] = iou;
    sum += iou;
  }
  require(!out.per_class.empty(), ErrorKind::Argument, "IouAccumulator: no class present");
  out.miou = sum / static_cast<double>(out.per_class.size());
  return out;
}

std::vector<std::int64_t> episode_label_keys(std::span<const std::uint32_t> class_ids) {
  std::vector<std::int64_t> keys{IouAccumulator::kBackground};
  for (auto c : class_ids) keys.push_back(static_cast<std::int64_t>(c));
  return keys;
}

Dispersion dispersion_metrics(std::span<const EpisodeFgSample> samples) {
  require(!samples.empty(), ErrorKind::Argument, "dispersion_metrics: no samples");
  std::vector<std::vector<double>> centers;
  Dispersion out;
  double inst_sum = 0.0;
  for (const auto& s : samples) {
    require(s.fg.rows() > 0, ErrorKind::Argument, "dispersion_metrics: empty foreground");
    centers.push_back(column_means(s.fg));
    const auto& mu = centers.back();
    double acc = 0.0;
    for (std::size_t r = 0; r < s.fg.rows(); ++r) acc += euclidean_distance(s.fg.row(r), mu);
    inst_sum += acc / static_cast<double>(s.fg.rows());
  }
  out.d_instance = inst_sum / static_cast<double>(samples.size());

  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      const double d = euclidean_distance(centers[i], centers[j]);
      if (samples[i].class_id == samples[j].class_id) {
        intra += d;
        ++n_intra;
      } else {
        inter += d;
        ++n_inter;
      }
    }
  if (n_intra) out.d_intra = intra / static_cast<double>(n_intra);
  if (n_inter) out.d_inter = inter / static_cast<double>(n_inter);
  return out;
}

double attention_entropy(const Matrix& attention, bool* single_column) {
  require(attention.rows() > 0 && attention.cols() > 0, ErrorKind::Argument,
          "attention_entropy: empty attention matrix");
  if (single_column) *single_column = attention.cols() == 1;
  if (attention.cols() == 1) return 1.0;
  const double norm = std::log(static_cast<double>(attention.cols()));
  double total = 0.0;
  for (std::size_t r = 0; r < attention.rows(); ++r) {
    double h = 0.0;
    for (double p : attention.row(r))
      if (p > 0.0) h -= p * std::log(p);
    total += h / norm;
  }
  return total / static_cast<double>(attention.rows());
}

double attention_diversity(const Matrix& attention) {
  const std::size_t m = attention.rows();
  require(m >= 2, ErrorKind::Argument, "attention_diversity: needs at least two rows");
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (double p : attention.row(i)) s += p * p;
    norms[i] = std::sqrt(s);
  }
  double sim = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      double dot = 0.0;
      auto a = attention.row(i);
      auto b = attention.row(j);
      for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
      const double denom = norms[i] * norms[j];
      sim += denom > 0.0 ? dot / denom : 0.0;
    }
  const double pairs = static_cast<double>(m * (m - 1) / 2);
  return 1.0 - sim / pairs;
}

double mean_pairwise_distance(const Matrix& projected_queries, const Matrix& projected_keys) {
  require(projected_queries.rows() > 0 && projected_keys.rows() > 0, ErrorKind::Argument,
          "mean_pairwise_distance: empty input");
  require(projected_queries.cols() == projected_keys.cols(), ErrorKind::Argument,
          "mean_pairwise_distance: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < projected_queries.rows(); ++i)
    for (std::size_t j = 0; j < projected_keys.rows(); ++j)
      total += euclidean_distance(projected_queries.row(i), projected_keys.row(j));
  return total / static_cast<double>(projected_queries.rows() * projected_keys.rows());
}

void MetricsReport::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string("MetricsReport.") + name + " is non-finite");
  };
  check(miou, "miou");
  check(d_intra, "d_intra");
  check(d_inter, "d_inter");
  check(d_instance, "d_instance");
  check(attn_entropy, "attn_entropy");
  check(attn_diversity, "attn_diversity");
  check(qk_dist, "qk_dist");
  const double slack = 1e-12;
  if (miou < 0 || miou > 1 || attn_entropy < -slack || attn_entropy > 1 + slack ||
      attn_diversity < -slack || attn_diversity > 1 + slack || d_intra < 0 || d_inter < 0 ||
      d_instance < 0 || qk_dist < 0)
    fail(ErrorKind::Numeric, "MetricsReport: field out of range");
}

}  // namespace warm
