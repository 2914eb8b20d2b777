#include "warm/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "warm/error.hpp"

namespace warm {

namespace {

// d||p - q|| / dp, zero at coincidence.
void add_unit_direction(std::span<double> out, std::span<const double> p, std::span<const double> q,
                        double weight) {
  const double dist = euclidean_distance(p, q);
  if (dist == 0.0) return;
  const double s = weight / dist;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * (p[i] - q[i]);
}

// Closest other class to `truth` at point l; ties to the lower id.
std::size_t hardest_negative(const DistanceField& f, std::size_t l, std::uint32_t truth) {
  std::size_t best = f.num_classes();
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < f.num_classes(); ++c) {
    if (c == truth) continue;
    if (f.d(c, l) < best_d) {
      best_d = f.d(c, l);
      best = c;
    }
  }
  return best;
}

void check_labels(const DistanceField& field, std::span<const std::uint32_t> truth) {
  require(truth.size() == field.num_points(), ErrorKind::Argument, "margin_loss: label count mismatch");
  require(field.num_classes() >= 2, ErrorKind::Argument, "margin_loss: needs at least two classes");
  for (auto t : truth)
    require(t < field.num_classes(), ErrorKind::Argument,
            "margin_loss: label " + std::to_string(t) + " has no prototypes");
}

}  // namespace

DistanceField point_distances(const Matrix& query, std::span<const Matrix> prototypes) {
  require(!prototypes.empty(), ErrorKind::Argument, "point_distances: no prototype classes");
  DistanceField f;
  f.d = Matrix(prototypes.size(), query.rows());
  f.nearest.assign(prototypes.size(), std::vector<std::size_t>(query.rows(), 0));
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    const Matrix& p = prototypes[c];
    require(p.rows() > 0, ErrorKind::Argument, "point_distances: class " + std::to_string(c) + " is empty");
    require(p.cols() == query.cols(), ErrorKind::Argument, "point_distances: dimension mismatch");
    for (std::size_t l = 0; l < query.rows(); ++l) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t m = 0; m < p.rows(); ++m) {
        const double d2 = squared_distance(query.row(l), p.row(m));
        if (d2 < best) {
          best = d2;
          arg = m;
        }
      }
      f.d(c, l) = std::sqrt(best);
      f.nearest[c][l] = arg;
    }
  }
  return f;
}

std::vector<std::uint32_t> predict(const DistanceField& field) {
  std::vector<std::uint32_t> labels(field.num_points(), 0);
  for (std::size_t l = 0; l < field.num_points(); ++l) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < field.num_classes(); ++c)
      if (field.d(c, l) < best) {
        best = field.d(c, l);
        labels[l] = static_cast<std::uint32_t>(c);
      }
  }
  return labels;
}

double margin_loss(const DistanceField& field, std::span<const std::uint32_t> truth, double margin) {
  check_labels(field, truth);
  double loss = 0.0;
  for (std::size_t l = 0; l < truth.size(); ++l) {
    const std::size_t neg = hardest_negative(field, l, truth[l]);
    loss += std::max(field.d(truth[l], l) - field.d(neg, l) + margin, 0.0);
  }
  return loss;
}

void margin_loss_grad(const DistanceField& field, std::span<const std::uint32_t> truth,
                      const Matrix& query, std::span<const Matrix> prototypes,
                      std::vector<Matrix>& grads, double margin) {
  check_labels(field, truth);
  require(grads.size() == prototypes.size(), ErrorKind::Argument, "margin_loss_grad: grads layout mismatch");
  for (std::size_t l = 0; l < truth.size(); ++l) {
    const std::uint32_t pos = truth[l];
    const std::size_t neg = hardest_negative(field, l, pos);
    if (field.d(pos, l) - field.d(neg, l) + margin <= 0.0) continue;
    const std::size_t mp = field.nearest[pos][l];
    const std::size_t mn = field.nearest[neg][l];
    add_unit_direction(grads[pos].row(mp), prototypes[pos].row(mp), query.row(l), 1.0);
    add_unit_direction(grads[neg].row(mn), prototypes[neg].row(mn), query.row(l), -1.0);
  }
}

double simplification_loss(std::span<const Matrix> features, std::span<const Matrix> prototypes,
                           std::vector<Matrix>* grads) {
  require(!features.empty() && features.size() == prototypes.size(), ErrorKind::Argument,
          "simplification_loss: need one feature set per prototype class");
  if (grads)
    require(grads->size() == prototypes.size(), ErrorKind::Argument,
            "simplification_loss: grads layout mismatch");
  const double inv_classes = 1.0 / static_cast<double>(features.size());
  double total = 0.0;
  for (std::size_t c = 0; c < features.size(); ++c) {
    const Matrix& f = features[c];
    const Matrix& p = prototypes[c];
    require(f.rows() > 0 && p.rows() > 0, ErrorKind::Argument, "simplification_loss: empty class");
    require(f.cols() == p.cols(), ErrorKind::Argument, "simplification_loss: dimension mismatch");
    const std::size_t L = f.rows();
    const std::size_t M = p.rows();

    std::vector<double> f_min(L, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> f_arg(L, 0);
    std::vector<double> p_min(M, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> p_arg(M, 0);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t m = 0; m < M; ++m) {
        const double d2 = squared_distance(f.row(l), p.row(m));
        if (d2 < f_min[l]) {
          f_min[l] = d2;
          f_arg[l] = m;
        }
        if (d2 < p_min[m]) {
          p_min[m] = d2;
          p_arg[m] = l;
        }
      }
    double t1 = 0.0, t2 = 0.0, t3 = -1.0;
    std::size_t worst = 0;
    for (std::size_t l = 0; l < L; ++l) t1 += std::sqrt(f_min[l]);
    for (std::size_t m = 0; m < M; ++m) {
      const double d = std::sqrt(p_min[m]);
      t2 += d;
      if (d > t3) {
        t3 = d;
        worst = m;
      }
    }
    t1 /= static_cast<double>(L);
    t2 /= static_cast<double>(M);
    total += inv_classes * (t1 + t2 + t3);

    if (grads) {
      Matrix& g = (*grads)[c];
      for (std::size_t l = 0; l < L; ++l)
        add_unit_direction(g.row(f_arg[l]), p.row(f_arg[l]), f.row(l),
                           inv_classes / static_cast<double>(L));
      for (std::size_t m = 0; m < M; ++m)
        add_unit_direction(g.row(m), p.row(m), f.row(p_arg[m]), inv_classes / static_cast<double>(M));
      add_unit_direction(g.row(worst), p.row(worst), f.row(p_arg[worst]), inv_classes);
    }
  }
  return total;
}

LossReport total_loss(double margin, double simplification, double lambda) {
  return {margin, simplification, margin + lambda * simplification, lambda};
}

}  // namespace warm
