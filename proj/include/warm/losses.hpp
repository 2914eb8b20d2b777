#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "warm/matrix.hpp"

namespace warm {

// d(c, l) = min over class c's prototype rows of ||query_l - p||.
struct DistanceField {
  Matrix d;                                      // classes x L
  std::vector<std::vector<std::size_t>> nearest;  // [c][l] achieving prototype row, ties -> lowest

  std::size_t num_classes() const { return d.rows(); }
  std::size_t num_points() const { return d.cols(); }
};

DistanceField point_distances(const Matrix& query, std::span<const Matrix> prototypes);

// Per point argmin class, ties to the lower class id.
std::vector<std::uint32_t> predict(const DistanceField& field);

// Sum over points of max(d_pos - d_neg + margin, 0), d_neg the closest other class.
// Throws Argument when a label has no prototype class.
double margin_loss(const DistanceField& field, std::span<const std::uint32_t> truth,
                   double margin = 0.0);

// Adds d(margin_loss)/d(prototypes) into grads (same layout as prototypes).
// Subgradients follow the achieving indices recorded in the field.
void margin_loss_grad(const DistanceField& field, std::span<const std::uint32_t> truth,
                      const Matrix& query, std::span<const Matrix> prototypes,
                      std::vector<Matrix>& grads, double margin = 0.0);

// Mean over classes of: mean feature->nearest prototype distance, mean
// prototype->nearest feature distance, and the max prototype->nearest feature
// distance. grads (optional) receives d/d(prototypes), added in place.
double simplification_loss(std::span<const Matrix> features, std::span<const Matrix> prototypes,
                           std::vector<Matrix>* grads = nullptr);

struct LossReport {
  double margin = 0.0;
  double simplification = 0.0;
  double total = 0.0;
  double lambda = 0.5;
};

LossReport total_loss(double margin, double simplification, double lambda = 0.5);

}  // namespace warm
