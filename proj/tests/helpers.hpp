#pragma once

#include <cmath>
#include <vector>

#include "warm/matrix.hpp"
#include "warm/rng.hpp"

namespace testutil {

inline warm::Matrix random_matrix(std::size_t r, std::size_t c, warm::Rng& rng, double scale = 1.0) {
  warm::Matrix m(r, c);
  for (auto& v : m.data()) v = scale * rng.gaussian();
  return m;
}

// Naive triple loop, kept apart from the library's matmul.
inline warm::Matrix ref_matmul(const warm::Matrix& a, const warm::Matrix& b) {
  warm::Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline double ref_dist(const warm::Matrix& a, std::size_t i, const warm::Matrix& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) s += (a(i, k) - b(j, k)) * (a(i, k) - b(j, k));
  return std::sqrt(s);
}

}  // namespace testutil
