#pragma once

#include <functional>
#include <vector>

#include "warm/matrix.hpp"

namespace warm {

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Matrix vectors;              // column j pairs with values[j]
};

// Cyclic Jacobi eigensolver for symmetric matrices.
// Throws Argument when |m - m^T| exceeds symmetry_tol, Numeric when the sweep
// cap is hit before the off-diagonal mass vanishes.
EigenDecomposition sym_eig(const Matrix& m, double symmetry_tol = 1e-10, int max_sweeps = 100);

enum class HalfPower { Positive, Negative };

// V diag(max(lambda, eps)^{+-1/2}) V^T.
Matrix mat_pow_half(const Matrix& m, HalfPower power, double eps = 1e-4);

// Both half powers from one eigendecomposition.
struct HalfPowers {
  Matrix sqrt;
  Matrix inv_sqrt;
};
HalfPowers mat_half_powers(const Matrix& m, double eps = 1e-4);

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);

using ScalarFunction = std::function<double(const std::vector<double>&)>;

// Max over coordinates of |analytic - central difference| /
// max(1e-6, |analytic| + |numeric|). Throws Numeric if f is non-finite anywhere.
double grad_check(const ScalarFunction& f, const std::vector<double>& x,
                  const std::vector<double>& analytic, double h = 1e-5);

}  // namespace warm
