#include "warm/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "warm/error.hpp"

namespace warm {

EigenDecomposition sym_eig(const Matrix& m, double symmetry_tol, int max_sweeps) {
  const std::size_t n = m.rows();
  require(n >= 1 && m.cols() == n, ErrorKind::Argument, "sym_eig: matrix must be square and nonempty");
  m.check_finite("sym_eig");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m(i, j) - m(j, i)) > symmetry_tol)
        fail(ErrorKind::Argument, "sym_eig: symmetry violation at (" + std::to_string(i) + "," +
                                      std::to_string(j) + ")");

  Matrix a = m;
  Matrix v = Matrix::identity(n);

  double scale = 0.0;
  for (double x : a.data()) scale += x * x;
  const double tol = 1e-26 * std::max(scale, 1e-300);

  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off <= tol) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Rotation angle that zeroes a(p,q); stable form from Golub & Van Loan.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) fail(ErrorKind::Numeric, "sym_eig: Jacobi sweeps did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  EigenDecomposition out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

namespace {

// V diag(w) V^T
Matrix reconstruct(const Matrix& vectors, const std::vector<double>& w) {
  const std::size_t n = vectors.rows();
  Matrix scaled = vectors;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) scaled(r, c) *= w[c];
  Matrix out = matmul_nt(scaled, vectors);
  // Symmetrize away rounding asymmetry.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (out(i, j) + out(j, i));
      out(i, j) = avg;
      out(j, i) = avg;
    }
  return out;
}

}  // namespace

Matrix mat_pow_half(const Matrix& m, HalfPower power, double eps) {
  require(eps > 0.0, ErrorKind::Argument, "mat_pow_half: eps must be positive");
  const auto eig = sym_eig(m);
  std::vector<double> w(eig.values.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double lam = std::max(eig.values[i], eps);
    w[i] = power == HalfPower::Positive ? std::sqrt(lam) : 1.0 / std::sqrt(lam);
  }
  return reconstruct(eig.vectors, w);
}

HalfPowers mat_half_powers(const Matrix& m, double eps) {
  require(eps > 0.0, ErrorKind::Argument, "mat_half_powers: eps must be positive");
  const auto eig = sym_eig(m);
  std::vector<double> up(eig.values.size()), down(eig.values.size());
  for (std::size_t i = 0; i < up.size(); ++i) {
    const double lam = std::max(eig.values[i], eps);
    up[i] = std::sqrt(lam);
    down[i] = 1.0 / up[i];
  }
  return {reconstruct(eig.vectors, up), reconstruct(eig.vectors, down)};
}

Matrix softmax_rows(const Matrix& m) {
  m.check_finite("softmax_rows");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

double grad_check(const ScalarFunction& f, const std::vector<double>& x,
                  const std::vector<double>& analytic, double h) {
  require(h > 0.0, ErrorKind::Argument, "grad_check: h must be positive");
  require(analytic.size() == x.size(), ErrorKind::Argument, "grad_check: gradient length mismatch");
  std::vector<double> probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      fail(ErrorKind::Numeric, "grad_check: non-finite function value at coordinate " +
                                   std::to_string(i));
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max(1e-6, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace warm
