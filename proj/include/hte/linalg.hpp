#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <sstream>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"

namespace hte::linalg {

struct LsSolution {
  Vector coef;
  bool ill_conditioned = false;  // Gram matrix rank deficient before the ridge
};

/// Ridge-stabilized least squares: (X'WX + r I) b = X'Wy with
/// r = ridge_rel * mean(diag(X'WX)). Weights default to one.
inline LsSolution penalized_least_squares(const Matrix& x, const Vector& y, double ridge_rel,
                                          const Vector* weights = nullptr) {
  if (x.rows() != y.size()) throw ArgumentError("design and response row counts differ");
  if (x.rows() == 0) throw ArgumentError("least squares on zero rows");
  Matrix gram;
  Vector rhs;
  if (weights) {
    const Matrix xw = x.array().colwise() * weights->array();
    gram = x.transpose() * xw;
    rhs = xw.transpose() * y;
  } else {
    gram = x.transpose() * x;
    rhs = x.transpose() * y;
  }
  const double mean_diag = gram.diagonal().mean();
  LsSolution out;
  {
    Eigen::LDLT<Matrix> raw(gram);
    out.ill_conditioned = raw.info() != Eigen::Success || !(raw.rcond() > 1e-12) ||
                          (x.rows() < x.cols());
  }
  if (out.ill_conditioned && ridge_rel <= 0.0) ridge_rel = 1e-8;
  const double ridge = ridge_rel * (mean_diag > 0.0 ? mean_diag : 1.0);
  gram.diagonal().array() += ridge;
  Eigen::LDLT<Matrix> ldlt(gram);
  if (ldlt.info() != Eigen::Success) throw NumericalError("ridge-stabilized normal equations failed to factor");
  out.coef = ldlt.solve(rhs);
  if (!out.coef.allFinite()) throw NumericalError("least squares produced non-finite coefficients");
  return out;
}

/// Reciprocal condition number estimate from singular values.
inline double rcond(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  const double hi = sv(0);
  if (!(hi > 0.0)) return 0.0;
  return sv(sv.size() - 1) / hi;
}

/// Solves m z = rhs for square m, raising with the condition number when m
/// is numerically singular.
inline Matrix solve_checked(const Matrix& m, const Matrix& rhs, const char* what) {
  const double rc = rcond(m);
  if (!(rc > 1e-13)) {
    std::ostringstream os;
    os << what << " is singular (condition number " << (rc > 0.0 ? 1.0 / rc : std::numeric_limits<double>::infinity())
       << ")";
    throw NumericalError(os.str());
  }
  return m.partialPivLu().solve(rhs);
}

inline Matrix inverse_checked(const Matrix& m, const char* what) {
  return solve_checked(m, Matrix::Identity(m.rows(), m.cols()), what);
}

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace hte::linalg
