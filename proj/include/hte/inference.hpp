#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"
#include "hte/estimators.hpp"
#include "hte/linalg.hpp"
#include "hte/nuisance.hpp"

namespace hte {

inline constexpr double kCiMultiplier = 1.96;

/// Z-estimate with its sandwich covariance. cov is the finite-sample
/// covariance of psi_hat, (1/N) bread^-1 meat bread^-T, where bread and meat
/// are averages over all N records.
struct PsiEstimate {
  PsiVector psi_hat;
  Matrix cov;
  Matrix bread;
  Matrix meat;
  std::size_t n_trial = 0;
  std::size_t n_obs = 0;

  std::size_t n_total() const { return n_trial + n_obs; }
  Matrix phi_cov() const { return cov.topLeftCorner(psi_hat.p1(), psi_hat.p1()); }
};

namespace detail {

inline PsiEstimate finish_sandwich(PsiVector psi, Matrix bread, Matrix meat, const Dataset& data) {
  const double n = static_cast<double>(data.size());
  const Matrix bread_inv = linalg::inverse_checked(bread, "score Jacobian (bread)");
  PsiEstimate est;
  est.cov = linalg::symmetrize(bread_inv * meat * bread_inv.transpose() / n);
  est.psi_hat = std::move(psi);
  est.bread = std::move(bread);
  est.meat = std::move(meat);
  const auto counts = data.counts();
  est.n_trial = counts.source(1);
  est.n_obs = counts.source(0);
  return est;
}

}  // namespace detail

inline PsiEstimate sandwich_covariance(const Dataset& data, const StructuralModel& model, const PsiVector& psi_hat,
                                       const ScoreWorkspace& ws) {
  if (data.empty()) throw ArgumentError("empty dataset");
  const auto p = static_cast<Eigen::Index>(model.p());
  Matrix bread = Matrix::Zero(p, p);
  Matrix meat = Matrix::Zero(p, p);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector s = efficient_score(data[i], model, psi_hat, ws[i]);
    bread += score_jacobian(data[i], model, ws[i]);
    meat.noalias() += s * s.transpose();
  }
  const double n = static_cast<double>(data.size());
  return detail::finish_sandwich(psi_hat, bread / n, meat / n, data);
}

inline PsiEstimate sandwich_covariance(const Dataset& data, const StructuralModel& model, const PsiVector& psi_hat,
                                       const NuisanceSet& nuis) {
  return sandwich_covariance(data, model, psi_hat, build_workspace(data, model, nuis));
}

/// Trial-only variant: phi block, trial records, still averaged over N.
inline PsiEstimate sandwich_covariance_rct(const Dataset& data, const StructuralModel& model, const Vector& phi_hat,
                                           const NuisanceSet& nuis) {
  const auto p1 = static_cast<Eigen::Index>(model.p1());
  if (phi_hat.size() != p1) throw ArgumentError("phi_hat does not match tau basis");
  Matrix bread = Matrix::Zero(p1, p1);
  Matrix meat = Matrix::Zero(p1, p1);
  for (const auto& r : data) {
    if (r.s != 1) continue;
    const ScoreEntry ws = make_score_entry(r, model, nuis);
    const Vector s = rct_score(r, phi_hat, ws);
    bread += rct_jacobian(r, ws);
    meat.noalias() += s * s.transpose();
  }
  const double n = static_cast<double>(data.size());
  return detail::finish_sandwich(PsiVector{phi_hat, Vector()}, bread / n, meat / n, data);
}

//---------------------------------------------------------------------------//
// Treatment-effect curve
//---------------------------------------------------------------------------//

struct CurvePoint {
  std::vector<double> x;
  double tau = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

inline CurvePoint tau_at(const StructuralModel& model, const PsiEstimate& est, std::span<const double> x) {
  const Vector b = model.tau_basis.evaluate(x);
  if (b.size() != est.psi_hat.p1()) throw ArgumentError("estimate does not match tau basis");
  CurvePoint pt;
  pt.x.assign(x.begin(), x.end());
  pt.tau = b.dot(est.psi_hat.phi);
  pt.se = std::sqrt(std::max(0.0, b.dot(est.phi_cov() * b)));
  pt.ci_lo = pt.tau - kCiMultiplier * pt.se;
  pt.ci_hi = pt.tau + kCiMultiplier * pt.se;
  return pt;
}

inline std::vector<CurvePoint> tau_curve(const StructuralModel& model, const PsiEstimate& est,
                                         const std::vector<std::vector<double>>& grid) {
  std::vector<CurvePoint> out;
  out.reserve(grid.size());
  for (const auto& x : grid) {
    for (double v : x)
      if (!std::isfinite(v)) throw ArgumentError("curve grid point is not finite");
    out.push_back(tau_at(model, est, x));
  }
  return out;
}

//---------------------------------------------------------------------------//
// Average treatment effect
//---------------------------------------------------------------------------//

struct AteEstimate {
  double tau0_hat = 0.0;
  double se = 0.0;
  double pi0_hat = 0.0;
  Vector psi0_grad;
};

/// Plug-in mean of tau_phi over the observational sample with variance
/// (1/N)[(1/pi0) Var(tau_phi | S=0) + Psi0' N Sigma_phiphi Psi0].
inline AteEstimate ate_estimate(const Dataset& data, const StructuralModel& model, const PsiEstimate& est) {
  std::vector<double> taus;
  const auto p1 = static_cast<Eigen::Index>(model.p1());
  if (est.psi_hat.p1() != p1) throw ArgumentError("estimate does not match tau basis");
  Vector grad = Vector::Zero(p1);
  Vector b(p1);
  for (const auto& r : data) {
    if (r.s != 0) continue;
    model.tau_basis.evaluate_into(r.x, b);
    grad += b;
    taus.push_back(b.dot(est.psi_hat.phi));
  }
  const std::size_t m = taus.size();
  if (m < 2) throw ArgumentError("average treatment effect needs at least 2 observational records");
  AteEstimate out;
  const double md = static_cast<double>(m);
  out.psi0_grad = grad / md;
  double mean = 0.0;
  for (double t : taus) mean += t;
  mean /= md;
  double ss = 0.0;
  for (double t : taus) ss += (t - mean) * (t - mean);
  const double var_tau = ss / (md - 1.0);
  const double n = static_cast<double>(data.size());
  out.tau0_hat = mean;
  out.pi0_hat = md / n;
  const double quad = out.psi0_grad.dot(est.phi_cov() * out.psi0_grad);
  out.se = std::sqrt(std::max(0.0, var_tau / (out.pi0_hat * n) + quad));
  return out;
}

//---------------------------------------------------------------------------//
// Precision gain of the integrative over the trial-only estimator
//---------------------------------------------------------------------------//

struct GainReport {
  Matrix precision_integrative;
  Matrix precision_rct;
  Matrix gain;
  double min_eig = 0.0;
};

/// Differences the inverse asymptotic phi covariances N * cov. Both use the
/// integrative estimate's N so the scaling cancels consistently.
inline GainReport precision_gain(const PsiEstimate& integrative, const PsiEstimate& rct) {
  if (integrative.psi_hat.p1() != rct.psi_hat.p1()) throw ArgumentError("phi dimensions differ");
  const double n = static_cast<double>(integrative.n_total());
  GainReport g;
  g.precision_integrative = linalg::symmetrize(linalg::inverse_checked(n * integrative.phi_cov(), "integrative phi covariance"));
  g.precision_rct = linalg::symmetrize(linalg::inverse_checked(n * rct.phi_cov(), "trial-only phi covariance"));
  g.gain = g.precision_integrative - g.precision_rct;
  g.min_eig = g.gain.size() ? Eigen::SelfAdjointEigenSolver<Matrix>(g.gain).eigenvalues().minCoeff() : 0.0;
  return g;
}

//---------------------------------------------------------------------------//
// Over-identification goodness-of-fit test
//---------------------------------------------------------------------------//

struct GofResult {
  double t_stat = 0.0;
  int df = 0;
  double p_value = 1.0;
};

struct GofOptions {
  // Multiply the extra moments by k_i instead of eps_A = a - e(x, s).
  bool efficient_weighting = false;
};

inline double chi_square_upper_tail(double t, int df) {
  if (df <= 0) throw ArgumentError("chi-square degrees of freedom must be positive");
  if (!(t > 0.0)) return 1.0;
  return boost::math::gamma_q(0.5 * df, 0.5 * t);
}

/// G_i = (c1(x); (1 - s) c2(x)) eps_H eps_A with c1, c2 the alternative
/// terms. T = N Gbar' Sigma^-1 Gbar where Sigma averages
/// (G_i - D B^-1 S_i)(...)' with D = mean dG/dpsi' and B = mean dS/dpsi'.
inline GofResult gof_test(const Dataset& data, const StructuralModel& model, const PsiEstimate& est,
                          const NuisanceSet& nuis, const BasisSpec& alt_tau_terms, const BasisSpec& alt_lambda_terms,
                          const GofOptions& opts = {}) {
  const auto q1 = static_cast<Eigen::Index>(alt_tau_terms.size());
  const auto q2 = static_cast<Eigen::Index>(alt_lambda_terms.size());
  const Eigen::Index q = q1 + q2;
  if (q == 0) throw ArgumentError("goodness-of-fit test needs at least one alternative term");
  if (est.psi_hat.p1() != static_cast<Eigen::Index>(model.p1()) ||
      est.psi_hat.p2() != static_cast<Eigen::Index>(model.p2()))
    throw ArgumentError("estimate does not match the structural model");
  const auto p = static_cast<Eigen::Index>(model.p());
  const ScoreWorkspace ws = build_workspace(data, model, nuis);
  const std::size_t n = data.size();

  std::vector<Vector> g(n), s(n);
  Vector g_bar = Vector::Zero(q);
  Matrix d = Matrix::Zero(q, p);
  Matrix b = Matrix::Zero(p, p);
  Vector c(q);
  for (std::size_t i = 0; i < n; ++i) {
    const UnitRecord& r = data[i];
    c.head(q1) = alt_tau_terms.evaluate(r.x);
    if (q2 > 0) c.tail(q2) = r.s == 0 ? alt_lambda_terms.evaluate(r.x) : Vector::Zero(q2);
    const double mult = opts.efficient_weighting ? ws[i].k : (r.a - ws[i].e);
    g[i] = c * (mult * workspace_residual(r, est.psi_hat, ws[i]));
    s[i] = efficient_score(r, model, est.psi_hat, ws[i]);
    g_bar += g[i];
    d.noalias() += mult * c * residual_gradient(r, ws[i]).transpose();
    b += score_jacobian(r, model, ws[i]);
  }
  const double nd = static_cast<double>(n);
  g_bar /= nd;
  d /= nd;
  b /= nd;
  const Matrix correction = d * linalg::inverse_checked(b, "score Jacobian");
  Matrix sigma = Matrix::Zero(q, q);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector u = g[i] - correction * s[i];
    sigma.noalias() += u * u.transpose();
  }
  sigma /= nd;
  const Vector solved = linalg::solve_checked(linalg::symmetrize(sigma), g_bar, "goodness-of-fit covariance");
  GofResult out;
  out.df = static_cast<int>(q);
  out.t_stat = std::max(0.0, nd * g_bar.dot(solved));
  out.p_value = chi_square_upper_tail(out.t_stat, out.df);
  return out;
}

}  // namespace hte
