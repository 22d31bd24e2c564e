#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"
#include "hte/linalg.hpp"

namespace hte {

//---------------------------------------------------------------------------//
// Additive spline basis
//---------------------------------------------------------------------------//

/// Type-7 empirical quantile of sorted values.
inline double empirical_quantile(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) throw ArgumentError("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Intercept plus, per covariate, a linear term and a spline expansion with
/// interior knots at empirical quantiles j/(K+1). degree 3 gives a natural
/// cubic spline (boundary knots at the sample range), degree 1 a piecewise
/// linear hinge basis. Both contribute knots + 1 terms per covariate.
inline BasisSpec build_spline_basis(const Dataset& data, int knots_per_covariate, int degree,
                                    std::vector<std::string>* warnings = nullptr) {
  if (data.empty()) throw ArgumentError("spline basis requested for an empty dataset");
  if (knots_per_covariate < 0) throw ArgumentError("knots_per_covariate must be >= 0");
  if (degree != 1 && degree != 3) throw ArgumentError("spline degree must be 1 or 3");
  BasisSpec spec;
  spec.terms.push_back(BasisTerm::constant());
  std::vector<double> col(data.size());
  for (std::size_t j = 0; j < data.d(); ++j) {
    spec.terms.push_back(BasisTerm::linear(j));
    if (knots_per_covariate == 0) continue;
    for (std::size_t i = 0; i < data.size(); ++i) col[i] = data[i].x[j];
    std::sort(col.begin(), col.end());
    const double lo = col.front();
    const double hi = col.back();
    if (!(hi > lo)) {
      if (warnings) warnings->push_back("covariate " + std::to_string(j + 1) + " is constant; spline terms dropped");
      continue;
    }
    std::vector<double> interior;
    for (int k = 1; k <= knots_per_covariate; ++k) {
      const double q = empirical_quantile(col, static_cast<double>(k) / (knots_per_covariate + 1));
      if (q > lo && q < hi && (interior.empty() || q > interior.back())) interior.push_back(q);
    }
    if (static_cast<int>(interior.size()) < knots_per_covariate && warnings) {
      warnings->push_back("covariate " + std::to_string(j + 1) + ": " + std::to_string(interior.size()) +
                          " distinct interior knots of " + std::to_string(knots_per_covariate) + " requested");
    }
    if (interior.empty()) continue;
    if (degree == 1) {
      for (double kn : interior) spec.terms.push_back(BasisTerm::hinge(j, kn));
    } else {
      std::vector<double> all;
      all.push_back(lo);
      all.insert(all.end(), interior.begin(), interior.end());
      all.push_back(hi);
      for (std::size_t e = 0; e < interior.size(); ++e) spec.terms.push_back(BasisTerm::natural_spline(j, all, e));
    }
  }
  return spec;
}

/// Nuisance bases of increasing flexibility. Each fit uses the richest rung
/// with at most n_cell / records_per_term terms (the first rung if none
/// qualifies), so small cells get smoother fits. A single spec is a
/// one-rung ladder.
struct NuisanceBasis {
  std::vector<BasisSpec> ladder;
  double records_per_term = 0.0;  // 0 disables the budget

  NuisanceBasis() = default;
  NuisanceBasis(BasisSpec spec) { ladder.push_back(std::move(spec)); }  // NOLINT: implicit by intent
  NuisanceBasis(std::vector<BasisSpec> rungs, double per_term) : ladder(std::move(rungs)), records_per_term(per_term) {}

  const BasisSpec& for_cell(std::size_t n_cell) const {
    if (ladder.empty()) throw ArgumentError("nuisance basis is empty");
    std::size_t pick = 0;
    if (records_per_term <= 0.0) return ladder.back();
    for (std::size_t k = 0; k < ladder.size(); ++k)
      if (static_cast<double>(ladder[k].size()) * records_per_term <= static_cast<double>(n_cell)) pick = k;
    return ladder[pick];
  }

  const BasisSpec& richest() const { return ladder.back(); }
};

/// Spline bases with 0..knots_per_covariate interior knots.
inline NuisanceBasis build_spline_ladder(const Dataset& data, int knots_per_covariate, int degree,
                                         double records_per_term, std::vector<std::string>* warnings = nullptr) {
  std::vector<BasisSpec> rungs;
  for (int k = 0; k <= knots_per_covariate; ++k)
    rungs.push_back(build_spline_basis(data, k, degree, k == knots_per_covariate ? warnings : nullptr));
  return {std::move(rungs), records_per_term};
}

//---------------------------------------------------------------------------//
// Regressors
//---------------------------------------------------------------------------//

enum class Link { identity, logit, log };

inline double expit(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

/// Penalized additive regression. With the log link the response was fitted
/// on the log scale and predictions are exponentiated.
struct AdditiveRegressor {
  BasisSpec basis;
  Vector coef;
  Link link = Link::identity;
  double ridge = 0.0;

  double predict_linear(std::span<const double> x) const { return basis.evaluate(x).dot(coef); }

  double predict(std::span<const double> x) const {
    const double eta = predict_linear(x);
    switch (link) {
      case Link::identity: return eta;
      case Link::logit: return expit(eta);
      case Link::log: return std::exp(eta);
    }
    return eta;
  }
};

namespace detail {

inline std::vector<const UnitRecord*> select(const Dataset& data, int s, int a = -1) {
  std::vector<const UnitRecord*> out;
  for (const auto& r : data)
    if (r.s == s && (a < 0 || r.a == a)) out.push_back(&r);
  return out;
}

inline std::string cell_name(int a, int s) {
  return "(a=" + std::to_string(a) + ", s=" + std::to_string(s) + ")";
}

inline AdditiveRegressor fit_identity(const BasisSpec& spec, const Matrix& x, const Vector& y, double ridge_rel,
                                      Link link, const std::string& what, std::vector<std::string>& warnings) {
  auto sol = linalg::penalized_least_squares(x, y, ridge_rel);
  if (sol.ill_conditioned) warnings.push_back(what + ": singular normal equations, solved with ridge");
  return {spec, std::move(sol.coef), link, ridge_rel};
}

}  // namespace detail

struct IrlsOptions {
  int max_iter = 100;
  double tol = 1e-10;
  int max_halvings = 30;
};

/// Penalized logistic regression by iteratively reweighted least squares
/// with step halving on deviance increase.
inline AdditiveRegressor fit_logistic(const BasisSpec& spec, const Matrix& x, const Vector& y, double ridge_rel,
                                      const IrlsOptions& opts = {}) {
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  const double ybar = std::clamp(y.mean(), 1e-6, 1.0 - 1e-6);
  Vector beta = Vector::Zero(p);
  const bool has_intercept = spec.leading_constant();
  if (has_intercept) beta(0) = std::log(ybar / (1.0 - ybar));

  const double ridge = ridge_rel * (x.array().square().colwise().sum().mean() * 0.25);
  auto objective = [&](const Vector& b, Vector& eta) {
    eta = x * b;
    double dev = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      // -2 log-likelihood, written to stay finite for large |eta|
      const double t = eta(i);
      const double log1pexp = t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
      dev += 2.0 * (log1pexp - y(i) * t);
    }
    return dev + ridge * b.squaredNorm();
  };

  Vector eta;
  double dev = objective(beta, eta);
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Vector w(n), z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mu = expit(eta(i));
      const double wi = std::max(mu * (1.0 - mu), 1e-10);
      w(i) = wi;
      z(i) = eta(i) + (y(i) - mu) / wi;
    }
    const Matrix xw = x.array().colwise() * w.array();
    Matrix gram = x.transpose() * xw;
    gram.diagonal().array() += ridge;
    Vector target = Eigen::LDLT<Matrix>(gram).solve(xw.transpose() * z);
    if (!target.allFinite()) throw NumericalError("IRLS produced non-finite coefficients");

    Vector step = target - beta;
    Vector trial_eta;
    double trial_dev = objective(beta + step, trial_eta);
    int halvings = 0;
    while (trial_dev > dev && halvings < opts.max_halvings) {
      step *= 0.5;
      trial_dev = objective(beta + step, trial_eta);
      ++halvings;
    }
    beta += step;
    eta = trial_eta;
    const double change = std::abs(dev - trial_dev);
    dev = trial_dev;
    if (change < opts.tol * (std::abs(dev) + 0.1)) return {spec, beta, Link::logit, ridge_rel};
  }
  std::ostringstream os;
  os << "IRLS did not converge in " << opts.max_iter << " iterations (last deviance " << dev << ")";
  throw NumericalError(os.str());
}

//---------------------------------------------------------------------------//
// Nuisance components
//---------------------------------------------------------------------------//

struct NuisanceOptions {
  int knots = 4;
  int degree = 3;
  double records_per_term = 20.0;  // per-cell flexibility budget, 0 disables
  int refit_passes = 0;  // optional: refit mu and sigma^2 at the integrative estimate, then re-solve
  double ridge = 1e-6;  // relative to the mean Gram diagonal
  double clip_e = 0.01;
  std::optional<double> trial_known;
  double sigma2_lo_rel = 1e-4;  // bounds relative to the pooled Var(Y)
  double sigma2_hi_rel = 1e4;
  IrlsOptions irls;
};

/// e(x, s), fitted per source or fixed by design, clipped to
/// [clip, 1 - clip].
struct PropensityModel {
  std::array<std::optional<double>, 2> known;
  std::array<AdditiveRegressor, 2> fits;
  double clip = 0.01;
  // Oracle override (simulation truth); takes precedence over the fits.
  std::function<double(std::span<const double>, int)> exact;

  double operator()(std::span<const double> x, int s) const {
    const double raw = exact ? exact(x, s) : known[s] ? *known[s] : fits[s].predict(x);
    return std::clamp(raw, clip, 1.0 - clip);
  }
};

/// E[Y | A=a, X, S=s], one fit per cell.
struct ConditionalOutcomeModel {
  std::array<std::array<AdditiveRegressor, 2>, 2> fits;  // [s][a]
  std::function<double(std::span<const double>, int, int)> exact;

  double operator()(std::span<const double> x, int a, int s) const {
    return exact ? exact(x, a, s) : fits[s][a].predict(x);
  }
};

/// mu(x, s), fitted to pseudo-outcomes per source.
struct OutcomeMeanModel {
  std::array<AdditiveRegressor, 2> fits;
  std::function<double(std::span<const double>, int)> exact;

  double operator()(std::span<const double> x, int s) const { return exact ? exact(x, s) : fits[s].predict(x); }
};

/// sigma^2(a, x, s) = smear[s][a] * exp(log-scale fit), clamped to [lo, hi].
struct VarianceModel {
  std::array<std::array<AdditiveRegressor, 2>, 2> fits;  // [s][a], log link
  std::array<std::array<double, 2>, 2> smear{{{1.0, 1.0}, {1.0, 1.0}}};
  double lo = 1e-8;
  double hi = 1e8;
  std::function<double(int, std::span<const double>, int)> exact;

  double operator()(int a, std::span<const double> x, int s) const {
    if (exact) return std::clamp(exact(a, x, s), lo, hi);
    return std::clamp(smear[s][a] * fits[s][a].predict(x), lo, hi);
  }
};

struct NuisanceSet {
  PropensityModel e;
  OutcomeMeanModel mu;
  VarianceModel sigma2;
  ConditionalOutcomeModel cond_y;
  std::vector<std::string> warnings;
};

inline double pooled_outcome_variance(const Dataset& data) {
  double mean = 0.0;
  for (const auto& r : data) mean += r.y;
  mean /= static_cast<double>(data.size());
  double ss = 0.0;
  for (const auto& r : data) ss += (r.y - mean) * (r.y - mean);
  const double v = data.size() > 1 ? ss / static_cast<double>(data.size() - 1) : 0.0;
  return v > 0.0 ? v : 1.0;
}

inline PropensityModel fit_propensity(const Dataset& data, const NuisanceBasis& basis, std::optional<double> trial_known,
                                      const NuisanceOptions& opts = {}) {
  if (!(opts.clip_e > 0.0 && opts.clip_e < 0.5)) throw ArgumentError("clip_e must lie in (0, 0.5)");
  PropensityModel out;
  out.clip = opts.clip_e;
  for (int s = 0; s <= 1; ++s) {
    if (s == 1 && trial_known) {
      if (!(*trial_known > 0.0 && *trial_known < 1.0)) throw ArgumentError("trial_known must lie in (0, 1)");
      out.known[1] = trial_known;
      continue;
    }
    const auto recs = detail::select(data, s);
    if (recs.empty()) {
      // A trial-only dataset never evaluates e(x, 0).
      if (s == 0) continue;
      throw ArgumentError("source s=1 has no records");
    }
    Vector a(static_cast<Eigen::Index>(recs.size()));
    for (std::size_t i = 0; i < recs.size(); ++i) a(static_cast<Eigen::Index>(i)) = recs[i]->a;
    if (a.minCoeff() == a.maxCoeff())
      throw ArgumentError("source s=" + std::to_string(s) + " contains a single treatment arm; propensity not estimable");
    const BasisSpec& spec = basis.for_cell(recs.size());
    out.fits[s] = fit_logistic(spec, spec.design(recs), a, opts.ridge, opts.irls);
  }
  return out;
}

inline ConditionalOutcomeModel fit_conditional_outcomes(const Dataset& data, const NuisanceBasis& basis,
                                                        const NuisanceOptions& opts,
                                                        std::vector<std::string>& warnings) {
  ConditionalOutcomeModel out;
  for (int s = 0; s <= 1; ++s) {
    for (int a = 0; a <= 1; ++a) {
      const auto recs = detail::select(data, s, a);
      if (recs.empty()) throw ArgumentError("cell " + detail::cell_name(a, s) + " is empty");
      Vector y(static_cast<Eigen::Index>(recs.size()));
      for (std::size_t i = 0; i < recs.size(); ++i) y(static_cast<Eigen::Index>(i)) = recs[i]->y;
      const BasisSpec& spec = basis.for_cell(recs.size());
      out.fits[s][a] = detail::fit_identity(spec, spec.design(recs), y, opts.ridge, Link::identity,
                                            "E[Y|A,X,S] cell " + detail::cell_name(a, s), warnings);
    }
  }
  return out;
}

/// Regresses the pseudo-outcome at psi_pre on the basis, per source.
/// Sources without records keep an empty fit.
inline OutcomeMeanModel fit_outcome_mean(const Dataset& data, const StructuralModel& model, const PsiVector& psi_pre,
                                         const PropensityModel& e_fit, const NuisanceBasis& basis,
                                         const NuisanceOptions& opts, std::vector<std::string>& warnings,
                                         bool require_both_sources = true) {
  if (!psi_pre.stacked().allFinite()) throw ArgumentError("preliminary estimate is not finite");
  OutcomeMeanModel out;
  for (int s = 0; s <= 1; ++s) {
    const auto recs = detail::select(data, s);
    if (recs.empty()) {
      if (require_both_sources || s == 1) throw ArgumentError("source s=" + std::to_string(s) + " is empty");
      continue;
    }
    Vector h(static_cast<Eigen::Index>(recs.size()));
    for (std::size_t i = 0; i < recs.size(); ++i)
      h(static_cast<Eigen::Index>(i)) = pseudo_outcome(model, psi_pre, *recs[i], e_fit(recs[i]->x, s));
    const BasisSpec& spec = basis.for_cell(recs.size());
    out.fits[s] = detail::fit_identity(spec, spec.design(recs), h, opts.ridge, Link::identity,
                                       "mu(X,S) source s=" + std::to_string(s), warnings);
  }
  return out;
}

/// Log-scale regression of squared pseudo-outcome residuals per (a, s) cell
/// with a smearing factor so that exp(fit) is mean-unbiased.
inline VarianceModel fit_variance_function(const Dataset& data, const StructuralModel& model, const PsiVector& psi_pre,
                                           const PropensityModel& e_fit, const OutcomeMeanModel& mu_fit,
                                           const NuisanceBasis& basis, const NuisanceOptions& opts,
                                           std::vector<std::string>& warnings, bool require_both_sources = true) {
  const double var_y = pooled_outcome_variance(data);
  VarianceModel out;
  out.lo = opts.sigma2_lo_rel * var_y;
  out.hi = opts.sigma2_hi_rel * var_y;
  const double floor = 1e-12 * var_y;
  for (int s = 0; s <= 1; ++s) {
    for (int a = 0; a <= 1; ++a) {
      const auto recs = detail::select(data, s, a);
      if (recs.empty()) {
        if (!require_both_sources && detail::select(data, s).empty()) continue;
        throw ArgumentError("cell " + detail::cell_name(a, s) + " is empty");
      }
      Vector sq(static_cast<Eigen::Index>(recs.size()));
      for (std::size_t i = 0; i < recs.size(); ++i) {
        const UnitRecord& r = *recs[i];
        const double res = residual_eps_h(model, psi_pre, r, e_fit(r.x, s), mu_fit(r.x, s));
        sq(static_cast<Eigen::Index>(i)) = res * res + floor;
      }
      const BasisSpec& spec = basis.for_cell(recs.size());
      const Matrix x = spec.design(recs);
      auto fit = detail::fit_identity(spec, x, sq.array().log().matrix(), opts.ridge, Link::log,
                                      "sigma^2 cell " + detail::cell_name(a, s), warnings);
      const Vector fitted = (x * fit.coef).array().exp().matrix();
      out.smear[s][a] = (sq.array() / fitted.array()).mean();
      out.fits[s][a] = std::move(fit);
    }
  }
  return out;
}

}  // namespace hte
