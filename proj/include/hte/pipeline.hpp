#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"
#include "hte/estimators.hpp"
#include "hte/inference.hpp"
#include "hte/nuisance.hpp"

namespace hte {

struct FitOptions {
  NuisanceOptions nuisance;
  SolverOptions solver;
  bool rct = true;
  bool meta = true;
};

struct FitResult {
  NuisanceBasis nuisance_basis;
  NuisanceSet nuis;
  PsiVector psi_pre;
  SolveReport integrative;
  PsiEstimate estimate;
  std::optional<SolveReport> rct;
  std::optional<PsiEstimate> rct_estimate;
  std::optional<Vector> meta;
  std::vector<std::string> warnings;
};

/// Runs fn, prefixing any library error with the stage name.
template <class Fn>
auto run_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ArgumentError& e) {
    throw ArgumentError(std::string("[") + stage + "] " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("[") + stage + "] " + e.what());
  }
}

inline void validate_for_fit(const Dataset& data, const StructuralModel& model) {
  if (model.p1() == 0) throw ArgumentError("tau basis must contain at least one term");
  if (model.p2() == 0)
    throw ArgumentError("lambda basis is empty; the integrative estimator requires a confounding model");
  const long need = std::max(model.tau_basis.max_index(), model.lambda_basis.max_index());
  if (need >= static_cast<long>(data.d())) throw ArgumentError("structural basis references a missing covariate");
  const auto c = data.counts();
  if (c.source(1) == 0) throw ArgumentError("dataset has no trial (s=1) records");
  if (c.source(0) == 0) throw ArgumentError("dataset has no observational (s=0) records");
}

/// Fits e, E[Y|A,X,S], the preliminary estimate, mu and sigma^2 on the
/// given nuisance basis.
inline std::pair<NuisanceSet, PsiVector> fit_nuisances(const Dataset& data, const StructuralModel& model,
                                                       const NuisanceBasis& spec, const NuisanceOptions& opts) {
  NuisanceSet nuis;
  nuis.e = run_stage("propensity", [&] { return fit_propensity(data, spec, opts.trial_known, opts); });
  nuis.cond_y = run_stage("conditional outcomes", [&] { return fit_conditional_outcomes(data, spec, opts, nuis.warnings); });
  PsiVector pre = run_stage("preliminary", [&] { return preliminary_estimate(data, model, nuis.cond_y, &nuis.warnings); });
  nuis.mu = run_stage("outcome mean", [&] { return fit_outcome_mean(data, model, pre, nuis.e, spec, opts, nuis.warnings); });
  nuis.sigma2 = run_stage("variance function", [&] {
    return fit_variance_function(data, model, pre, nuis.e, nuis.mu, spec, opts, nuis.warnings);
  });
  return {std::move(nuis), std::move(pre)};
}

inline FitResult fit_pipeline(const Dataset& data, const StructuralModel& model, const FitOptions& opts = {}) {
  run_stage("validation", [&] { validate_for_fit(data, model); });
  FitResult out;
  out.nuisance_basis = run_stage("spline basis", [&] {
    return build_spline_ladder(data, opts.nuisance.knots, opts.nuisance.degree, opts.nuisance.records_per_term,
                               &out.warnings);
  });
  auto [nuis, pre] = fit_nuisances(data, model, out.nuisance_basis, opts.nuisance);
  out.nuis = std::move(nuis);
  out.psi_pre = std::move(pre);
  out.warnings.insert(out.warnings.end(), out.nuis.warnings.begin(), out.nuis.warnings.end());

  ScoreWorkspace ws = run_stage("workspace", [&] { return build_workspace(data, model, out.nuis); });
  out.integrative = run_stage("integrative solve", [&] { return solve_integrative(data, model, ws, out.psi_pre, opts.solver); });
  for (int pass = 0; pass < opts.nuisance.refit_passes && !out.integrative.fallback_used; ++pass) {
    const PsiVector at = out.integrative.psi_hat;
    std::vector<std::string> notes;
    out.nuis.mu = run_stage("outcome mean refit", [&] {
      return fit_outcome_mean(data, model, at, out.nuis.e, out.nuisance_basis, opts.nuisance, notes);
    });
    out.nuis.sigma2 = run_stage("variance function refit", [&] {
      return fit_variance_function(data, model, at, out.nuis.e, out.nuis.mu, out.nuisance_basis, opts.nuisance, notes);
    });
    ws = run_stage("workspace", [&] { return build_workspace(data, model, out.nuis); });
    out.integrative = run_stage("integrative solve", [&] { return solve_integrative(data, model, ws, at, opts.solver); });
  }
  if (out.integrative.fallback_used)
    out.warnings.push_back("integrative solver did not converge; reporting the preliminary estimate");
  out.estimate = run_stage("sandwich", [&] { return sandwich_covariance(data, model, out.integrative.psi_hat, ws); });
  if (opts.rct) {
    out.rct = run_stage("trial-only solve", [&] { return solve_rct(data, model, out.nuis, out.psi_pre.phi, opts.solver); });
    if (out.rct->fallback_used) out.warnings.push_back("trial-only solver did not converge");
    out.rct_estimate = run_stage("trial-only sandwich", [&] {
      return sandwich_covariance_rct(data, model, out.rct->psi_hat.phi, out.nuis);
    });
  }
  if (opts.meta) out.meta = run_stage("meta", [&] { return meta_estimate(data, model, out.nuis.e, &out.warnings); });
  return out;
}

}  // namespace hte
