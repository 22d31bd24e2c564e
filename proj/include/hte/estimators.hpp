#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"
#include "hte/linalg.hpp"
#include "hte/nuisance.hpp"

namespace hte {

//---------------------------------------------------------------------------//
// Score workspace
//---------------------------------------------------------------------------//

/// Per-record quantities of the efficient score that do not depend on psi.
struct ScoreEntry {
  double e = 0.5;
  double mu = 0.0;
  double sigma2_1 = 1.0;
  double sigma2_0 = 1.0;
  double w = 1.0;    // 1 / sigma^2(a, x, s)
  double eaw = 0.5;  // E[AW | X, S]
  double ew = 1.0;   // E[W | X, S]
  double k = 0.0;    // (a - E[AW]/E[W]) W
  Vector tau_b;
  Vector lambda_b;
};

/// Stacked gradient (tau_basis(x); (1 - s) lambda_basis(x)).
inline Vector score_gradient(const UnitRecord& rec, const ScoreEntry& ws) {
  Vector c(ws.tau_b.size() + ws.lambda_b.size());
  c << ws.tau_b, (rec.s == 0 ? ws.lambda_b : Vector::Zero(ws.lambda_b.size()));
  return c;
}

struct ScoreWorkspace {
  std::vector<ScoreEntry> entries;

  const ScoreEntry& operator[](std::size_t i) const { return entries[i]; }
  std::size_t size() const { return entries.size(); }
};

inline ScoreEntry make_score_entry(const UnitRecord& r, const StructuralModel& model, const NuisanceSet& nuis) {
  ScoreEntry ws;
  ws.e = nuis.e(r.x, r.s);
  ws.mu = nuis.mu(r.x, r.s);
  ws.sigma2_1 = nuis.sigma2(1, r.x, r.s);
  ws.sigma2_0 = nuis.sigma2(0, r.x, r.s);
  ws.w = 1.0 / (r.a == 1 ? ws.sigma2_1 : ws.sigma2_0);
  ws.eaw = ws.e / ws.sigma2_1;
  ws.ew = ws.e / ws.sigma2_1 + (1.0 - ws.e) / ws.sigma2_0;
  ws.k = (r.a - ws.eaw / ws.ew) * ws.w;
  ws.tau_b = model.tau_basis.evaluate(r.x);
  ws.lambda_b = model.lambda_basis.evaluate(r.x);
  if (!(ws.ew > 0.0) || !(ws.w > 0.0) || !std::isfinite(ws.k))
    throw NumericalError("score workspace has non-positive weights; check variance bounds");
  return ws;
}

inline ScoreWorkspace build_workspace(const Dataset& data, const StructuralModel& model, const NuisanceSet& nuis) {
  ScoreWorkspace out;
  out.entries.reserve(data.size());
  for (const auto& r : data) out.entries.push_back(make_score_entry(r, model, nuis));
  return out;
}

/// eps_H at psi using the cached nuisances.
inline double workspace_residual(const UnitRecord& rec, const PsiVector& psi, const ScoreEntry& ws) {
  double eps = rec.y - rec.a * ws.tau_b.dot(psi.phi) - ws.mu;
  if (rec.s == 0) eps -= (rec.a - ws.e) * ws.lambda_b.dot(psi.lam);
  return eps;
}

/// d eps_H / d psi' = -(a tau_basis; (1 - s)(a - e) lambda_basis).
inline Vector residual_gradient(const UnitRecord& rec, const ScoreEntry& ws) {
  Vector d(ws.tau_b.size() + ws.lambda_b.size());
  d << -rec.a * ws.tau_b,
      (rec.s == 0 ? Vector(-(rec.a - ws.e) * ws.lambda_b) : Vector::Zero(ws.lambda_b.size()));
  return d;
}

inline Vector efficient_score(const UnitRecord& rec, const StructuralModel& model, const PsiVector& psi,
                              const ScoreEntry& ws) {
  if (static_cast<std::size_t>(psi.p1()) != model.p1() || static_cast<std::size_t>(psi.p2()) != model.p2() ||
      static_cast<std::size_t>(ws.tau_b.size()) != model.p1() ||
      static_cast<std::size_t>(ws.lambda_b.size()) != model.p2())
    throw ArgumentError("psi or workspace entry does not match the structural model");
  return score_gradient(rec, ws) * (ws.k * workspace_residual(rec, psi, ws));
}

inline Matrix score_jacobian(const UnitRecord& rec, const StructuralModel& model, const ScoreEntry& ws) {
  if (static_cast<std::size_t>(ws.tau_b.size()) != model.p1() ||
      static_cast<std::size_t>(ws.lambda_b.size()) != model.p2())
    throw ArgumentError("workspace entry does not match the structural model");
  return ws.k * score_gradient(rec, ws) * residual_gradient(rec, ws).transpose();
}

//---------------------------------------------------------------------------//
// Damped Newton on an averaged estimating function
//---------------------------------------------------------------------------//

struct SolverOptions {
  double tol = 1e-10;       // relative to the RMS per-record score norm at the start
  double step_tol = 1e-12;  // absolute
  int max_iter = 50;
  int max_halvings = 30;
};

struct SolveReport {
  PsiVector psi_hat;
  int iterations = 0;
  double final_score_norm = 0.0;
  double score_scale = 0.0;
  bool converged = false;
  bool fallback_used = false;
};

struct ScoreMoments {
  Vector mean;
  double rms = 0.0;  // sqrt of the mean squared per-record score norm
};

using ScoreFn = std::function<ScoreMoments(const Vector&)>;
using JacobianFn = std::function<Matrix(const Vector&)>;

inline SolveReport newton_solve(const Vector& init, Eigen::Index p1, const ScoreFn& score, const JacobianFn& jacobian,
                                const SolverOptions& opts) {
  SolveReport rep;
  Vector theta = init;
  ScoreMoments m = score(theta);
  if (!m.mean.allFinite() || !std::isfinite(m.rms)) throw NumericalError("non-finite score at the initial value");
  rep.score_scale = m.rms;
  const double threshold = opts.tol * m.rms;
  double norm = m.mean.norm();
  while (!(norm <= threshold)) {
    if (rep.iterations >= opts.max_iter) {
      rep.psi_hat = PsiVector::from_stacked(init, p1);
      rep.final_score_norm = norm;
      rep.fallback_used = true;
      return rep;
    }
    Matrix jac = jacobian(theta);
    if (linalg::rcond(jac) < 1e-12) {
      const double jn = jac.norm();
      jac.diagonal().array() += 1e-8 * (jn > 0.0 ? jn : 1.0);
    }
    Vector step = -jac.partialPivLu().solve(m.mean);
    if (!step.allFinite()) throw NumericalError("Newton step is not finite");
    ScoreMoments next = score(theta + step);
    double next_norm = next.mean.norm();
    for (int h = 0; h < opts.max_halvings && !(next_norm < norm); ++h) {
      step *= 0.5;
      next = score(theta + step);
      next_norm = next.mean.norm();
    }
    theta += step;
    m = std::move(next);
    norm = next_norm;
    ++rep.iterations;
    if (step.norm() <= opts.step_tol) break;
  }
  rep.psi_hat = PsiVector::from_stacked(theta, p1);
  rep.final_score_norm = norm;
  rep.converged = true;
  return rep;
}

//---------------------------------------------------------------------------//
// Estimators
//---------------------------------------------------------------------------//

/// Two-stage least squares on fitted conditional outcome means: phi from
/// the trial arm contrast, then lam from the observational contrast net of
/// tau_phi.
inline PsiVector preliminary_estimate(const Dataset& data, const StructuralModel& model,
                                      const ConditionalOutcomeModel& cond_y, std::vector<std::string>* warnings = nullptr) {
  std::vector<const UnitRecord*> trial, obs;
  for (const auto& r : data) (r.s == 1 ? trial : obs).push_back(&r);
  if (trial.empty()) throw ArgumentError("preliminary estimate needs trial records");

  Vector target(static_cast<Eigen::Index>(trial.size()));
  for (std::size_t i = 0; i < trial.size(); ++i)
    target(static_cast<Eigen::Index>(i)) = cond_y(trial[i]->x, 1, 1) - cond_y(trial[i]->x, 0, 1);
  auto phi = linalg::penalized_least_squares(model.tau_basis.design(trial), target, 0.0);
  if (phi.ill_conditioned && warnings) warnings->push_back("preliminary phi: singular design, ridge-stabilized");

  PsiVector out{phi.coef, Vector::Zero(static_cast<Eigen::Index>(model.p2()))};
  if (model.p2() == 0 || obs.empty()) return out;
  target.resize(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& x = obs[i]->x;
    target(static_cast<Eigen::Index>(i)) = cond_y(x, 1, 0) - cond_y(x, 0, 0) - eval_tau(model, out.phi, x);
  }
  auto lam = linalg::penalized_least_squares(model.lambda_basis.design(obs), target, 0.0);
  if (lam.ill_conditioned && warnings) warnings->push_back("preliminary lam: singular design, ridge-stabilized");
  out.lam = lam.coef;
  return out;
}

inline ScoreMoments integrative_score_moments(const Dataset& data, const StructuralModel& model, const PsiVector& psi,
                                              const ScoreWorkspace& ws) {
  ScoreMoments m{Vector::Zero(static_cast<Eigen::Index>(model.p())), 0.0};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector s = efficient_score(data[i], model, psi, ws[i]);
    m.mean += s;
    m.rms += s.squaredNorm();
  }
  const double n = static_cast<double>(data.size());
  m.mean /= n;
  m.rms = std::sqrt(m.rms / n);
  return m;
}

inline Matrix integrative_mean_jacobian(const Dataset& data, const StructuralModel& model, const ScoreWorkspace& ws) {
  Matrix j = Matrix::Zero(static_cast<Eigen::Index>(model.p()), static_cast<Eigen::Index>(model.p()));
  for (std::size_t i = 0; i < data.size(); ++i) j += score_jacobian(data[i], model, ws[i]);
  return j / static_cast<double>(data.size());
}

inline SolveReport solve_integrative(const Dataset& data, const StructuralModel& model, const ScoreWorkspace& ws,
                                     const PsiVector& psi_init, const SolverOptions& opts = {}) {
  if (data.empty()) throw ArgumentError("empty dataset");
  if (model.p2() == 0) throw ArgumentError("integrative estimator requires a confounding model (p2 > 0)");
  if (static_cast<std::size_t>(psi_init.p1()) != model.p1() || static_cast<std::size_t>(psi_init.p2()) != model.p2())
    throw ArgumentError("initial psi does not match the structural model");
  if (!psi_init.stacked().allFinite()) throw ArgumentError("initial psi is not finite");
  const auto p1 = static_cast<Eigen::Index>(model.p1());
  return newton_solve(
      psi_init.stacked(), p1,
      [&](const Vector& th) { return integrative_score_moments(data, model, PsiVector::from_stacked(th, p1), ws); },
      [&](const Vector&) { return integrative_mean_jacobian(data, model, ws); }, opts);
}

inline SolveReport solve_integrative(const Dataset& data, const StructuralModel& model, const NuisanceSet& nuis,
                                     const PsiVector& psi_init, const SolverOptions& opts = {}) {
  return solve_integrative(data, model, build_workspace(data, model, nuis), psi_init, opts);
}

/// Trial-only score S * tau_basis(x) k eps_H, averaged over all N records
/// (observational records contribute zero).
inline Vector rct_score(const UnitRecord& rec, const Vector& phi, const ScoreEntry& ws) {
  if (rec.s != 1) return Vector::Zero(ws.tau_b.size());
  return ws.tau_b * (ws.k * (rec.y - rec.a * ws.tau_b.dot(phi) - ws.mu));
}

inline Matrix rct_jacobian(const UnitRecord& rec, const ScoreEntry& ws) {
  if (rec.s != 1) return Matrix::Zero(ws.tau_b.size(), ws.tau_b.size());
  return -(ws.k * rec.a) * ws.tau_b * ws.tau_b.transpose();
}

struct TrialWorkspace {
  std::vector<const UnitRecord*> records;
  std::vector<ScoreEntry> entries;
};

inline TrialWorkspace build_trial_workspace(const Dataset& data, const StructuralModel& model, const NuisanceSet& nuis) {
  TrialWorkspace tw;
  for (const auto& r : data) {
    if (r.s != 1) continue;
    tw.records.push_back(&r);
    tw.entries.push_back(make_score_entry(r, model, nuis));
  }
  return tw;
}

inline SolveReport solve_rct(const Dataset& data, const StructuralModel& model, const NuisanceSet& nuis,
                             const Vector& phi_init, const SolverOptions& opts = {}) {
  if (static_cast<std::size_t>(phi_init.size()) != model.p1()) throw ArgumentError("phi_init does not match tau basis");
  const TrialWorkspace tw = build_trial_workspace(data, model, nuis);
  if (tw.records.empty()) throw ArgumentError("trial-only estimator needs trial records");
  int arms[2] = {0, 0};
  for (const auto* r : tw.records) ++arms[r->a];
  if (arms[0] == 0 || arms[1] == 0) throw ArgumentError("trial sample must contain both arms");
  const auto p1 = static_cast<Eigen::Index>(model.p1());
  const double n = static_cast<double>(tw.records.size());
  auto score = [&](const Vector& phi) {
    ScoreMoments m{Vector::Zero(p1), 0.0};
    for (std::size_t i = 0; i < tw.records.size(); ++i) {
      const Vector s = rct_score(*tw.records[i], phi, tw.entries[i]);
      m.mean += s;
      m.rms += s.squaredNorm();
    }
    m.mean /= n;
    m.rms = std::sqrt(m.rms / n);
    return m;
  };
  auto jac = [&](const Vector&) {
    Matrix j = Matrix::Zero(p1, p1);
    for (std::size_t i = 0; i < tw.records.size(); ++i) j += rct_jacobian(*tw.records[i], tw.entries[i]);
    return Matrix(j / n);
  };
  return newton_solve(phi_init, p1, score, jac, opts);
}

/// IPW-adjusted outcome regression on the pooled sample. Assumes no
/// unmeasured confounding; kept as a benchmark.
inline Vector meta_estimate(const Dataset& data, const StructuralModel& model, const PropensityModel& e_fit,
                            std::vector<std::string>* warnings = nullptr) {
  if (data.empty()) throw ArgumentError("empty dataset");
  std::vector<const UnitRecord*> recs;
  Vector y_adj(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    const double e = e_fit(r.x, r.s);
    y_adj(static_cast<Eigen::Index>(i)) = r.a * r.y / e - (1 - r.a) * r.y / (1.0 - e);
    recs.push_back(&r);
  }
  auto sol = linalg::penalized_least_squares(model.tau_basis.design(recs), y_adj, 0.0);
  if (sol.ill_conditioned && warnings) warnings->push_back("meta estimator: singular design, ridge-stabilized");
  return sol.coef;
}

}  // namespace hte
