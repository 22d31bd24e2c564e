#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hte/estimators.hpp"
#include "hte/inference.hpp"
#include "hte/simulation.hpp"
#include "support.hpp"

using namespace hte;

namespace {

NuisanceSet heteroscedastic_nuisances() {
  return testing::exact_nuisances(
      [](std::span<const double> x, int s) { return s == 1 ? 0.5 : expit(0.3 * x[0] - 0.2 * x[1]); },
      [](std::span<const double> x, int s) { return x[0] + 0.5 * s; },
      [](int a, std::span<const double> x, int s) { return 0.5 + 0.3 * a + 0.2 * x[0] * x[0] + 0.4 * s; });
}

sim::SimConfig text_setting(int setting) {
  auto cfg = sim::study_setting(setting);
  cfg.variant = sim::DgpVariant::text;
  return cfg;
}

}  // namespace

TEST_CASE("analytic score Jacobian matches finite differences") {
  const auto model = sim::default_model();
  const Dataset data = testing::random_dataset(100, 5, 21);
  const NuisanceSet nuis = heteroscedastic_nuisances();
  const ScoreWorkspace ws = build_workspace(data, model, nuis);
  Vector theta(10);
  theta << 0.4, -0.3, 0.2, 0.1, -0.5, 0.3, 0.7, -0.2, 0.05, 1.1;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Matrix jac = score_jacobian(data[i], model, ws[i]);
    Matrix fd(10, 10);
    const double h = 1e-6;
    for (Eigen::Index j = 0; j < 10; ++j) {
      Vector up = theta, dn = theta;
      up(j) += h;
      dn(j) -= h;
      fd.col(j) = (efficient_score(data[i], model, PsiVector::from_stacked(up, 5), ws[i]) -
                   efficient_score(data[i], model, PsiVector::from_stacked(dn, 5), ws[i])) /
                  (2 * h);
    }
    CHECK((jac - fd).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, jac.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("trial records leave the lambda block untouched") {
  const auto model = sim::default_model();
  const Dataset data = testing::random_dataset(40, 5, 2);
  const NuisanceSet nuis = heteroscedastic_nuisances();
  const ScoreWorkspace ws = build_workspace(data, model, nuis);
  PsiVector psi{Vector::Constant(5, 0.3), Vector::Constant(5, -0.4)};
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].s != 1) continue;
    CHECK(efficient_score(data[i], model, psi, ws[i]).tail(5).isZero());
    const Matrix j = score_jacobian(data[i], model, ws[i]);
    CHECK(j.bottomRows(5).isZero());
    CHECK(j.rightCols(5).isZero());
  }
}

TEST_CASE("multiplier reduces to (a - e) / sigma^2 under constant variance") {
  const auto model = sim::default_model();
  const Dataset data = testing::random_dataset(60, 5, 3);
  const double c = 2.5;
  const NuisanceSet nuis = testing::exact_nuisances(
      [](std::span<const double> x, int) { return expit(x[1]); }, [](std::span<const double>, int) { return 0.0; },
      [c](int, std::span<const double>, int) { return c; });
  const ScoreWorkspace ws = build_workspace(data, model, nuis);
  for (std::size_t i = 0; i < data.size(); ++i)
    CHECK(ws[i].k == doctest::Approx((data[i].a - expit(data[i].x[1])) / c));
}

TEST_CASE("solver takes no step from an exact root") {
  auto cfg = sim::study_setting(2);
  const Dataset data = sim::generate_replicate(cfg, 3);
  const NuisanceSet nuis = sim::true_nuisances(cfg);
  const SolveReport first = solve_integrative(data, cfg.model, nuis, sim::true_psi(cfg));
  REQUIRE(first.converged);
  CHECK(first.iterations >= 1);
  const SolveReport again = solve_integrative(data, cfg.model, nuis, first.psi_hat);
  CHECK(again.converged);
  CHECK(again.iterations == 0);
  CHECK(again.psi_hat == first.psi_hat);
}

TEST_CASE("solver input validation") {
  auto cfg = sim::study_setting(1);
  const Dataset data = sim::generate_replicate(cfg, 0);
  const NuisanceSet nuis = sim::true_nuisances(cfg);
  PsiVector bad{Vector::Zero(4), Vector::Zero(5)};
  CHECK_THROWS_AS(solve_integrative(data, cfg.model, nuis, bad), ArgumentError);
  PsiVector nan_psi = sim::true_psi(cfg);
  nan_psi.lam(2) = std::nan("");
  CHECK_THROWS_AS(solve_integrative(data, cfg.model, nuis, nan_psi), ArgumentError);
  StructuralModel no_lambda = cfg.model;
  no_lambda.lambda_basis.terms.clear();
  CHECK_THROWS_AS(solve_integrative(data, no_lambda, nuis, PsiVector{Vector::Zero(5), Vector()}), ArgumentError);
  SolverOptions capped;
  capped.max_iter = 0;
  const SolveReport rep = solve_integrative(data, cfg.model, nuis, PsiVector{Vector::Zero(5), Vector::Zero(5)}, capped);
  CHECK_FALSE(rep.converged);
}

TEST_CASE("preliminary estimate is exact under the true conditional means") {
  for (auto variant : {sim::DgpVariant::table, sim::DgpVariant::text}) {
    auto cfg = sim::study_setting(2);
    cfg.variant = variant;
    const Dataset data = sim::generate_replicate(cfg, 4);
    const NuisanceSet nuis = sim::true_nuisances(cfg);
    const PsiVector pre = preliminary_estimate(data, cfg.model, nuis.cond_y);
    const PsiVector truth = sim::true_psi(cfg);
    CHECK((pre.phi - truth.phi).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((pre.lam - truth.lam).cwiseAbs().maxCoeff() < 1e-9);
  }
  const PsiVector text = sim::true_psi(text_setting(2));
  CHECK(text.phi == Vector::Ones(5));
  CHECK(text.lam == Vector::Constant(5, 2.0));
}

TEST_CASE("preliminary estimate with an intercept-only effect") {
  StructuralModel m;
  m.tau_basis.terms = {BasisTerm::constant()};
  m.lambda_basis.terms = {BasisTerm::constant()};
  const Dataset data = testing::random_dataset(50, 2, 9);
  ConditionalOutcomeModel cond;
  cond.exact = [](std::span<const double> x, int a, int s) { return x[0] + a * (s == 1 ? 1.25 : 2.0); };
  const PsiVector pre = preliminary_estimate(data, m, cond);
  CHECK(pre.phi(0) == doctest::Approx(1.25));
  CHECK(pre.lam(0) == doctest::Approx(0.75));
  CHECK_THROWS_AS(preliminary_estimate(data.subset(0), m, cond), ArgumentError);
}

TEST_CASE("trial-only estimator ignores observational records") {
  auto cfg = sim::study_setting(2);
  const Dataset data = sim::generate_replicate(cfg, 6);
  const NuisanceSet nuis = sim::true_nuisances(cfg);
  const SolveReport full = solve_rct(data, cfg.model, nuis, Vector::Zero(5));
  const SolveReport trial = solve_rct(data.subset(1), cfg.model, nuis, Vector::Zero(5));
  REQUIRE(full.converged);
  CHECK((full.psi_hat.phi - trial.psi_hat.phi).norm() < 1e-10);
  CHECK(full.psi_hat.lam.size() == 0);
  CHECK_THROWS_AS(solve_rct(data.subset(0), cfg.model, nuis, Vector::Zero(5)), ArgumentError);
}

TEST_CASE("meta estimator on a single treated record") {
  StructuralModel m;
  m.tau_basis.terms = {BasisTerm::constant()};
  Dataset d(1);
  d.add({1, 1, 3.5, {0.0}});
  PropensityModel e;
  e.known[1] = 0.5;
  CHECK(meta_estimate(d, m, e)(0) == doctest::Approx(7.0));
}

TEST_CASE("efficient score has mean zero at the truth") {
  auto cfg = sim::study_setting(2);
  cfg.n = 20000;
  cfg.m = 20000;
  const Dataset data = sim::generate_replicate(cfg, 8);
  const NuisanceSet nuis = sim::true_nuisances(cfg);
  const ScoreWorkspace ws = build_workspace(data, cfg.model, nuis);
  const PsiVector psi = sim::true_psi(cfg);
  const auto p = static_cast<Eigen::Index>(cfg.model.p());
  Vector sum = Vector::Zero(p), sq = Vector::Zero(p);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector s = efficient_score(data[i], cfg.model, psi, ws[i]);
    sum += s;
    sq += s.cwiseProduct(s);
  }
  const double n = static_cast<double>(data.size());
  for (Eigen::Index j = 0; j < p; ++j) {
    const double mean = sum(j) / n;
    const double se = std::sqrt((sq(j) / n - mean * mean) / n);
    INFO("component " << j << " mean " << mean << " se " << se);
    CHECK(std::abs(mean) <= 4 * se);
  }
}

TEST_CASE("mean Jacobian has full rank on the simulation design") {
  auto cfg = sim::study_setting(1);
  const Dataset data = sim::generate_replicate(cfg, 1);
  const ScoreWorkspace ws = build_workspace(data, cfg.model, sim::true_nuisances(cfg));
  const Matrix j = integrative_mean_jacobian(data, cfg.model, ws);
  Eigen::FullPivLU<Matrix> lu(j);
  CHECK(lu.rank() == 10);

  StructuralModel dup = cfg.model;
  dup.tau_basis.terms.push_back(BasisTerm::linear(0, "x1 again"));
  const ScoreWorkspace ws2 = build_workspace(data, dup, sim::true_nuisances(cfg));
  CHECK(Eigen::FullPivLU<Matrix>(integrative_mean_jacobian(data, dup, ws2)).rank() == 10);
  CHECK_THROWS_AS(sandwich_covariance(data, dup, PsiVector{Vector::Zero(6), Vector::Zero(5)}, ws2), NumericalError);
}
