#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hte/rng.hpp"
#include "hte/simulation.hpp"
#include "support.hpp"

using namespace hte;

TEST_CASE("philox known-answer vectors") {
  using B = Philox4x32::Block;
  CHECK(Philox4x32::bijection({0, 0, 0, 0}, {0, 0}) == B{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(Philox4x32::bijection({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        B{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(Philox4x32::bijection({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        B{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("streams are reproducible and distinct") {
  Philox4x32 a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  bool differ_stream = false, differ_seed = false;
  for (int i = 0; i < 64; ++i) {
    const auto va = a(), vb = b(), vc = c(), vd = d();
    CHECK(va == vb);
    differ_stream |= va != vc;
    differ_seed |= va != vd;
  }
  CHECK(differ_stream);
  CHECK(differ_seed);
}

TEST_CASE("portable draws have the right moments") {
  Philox4x32 eng(3, 0);
  Draws<Philox4x32> draw(eng);
  const int n = 200000;
  double su = 0, sz = 0, sz2 = 0;
  int ones = 0;
  bool open_interval = true;
  for (int i = 0; i < n; ++i) {
    const double u = draw.uniform();
    open_interval &= u > 0.0 && u < 1.0;
    su += u;
    const double z = draw.normal();
    sz += z;
    sz2 += z * z;
    ones += draw.bernoulli(0.3);
  }
  CHECK(open_interval);
  CHECK(std::abs(su / n - 0.5) < 4 * std::sqrt(1.0 / 12 / n));
  CHECK(std::abs(sz / n) < 4 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(sz2 / n - 1.0) < 4 * std::sqrt(2.0 / n));
  CHECK(std::abs(ones / static_cast<double>(n) - 0.3) < 4 * std::sqrt(0.21 / n));
}

TEST_CASE("replicates are deterministic in (seed, index)") {
  auto cfg = sim::study_setting(2);
  const Dataset a = sim::generate_replicate(cfg, 5);
  const Dataset b = sim::generate_replicate(cfg, 5);
  const Dataset c = sim::generate_replicate(cfg, 6);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.counts().source(1) == 300);
  CHECK(a.counts().source(0) == 5000);
}

TEST_CASE("observational contrast carries the implied confounding function") {
  // Regress y - a tau(x) - sum(x) on (2a - 1) x within S = 0; the slope is
  // half of lambda's coefficients.
  for (auto variant : {sim::DgpVariant::table, sim::DgpVariant::text}) {
    auto cfg = sim::study_setting(2);
    cfg.variant = variant;
    cfg.beta = {1.0, -0.5, 0.25, 0.0, 2.0};
    cfg.n = 20;
    cfg.m = 100000;
    const Dataset data = sim::generate_replicate(cfg, 0);
    Matrix x(static_cast<Eigen::Index>(cfg.m), 5);
    Vector y(static_cast<Eigen::Index>(cfg.m));
    Eigen::Index row = 0;
    for (const auto& r : data) {
      if (r.s != 0) continue;
      double sum = 0;
      for (double v : r.x) sum += v;
      for (int j = 0; j < 5; ++j) x(row, j) = (2 * r.a - 1) * r.x[static_cast<std::size_t>(j)];
      y(row) = r.y - r.a * sim::true_tau(r.x, variant) - sum;
      ++row;
    }
    const Vector coef = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    const PsiVector truth = sim::true_psi(cfg);
    for (int j = 0; j < 5; ++j) CHECK(2 * coef(j) == doctest::Approx(truth.lam(j)).epsilon(0.03).scale(1.0));
    const std::vector<double> probe{0.5, 1.0, -1.0, 2.0, 0.3};
    CHECK(sim::true_lambda(probe, cfg.beta, variant) == doctest::Approx(eval_lambda(cfg.model, truth.lam, probe)));
  }
}

TEST_CASE("true nuisances are consistent with the generator") {
  auto cfg = sim::study_setting(2);
  const NuisanceSet nuis = sim::true_nuisances(cfg);
  const PsiVector psi = sim::true_psi(cfg);
  const std::vector<double> x{0.3, -0.7, 1.1, 0.0, -0.2};
  const double e = nuis.e(x, 0);
  // E[H | X, S=0]: the (a - e) lambda term averages out
  const double via_cond = e * nuis.cond_y(x, 1, 0) + (1 - e) * nuis.cond_y(x, 0, 0) - e * eval_tau(cfg.model, psi.phi, x);
  CHECK(nuis.mu(x, 0) == doctest::Approx(via_cond));
  CHECK(nuis.cond_y(x, 1, 1) - nuis.cond_y(x, 0, 1) == doctest::Approx(sim::true_tau(x, cfg.variant)));
  CHECK(nuis.cond_y(x, 1, 0) - nuis.cond_y(x, 0, 0) ==
        doctest::Approx(sim::true_tau(x, cfg.variant) + eval_lambda(cfg.model, psi.lam, x)));
}

TEST_CASE("a single replicate has no Monte Carlo variance") {
  auto cfg = sim::study_setting(1);
  cfg.reps = 1;
  cfg.threads = 1;
  const auto s = sim::run_monte_carlo(cfg);
  CHECK(s.completed == 1);
  const auto& c = s.cell("tau0", sim::Estimator::integrative);
  CHECK(c.count == 1);
  CHECK_FALSE(c.mc_var.has_value());
  CHECK(c.mean_variance_estimate.has_value());
  CHECK_FALSE(s.cell("tau0", sim::Estimator::meta).mean_variance_estimate.has_value());
}

TEST_CASE("table units") {
  sim::McSummary s;
  sim::CellSummary c;
  c.target = "tau(0,0)";
  c.mc_mean = 1.01;
  c.mc_var = 0.037;
  c.mean_variance_estimate = 0.0364;
  c.coverage = 0.951;
  s.cells.push_back(c);
  const auto rows = sim::summarize(s);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].mean_x100 == 101);
  CHECK(rows[0].var_x1000 == 37);
  CHECK(rows[0].ve_x1000 == 36);
  CHECK(rows[0].coverage_pct == doctest::Approx(95.1));
  CHECK(sim::format_table(s).find("95.1") != std::string::npos);
}

TEST_CASE("results do not depend on the thread count") {
  auto cfg = sim::study_setting(2);
  cfg.reps = 6;
  cfg.threads = 1;
  const auto one = sim::run_monte_carlo(cfg);
  cfg.threads = 3;
  const auto three = sim::run_monte_carlo(cfg);
  REQUIRE(one.cells.size() == three.cells.size());
  for (std::size_t i = 0; i < one.cells.size(); ++i) {
    CHECK(one.cells[i].mc_mean == three.cells[i].mc_mean);
    CHECK(one.cells[i].mc_var == three.cells[i].mc_var);
    CHECK(one.cells[i].mean_variance_estimate == three.cells[i].mean_variance_estimate);
  }
  CHECK(sim::format_table(one) == sim::format_table(three));
}

TEST_CASE("estimator ranking on Setting 2") {
  auto cfg = sim::study_setting(2);
  cfg.reps = 60;
  cfg.seed = 99;
  const auto s = sim::run_monte_carlo(cfg);
  CHECK(s.failures == 0);
  for (const auto& name : sim::target_names(cfg)) {
    const auto& i = s.cell(name, sim::Estimator::integrative);
    const auto& r = s.cell(name, sim::Estimator::rct);
    INFO(name);
    CHECK(*i.mc_var < *r.mc_var);
  }
  // integrative unbiased within Monte Carlo error, meta visibly biased somewhere
  double meta_worst = 0.0;
  for (const auto& name : sim::target_names(cfg)) {
    const auto& i = s.cell(name, sim::Estimator::integrative);
    const auto& m = s.cell(name, sim::Estimator::meta);
    INFO(name);
    CHECK(std::abs(i.mc_mean - i.truth) <= 4 * std::sqrt(*i.mc_var / static_cast<double>(i.count)));
    meta_worst = std::max(meta_worst, std::abs(m.mc_mean - m.truth) / std::sqrt(*m.mc_var / static_cast<double>(m.count)));
  }
  CHECK(meta_worst > 4.0);
}

TEST_CASE("configuration checks") {
  CHECK_THROWS_AS(sim::study_setting(3), ArgumentError);
  auto cfg = sim::study_setting(1);
  cfg.n = 5;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = sim::study_setting(1);
  cfg.beta = {1.0};
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = sim::study_setting(1);
  cfg.estimators = {false, false, false};
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("per-replicate goodness-of-fit summary") {
  auto cfg = sim::study_setting(2);
  cfg.reps = 10;
  BasisSpec alt;
  alt.terms = {BasisTerm::power(0, 3), BasisTerm::power(1, 3)};
  cfg.gof_alt_tau = alt;
  const auto s = sim::run_monte_carlo(cfg);
  REQUIRE(s.gof_rejection_rate.has_value());
  CHECK(*s.gof_df == 2);
  CHECK(*s.gof_rejection_rate >= 0.0);
  CHECK(*s.gof_rejection_rate <= 1.0);
}
