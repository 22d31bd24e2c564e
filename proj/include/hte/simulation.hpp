#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"
#include "hte/inference.hpp"
#include "hte/nuisance.hpp"
#include "hte/pipeline.hpp"
#include "hte/rng.hpp"

namespace hte::sim {

inline constexpr std::size_t kDim = 5;

/// Two readings of the simulation design. `table` uses
/// tau(x) = 1 + x1 + x1^2 - x2 - x2^2 and U | A, X ~ N((2A-1) x'beta / 2, 1),
/// which reproduces every published table cell; `text` uses
/// tau(x) = 1 + x1 + x1^2 + x2 + x2^2 and U | A, X ~ N((2A-1) x'beta, 1).
enum class DgpVariant { table, text };

enum class Estimator { integrative, rct, meta };

inline const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::integrative: return "integrative";
    case Estimator::rct: return "rct";
    case Estimator::meta: return "meta";
  }
  return "?";
}

inline const char* to_string(DgpVariant v) { return v == DgpVariant::table ? "table" : "text"; }

/// Half the mean shift of U between arms; lambda(x) = 2 * scale * x'beta.
inline double confounding_scale(DgpVariant v) { return v == DgpVariant::table ? 0.5 : 1.0; }

inline double true_tau(std::span<const double> x, DgpVariant v) {
  const double sign = v == DgpVariant::table ? -1.0 : 1.0;
  return 1.0 + x[0] + x[0] * x[0] + sign * (x[1] + x[1] * x[1]);
}

/// E[tau(X)] under X ~ N(0, I).
inline double true_tau0(DgpVariant v) { return v == DgpVariant::table ? 1.0 : 3.0; }

inline double linear_index(std::span<const double> x, const std::vector<double>& beta) {
  double s = 0.0;
  for (std::size_t j = 0; j < beta.size(); ++j) s += x[j] * beta[j];
  return s;
}

inline double true_lambda(std::span<const double> x, const std::vector<double>& beta, DgpVariant v) {
  return 2.0 * confounding_scale(v) * linear_index(x, beta);
}

inline double obs_propensity(std::span<const double> x) {
  double s = 0.0;
  for (std::size_t j = 0; j < kDim; ++j) s += x[j];
  return expit(-s);
}

struct Probe {
  std::string name;
  std::vector<double> x;
};

/// tau at (x1, x2) with x3..x5 = 0, in the published table order.
inline std::vector<Probe> default_probes() {
  std::vector<Probe> out;
  auto add = [&](double x1, double x2) {
    std::ostringstream os;
    os << "tau(" << x1 << "," << x2 << ")";
    out.push_back({os.str(), {x1, x2, 0.0, 0.0, 0.0}});
  };
  for (double v : {-3.0, -1.5, 1.5, 3.0}) add(v, 0.0);
  add(0.0, 0.0);
  for (double v : {-3.0, -1.5, 1.5, 3.0}) add(0.0, v);
  return out;
}

inline StructuralModel default_model() {
  StructuralModel m;
  m.tau_basis.terms = {BasisTerm::constant(), BasisTerm::linear(0), BasisTerm::power(0, 2), BasisTerm::linear(1),
                       BasisTerm::power(1, 2)};
  for (std::size_t j = 0; j < kDim; ++j) m.lambda_basis.terms.push_back(BasisTerm::linear(j));
  return m;
}

struct EstimatorSet {
  bool integrative = true;
  bool rct = true;
  bool meta = true;
};

struct SimConfig {
  std::string label = "custom";
  std::size_t n = 300;
  std::size_t m = 5000;
  std::vector<double> beta = std::vector<double>(kDim, 0.0);
  std::size_t reps = 200;
  std::uint64_t seed = 1;
  std::vector<Probe> probes = default_probes();
  EstimatorSet estimators;
  DgpVariant variant = DgpVariant::table;
  unsigned threads = 0;  // 0: hardware concurrency
  StructuralModel model = default_model();
  FitOptions fit = [] {
    FitOptions f;
    f.nuisance.trial_known = 0.5;
    // additive linear nuisance fits
    f.nuisance.knots = 0;
    f.nuisance.clip_e = 0.001;
    return f;
  }();
  // Optional over-identification test per replicate.
  std::optional<BasisSpec> gof_alt_tau;
  std::optional<BasisSpec> gof_alt_lambda;
  double gof_alpha = 0.05;

  void validate() const {
    if (n < 20 || m < 20) throw ArgumentError("simulation needs n >= 20 and m >= 20");
    if (reps < 1) throw ArgumentError("simulation needs reps >= 1");
    if (beta.size() != kDim) throw ArgumentError("beta must have 5 components");
    for (const auto& p : probes)
      if (p.x.size() != kDim) throw ArgumentError("probe '" + p.name + "' must have 5 components");
    if (!estimators.integrative && !estimators.rct && !estimators.meta)
      throw ArgumentError("no estimator requested");
  }
};

/// Setting 1 (beta = 0) or Setting 2 (beta = 1).
inline SimConfig study_setting(int setting) {
  if (setting != 1 && setting != 2) throw ArgumentError("setting must be 1 or 2");
  SimConfig cfg;
  cfg.label = "setting" + std::to_string(setting);
  cfg.beta.assign(kDim, setting == 1 ? 0.0 : 1.0);
  return cfg;
}

/// True (phi, lam) of the default structural model under cfg.
inline PsiVector true_psi(const SimConfig& cfg) {
  PsiVector psi;
  const double sign = cfg.variant == DgpVariant::table ? -1.0 : 1.0;
  psi.phi = Vector(5);
  psi.phi << 1.0, 1.0, 1.0, sign, sign;
  psi.lam = Vector(static_cast<Eigen::Index>(kDim));
  for (std::size_t j = 0; j < kDim; ++j)
    psi.lam(static_cast<Eigen::Index>(j)) = 2.0 * confounding_scale(cfg.variant) * cfg.beta[j];
  return psi;
}

inline Dataset generate_replicate(const SimConfig& cfg, std::uint64_t rep_index) {
  Philox4x32 engine(cfg.seed, rep_index);
  Draws<Philox4x32> draw(engine);
  const double scale = confounding_scale(cfg.variant);
  Dataset data(kDim);
  auto covariates = [&] {
    std::vector<double> x(kDim);
    for (auto& v : x) v = draw.normal();
    return x;
  };
  auto sum = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s;
  };
  for (std::size_t i = 0; i < cfg.n; ++i) {
    UnitRecord r;
    r.s = 1;
    r.x = covariates();
    r.a = draw.bernoulli(0.5);
    r.y = r.a * true_tau(r.x, cfg.variant) + sum(r.x) + draw.normal();
    data.add(std::move(r));
  }
  for (std::size_t i = 0; i < cfg.m; ++i) {
    UnitRecord r;
    r.s = 0;
    r.x = covariates();
    r.a = draw.bernoulli(obs_propensity(r.x));
    const double u = draw.normal((2 * r.a - 1) * scale * linear_index(r.x, cfg.beta), 1.0);
    r.y = r.a * true_tau(r.x, cfg.variant) + sum(r.x) + u + draw.normal();
    data.add(std::move(r));
  }
  return data;
}

/// The data-generating nuisance functions: e, mu, sigma^2 and E[Y|A,X,S].
inline NuisanceSet true_nuisances(const SimConfig& cfg) {
  NuisanceSet nuis;
  const auto beta = cfg.beta;
  const auto variant = cfg.variant;
  const double scale = confounding_scale(variant);
  auto sum = [](std::span<const double> x) {
    double s = 0.0;
    for (std::size_t j = 0; j < kDim; ++j) s += x[j];
    return s;
  };
  nuis.e.clip = cfg.fit.nuisance.clip_e;
  nuis.e.exact = [](std::span<const double> x, int s) { return s == 1 ? 0.5 : obs_propensity(x); };
  nuis.mu.exact = [=](std::span<const double> x, int s) {
    if (s == 1) return sum(x);
    return sum(x) + scale * linear_index(x, beta) * (2.0 * obs_propensity(x) - 1.0);
  };
  nuis.sigma2.lo = 1e-8;
  nuis.sigma2.hi = 1e8;
  nuis.sigma2.exact = [](int, std::span<const double>, int s) { return s == 1 ? 1.0 : 2.0; };
  nuis.cond_y.exact = [=](std::span<const double> x, int a, int s) {
    double v = a * true_tau(x, variant) + sum(x);
    if (s == 0) v += (2 * a - 1) * scale * linear_index(x, beta);
    return v;
  };
  return nuis;
}

//---------------------------------------------------------------------------//
// Monte Carlo harness
//---------------------------------------------------------------------------//

/// Per-estimator outputs of one replicate, one slot per target (probes then
/// tau0). Variance estimates are NaN where the estimator has none.
struct EstimatorDraw {
  std::vector<double> estimate;
  std::vector<double> variance;
};

struct ReplicateResult {
  bool ok = false;
  bool fallback = false;
  std::string error;
  std::optional<EstimatorDraw> integrative, rct, meta;
  std::optional<double> gof_p_value;
  std::optional<GofResult> gof;
};

inline std::vector<std::string> target_names(const SimConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& p : cfg.probes) out.push_back(p.name);
  out.push_back("tau0");
  return out;
}

inline std::vector<double> target_truths(const SimConfig& cfg) {
  std::vector<double> out;
  for (const auto& p : cfg.probes) out.push_back(true_tau(p.x, cfg.variant));
  out.push_back(true_tau0(cfg.variant));
  return out;
}

inline EstimatorDraw draw_from_estimate(const SimConfig& cfg, const Dataset& data, const PsiEstimate& est) {
  EstimatorDraw d;
  for (const auto& p : cfg.probes) {
    const CurvePoint pt = tau_at(cfg.model, est, p.x);
    d.estimate.push_back(pt.tau);
    d.variance.push_back(pt.se * pt.se);
  }
  const AteEstimate ate = ate_estimate(data, cfg.model, est);
  d.estimate.push_back(ate.tau0_hat);
  d.variance.push_back(ate.se * ate.se);
  return d;
}

inline ReplicateResult run_replicate(const SimConfig& cfg, std::uint64_t rep_index) {
  ReplicateResult out;
  try {
    const Dataset data = generate_replicate(cfg, rep_index);
    FitOptions opts = cfg.fit;
    opts.rct = cfg.estimators.rct;
    opts.meta = cfg.estimators.meta;
    const FitResult fit = fit_pipeline(data, cfg.model, opts);
    out.fallback = fit.integrative.fallback_used || (fit.rct && fit.rct->fallback_used);
    if (cfg.estimators.integrative) out.integrative = draw_from_estimate(cfg, data, fit.estimate);
    if (fit.rct_estimate) out.rct = draw_from_estimate(cfg, data, *fit.rct_estimate);
    if (fit.meta) {
      EstimatorDraw d;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      for (const auto& p : cfg.probes) {
        d.estimate.push_back(cfg.model.tau_basis.evaluate(p.x).dot(*fit.meta));
        d.variance.push_back(nan);
      }
      double tau0 = 0.0;
      std::size_t m = 0;
      for (const auto& r : data) {
        if (r.s != 0) continue;
        tau0 += cfg.model.tau_basis.evaluate(r.x).dot(*fit.meta);
        ++m;
      }
      d.estimate.push_back(tau0 / static_cast<double>(m));
      d.variance.push_back(nan);
      out.meta = std::move(d);
    }
    if (cfg.gof_alt_tau || cfg.gof_alt_lambda) {
      out.gof = gof_test(data, cfg.model, fit.estimate, fit.nuis, cfg.gof_alt_tau.value_or(BasisSpec{}),
                         cfg.gof_alt_lambda.value_or(BasisSpec{}));
      out.gof_p_value = out.gof->p_value;
    }
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

/// Runs fn(rep) for rep in [0, reps) on `threads` workers; results are
/// stored by index so the caller can fold them in order.
template <class Result, class Fn>
std::vector<Result> parallel_replicates(std::size_t reps, unsigned threads, Fn&& fn) {
  std::vector<Result> results(reps);
  unsigned workers = threads ? threads : std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, reps));
  if (workers <= 1) {
    for (std::size_t r = 0; r < reps; ++r) results[r] = fn(r);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t r = next++; r < reps; r = next++) results[r] = fn(r);
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

struct CellSummary {
  std::string target;
  Estimator estimator = Estimator::integrative;
  double truth = 0.0;
  std::size_t count = 0;
  double mc_mean = 0.0;
  std::optional<double> mc_var;     // absent for a single replicate
  std::optional<double> mean_variance_estimate;
  std::optional<double> coverage;   // share of 95% intervals covering truth
};

struct McSummary {
  std::string label;
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t reps = 0;
  std::size_t completed = 0;
  std::size_t fallbacks = 0;
  std::size_t failures = 0;
  std::vector<CellSummary> cells;
  std::optional<double> gof_rejection_rate;
  std::optional<int> gof_df;
  double gof_alpha = 0.05;

  const CellSummary& cell(const std::string& target, Estimator e) const {
    for (const auto& c : cells)
      if (c.target == target && c.estimator == e) return c;
    throw ArgumentError("no summary cell for " + target + " / " + to_string(e));
  }
};

inline McSummary aggregate(const SimConfig& cfg, const std::vector<ReplicateResult>& results) {
  McSummary out;
  out.label = cfg.label;
  out.variant = to_string(cfg.variant);
  out.seed = cfg.seed;
  out.reps = results.size();
  out.gof_alpha = cfg.gof_alpha;
  for (const auto& r : results) {
    if (!r.ok) ++out.failures;
    else ++out.completed;
    if (r.ok && r.fallback) ++out.fallbacks;
  }
  const auto names = target_names(cfg);
  const auto truths = target_truths(cfg);
  auto summarize_estimator = [&](Estimator e, auto member) {
    for (std::size_t t = 0; t < names.size(); ++t) {
      CellSummary c;
      c.target = names[t];
      c.estimator = e;
      c.truth = truths[t];
      double sum = 0.0, ve_sum = 0.0;
      std::size_t covered = 0, ve_count = 0;
      std::vector<double> vals;
      for (const auto& r : results) {
        if (!r.ok || !(r.*member)) continue;
        const EstimatorDraw& d = *(r.*member);
        const double v = d.estimate[t];
        vals.push_back(v);
        sum += v;
        const double ve = d.variance[t];
        if (std::isfinite(ve)) {
          ve_sum += ve;
          ++ve_count;
          const double half = kCiMultiplier * std::sqrt(ve);
          if (std::abs(v - c.truth) <= half) ++covered;
        }
      }
      if (vals.empty()) return;
      c.count = vals.size();
      c.mc_mean = sum / static_cast<double>(c.count);
      if (c.count > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - c.mc_mean) * (v - c.mc_mean);
        c.mc_var = ss / static_cast<double>(c.count - 1);
      }
      if (ve_count == c.count) {
        c.mean_variance_estimate = ve_sum / static_cast<double>(ve_count);
        c.coverage = static_cast<double>(covered) / static_cast<double>(ve_count);
      }
      out.cells.push_back(std::move(c));
    }
  };
  summarize_estimator(Estimator::integrative, &ReplicateResult::integrative);
  summarize_estimator(Estimator::rct, &ReplicateResult::rct);
  summarize_estimator(Estimator::meta, &ReplicateResult::meta);
  std::size_t gof_n = 0, rejected = 0;
  for (const auto& r : results) {
    if (!r.ok || !r.gof) continue;
    ++gof_n;
    if (r.gof->p_value < cfg.gof_alpha) ++rejected;
    out.gof_df = r.gof->df;
  }
  if (gof_n) out.gof_rejection_rate = static_cast<double>(rejected) / static_cast<double>(gof_n);
  return out;
}

inline McSummary run_monte_carlo(const SimConfig& cfg) {
  cfg.validate();
  const auto results =
      parallel_replicates<ReplicateResult>(cfg.reps, cfg.threads, [&](std::size_t r) { return run_replicate(cfg, r); });
  McSummary out = aggregate(cfg, results);
  const std::size_t bad = out.fallbacks + out.failures;
  if (static_cast<double>(bad) > 0.05 * static_cast<double>(cfg.reps)) {
    std::ostringstream os;
    os << bad << " of " << cfg.reps << " replicates fell back or failed (limit 5%)";
    for (const auto& r : results)
      if (!r.ok) {
        os << "; first failure: " << r.error;
        break;
      }
    throw NumericalError(os.str());
  }
  return out;
}

//---------------------------------------------------------------------------//
// Table formatting
//---------------------------------------------------------------------------//

/// One row in published units: means x 1e-2, variances x 1e-3, coverage %.
struct TableRow {
  std::string target;
  std::string estimator;
  long mean_x100 = 0;
  std::optional<long> var_x1000;
  std::optional<long> ve_x1000;
  std::optional<double> coverage_pct;
};

inline std::vector<TableRow> summarize(const McSummary& table) {
  std::vector<TableRow> rows;
  for (const auto& c : table.cells) {
    TableRow r;
    r.target = c.target;
    r.estimator = to_string(c.estimator);
    r.mean_x100 = std::lround(c.mc_mean * 100.0);
    if (c.mc_var) r.var_x1000 = std::lround(*c.mc_var * 1000.0);
    if (c.mean_variance_estimate) r.ve_x1000 = std::lround(*c.mean_variance_estimate * 1000.0);
    if (c.coverage) r.coverage_pct = std::round(*c.coverage * 1000.0) / 10.0;
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string format_table(const McSummary& table) {
  std::ostringstream os;
  os << "# " << table.label << " (variant " << table.variant << ", seed " << table.seed << ", " << table.completed
     << "/" << table.reps << " replicates, " << table.fallbacks << " fallbacks)\n";
  os << std::left << std::setw(14) << "target" << std::setw(13) << "estimator" << std::right << std::setw(9)
     << "mean" << std::setw(10) << "var" << std::setw(10) << "VE" << std::setw(8) << "CVG" << "\n";
  for (const auto& r : summarize(table)) {
    os << std::left << std::setw(14) << r.target << std::setw(13) << r.estimator << std::right << std::setw(9)
       << r.mean_x100 << std::setw(10) << (r.var_x1000 ? std::to_string(*r.var_x1000) : "-") << std::setw(10)
       << (r.ve_x1000 ? std::to_string(*r.ve_x1000) : "-") << std::setw(8);
    if (r.coverage_pct) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(1) << *r.coverage_pct;
      os << c.str();
    } else {
      os << "-";
    }
    os << "\n";
  }
  if (table.gof_rejection_rate) {
    os << "gof rejection rate at alpha=" << table.gof_alpha << ": " << std::fixed << std::setprecision(3)
       << *table.gof_rejection_rate << " (df " << table.gof_df.value_or(0) << ")\n";
  }
  return os.str();
}

}  // namespace hte::sim
