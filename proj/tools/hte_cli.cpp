// hte: command-line front end (fit, gof, simulate).

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hte/errors.hpp"
#include "hte/io.hpp"

namespace {

using hte::io::Json;

// Options set on the command line, written as a partial config document.
struct FitFlags {
  std::string config, data, s, a, y, output, curve_csv;
  std::vector<std::string> covariates, tau, lambda, gof_tau, gof_lambda;
  int knots = 0, degree = 0, max_iter = 0, refit_passes = 0;
  double ridge = 0, clip_e = 0, trial_known = 0, tol = 0, records_per_term = 0;
  bool no_rct = false, no_meta = false, efficient = false;
  std::uint64_t seed = 0;
};

void add_fit_flags(CLI::App* cmd, FitFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file; its values override flags");
  cmd->add_option("--data", f.data, "input CSV");
  cmd->add_option("--s", f.s, "source column (1 = trial)");
  cmd->add_option("--a", f.a, "treatment column");
  cmd->add_option("--y", f.y, "outcome column");
  cmd->add_option("--covariates", f.covariates, "covariate columns")->delimiter(',');
  cmd->add_option("--tau", f.tau, "treatment-effect terms, e.g. 1,age,age^2")->delimiter(',');
  cmd->add_option("--lambda", f.lambda, "confounding-function terms")->delimiter(',');
  cmd->add_option("--knots", f.knots, "interior spline knots per covariate for nuisance fits");
  cmd->add_option("--degree", f.degree, "nuisance spline degree (1 or 3)");
  cmd->add_option("--records-per-term", f.records_per_term, "per-cell flexibility budget (0 disables)");
  cmd->add_option("--refit-passes", f.refit_passes, "outcome-mean/variance refits at the estimate");
  cmd->add_option("--ridge", f.ridge, "relative ridge for nuisance regressions");
  cmd->add_option("--clip-e", f.clip_e, "propensity clipping bound");
  cmd->add_option("--trial-known", f.trial_known, "known trial randomization probability");
  cmd->add_option("--tol", f.tol, "solver tolerance");
  cmd->add_option("--max-iter", f.max_iter, "solver iteration cap");
  cmd->add_flag("--no-rct", f.no_rct, "skip the trial-only estimator");
  cmd->add_flag("--no-meta", f.no_meta, "skip the meta comparator");
  cmd->add_option("--gof-tau", f.gof_tau, "alternative tau terms for the goodness-of-fit test")->delimiter(',');
  cmd->add_option("--gof-lambda", f.gof_lambda, "alternative lambda terms")->delimiter(',');
  cmd->add_flag("--gof-efficient", f.efficient, "weight extra moments by the efficient multiplier");
  cmd->add_option("--output,-o", f.output, "result JSON path (default: stdout)");
  cmd->add_option("--curve-csv", f.curve_csv, "write the tau curve as CSV");
  cmd->add_option("--seed", f.seed, "seed recorded in the result");
}

Json flags_json(const CLI::App* cmd, const FitFlags& f) {
  Json j = Json::object();
  auto set = [&](const char* flag, auto&& assign) {
    if (cmd->count(flag)) assign();
  };
  set("--data", [&] { j["data_path"] = f.data; });
  set("--s", [&] { j["columns"]["s"] = f.s; });
  set("--a", [&] { j["columns"]["a"] = f.a; });
  set("--y", [&] { j["columns"]["y"] = f.y; });
  set("--covariates", [&] { j["columns"]["covariates"] = f.covariates; });
  set("--tau", [&] { j["tau_terms"] = f.tau; });
  set("--lambda", [&] { j["lambda_terms"] = f.lambda; });
  set("--knots", [&] { j["nuisance"]["knots"] = f.knots; });
  set("--degree", [&] { j["nuisance"]["degree"] = f.degree; });
  set("--records-per-term", [&] { j["nuisance"]["records_per_term"] = f.records_per_term; });
  set("--refit-passes", [&] { j["nuisance"]["refit_passes"] = f.refit_passes; });
  set("--ridge", [&] { j["nuisance"]["ridge"] = f.ridge; });
  set("--clip-e", [&] { j["nuisance"]["clip_e"] = f.clip_e; });
  set("--trial-known", [&] { j["nuisance"]["trial_known"] = f.trial_known; });
  set("--tol", [&] { j["solver"]["tol"] = f.tol; });
  set("--max-iter", [&] { j["solver"]["max_iter"] = f.max_iter; });
  set("--no-rct", [&] { j["estimators"]["rct"] = false; });
  set("--no-meta", [&] { j["estimators"]["meta"] = false; });
  set("--gof-tau", [&] { j["gof"]["tau_terms"] = f.gof_tau; });
  set("--gof-lambda", [&] { j["gof"]["lambda_terms"] = f.gof_lambda; });
  set("--gof-efficient", [&] { j["gof"]["efficient_weighting"] = true; });
  set("--output", [&] { j["output_path"] = f.output; });
  set("--curve-csv", [&] { j["curve_csv"] = f.curve_csv; });
  set("--seed", [&] { j["seed"] = f.seed; });
  return j;
}

void print_summary(const hte::io::ResultDocument& doc) {
  auto& err = std::cerr;
  const auto& g = doc.diagnostics;
  err << "trial " << g.n_trial_treated + g.n_trial_control << " (treated " << g.n_trial_treated << "), observational "
      << g.n_obs_treated + g.n_obs_control << " (treated " << g.n_obs_treated << ")\n";
  err << "solver: " << g.iterations << " iterations, score norm " << g.score_norm
      << (g.converged ? "" : ", NOT CONVERGED") << "\n";
  if (g.fallback_used) err << "WARNING: integrative solve fell back to the preliminary estimate\n";
  for (const auto& w : g.warnings) err << "warning: " << w << "\n";
  for (const auto& c : doc.coefficients)
    err << "  " << c.block << "[" << c.label << "] = " << c.estimate << " (se " << c.se << ")\n";
  err << "  ate = " << doc.ate.estimate << " (se " << doc.ate.se << ")\n";
  if (doc.gof) err << "  gof T = " << doc.gof->t_stat << ", df " << doc.gof->df << ", p " << doc.gof->p_value << "\n";
}

void emit(const hte::io::ResultDocument& doc) {
  hte::io::write_outputs(doc);
  if (doc.config.output_path.empty()) std::cout << hte::io::serialize(doc);
  print_summary(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Integrative heterogeneous treatment effect estimation from trial and observational data"};
  app.set_version_flag("--version", std::string(hte::kVersion));
  app.require_subcommand(1);

  FitFlags fit;
  CLI::App* fit_cmd = app.add_subcommand("fit", "estimate tau and lambda, standard errors, ATE and curve");
  add_fit_flags(fit_cmd, fit);

  std::string saved_path, gof_out;
  std::vector<std::string> alt_tau, alt_lambda;
  bool gof_efficient = false;
  CLI::App* gof_cmd = app.add_subcommand("gof", "goodness-of-fit test on a saved fit");
  gof_cmd->add_option("--fit", saved_path, "result JSON written by `fit`")->required();
  gof_cmd->add_option("--tau", alt_tau, "alternative tau terms")->delimiter(',');
  gof_cmd->add_option("--lambda", alt_lambda, "alternative lambda terms")->delimiter(',');
  gof_cmd->add_flag("--efficient", gof_efficient, "weight extra moments by the efficient multiplier");
  gof_cmd->add_option("--output,-o", gof_out, "updated result JSON path (default: stdout)");

  std::string sim_config, setting, variant, sim_out, table_out;
  std::size_t reps = 0, n = 0, m = 0;
  std::uint64_t sim_seed = 0;
  unsigned threads = 0;
  CLI::App* sim_cmd = app.add_subcommand("simulate", "Monte Carlo study on the two-source design");
  sim_cmd->add_option("--config", sim_config, "JSON config file; its values override flags");
  sim_cmd->add_option("--setting", setting, "1, 2 or custom");
  sim_cmd->add_option("--reps", reps, "replicates");
  sim_cmd->add_option("--seed", sim_seed, "64-bit seed");
  sim_cmd->add_option("--threads", threads, "worker threads (0: all cores)");
  sim_cmd->add_option("--n", n, "trial size");
  sim_cmd->add_option("--m", m, "observational size");
  sim_cmd->add_option("--variant", variant, "table or text");
  sim_cmd->add_option("--output,-o", sim_out, "summary JSON path");
  sim_cmd->add_option("--table", table_out, "text table path");
  std::string dump_path;
  std::uint64_t dump_rep = 0;
  sim_cmd->add_option("--dump", dump_path, "write one replicate as CSV instead of running the study");
  sim_cmd->add_option("--dump-rep", dump_rep, "replicate index for --dump");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*fit_cmd) {
      Json j = flags_json(fit_cmd, fit);
      if (!fit.config.empty()) j.merge_patch(hte::io::load_json_file(fit.config));
      const auto cfg = hte::io::analysis_config_from_json(j);
      emit(hte::io::run_fit(cfg));
    } else if (*gof_cmd) {
      const auto saved = hte::io::parse_result(hte::io::load_json_file(saved_path).dump());
      hte::io::GofSpec spec{alt_tau, alt_lambda, gof_efficient};
      auto doc = hte::io::run_gof_from_saved(saved, spec);
      doc.config.output_path = gof_out;
      doc.config.curve_csv.clear();
      emit(doc);
    } else if (*sim_cmd) {
      Json j = Json::object();
      if (sim_cmd->count("--setting")) j["setting"] = setting;
      if (sim_cmd->count("--reps")) j["reps"] = reps;
      if (sim_cmd->count("--seed")) j["seed"] = sim_seed;
      if (sim_cmd->count("--threads")) j["threads"] = threads;
      if (sim_cmd->count("--n")) j["n"] = n;
      if (sim_cmd->count("--m")) j["m"] = m;
      if (sim_cmd->count("--variant")) j["variant"] = variant;
      if (sim_cmd->count("--output")) j["output_path"] = sim_out;
      if (sim_cmd->count("--table")) j["table_path"] = table_out;
      if (!sim_config.empty()) j.merge_patch(hte::io::load_json_file(sim_config));
      const auto cfg = hte::io::simulate_config_from_json(j);
      if (!dump_path.empty()) {
        const auto data = hte::sim::generate_replicate(cfg.sim, dump_rep);
        hte::io::ColumnRoles roles;
        roles.covariates = hte::io::sim_covariate_names();
        hte::io::write_csv(dump_path, data, roles);
        std::cerr << hte::io::describe_counts(data) << "\n";
        return 0;
      }
      const auto out = hte::io::run_simulate(cfg);
      std::cout << out.table;
      if (out.summary.fallbacks || out.summary.failures)
        std::cerr << "note: " << out.summary.fallbacks << " fallbacks, " << out.summary.failures << " failures\n";
    }
  } catch (const hte::ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const hte::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
