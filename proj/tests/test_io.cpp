#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "hte/io.hpp"
#include "support.hpp"

using namespace hte;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / ("hte_io_test_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string write_temp(const std::string& name, const std::string& text) {
  const fs::path p = scratch_dir() / name;
  std::ofstream(p) << text;
  return p.string();
}

io::ColumnRoles sim_roles() {
  io::ColumnRoles r;
  r.covariates = io::sim_covariate_names();
  return r;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ArgumentError& e) {
    return e.what();
  }
  return "";
}

io::AnalysisConfig setting2_config(const std::string& csv) {
  io::AnalysisConfig c;
  c.data_path = csv;
  c.columns = sim_roles();
  c.tau_terms = {"1", "x1", "x1^2", "x2", "x2^2"};
  c.lambda_terms = {"x1", "x2", "x3", "x4", "x5"};
  c.knots = 0;
  c.clip_e = 0.001;
  c.trial_known = 0.5;
  return c;
}

std::string setting2_csv() {
  static const std::string path = [] {
    const auto cfg = sim::study_setting(2);
    return write_temp("setting2.csv", io::to_csv(sim::generate_replicate(cfg, 0), sim_roles()));
  }();
  return path;
}

}  // namespace

TEST_CASE("csv errors name the row and column") {
  std::string text = "s,a,y,x1\n";
  for (int i = 1; i <= 20; ++i) text += std::string(i == 17 ? "1,2," : "1,0,") + "0.5,1.0\n";
  io::ColumnRoles roles;
  roles.covariates = {"x1"};
  const std::string msg = error_of([&] { io::load_csv_text(text, roles); });
  CHECK(msg.find("row 17") != std::string::npos);
  CHECK(msg.find("column 'a'") != std::string::npos);
  CHECK(msg.find("expected 0 or 1, got '2'") != std::string::npos);

  CHECK(error_of([&] { io::load_csv_text("s,a,y,x1\n", roles); }).find("empty dataset") != std::string::npos);
  CHECK(error_of([&] { io::load_csv_text("", roles); }).find("file is empty") != std::string::npos);
  CHECK(error_of([&] { io::load_csv_text("s,a,y\n1,0,2\n", roles); }).find("missing column 'x1'") !=
        std::string::npos);
  CHECK(error_of([&] { io::load_csv_text("s,a,y,x1\n1,0,abc,2\n", roles); }).find("non-numeric") !=
        std::string::npos);
  CHECK(error_of([&] { io::load_csv_text("s,a,y,x1\n1,0,2\n", roles); }).find("row 1 has 3 fields") !=
        std::string::npos);
  CHECK_THROWS_AS(io::load_csv("/nonexistent/file.csv", roles), ArgumentError);
}

TEST_CASE("csv tolerates BOM, CRLF, quotes, extra columns and blank lines") {
  io::ColumnRoles roles;
  roles.covariates = {"age"};
  const Dataset d = io::load_csv_text("\xEF\xBB\xBFid,\"s\",a,y,age\r\n7,1,0,2.5,40\r\n\r\n8,0,1,-1e-3,+33\r\n", roles);
  REQUIRE(d.size() == 2);
  CHECK(d[0].y == 2.5);
  CHECK(d[1].y == -1e-3);
  CHECK(d[1].x[0] == 33.0);
}

TEST_CASE("simulated replicate round-trips through csv") {
  const auto cfg = sim::study_setting(2);
  const Dataset orig = sim::generate_replicate(cfg, 0);
  const Dataset back = io::load_csv(setting2_csv(), sim_roles());
  CHECK(back.size() == 5300);
  CHECK(back.counts().source(1) == 300);
  CHECK(back.counts().source(0) == 5000);
  CHECK(back == orig);
  CHECK(io::describe_counts(back).find("5300 rows") == 0);
}

TEST_CASE("analysis config validation and round trip") {
  io::AnalysisConfig c = setting2_config("data.csv");
  c.probes = {{"p", {1, 0, 0, 0, 0}}};
  c.curve = io::CurveGrid{"x1", -2, 2, 5};
  c.gof.tau_terms = {"x1^3"};
  CHECK_NOTHROW(c.validate());
  const io::AnalysisConfig back = io::analysis_config_from_json(io::to_json(c));
  CHECK(back == c);

  io::Json bad = io::to_json(c);
  bad["colour"] = 1;
  CHECK_THROWS_AS(io::analysis_config_from_json(bad), ArgumentError);
  bad = io::to_json(c);
  bad["nuisance"]["knotz"] = 3;
  CHECK_THROWS_AS(io::analysis_config_from_json(bad), ArgumentError);
  bad = io::to_json(c);
  bad["solver"]["tol"] = "small";
  CHECK_THROWS_AS(io::analysis_config_from_json(bad), ArgumentError);

  io::AnalysisConfig no_lambda = c;
  no_lambda.lambda_terms.clear();
  CHECK(error_of([&] { no_lambda.validate(); }).find("lambda_terms") != std::string::npos);
  io::AnalysisConfig clash = c;
  clash.columns.covariates.push_back("y");
  CHECK_THROWS_AS(clash.validate(), ArgumentError);
  io::AnalysisConfig probe = c;
  probe.probes[0].x.pop_back();
  CHECK_THROWS_AS(probe.validate(), ArgumentError);
  io::AnalysisConfig unknown_term = c;
  unknown_term.tau_terms.push_back("age");
  CHECK_THROWS_AS(unknown_term.model(), ArgumentError);
}

TEST_CASE("fit on a Setting 2 replicate") {
  io::AnalysisConfig c = setting2_config(setting2_csv());
  c.gof.tau_terms = {"x1^3", "x2^3"};
  c.gof.lambda_terms = {"x3^2"};
  c.curve = io::CurveGrid{"x1", -3, 3, 7};
  c.probes = {{"tau(-3,0)", {-3, 0, 0, 0, 0}}};
  const io::ResultDocument doc = io::run_fit(c);
  REQUIRE(doc.coefficients.size() == 10);
  const double truth[5] = {1, 1, 1, -1, -1};
  for (int j = 0; j < 5; ++j) {
    const auto& co = doc.coefficients[static_cast<std::size_t>(j)];
    INFO(co.label << " " << co.estimate << " se " << co.se);
    CHECK(co.block == "tau");
    CHECK(std::abs(co.estimate - truth[j]) <= 3 * co.se);
  }
  CHECK(doc.coefficients[5].block == "lambda");
  CHECK(doc.coefficients[5].label == "x1");
  REQUIRE(doc.gof.has_value());
  CHECK(doc.gof->df == 3);
  CHECK(doc.curve.size() == 8);
  CHECK(doc.curve[0].name == "tau(-3,0)");
  CHECK(doc.rct_coefficients.size() == 5);
  CHECK(doc.meta_coefficients.size() == 5);
  CHECK(doc.diagnostics.converged);
  CHECK(doc.diagnostics.n_trial_treated + doc.diagnostics.n_trial_control == 300);
  CHECK(doc.covariance.size() == 10);

  SUBCASE("result document round trip") {
    const io::ResultDocument back = io::parse_result(io::serialize(doc));
    CHECK(back == doc);
    CHECK(io::serialize(back) == io::serialize(doc));
  }
  SUBCASE("gof on the saved fit") {
    io::ResultDocument saved = doc;
    saved.gof.reset();
    const io::ResultDocument g = io::run_gof_from_saved(saved, c.gof);
    REQUIRE(g.gof.has_value());
    CHECK(g.gof->t_stat == doctest::Approx(doc.gof->t_stat).epsilon(1e-12));
    saved.coefficients[0].estimate += 0.5;
    CHECK_THROWS_AS(io::run_gof_from_saved(saved, c.gof), ArgumentError);
    CHECK_THROWS_AS(io::run_gof_from_saved(doc, io::GofSpec{}), ArgumentError);
  }
  SUBCASE("curve csv") {
    const std::string csv = io::curve_csv(doc);
    CHECK(csv.rfind("name,x1,x2,x3,x4,x5,tau,se,ci_lo,ci_hi\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
  }
}

TEST_CASE("fit writes requested outputs") {
  io::AnalysisConfig c = setting2_config(setting2_csv());
  c.output_path = (scratch_dir() / "fit.json").string();
  c.curve_csv = (scratch_dir() / "curve.csv").string();
  c.curve = io::CurveGrid{"x2", -1, 1, 3};
  const io::ResultDocument doc = io::run_fit(c);
  io::write_outputs(doc);
  CHECK(io::parse_result(io::detail::read_file(c.output_path)) == doc);
  CHECK(fs::exists(c.curve_csv));
}

TEST_CASE("simulate config parsing") {
  CHECK_THROWS_AS(io::simulate_config_from_json({{"setting", "3"}}), ArgumentError);
  CHECK_THROWS_AS(io::simulate_config_from_json({{"setting", "custom"}}), ArgumentError);
  CHECK_THROWS_AS(io::simulate_config_from_json({{"setting", 1}, {"beta", {1, 1, 1, 1, 1}}}), ArgumentError);
  CHECK_THROWS_AS(io::simulate_config_from_json({{"setting", 1}, {"variant", "odd"}}), ArgumentError);
  CHECK_THROWS_AS(io::simulate_config_from_json({{"setting", 1}, {"reps", 0}}), ArgumentError);
  CHECK_THROWS_AS(io::simulate_config_from_json({{"setting", 1}, {"estimators", {"bogus"}}}), ArgumentError);
  const auto c = io::simulate_config_from_json(
      {{"setting", "custom"}, {"beta", {0.5, 0, 0, 0, 0}}, {"variant", "text"}, {"gof", {{"tau_terms", {"x1^3"}}}}});
  CHECK(c.sim.beta[0] == 0.5);
  CHECK(c.sim.variant == sim::DgpVariant::text);
  CHECK(c.sim.gof_alt_tau->size() == 1);
  const auto two = io::simulate_config_from_json({{"setting", 2}});
  CHECK(two.sim.beta == std::vector<double>(5, 1.0));
}

TEST_CASE("simulate output is byte-identical across reruns and thread counts") {
  io::Json j = {{"setting", "2"}, {"reps", 4}, {"seed", 17}, {"threads", 1}};
  const auto a = io::run_simulate(io::simulate_config_from_json(j));
  const auto b = io::run_simulate(io::simulate_config_from_json(j));
  j["threads"] = 2;
  const auto c = io::run_simulate(io::simulate_config_from_json(j));
  CHECK(a.json == b.json);
  CHECK(a.json == c.json);
  CHECK(a.table == c.table);
  const io::Json parsed = io::Json::parse(a.json);
  CHECK(parsed["summary"]["completed"] == 4);
  CHECK_FALSE(parsed["config"].contains("threads"));
}
