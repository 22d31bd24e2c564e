#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hte/core_model.hpp"
#include "hte/errors.hpp"
#include "hte/inference.hpp"
#include "hte/pipeline.hpp"
#include "hte/simulation.hpp"

namespace hte::io {

using Json = nlohmann::ordered_json;

//---------------------------------------------------------------------------//
// JSON helpers
//---------------------------------------------------------------------------//

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ArgumentError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ArgumentError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ArgumentError("key '" + std::string(key) + "' in " + where + " has the wrong type");
  }
}

template <class T>
void read(const Json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read(j, key, v, where);
  out = v;
}

template <class T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

inline Json parse_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ArgumentError(what + " is not valid JSON: " + e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ArgumentError("failed writing '" + path + "'");
}

}  // namespace detail

inline Json load_json_file(const std::string& path) { return detail::parse_text(detail::read_file(path), path); }

//---------------------------------------------------------------------------//
// Analysis configuration
//---------------------------------------------------------------------------//

struct ColumnRoles {
  std::string s = "s";
  std::string a = "a";
  std::string y = "y";
  std::vector<std::string> covariates;

  friend bool operator==(const ColumnRoles&, const ColumnRoles&) = default;
};

struct ProbeSpec {
  std::string name;
  std::vector<double> x;

  friend bool operator==(const ProbeSpec&, const ProbeSpec&) = default;
};

/// Evenly spaced grid over one covariate, the others held at their sample
/// means.
struct CurveGrid {
  std::string vary;
  double from = 0.0;
  double to = 0.0;
  int points = 0;

  friend bool operator==(const CurveGrid&, const CurveGrid&) = default;
};

struct GofSpec {
  std::vector<std::string> tau_terms;
  std::vector<std::string> lambda_terms;
  bool efficient_weighting = false;

  bool requested() const { return !tau_terms.empty() || !lambda_terms.empty(); }
  friend bool operator==(const GofSpec&, const GofSpec&) = default;
};

struct AnalysisConfig {
  std::string data_path;
  ColumnRoles columns;
  std::vector<std::string> tau_terms;
  std::vector<std::string> lambda_terms;
  int knots = 4;
  int degree = 3;
  double records_per_term = 20.0;
  int refit_passes = 0;
  double ridge = 1e-6;
  double clip_e = 0.01;
  std::optional<double> trial_known;
  double tol = 1e-10;
  int max_iter = 50;
  bool rct = true;
  bool meta = true;
  std::vector<ProbeSpec> probes;
  std::optional<CurveGrid> curve;
  GofSpec gof;
  std::string output_path;
  std::string curve_csv;
  std::uint64_t seed = 0;

  void validate() const {
    if (data_path.empty()) throw ArgumentError("config: data_path is required");
    if (columns.covariates.empty()) throw ArgumentError("config: columns.covariates must list at least one column");
    std::set<std::string> seen;
    for (const auto& c : {columns.s, columns.a, columns.y})
      if (c.empty()) throw ArgumentError("config: column roles s, a and y must be named");
    for (const auto& c : columns.covariates)
      if (!seen.insert(c).second) throw ArgumentError("config: covariate '" + c + "' listed twice");
    for (const auto& c : {columns.s, columns.a, columns.y})
      if (seen.count(c)) throw ArgumentError("config: column '" + c + "' is both a role and a covariate");
    if (tau_terms.empty()) throw ArgumentError("config: tau_terms must not be empty");
    if (lambda_terms.empty())
      throw ArgumentError("config: lambda_terms is empty; the integrative estimator requires a confounding model");
    if (knots < 0) throw ArgumentError("config: knots must be >= 0");
    if (degree != 1 && degree != 3) throw ArgumentError("config: degree must be 1 or 3");
    if (records_per_term < 0.0) throw ArgumentError("config: records_per_term must be >= 0");
    if (refit_passes < 0) throw ArgumentError("config: refit_passes must be >= 0");
    if (!(ridge >= 0.0)) throw ArgumentError("config: ridge must be >= 0");
    if (!(clip_e > 0.0 && clip_e < 0.5)) throw ArgumentError("config: clip_e must lie in (0, 0.5)");
    if (trial_known && !(*trial_known > 0.0 && *trial_known < 1.0))
      throw ArgumentError("config: trial_known must lie in (0, 1)");
    if (!(tol > 0.0)) throw ArgumentError("config: tol must be positive");
    if (max_iter < 1) throw ArgumentError("config: max_iter must be >= 1");
    for (const auto& p : probes)
      if (p.x.size() != columns.covariates.size())
        throw ArgumentError("config: probe '" + p.name + "' needs one value per covariate");
    if (curve) {
      if (std::find(columns.covariates.begin(), columns.covariates.end(), curve->vary) == columns.covariates.end())
        throw ArgumentError("config: curve.vary '" + curve->vary + "' is not a covariate");
      if (curve->points < 2) throw ArgumentError("config: curve.points must be >= 2");
    }
  }

  StructuralModel model() const {
    StructuralModel m;
    m.tau_basis = parse_basis(tau_terms, columns.covariates);
    m.lambda_basis = parse_basis(lambda_terms, columns.covariates);
    return m;
  }

  FitOptions fit_options() const {
    FitOptions f;
    f.nuisance.knots = knots;
    f.nuisance.degree = degree;
    f.nuisance.records_per_term = records_per_term;
    f.nuisance.refit_passes = refit_passes;
    f.nuisance.ridge = ridge;
    f.nuisance.clip_e = clip_e;
    f.nuisance.trial_known = trial_known;
    f.solver.tol = tol;
    f.solver.max_iter = max_iter;
    f.rct = rct;
    f.meta = meta;
    return f;
  }

  friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

inline Json to_json(const AnalysisConfig& c) {
  Json j;
  j["data_path"] = c.data_path;
  j["columns"] = {{"s", c.columns.s}, {"a", c.columns.a}, {"y", c.columns.y}, {"covariates", c.columns.covariates}};
  j["tau_terms"] = c.tau_terms;
  j["lambda_terms"] = c.lambda_terms;
  j["nuisance"] = {{"knots", c.knots},
                   {"degree", c.degree},
                   {"records_per_term", c.records_per_term},
                   {"refit_passes", c.refit_passes},
                   {"ridge", c.ridge},
                   {"clip_e", c.clip_e},
                   {"trial_known", detail::optional_json(c.trial_known)}};
  j["solver"] = {{"tol", c.tol}, {"max_iter", c.max_iter}};
  j["estimators"] = {{"rct", c.rct}, {"meta", c.meta}};
  Json probes = Json::array();
  for (const auto& p : c.probes) probes.push_back({{"name", p.name}, {"x", p.x}});
  j["probes"] = probes;
  j["curve"] = c.curve ? Json{{"vary", c.curve->vary}, {"from", c.curve->from}, {"to", c.curve->to},
                              {"points", c.curve->points}}
                       : Json(nullptr);
  j["gof"] = {{"tau_terms", c.gof.tau_terms},
              {"lambda_terms", c.gof.lambda_terms},
              {"efficient_weighting", c.gof.efficient_weighting}};
  j["output_path"] = c.output_path;
  j["curve_csv"] = c.curve_csv;
  j["seed"] = c.seed;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline AnalysisConfig analysis_config_from_json(const Json& j) {
  using detail::read;
  const std::string where = "analysis config";
  detail::check_keys(j,
                     {"data_path", "columns", "tau_terms", "lambda_terms", "nuisance", "solver", "estimators",
                      "probes", "curve", "gof", "output_path", "curve_csv", "seed"},
                     where);
  AnalysisConfig c;
  read(j, "data_path", c.data_path, where);
  if (j.contains("columns")) {
    const Json& cj = j.at("columns");
    detail::check_keys(cj, {"s", "a", "y", "covariates"}, "columns");
    read(cj, "s", c.columns.s, "columns");
    read(cj, "a", c.columns.a, "columns");
    read(cj, "y", c.columns.y, "columns");
    read(cj, "covariates", c.columns.covariates, "columns");
  }
  read(j, "tau_terms", c.tau_terms, where);
  read(j, "lambda_terms", c.lambda_terms, where);
  if (j.contains("nuisance")) {
    const Json& nj = j.at("nuisance");
    detail::check_keys(nj, {"knots", "degree", "records_per_term", "refit_passes", "ridge", "clip_e", "trial_known"},
                       "nuisance");
    read(nj, "knots", c.knots, "nuisance");
    read(nj, "degree", c.degree, "nuisance");
    read(nj, "records_per_term", c.records_per_term, "nuisance");
    read(nj, "refit_passes", c.refit_passes, "nuisance");
    read(nj, "ridge", c.ridge, "nuisance");
    read(nj, "clip_e", c.clip_e, "nuisance");
    read(nj, "trial_known", c.trial_known, "nuisance");
  }
  if (j.contains("solver")) {
    const Json& sj = j.at("solver");
    detail::check_keys(sj, {"tol", "max_iter"}, "solver");
    read(sj, "tol", c.tol, "solver");
    read(sj, "max_iter", c.max_iter, "solver");
  }
  if (j.contains("estimators")) {
    const Json& ej = j.at("estimators");
    detail::check_keys(ej, {"rct", "meta"}, "estimators");
    read(ej, "rct", c.rct, "estimators");
    read(ej, "meta", c.meta, "estimators");
  }
  if (j.contains("probes")) {
    if (!j.at("probes").is_array()) throw ArgumentError("probes must be an array");
    for (const auto& pj : j.at("probes")) {
      detail::check_keys(pj, {"name", "x"}, "probe");
      ProbeSpec p;
      read(pj, "name", p.name, "probe");
      read(pj, "x", p.x, "probe");
      c.probes.push_back(std::move(p));
    }
  }
  if (j.contains("curve") && !j.at("curve").is_null()) {
    const Json& gj = j.at("curve");
    detail::check_keys(gj, {"vary", "from", "to", "points"}, "curve");
    CurveGrid g;
    read(gj, "vary", g.vary, "curve");
    read(gj, "from", g.from, "curve");
    read(gj, "to", g.to, "curve");
    read(gj, "points", g.points, "curve");
    c.curve = g;
  }
  if (j.contains("gof")) {
    const Json& gj = j.at("gof");
    detail::check_keys(gj, {"tau_terms", "lambda_terms", "efficient_weighting"}, "gof");
    read(gj, "tau_terms", c.gof.tau_terms, "gof");
    read(gj, "lambda_terms", c.gof.lambda_terms, "gof");
    read(gj, "efficient_weighting", c.gof.efficient_weighting, "gof");
  }
  read(j, "output_path", c.output_path, where);
  read(j, "curve_csv", c.curve_csv, where);
  read(j, "seed", c.seed, where);
  return c;
}

//---------------------------------------------------------------------------//
// CSV ingestion
//---------------------------------------------------------------------------//

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Reads a header-first comma-separated file. Rows are numbered from 1 after
/// the header.
inline Dataset load_csv_text(const std::string& text, const ColumnRoles& roles, const std::string& source = "input") {
  std::string_view all(text);
  if (all.size() >= 3 && all.substr(0, 3) == "\xEF\xBB\xBF") all.remove_prefix(3);
  std::vector<std::string_view> lines;
  for (std::size_t start = 0; start < all.size();) {
    std::size_t nl = all.find('\n', start);
    if (nl == std::string_view::npos) nl = all.size();
    lines.push_back(all.substr(start, nl - start));
    start = nl + 1;
  }
  while (!lines.empty() && detail::trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw ArgumentError(source + ": file is empty");

  const auto header = detail::split(lines[0]);
  auto column = [&](const std::string& name) {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return c;
    throw ArgumentError(source + ": missing column '" + name + "'");
  };
  const std::size_t cs = column(roles.s), ca = column(roles.a), cy = column(roles.y);
  std::vector<std::size_t> cx;
  for (const auto& name : roles.covariates) cx.push_back(column(name));

  Dataset data(roles.covariates.size());
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (detail::trim(lines[li]).empty()) continue;
    const std::size_t row = li;
    const auto cells = detail::split(lines[li]);
    if (cells.size() != header.size()) {
      std::ostringstream os;
      os << source << ": row " << row << " has " << cells.size() << " fields, header has " << header.size();
      throw ArgumentError(os.str());
    }
    auto number = [&](std::size_t c) {
      const auto v = detail::parse_double(cells[c]);
      if (!v || !std::isfinite(*v)) {
        std::ostringstream os;
        os << source << ": row " << row << ", column '" << header[c] << "': non-numeric value '" << cells[c] << "'";
        throw ArgumentError(os.str());
      }
      return *v;
    };
    auto binary = [&](std::size_t c) {
      const auto v = detail::parse_double(cells[c]);
      if (!v || (*v != 0.0 && *v != 1.0)) {
        std::ostringstream os;
        os << source << ": row " << row << ", column '" << header[c] << "': expected 0 or 1, got '" << cells[c]
           << "'";
        throw ArgumentError(os.str());
      }
      return static_cast<int>(*v);
    };
    UnitRecord r;
    r.s = binary(cs);
    r.a = binary(ca);
    r.y = number(cy);
    for (std::size_t c : cx) r.x.push_back(number(c));
    data.add(std::move(r));
  }
  if (data.empty()) throw ArgumentError(source + ": no data rows (empty dataset)");
  return data;
}

inline Dataset load_csv(const std::string& path, const ColumnRoles& roles) {
  return load_csv_text(detail::read_file(path), roles, path);
}

inline std::string to_csv(const Dataset& data, const ColumnRoles& roles) {
  if (roles.covariates.size() != data.d()) throw ArgumentError("covariate names do not match the dataset");
  std::ostringstream os;
  os.precision(17);
  os << roles.s << "," << roles.a << "," << roles.y;
  for (const auto& c : roles.covariates) os << "," << c;
  os << "\n";
  for (const auto& r : data) {
    os << r.s << "," << r.a << "," << r.y;
    for (double v : r.x) os << "," << v;
    os << "\n";
  }
  return os.str();
}

inline void write_csv(const std::string& path, const Dataset& data, const ColumnRoles& roles) {
  detail::write_file(path, to_csv(data, roles));
}

inline std::string describe_counts(const Dataset& data) {
  const auto c = data.counts();
  std::ostringstream os;
  os << data.size() << " rows: trial " << c.source(1) << " (a=1: " << c.n[1][1] << ", a=0: " << c.n[1][0]
     << "), observational " << c.source(0) << " (a=1: " << c.n[0][1] << ", a=0: " << c.n[0][0] << ")";
  return os.str();
}

//---------------------------------------------------------------------------//
// Result document
//---------------------------------------------------------------------------//

struct Coefficient {
  std::string block;  // "tau" or "lambda"
  std::string label;
  double estimate = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;

  friend bool operator==(const Coefficient&, const Coefficient&) = default;
};

struct LabeledValue {
  std::string label;
  double value = 0.0;

  friend bool operator==(const LabeledValue&, const LabeledValue&) = default;
};

struct IntervalEstimate {
  double estimate = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;

  friend bool operator==(const IntervalEstimate&, const IntervalEstimate&) = default;
};

struct CurveRow {
  std::string name;
  std::vector<double> x;
  double tau = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;

  friend bool operator==(const CurveRow&, const CurveRow&) = default;
};

struct GofBlock {
  double t_stat = 0.0;
  int df = 0;
  double p_value = 1.0;
  std::vector<std::string> tau_terms;
  std::vector<std::string> lambda_terms;

  friend bool operator==(const GofBlock&, const GofBlock&) = default;
};

struct Diagnostics {
  int iterations = 0;
  double score_norm = 0.0;
  bool converged = false;
  bool fallback_used = false;
  std::optional<bool> rct_fallback_used;
  std::size_t n_trial_treated = 0, n_trial_control = 0, n_obs_treated = 0, n_obs_control = 0;
  std::vector<std::string> warnings;

  friend bool operator==(const Diagnostics&, const Diagnostics&) = default;
};

struct ResultDocument {
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::vector<Coefficient> coefficients;
  std::vector<std::vector<double>> covariance;
  std::vector<Coefficient> rct_coefficients;
  std::vector<LabeledValue> meta_coefficients;
  IntervalEstimate ate;
  std::vector<CurveRow> curve;
  std::optional<GofBlock> gof;
  Diagnostics diagnostics;
  AnalysisConfig config;

  friend bool operator==(const ResultDocument&, const ResultDocument&) = default;
};

namespace detail {

inline Json coefficients_json(const std::vector<Coefficient>& rows) {
  Json out = Json::array();
  for (const auto& c : rows)
    out.push_back({{"block", c.block}, {"label", c.label}, {"estimate", c.estimate}, {"se", c.se},
                   {"ci_lo", c.ci_lo}, {"ci_hi", c.ci_hi}});
  return out;
}

inline std::vector<Coefficient> coefficients_from(const Json& arr) {
  std::vector<Coefficient> out;
  for (const auto& j : arr)
    out.push_back({j.at("block").get<std::string>(), j.at("label").get<std::string>(), j.at("estimate").get<double>(),
                   j.at("se").get<double>(), j.at("ci_lo").get<double>(), j.at("ci_hi").get<double>()});
  return out;
}

inline Json finite(double v) {
  if (!std::isfinite(v)) throw NumericalError("result contains a non-finite value");
  return Json(v);
}

}  // namespace detail

inline Json to_json(const ResultDocument& d) {
  Json j;
  j["version"] = d.version;
  j["seed"] = d.seed;
  j["coefficients"] = detail::coefficients_json(d.coefficients);
  j["covariance"] = d.covariance;
  j["rct_coefficients"] = detail::coefficients_json(d.rct_coefficients);
  Json meta = Json::array();
  for (const auto& m : d.meta_coefficients) meta.push_back({{"label", m.label}, {"value", m.value}});
  j["meta_coefficients"] = meta;
  j["ate"] = {{"estimate", detail::finite(d.ate.estimate)},
              {"se", detail::finite(d.ate.se)},
              {"ci_lo", d.ate.ci_lo},
              {"ci_hi", d.ate.ci_hi}};
  Json curve = Json::array();
  for (const auto& r : d.curve)
    curve.push_back({{"name", r.name}, {"x", r.x}, {"tau", r.tau}, {"se", r.se}, {"ci_lo", r.ci_lo},
                     {"ci_hi", r.ci_hi}});
  j["curve"] = curve;
  j["gof"] = d.gof ? Json{{"t", d.gof->t_stat},
                          {"df", d.gof->df},
                          {"p", d.gof->p_value},
                          {"tau_terms", d.gof->tau_terms},
                          {"lambda_terms", d.gof->lambda_terms}}
                   : Json(nullptr);
  const Diagnostics& g = d.diagnostics;
  j["diagnostics"] = {{"iterations", g.iterations},
                      {"score_norm", g.score_norm},
                      {"converged", g.converged},
                      {"fallback_used", g.fallback_used},
                      {"rct_fallback_used", detail::optional_json(g.rct_fallback_used)},
                      {"counts",
                       {{"trial_treated", g.n_trial_treated},
                        {"trial_control", g.n_trial_control},
                        {"obs_treated", g.n_obs_treated},
                        {"obs_control", g.n_obs_control}}},
                      {"warnings", g.warnings}};
  j["config"] = to_json(d.config);
  return j;
}

inline ResultDocument result_from_json(const Json& j) {
  try {
    ResultDocument d;
    d.version = j.at("version").get<std::string>();
    d.seed = j.at("seed").get<std::uint64_t>();
    d.coefficients = detail::coefficients_from(j.at("coefficients"));
    d.covariance = j.at("covariance").get<std::vector<std::vector<double>>>();
    d.rct_coefficients = detail::coefficients_from(j.at("rct_coefficients"));
    for (const auto& m : j.at("meta_coefficients"))
      d.meta_coefficients.push_back({m.at("label").get<std::string>(), m.at("value").get<double>()});
    const Json& a = j.at("ate");
    d.ate = {a.at("estimate").get<double>(), a.at("se").get<double>(), a.at("ci_lo").get<double>(),
             a.at("ci_hi").get<double>()};
    for (const auto& r : j.at("curve"))
      d.curve.push_back({r.at("name").get<std::string>(), r.at("x").get<std::vector<double>>(),
                         r.at("tau").get<double>(), r.at("se").get<double>(), r.at("ci_lo").get<double>(),
                         r.at("ci_hi").get<double>()});
    if (!j.at("gof").is_null()) {
      const Json& g = j.at("gof");
      d.gof = GofBlock{g.at("t").get<double>(), g.at("df").get<int>(), g.at("p").get<double>(),
                       g.at("tau_terms").get<std::vector<std::string>>(),
                       g.at("lambda_terms").get<std::vector<std::string>>()};
    }
    const Json& g = j.at("diagnostics");
    d.diagnostics.iterations = g.at("iterations").get<int>();
    d.diagnostics.score_norm = g.at("score_norm").get<double>();
    d.diagnostics.converged = g.at("converged").get<bool>();
    d.diagnostics.fallback_used = g.at("fallback_used").get<bool>();
    if (!g.at("rct_fallback_used").is_null()) d.diagnostics.rct_fallback_used = g.at("rct_fallback_used").get<bool>();
    const Json& c = g.at("counts");
    d.diagnostics.n_trial_treated = c.at("trial_treated").get<std::size_t>();
    d.diagnostics.n_trial_control = c.at("trial_control").get<std::size_t>();
    d.diagnostics.n_obs_treated = c.at("obs_treated").get<std::size_t>();
    d.diagnostics.n_obs_control = c.at("obs_control").get<std::size_t>();
    d.diagnostics.warnings = g.at("warnings").get<std::vector<std::string>>();
    d.config = analysis_config_from_json(j.at("config"));
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("malformed result document: ") + e.what());
  }
}

inline std::string serialize(const ResultDocument& d) { return to_json(d).dump(2) + "\n"; }

inline ResultDocument parse_result(const std::string& text) {
  return result_from_json(detail::parse_text(text, "result document"));
}

//---------------------------------------------------------------------------//
// fit / gof
//---------------------------------------------------------------------------//

namespace detail {

inline std::vector<Coefficient> coefficient_rows(const StructuralModel& model, const PsiEstimate& est,
                                                 bool with_lambda) {
  std::vector<Coefficient> out;
  const Vector v = with_lambda ? est.psi_hat.stacked() : est.psi_hat.phi;
  auto add = [&](const char* block, const std::string& label, Eigen::Index i) {
    const double se = std::sqrt(std::max(0.0, est.cov(i, i)));
    out.push_back({block, label, v(i), se, v(i) - kCiMultiplier * se, v(i) + kCiMultiplier * se});
  };
  const auto tl = model.tau_basis.labels();
  for (std::size_t t = 0; t < tl.size(); ++t) add("tau", tl[t], static_cast<Eigen::Index>(t));
  if (with_lambda) {
    const auto ll = model.lambda_basis.labels();
    for (std::size_t t = 0; t < ll.size(); ++t) add("lambda", ll[t], static_cast<Eigen::Index>(tl.size() + t));
  }
  return out;
}

inline std::vector<CurveRow> curve_rows(const AnalysisConfig& cfg, const StructuralModel& model,
                                        const PsiEstimate& est, const Dataset& data) {
  std::vector<CurveRow> out;
  auto push = [&](const std::string& name, const std::vector<double>& x) {
    const CurvePoint pt = tau_at(model, est, x);
    out.push_back({name, pt.x, pt.tau, pt.se, pt.ci_lo, pt.ci_hi});
  };
  for (const auto& p : cfg.probes) push(p.name, p.x);
  if (cfg.curve) {
    std::vector<double> means(data.d(), 0.0);
    for (const auto& r : data)
      for (std::size_t j = 0; j < data.d(); ++j) means[j] += r.x[j];
    for (double& m : means) m /= static_cast<double>(data.size());
    const auto& cv = cfg.columns.covariates;
    const std::size_t jv = static_cast<std::size_t>(std::find(cv.begin(), cv.end(), cfg.curve->vary) - cv.begin());
    for (int k = 0; k < cfg.curve->points; ++k) {
      std::vector<double> x = means;
      x[jv] = cfg.curve->from + (cfg.curve->to - cfg.curve->from) * k / (cfg.curve->points - 1);
      std::ostringstream os;
      os << cfg.curve->vary << "=" << x[jv];
      push(os.str(), x);
    }
  }
  return out;
}

inline GofBlock run_gof_block(const AnalysisConfig& cfg, const Dataset& data, const StructuralModel& model,
                              const FitResult& fit, const GofSpec& spec) {
  const BasisSpec alt_tau = parse_basis(spec.tau_terms, cfg.columns.covariates);
  const BasisSpec alt_lambda = parse_basis(spec.lambda_terms, cfg.columns.covariates);
  GofOptions opts;
  opts.efficient_weighting = spec.efficient_weighting;
  const GofResult r =
      run_stage("goodness of fit", [&] { return gof_test(data, model, fit.estimate, fit.nuis, alt_tau, alt_lambda, opts); });
  return {r.t_stat, r.df, r.p_value, spec.tau_terms, spec.lambda_terms};
}

}  // namespace detail

struct FitRun {
  Dataset data;
  StructuralModel model;
  FitResult fit;
};

inline FitRun fit_from_config(const AnalysisConfig& cfg) {
  cfg.validate();
  FitRun run{run_stage("load", [&] { return load_csv(cfg.data_path, cfg.columns); }), {}, {}};
  run.model = run_stage("model", [&] { return cfg.model(); });
  run.fit = fit_pipeline(run.data, run.model, cfg.fit_options());
  return run;
}

inline ResultDocument run_fit(const AnalysisConfig& cfg) {
  const FitRun run = fit_from_config(cfg);
  const FitResult& fit = run.fit;
  ResultDocument doc;
  doc.seed = cfg.seed;
  doc.config = cfg;
  doc.coefficients = detail::coefficient_rows(run.model, fit.estimate, true);
  for (Eigen::Index r = 0; r < fit.estimate.cov.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(fit.estimate.cov.cols()));
    for (Eigen::Index c = 0; c < fit.estimate.cov.cols(); ++c) row[static_cast<std::size_t>(c)] = fit.estimate.cov(r, c);
    doc.covariance.push_back(std::move(row));
  }
  if (fit.rct_estimate) doc.rct_coefficients = detail::coefficient_rows(run.model, *fit.rct_estimate, false);
  if (fit.meta) {
    const auto labels = run.model.tau_basis.labels();
    for (std::size_t t = 0; t < labels.size(); ++t)
      doc.meta_coefficients.push_back({labels[t], (*fit.meta)(static_cast<Eigen::Index>(t))});
  }
  const AteEstimate ate = run_stage("ate", [&] { return ate_estimate(run.data, run.model, fit.estimate); });
  doc.ate = {ate.tau0_hat, ate.se, ate.tau0_hat - kCiMultiplier * ate.se, ate.tau0_hat + kCiMultiplier * ate.se};
  doc.curve = run_stage("curve", [&] { return detail::curve_rows(cfg, run.model, fit.estimate, run.data); });
  if (cfg.gof.requested()) doc.gof = detail::run_gof_block(cfg, run.data, run.model, fit, cfg.gof);

  Diagnostics& g = doc.diagnostics;
  g.iterations = fit.integrative.iterations;
  g.score_norm = fit.integrative.final_score_norm;
  g.converged = fit.integrative.converged;
  g.fallback_used = fit.integrative.fallback_used;
  if (fit.rct) g.rct_fallback_used = fit.rct->fallback_used;
  const auto counts = run.data.counts();
  g.n_trial_treated = counts.n[1][1];
  g.n_trial_control = counts.n[1][0];
  g.n_obs_treated = counts.n[0][1];
  g.n_obs_control = counts.n[0][0];
  g.warnings = fit.warnings;
  return doc;
}

/// Post-hoc test on a saved fit: refits from the echoed config (the fit is
/// deterministic), checks the estimate matches, and attaches the gof block.
inline ResultDocument run_gof_from_saved(const ResultDocument& saved, const GofSpec& spec) {
  if (!spec.requested()) throw ArgumentError("gof needs at least one alternative term");
  const FitRun run = fit_from_config(saved.config);
  const Vector psi = run.fit.estimate.psi_hat.stacked();
  if (static_cast<std::size_t>(psi.size()) != saved.coefficients.size())
    throw ArgumentError("saved fit does not match its config echo");
  for (std::size_t i = 0; i < saved.coefficients.size(); ++i) {
    const double a = psi(static_cast<Eigen::Index>(i)), b = saved.coefficients[i].estimate;
    if (std::abs(a - b) > 1e-8 * (1.0 + std::abs(b)))
      throw ArgumentError("refit from the saved config does not reproduce coefficient '" +
                          saved.coefficients[i].label + "'; was the data file changed?");
  }
  ResultDocument out = saved;
  out.gof = detail::run_gof_block(saved.config, run.data, run.model, run.fit, spec);
  out.config.gof = spec;
  return out;
}

inline std::string curve_csv(const ResultDocument& doc) {
  std::ostringstream os;
  os.precision(17);
  os << "name";
  for (const auto& c : doc.config.columns.covariates) os << "," << c;
  os << ",tau,se,ci_lo,ci_hi\n";
  for (const auto& r : doc.curve) {
    os << r.name;
    for (double v : r.x) os << "," << v;
    os << "," << r.tau << "," << r.se << "," << r.ci_lo << "," << r.ci_hi << "\n";
  }
  return os.str();
}

inline void write_outputs(const ResultDocument& doc) {
  if (!doc.config.output_path.empty()) detail::write_file(doc.config.output_path, serialize(doc));
  if (!doc.config.curve_csv.empty()) detail::write_file(doc.config.curve_csv, curve_csv(doc));
}

//---------------------------------------------------------------------------//
// simulate
//---------------------------------------------------------------------------//

struct SimulateConfig {
  std::string setting = "1";  // "1", "2" or "custom"
  sim::SimConfig sim;
  std::vector<std::string> tau_terms;    // empty: default model
  std::vector<std::string> lambda_terms;
  std::vector<std::string> gof_tau_terms;
  std::vector<std::string> gof_lambda_terms;
  std::string output_path;
  std::string table_path;
};

inline const std::vector<std::string>& sim_covariate_names() {
  static const std::vector<std::string> names = {"x1", "x2", "x3", "x4", "x5"};
  return names;
}

/// Builds a SimulateConfig from JSON. Preset settings fix beta; "custom"
/// requires it.
inline SimulateConfig simulate_config_from_json(const Json& j) {
  using detail::read;
  const std::string where = "simulate config";
  detail::check_keys(j,
                     {"setting", "n", "m", "beta", "reps", "seed", "threads", "variant", "estimators", "probes",
                      "tau_terms", "lambda_terms", "nuisance", "gof", "output_path", "table_path"},
                     where);
  SimulateConfig c;
  if (j.contains("setting")) {
    const Json& s = j.at("setting");
    c.setting = s.is_number_integer() ? std::to_string(s.get<long>()) : s.is_string() ? s.get<std::string>() : "";
  }
  if (c.setting == "1" || c.setting == "2") {
    c.sim = sim::study_setting(std::stoi(c.setting));
    if (j.contains("beta")) throw ArgumentError("beta is fixed by setting " + c.setting + "; use setting \"custom\"");
  } else if (c.setting == "custom") {
    if (!j.contains("beta")) throw ArgumentError("setting \"custom\" requires beta");
    read(j, "beta", c.sim.beta, where);
  } else {
    throw ArgumentError("setting must be 1, 2 or \"custom\"");
  }
  read(j, "n", c.sim.n, where);
  read(j, "m", c.sim.m, where);
  read(j, "reps", c.sim.reps, where);
  read(j, "seed", c.sim.seed, where);
  read(j, "threads", c.sim.threads, where);
  if (j.contains("variant")) {
    std::string v;
    read(j, "variant", v, where);
    if (v == "table") c.sim.variant = sim::DgpVariant::table;
    else if (v == "text") c.sim.variant = sim::DgpVariant::text;
    else throw ArgumentError("variant must be \"table\" or \"text\"");
  }
  if (j.contains("estimators")) {
    std::vector<std::string> names;
    read(j, "estimators", names, where);
    c.sim.estimators = {false, false, false};
    for (const auto& n : names) {
      if (n == "integrative") c.sim.estimators.integrative = true;
      else if (n == "rct") c.sim.estimators.rct = true;
      else if (n == "meta") c.sim.estimators.meta = true;
      else throw ArgumentError("unknown estimator '" + n + "'");
    }
  }
  if (j.contains("probes")) {
    c.sim.probes.clear();
    for (const auto& pj : j.at("probes")) {
      detail::check_keys(pj, {"name", "x"}, "probe");
      sim::Probe p;
      read(pj, "name", p.name, "probe");
      read(pj, "x", p.x, "probe");
      c.sim.probes.push_back(std::move(p));
    }
  }
  read(j, "tau_terms", c.tau_terms, where);
  read(j, "lambda_terms", c.lambda_terms, where);
  const auto& names = sim_covariate_names();
  if (!c.tau_terms.empty()) c.sim.model.tau_basis = parse_basis(c.tau_terms, names);
  if (!c.lambda_terms.empty()) c.sim.model.lambda_basis = parse_basis(c.lambda_terms, names);
  if (j.contains("nuisance")) {
    const Json& nj = j.at("nuisance");
    detail::check_keys(nj, {"knots", "degree", "records_per_term", "refit_passes", "ridge", "clip_e"}, "nuisance");
    auto& o = c.sim.fit.nuisance;
    read(nj, "knots", o.knots, "nuisance");
    read(nj, "degree", o.degree, "nuisance");
    read(nj, "records_per_term", o.records_per_term, "nuisance");
    read(nj, "refit_passes", o.refit_passes, "nuisance");
    read(nj, "ridge", o.ridge, "nuisance");
    read(nj, "clip_e", o.clip_e, "nuisance");
  }
  if (j.contains("gof")) {
    const Json& gj = j.at("gof");
    detail::check_keys(gj, {"tau_terms", "lambda_terms", "alpha"}, "gof");
    read(gj, "tau_terms", c.gof_tau_terms, "gof");
    read(gj, "lambda_terms", c.gof_lambda_terms, "gof");
    read(gj, "alpha", c.sim.gof_alpha, "gof");
    if (!c.gof_tau_terms.empty()) c.sim.gof_alt_tau = parse_basis(c.gof_tau_terms, names);
    if (!c.gof_lambda_terms.empty()) c.sim.gof_alt_lambda = parse_basis(c.gof_lambda_terms, names);
  }
  read(j, "output_path", c.output_path, where);
  read(j, "table_path", c.table_path, where);
  c.sim.label = c.setting == "custom" ? "custom" : "setting" + c.setting;
  c.sim.validate();
  return c;
}

/// Everything needed to rerun, except the thread count (results do not
/// depend on it).
inline Json echo_json(const SimulateConfig& c) {
  const auto& s = c.sim;
  Json j;
  j["setting"] = c.setting;
  j["n"] = s.n;
  j["m"] = s.m;
  if (c.setting == "custom") j["beta"] = s.beta;
  j["reps"] = s.reps;
  j["seed"] = s.seed;
  j["variant"] = sim::to_string(s.variant);
  std::vector<std::string> est;
  if (s.estimators.integrative) est.push_back("integrative");
  if (s.estimators.rct) est.push_back("rct");
  if (s.estimators.meta) est.push_back("meta");
  j["estimators"] = est;
  Json probes = Json::array();
  for (const auto& p : s.probes) probes.push_back({{"name", p.name}, {"x", p.x}});
  j["probes"] = probes;
  j["tau_terms"] = s.model.tau_basis.labels();
  j["lambda_terms"] = s.model.lambda_basis.labels();
  const auto& o = s.fit.nuisance;
  j["nuisance"] = {{"knots", o.knots},
                   {"degree", o.degree},
                   {"records_per_term", o.records_per_term},
                   {"refit_passes", o.refit_passes},
                   {"ridge", o.ridge},
                   {"clip_e", o.clip_e}};
  j["gof"] = {{"tau_terms", c.gof_tau_terms}, {"lambda_terms", c.gof_lambda_terms}, {"alpha", s.gof_alpha}};
  return j;
}

inline Json to_json(const sim::McSummary& s) {
  Json j;
  j["label"] = s.label;
  j["variant"] = s.variant;
  j["seed"] = s.seed;
  j["reps"] = s.reps;
  j["completed"] = s.completed;
  j["fallbacks"] = s.fallbacks;
  j["failures"] = s.failures;
  Json cells = Json::array();
  for (const auto& c : s.cells)
    cells.push_back({{"target", c.target},
                     {"estimator", sim::to_string(c.estimator)},
                     {"truth", c.truth},
                     {"count", c.count},
                     {"mc_mean", c.mc_mean},
                     {"mc_var", detail::optional_json(c.mc_var)},
                     {"mean_variance_estimate", detail::optional_json(c.mean_variance_estimate)},
                     {"coverage", detail::optional_json(c.coverage)}});
  j["cells"] = cells;
  j["gof"] = s.gof_rejection_rate
                 ? Json{{"rejection_rate", *s.gof_rejection_rate}, {"df", *s.gof_df}, {"alpha", s.gof_alpha}}
                 : Json(nullptr);
  return j;
}

struct SimulateOutput {
  sim::McSummary summary;
  std::string json;   // summary plus config echo
  std::string table;  // published-units text table
};

inline SimulateOutput run_simulate(const SimulateConfig& cfg) {
  SimulateOutput out;
  out.summary = sim::run_monte_carlo(cfg.sim);
  Json j;
  j["version"] = kVersion;
  j["config"] = echo_json(cfg);
  j["summary"] = to_json(out.summary);
  out.json = j.dump(2) + "\n";
  out.table = sim::format_table(out.summary);
  if (!cfg.output_path.empty()) detail::write_file(cfg.output_path, out.json);
  if (!cfg.table_path.empty()) detail::write_file(cfg.table_path, out.table);
  return out;
}

}  // namespace hte::io
