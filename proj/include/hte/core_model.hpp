#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hte/errors.hpp"

namespace hte {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

//---------------------------------------------------------------------------//
// Data model
//---------------------------------------------------------------------------//

/// One subject. s = 1 marks the randomized trial, s = 0 the observational
/// study. The covariate vector carries no intercept; bases add it.
struct UnitRecord {
  int s = 0;
  int a = 0;
  double y = 0.0;
  std::vector<double> x;
};

inline bool operator==(const UnitRecord& l, const UnitRecord& r) {
  return l.s == r.s && l.a == r.a && l.y == r.y && l.x == r.x;
}

/// Per-(source, arm) record counts.
struct CellCounts {
  std::size_t n[2][2] = {{0, 0}, {0, 0}};  // n[s][a]

  std::size_t source(int s) const { return n[s][0] + n[s][1]; }
};

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::size_t d) : d_(d) {}

  /// Appends a record after checking the record invariants.
  void add(UnitRecord rec) {
    if (rec.s != 0 && rec.s != 1) throw ArgumentError("record source indicator must be 0 or 1");
    if (rec.a != 0 && rec.a != 1) throw ArgumentError("record treatment must be 0 or 1");
    if (!std::isfinite(rec.y)) throw ArgumentError("record outcome must be finite");
    if (rec.x.size() != d_) {
      std::ostringstream os;
      os << "record has " << rec.x.size() << " covariates, dataset expects " << d_;
      throw ArgumentError(os.str());
    }
    for (double v : rec.x) {
      if (!std::isfinite(v)) throw ArgumentError("record covariates must be finite");
    }
    records_.push_back(std::move(rec));
  }

  std::size_t d() const { return d_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<UnitRecord>& records() const { return records_; }
  const UnitRecord& operator[](std::size_t i) const { return records_[i]; }
  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

  CellCounts counts() const {
    CellCounts c;
    for (const auto& r : records_) ++c.n[r.s][r.a];
    return c;
  }

  /// Records with the given source indicator, in original order.
  Dataset subset(int s) const {
    Dataset out(d_);
    for (const auto& r : records_)
      if (r.s == s) out.records_.push_back(r);
    return out;
  }

  friend bool operator==(const Dataset& l, const Dataset& r) {
    return l.d_ == r.d_ && l.records_ == r.records_;
  }

 private:
  std::size_t d_ = 0;
  std::vector<UnitRecord> records_;
};

//---------------------------------------------------------------------------//
// Basis terms
//---------------------------------------------------------------------------//

enum class TermKind { constant, power, product, natural_spline, hinge };

/// A named scalar function of the covariate vector. Indices are 0-based
/// positions in UnitRecord::x.
struct BasisTerm {
  TermKind kind = TermKind::constant;
  std::size_t j = 0;
  std::size_t k = 0;
  int exponent = 1;
  // natural_spline: all knots (boundary included, sorted); element picks
  // d_element - d_{K-2} in the truncated-power representation.
  // hinge: knots[0] is the hinge location.
  std::vector<double> knots;
  std::size_t element = 0;
  std::string label;

  static BasisTerm constant() { return {TermKind::constant, 0, 0, 0, {}, 0, "1"}; }

  static BasisTerm power(std::size_t j, int exponent, std::string label = {}) {
    if (exponent < 1) throw ArgumentError("power term exponent must be >= 1");
    if (label.empty()) {
      label = "x" + std::to_string(j + 1);
      if (exponent > 1) label += "^" + std::to_string(exponent);
    }
    return {TermKind::power, j, 0, exponent, {}, 0, std::move(label)};
  }

  static BasisTerm linear(std::size_t j, std::string label = {}) { return power(j, 1, std::move(label)); }

  static BasisTerm product(std::size_t j, std::size_t k, std::string label = {}) {
    if (label.empty()) label = "x" + std::to_string(j + 1) + "*x" + std::to_string(k + 1);
    return {TermKind::product, j, k, 1, {}, 0, std::move(label)};
  }

  static BasisTerm natural_spline(std::size_t j, std::vector<double> knots, std::size_t element,
                                  std::string label = {}) {
    if (knots.size() < 3 || element + 2 >= knots.size())
      throw ArgumentError("natural spline element needs at least 3 knots and element < K-2");
    if (!std::is_sorted(knots.begin(), knots.end()) ||
        std::adjacent_find(knots.begin(), knots.end()) != knots.end())
      throw ArgumentError("natural spline knots must be strictly increasing");
    if (label.empty()) label = "ns(x" + std::to_string(j + 1) + ")" + std::to_string(element + 1);
    return {TermKind::natural_spline, j, 0, 3, std::move(knots), element, std::move(label)};
  }

  static BasisTerm hinge(std::size_t j, double knot, std::string label = {}) {
    if (label.empty()) label = "hinge(x" + std::to_string(j + 1) + ")";
    return {TermKind::hinge, j, 0, 1, {knot}, 0, std::move(label)};
  }

  /// Largest covariate index referenced, or -1 for the constant.
  long max_index() const {
    switch (kind) {
      case TermKind::constant: return -1;
      case TermKind::product: return static_cast<long>(std::max(j, k));
      default: return static_cast<long>(j);
    }
  }

  double eval(std::span<const double> x) const {
    if (max_index() >= static_cast<long>(x.size())) {
      std::ostringstream os;
      os << "basis term '" << label << "' references covariate " << max_index() + 1 << " but x has "
         << x.size() << " components";
      throw ArgumentError(os.str());
    }
    switch (kind) {
      case TermKind::constant: return 1.0;
      case TermKind::power: {
        double v = x[j];
        double out = v;
        for (int e = 1; e < exponent; ++e) out *= v;
        return out;
      }
      case TermKind::product: return x[j] * x[k];
      case TermKind::hinge: return std::max(0.0, x[j] - knots[0]);
      case TermKind::natural_spline: return natural_spline_value(x[j]);
    }
    return 0.0;
  }

  friend bool operator==(const BasisTerm&, const BasisTerm&) = default;

 private:
  double natural_spline_value(double v) const {
    const std::size_t last = knots.size() - 1;
    auto cube_plus = [](double t) { return t > 0.0 ? t * t * t : 0.0; };
    auto d = [&](std::size_t m) {
      return (cube_plus(v - knots[m]) - cube_plus(v - knots[last])) / (knots[last] - knots[m]);
    };
    return d(element) - d(last - 1);
  }
};

/// Ordered list of basis terms; evaluates to a feature vector.
struct BasisSpec {
  std::vector<BasisTerm> terms;

  std::size_t size() const { return terms.size(); }
  bool empty() const { return terms.empty(); }

  void evaluate_into(std::span<const double> x, Eigen::Ref<Vector> out) const {
    for (std::size_t t = 0; t < terms.size(); ++t) out[static_cast<Eigen::Index>(t)] = terms[t].eval(x);
  }

  Vector evaluate(std::span<const double> x) const {
    Vector out(static_cast<Eigen::Index>(terms.size()));
    evaluate_into(x, out);
    return out;
  }

  /// Design matrix over the given records, one row per record.
  Matrix design(const std::vector<const UnitRecord*>& recs) const {
    Matrix out(static_cast<Eigen::Index>(recs.size()), static_cast<Eigen::Index>(terms.size()));
    Vector row(static_cast<Eigen::Index>(terms.size()));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      evaluate_into(recs[i]->x, row);
      out.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    return out;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& t : terms) out.push_back(t.label);
    return out;
  }

  long max_index() const {
    long m = -1;
    for (const auto& t : terms) m = std::max(m, t.max_index());
    return m;
  }

  bool leading_constant() const { return !terms.empty() && terms.front().kind == TermKind::constant; }

  friend bool operator==(const BasisSpec&, const BasisSpec&) = default;
};

/// Parses a term declaration against covariate names: "1", "age", "age^2",
/// "age*sex". Labels keep the declared text.
inline BasisTerm parse_term(std::string_view text, const std::vector<std::string>& names) {
  auto trim = [](std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  };
  const std::string_view t = trim(text);
  const std::string label(t);
  auto index_of = [&](std::string_view name) -> std::size_t {
    name = trim(name);
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      throw ArgumentError("basis term '" + label + "' references unknown covariate '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - names.begin());
  };
  if (t.empty()) throw ArgumentError("empty basis term");
  if (t == "1") return BasisTerm::constant();
  if (auto star = t.find('*'); star != std::string_view::npos)
    return BasisTerm::product(index_of(t.substr(0, star)), index_of(t.substr(star + 1)), label);
  if (auto caret = t.find('^'); caret != std::string_view::npos) {
    const std::string exp_text(trim(t.substr(caret + 1)));
    int exponent = 0;
    try {
      std::size_t used = 0;
      exponent = std::stoi(exp_text, &used);
      if (used != exp_text.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ArgumentError("basis term '" + label + "' has a non-integer exponent");
    }
    return BasisTerm::power(index_of(t.substr(0, caret)), exponent, label);
  }
  return BasisTerm::linear(index_of(t), label);
}

inline BasisSpec parse_basis(const std::vector<std::string>& decls, const std::vector<std::string>& names) {
  BasisSpec out;
  for (const auto& d : decls) out.terms.push_back(parse_term(d, names));
  return out;
}

//---------------------------------------------------------------------------//
// Structural model
//---------------------------------------------------------------------------//

/// Linear-in-parameters treatment-effect and confounding-function models:
/// tau(x) = tau_basis(x)' phi, lambda(x) = lambda_basis(x)' lam.
struct StructuralModel {
  BasisSpec tau_basis;
  BasisSpec lambda_basis;

  std::size_t p1() const { return tau_basis.size(); }
  std::size_t p2() const { return lambda_basis.size(); }
  std::size_t p() const { return p1() + p2(); }
};

/// Stacked parameter (phi, lam). Trial-only estimates leave lam empty.
struct PsiVector {
  Vector phi;
  Vector lam;

  Eigen::Index p1() const { return phi.size(); }
  Eigen::Index p2() const { return lam.size(); }
  Eigen::Index size() const { return phi.size() + lam.size(); }

  Vector stacked() const {
    Vector out(size());
    out << phi, lam;
    return out;
  }

  static PsiVector from_stacked(const Vector& v, Eigen::Index p1) {
    if (p1 < 0 || p1 > v.size()) throw ArgumentError("PsiVector split point out of range");
    return {v.head(p1), v.tail(v.size() - p1)};
  }

  friend bool operator==(const PsiVector& l, const PsiVector& r) {
    return l.phi.size() == r.phi.size() && l.lam.size() == r.lam.size() && l.phi == r.phi && l.lam == r.lam;
  }
};

inline double eval_tau(const StructuralModel& model, const Vector& phi, std::span<const double> x) {
  if (static_cast<std::size_t>(phi.size()) != model.p1())
    throw ArgumentError("phi has length " + std::to_string(phi.size()) + ", tau basis has " +
                        std::to_string(model.p1()) + " terms");
  return model.tau_basis.evaluate(x).dot(phi);
}

inline double eval_lambda(const StructuralModel& model, const Vector& lam, std::span<const double> x) {
  if (static_cast<std::size_t>(lam.size()) != model.p2())
    throw ArgumentError("lam has length " + std::to_string(lam.size()) + ", lambda basis has " +
                        std::to_string(model.p2()) + " terms");
  return model.lambda_basis.evaluate(x).dot(lam);
}

/// H = y - tau(x) a - (1 - s) lambda(x) (a - e). For trial records the
/// confounding correction vanishes and lam is never evaluated.
inline double pseudo_outcome(const StructuralModel& model, const PsiVector& psi, const UnitRecord& rec,
                             double e_hat) {
  if (!(e_hat > 0.0 && e_hat < 1.0)) throw ArgumentError("propensity must lie in (0, 1)");
  double h = rec.y - eval_tau(model, psi.phi, rec.x) * rec.a;
  if (rec.s == 0) h -= eval_lambda(model, psi.lam, rec.x) * (rec.a - e_hat);
  return h;
}

inline double residual_eps_h(const StructuralModel& model, const PsiVector& psi, const UnitRecord& rec,
                             double e_hat, double mu_hat) {
  return pseudo_outcome(model, psi, rec, e_hat) - mu_hat;
}

}  // namespace hte
