#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "hte/core_model.hpp"
#include "hte/nuisance.hpp"

namespace hte::testing {

/// Mean and standard error of a sample.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double var = ss / static_cast<double>(v.size() - 1);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

/// Random records with d covariates, both sources and both arms present.
inline Dataset random_dataset(std::size_t n, std::size_t d, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  Dataset data(d);
  for (std::size_t i = 0; i < n; ++i) {
    UnitRecord r;
    r.s = static_cast<int>(i % 2);
    r.a = static_cast<int>((i / 2) % 2);
    r.x.resize(d);
    for (auto& v : r.x) v = z(gen);
    r.y = z(gen) + r.x[0];
    data.add(r);
  }
  return data;
}

/// Nuisances given by closed forms.
inline NuisanceSet exact_nuisances(std::function<double(std::span<const double>, int)> e,
                                   std::function<double(std::span<const double>, int)> mu,
                                   std::function<double(int, std::span<const double>, int)> sigma2) {
  NuisanceSet n;
  n.e.exact = std::move(e);
  n.e.clip = 1e-6;
  n.mu.exact = std::move(mu);
  n.sigma2.exact = std::move(sigma2);
  return n;
}

}  // namespace hte::testing
