// Shared helpers for the unit suites.

#pragma once

#include <gtest/gtest.h>

#include <optional>
#include <span>
#include <vector>

#include "closeeb/core.hpp"
#include "closeeb/npmle.hpp"
#include "closeeb/rng.hpp"

namespace closeeb::testkit {

/// Independent average log-likelihood: plain double loop, no log-sum-exp.
inline double naive_loglik(const DiscretePrior& prior, std::span<const double> z,
                           std::span<const double> nu) {
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double f = 0.0;
    for (std::size_t k = 0; k < prior.size(); ++k)
      f += prior.weights()[k] * normal_pdf((z[i] - prior.support()[k]) / nu[i]) / nu[i];
    total += std::log(f);
  }
  return total / static_cast<double>(z.size());
}

/// Projects a prior onto a grid by moving each atom to its nearest grid point.
inline DiscretePrior discretize_onto(const DiscretePrior& prior, const std::vector<double>& grid) {
  std::vector<double> w(grid.size(), 0.0);
  for (std::size_t k = 0; k < prior.size(); ++k) {
    const double t = prior.support()[k];
    std::size_t best = 0;
    for (std::size_t j = 1; j < grid.size(); ++j)
      if (std::abs(grid[j] - t) < std::abs(grid[best] - t)) best = j;
    w[best] += prior.weights()[k];
  }
  return DiscretePrior::normalized(grid, w);
}

/// Approximate-maximizer certificate: the fit is within kappa_n (or its
/// tolerance when n < 7) of every single-atom prior, the uniform prior and an
/// optional reference prior on the same grid. 1e-12 arithmetic slack only.
inline void expect_approx_maximizer(const npmle::NpmleFit& fit, std::span<const double> z,
                                    std::span<const double> nu,
                                    const std::optional<DiscretePrior>& reference = {}) {
  const auto& grid = fit.prior.support();
  const double slack = z.size() >= 7 ? fit.kappa_n : fit.tolerance;
  const double fitted = npmle::loglik(fit.prior, z, nu);
  ASSERT_TRUE(std::isfinite(fitted));
  EXPECT_LE(fit.gap_certificate, fit.tolerance);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double other = npmle::loglik(DiscretePrior::point_mass(grid[k]), z, nu);
    EXPECT_GE(fitted, other - slack - 1e-12) << "atom " << k << " at " << grid[k];
  }
  const DiscretePrior uniform(grid, std::vector<double>(grid.size(), 1.0 / static_cast<double>(grid.size())));
  EXPECT_GE(fitted, npmle::loglik(uniform, z, nu) - slack - 1e-12);
  if (reference) {
    const auto on_grid = discretize_onto(*reference, grid);
    EXPECT_GE(fitted, npmle::loglik(on_grid, z, nu) - slack - 1e-12);
  }
}

/// Fine grid approximation of N(0, 1).
inline DiscretePrior gaussian_grid_prior(std::size_t points = 801, double half_width = 8.0) {
  std::vector<double> support(points), weights(points);
  for (std::size_t k = 0; k < points; ++k) {
    support[k] = -half_width + 2.0 * half_width * static_cast<double>(k) / static_cast<double>(points - 1);
    weights[k] = normal_pdf(support[k]);
  }
  return DiscretePrior::normalized(support, weights);
}

}  // namespace closeeb::testkit
