#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "closeeb/decisions.hpp"
#include "closeeb/methods.hpp"
#include "closeeb/rng.hpp"
#include "closeeb/simulation.hpp"

using namespace closeeb;
using namespace closeeb::decisions;

namespace {

std::vector<bool> flags(std::initializer_list<int> v) {
  std::vector<bool> out;
  for (int b : v) out.push_back(b != 0);
  return out;
}

}  // namespace

TEST(SelectUtility, Examples) {
  EXPECT_EQ(select_utility(std::vector<double>{-1, 0, 2}).selected, flags({0, 1, 1}));
  EXPECT_EQ(select_utility(std::vector<double>{-1, -0.1}).count(), 0u);
  EXPECT_EQ(select_utility(std::vector<double>{0, 0, 0}).count(), 3u);
}

TEST(SelectTopM, Examples) {
  EXPECT_EQ(select_top_m(std::vector<double>{3, 1, 2}, 2).selected, flags({1, 0, 1}));
  EXPECT_EQ(select_top_m(std::vector<double>{1, 1, 0}, 1).selected, flags({1, 0, 0}));
  EXPECT_EQ(select_top_m(std::vector<double>{5, -1, 2}, 3).count(), 3u);
  EXPECT_THROW(select_top_m(std::vector<double>{1, 2}, 0), InputError);
  EXPECT_THROW(select_top_m(std::vector<double>{1, 2}, 3), InputError);
}

TEST(SelectTopM, ExactlyMSelected) {
  Stream rng(1, 0);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 1 + rng.index(50);
    std::vector<double> v(n);
    for (auto& x : v) x = std::round(rng.normal() * 2.0);  // many ties
    const std::size_t m = 1 + rng.index(n);
    const auto sel = select_top_m(v, m);
    EXPECT_EQ(sel.count(), m);
    EXPECT_EQ(*sel.m, m);
  }
}

TEST(SelectTopM, AffineInvariance) {
  Stream rng(2, 0);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> v(30), w(30);
    const double a = rng.uniform(-5, 5), b = rng.uniform(0.01, 10);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = std::round(rng.normal() * 3.0);
      w[i] = a + b * v[i];
    }
    const std::size_t m = 1 + rng.index(30);
    EXPECT_EQ(select_top_m(v, m).selected, select_top_m(w, m).selected);
    EXPECT_EQ(select_utility(v).selected, select_utility([&] {
                std::vector<double> s(v);
                for (auto& x : s) x *= b;
                return s;
              }()).selected);
  }
}

TEST(SelectTopM, OracleSelectionIsOptimalAmongSubsets) {
  Stream rng(3, 0);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 2 + rng.index(11);
    const std::size_t m = 1 + rng.index(n);
    std::vector<double> theta(n);
    for (auto& t : theta) t = rng.normal();
    const double oracle = loss(Problem::topm, select_top_m(theta, m), theta);
    double best = INFINITY;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != m) continue;
      SelectionResult s;
      s.m = m;
      for (std::size_t i = 0; i < n; ++i) s.selected.push_back((mask >> i) & 1u);
      best = std::min(best, loss(Problem::topm, s, theta));
    }
    EXPECT_NEAR(oracle, best, 1e-14);
  }
}

TEST(SelectTopFraction, WithinGroups) {
  const std::vector<double> v{5, 4, 3, 2, 1, 9, 8, 7};
  const std::vector<std::string> g{"a", "a", "a", "a", "a", "b", "b", "b"};
  const auto sel = select_top_fraction_by_group(v, g, 1.0 / 3.0);
  // ceil(5/3) = 2 in a, ceil(3/3) = 1 in b
  EXPECT_EQ(sel.selected, flags({1, 1, 0, 0, 0, 1, 0, 0}));
  EXPECT_EQ(*sel.m, 3u);
  EXPECT_THROW(select_top_fraction_by_group(v, g, 0.0), InputError);
}

TEST(Loss, Examples) {
  const std::vector<double> theta{3, 1, 2};
  EXPECT_DOUBLE_EQ(loss(Problem::mse, Action(theta), theta), 0.0);
  EXPECT_DOUBLE_EQ(loss(Problem::topm, Action(select_top_m(theta, 2)), theta), -2.5);
  const std::vector<double> t2{-1, 0, 2};
  EXPECT_NEAR(loss(Problem::utilmax, Action(SelectionResult{flags({0, 1, 1}), {}}), t2), -0.6667, 1e-4);
  EXPECT_THROW(loss(Problem::mse, Action(select_top_m(theta, 2)), theta), InputError);
}

TEST(RegretBounds, Examples) {
  const std::vector<double> a{1, 2, 3};
  const auto zero = regret_bounds_check(a, a, 1);
  EXPECT_EQ(zero.utilmax_bound, 0.0);
  EXPECT_EQ(zero.topm_bound, 0.0);
  std::vector<double> star(100), hat(100);
  for (int i = 0; i < 100; ++i) {
    star[i] = std::sin(i);
    hat[i] = star[i] + 0.1;
  }
  const auto b = regret_bounds_check(hat, star, 25);
  EXPECT_NEAR(b.rmse, 0.1, 1e-12);
  EXPECT_NEAR(b.topm_bound, 0.4, 1e-12);
}

TEST(RegretBounds, HoldPathwiseAgainstPosteriorMeans) {
  // Given the data, the regret of plug-in decisions against posterior means is
  // computable exactly; the bound must hold for every draw.
  const auto dgp = simulation::default_gaussian_ls();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto draw = simulation::sample(dgp, 600, seed);
    const auto star = methods::posterior_means(simulation::oracle_posterior(dgp, draw));
    for (auto tag : {methods::MethodTag::naive, methods::MethodTag::independent_gauss}) {
      const auto model = methods::fit_method(draw.dataset, tag);
      const auto hat = methods::posterior_means(methods::posterior(model, draw.dataset));
      const std::size_t m = 200;
      const auto bounds = regret_bounds_check(hat, star, m);
      const double um = loss(Problem::utilmax, select_utility(hat), star) -
                        loss(Problem::utilmax, select_utility(star), star);
      const double top = loss(Problem::topm, select_top_m(hat, m), star) -
                         loss(Problem::topm, select_top_m(star, m), star);
      EXPECT_GE(um, -1e-15);
      EXPECT_GE(top, -1e-15);
      EXPECT_LE(um, bounds.utilmax_bound + 1e-15);
      EXPECT_LE(top, bounds.topm_bound + 1e-15);
    }
  }
}
