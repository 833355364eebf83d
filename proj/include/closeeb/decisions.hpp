// Decision rules and losses for squared-error estimation, utility
// maximization by selection, and top-m selection.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "closeeb/core.hpp"

namespace closeeb::decisions {

enum class Problem { mse, utilmax, topm };

inline std::string_view to_string(Problem p) {
  switch (p) {
    case Problem::mse: return "mse";
    case Problem::utilmax: return "utilmax";
    case Problem::topm: return "topm";
  }
  return "unknown";
}

inline Problem parse_problem(std::string_view name) {
  for (Problem p : {Problem::mse, Problem::utilmax, Problem::topm})
    if (to_string(p) == name) return p;
  throw InputError("unknown problem '" + std::string(name) + "'");
}

struct SelectionResult {
  std::vector<bool> selected;
  std::optional<std::size_t> m;  // set for top-m selections

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), true));
  }
};

/// Either point estimates (mse) or a selection (utilmax, topm).
using Action = std::variant<std::vector<double>, SelectionResult>;

inline SelectionResult select_utility(std::span<const double> theta_hat) {
  SelectionResult out;
  out.selected.resize(theta_hat.size());
  for (std::size_t i = 0; i < theta_hat.size(); ++i) {
    if (!std::isfinite(theta_hat[i])) throw InputError("select_utility: non-finite estimate");
    out.selected[i] = theta_hat[i] >= 0.0;
  }
  return out;
}

namespace detail {

/// Marks the m largest entries among `units`; ties go to the lowest index.
inline void mark_top(std::span<const double> theta_hat, std::vector<std::size_t> units,
                     std::size_t m, std::vector<bool>& selected) {
  std::stable_sort(units.begin(), units.end(), [&](std::size_t a, std::size_t b) {
    return theta_hat[a] > theta_hat[b];
  });
  for (std::size_t j = 0; j < m; ++j) selected[units[j]] = true;
}

}  // namespace detail

inline SelectionResult select_top_m(std::span<const double> theta_hat, std::size_t m) {
  const std::size_t n = theta_hat.size();
  if (m < 1 || m > n)
    throw InputError("select_top_m: m must lie in [1, n] (m = " + std::to_string(m) +
                     ", n = " + std::to_string(n) + ")");
  for (double v : theta_hat)
    if (!std::isfinite(v)) throw InputError("select_top_m: non-finite estimate");
  SelectionResult out;
  out.selected.assign(n, false);
  out.m = m;
  std::vector<std::size_t> units(n);
  std::iota(units.begin(), units.end(), std::size_t{0});
  detail::mark_top(theta_hat, std::move(units), m, out.selected);
  return out;
}

/// Top ceil(fraction * group size) units within each group.
inline SelectionResult select_top_fraction_by_group(std::span<const double> theta_hat,
                                                    std::span<const std::string> groups,
                                                    double fraction) {
  if (groups.size() != theta_hat.size())
    throw InputError("grouped selection: one group key per unit required");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw InputError("grouped selection: fraction must lie in (0, 1]");
  for (double v : theta_hat)
    if (!std::isfinite(v)) throw InputError("grouped selection: non-finite estimate");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);

  SelectionResult out;
  out.selected.assign(theta_hat.size(), false);
  std::size_t total = 0;
  for (auto& [key, units] : members) {
    const auto m = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(units.size()) - 1e-9));
    total += m;
    detail::mark_top(theta_hat, std::move(units), m, out.selected);
  }
  out.m = total;
  return out;
}

/// Loss of an action given the true parameters. Selection losses are the
/// negative average utility: -(1/n) sum d_i theta_i for utilmax and
/// -(1/m) sum d_i theta_i for topm.
inline double loss(Problem problem, const Action& action, std::span<const double> theta_true) {
  const std::size_t n = theta_true.size();
  if (problem == Problem::mse) {
    const auto* est = std::get_if<std::vector<double>>(&action);
    if (!est) throw InputError("loss: mse needs point estimates");
    if (est->size() != n) throw InputError("loss: length mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += ((*est)[i] - theta_true[i]) * ((*est)[i] - theta_true[i]);
    return total / static_cast<double>(n);
  }
  const auto* sel = std::get_if<SelectionResult>(&action);
  if (!sel) throw InputError("loss: selection problems need a selection");
  if (sel->selected.size() != n) throw InputError("loss: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (sel->selected[i]) total += theta_true[i];
  if (problem == Problem::utilmax) return -total / static_cast<double>(n);
  const std::size_t m = sel->m ? *sel->m : sel->count();
  if (m == 0) throw InputError("loss: top-m selection with m = 0");
  return -total / static_cast<double>(m);
}

struct RegretBounds {
  double rmse = 0.0;
  double utilmax_bound = 0.0;  // rmse
  double topm_bound = 0.0;     // 2 sqrt(n/m) rmse
};

inline RegretBounds regret_bounds_check(std::span<const double> theta_hat,
                                        std::span<const double> theta_star, std::size_t m) {
  if (theta_hat.size() != theta_star.size()) throw InputError("regret bounds: length mismatch");
  const std::size_t n = theta_hat.size();
  if (n == 0 || m < 1 || m > n) throw InputError("regret bounds: need 1 <= m <= n");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    total += (theta_hat[i] - theta_star[i]) * (theta_hat[i] - theta_star[i]);
  RegretBounds out;
  out.rmse = std::sqrt(total / static_cast<double>(n));
  out.utilmax_bound = out.rmse;
  out.topm_bound = 2.0 * std::sqrt(static_cast<double>(n) / static_cast<double>(m)) * out.rmse;
  return out;
}

}  // namespace closeeb::decisions
