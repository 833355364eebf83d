// Coupled-bootstrap validation. Each estimate Y ~ N(theta, sigma^2) is split
// into
//   Y1 = Y + sqrt(omega) sigma W,   Y2 = Y - sigma W / sqrt(omega),  W ~ N(0, 1),
// which are independent given theta with variances (1 + omega) sigma^2 and
// (1 + 1/omega) sigma^2. Decisions computed from Y1 are scored on Y2 with
// estimators that are unbiased for the loss.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "closeeb/core.hpp"
#include "closeeb/decisions.hpp"
#include "closeeb/methods.hpp"
#include "closeeb/parallel.hpp"
#include "closeeb/rng.hpp"

namespace closeeb::validation {

using decisions::Action;
using decisions::Problem;
using methods::MethodTag;

inline constexpr double kDefaultOmega = 1.0 / 9.0;

struct CoupledSplit {
  std::vector<double> y1, y2;
  std::vector<double> sigma1_sq, sigma2_sq;
  double omega = kDefaultOmega;
  std::uint64_t seed = 0;
  /// Units with (y1, sqrt(sigma1_sq)) and the original covariates/groups.
  Dataset training;
};

/// Split with caller-supplied standard normal noise.
inline CoupledSplit split_with_noise(const Dataset& data, double omega, std::span<const double> noise) {
  if (!(omega > 0.0) || !std::isfinite(omega)) throw InputError("split: omega must be positive");
  const std::size_t n = data.size();
  if (noise.size() != n) throw InputError("split: one noise draw per unit required");
  CoupledSplit out;
  out.omega = omega;
  out.y1.resize(n);
  out.y2.resize(n);
  out.sigma1_sq.resize(n);
  out.sigma2_sq.resize(n);
  std::vector<double> sigma1(n);
  const double root = std::sqrt(omega);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = data[i].y;
    const double s = data[i].sigma;
    out.y1[i] = y + root * s * noise[i];
    out.y2[i] = y - s * noise[i] / root;
    out.sigma1_sq[i] = (1.0 + omega) * s * s;
    out.sigma2_sq[i] = (1.0 + 1.0 / omega) * s * s;
    sigma1[i] = std::sqrt(out.sigma1_sq[i]);
  }
  out.training = data.with_values(out.y1, sigma1);
  return out;
}

/// Seeded split; unit i of replication r draws from its own stream.
inline CoupledSplit split(const Dataset& data, double omega, std::uint64_t seed,
                          std::uint64_t replication = 0) {
  std::vector<double> noise(data.size());
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = Stream(seed, replication, i).normal();
  auto out = split_with_noise(data, omega, noise);
  out.seed = seed;
  return out;
}

struct LossReport {
  Problem problem = Problem::mse;
  double estimate = 0.0;
  double std_error = 0.0;
  int replications = 1;
};

/// The rule sees only the training half of the split.
using DecisionRule = std::function<Action(const Dataset& training)>;

/// Unbiased loss estimate T for a fixed action, with its plug-in standard
/// error from the conditional variance.
inline LossReport score_action(Problem problem, const CoupledSplit& split, const Action& action) {
  const std::size_t n = split.y2.size();
  LossReport out;
  out.problem = problem;
  if (problem == Problem::mse) {
    const auto* est = std::get_if<std::vector<double>>(&action);
    if (!est) throw InputError("unbiased_loss: mse needs point estimates");
    if (est->size() != n) throw InputError("unbiased_loss: decision length mismatch");
    std::vector<double> terms(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = split.y2[i] - (*est)[i];
      terms[i] = r * r - split.sigma2_sq[i];
      total += terms[i];
    }
    out.estimate = total / static_cast<double>(n);
    double ss = 0.0;
    for (double t : terms) ss += (t - out.estimate) * (t - out.estimate);
    const double var_terms = n > 1 ? ss / static_cast<double>(n - 1) : 0.0;
    out.std_error = std::sqrt(var_terms / static_cast<double>(n));
    return out;
  }
  const auto* sel = std::get_if<decisions::SelectionResult>(&action);
  if (!sel) throw InputError("unbiased_loss: selection problems need a selection");
  if (sel->selected.size() != n) throw InputError("unbiased_loss: decision length mismatch");
  double total = 0.0;
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!sel->selected[i]) continue;
    total += split.y2[i];
    var += split.sigma2_sq[i];
  }
  double denom = static_cast<double>(n);
  if (problem == Problem::topm) {
    const std::size_t m = sel->m ? *sel->m : sel->count();
    if (m == 0) throw InputError("unbiased_loss: top-m selection with m = 0");
    denom = static_cast<double>(m);
  }
  out.estimate = -total / denom;
  out.std_error = std::sqrt(var) / denom;
  return out;
}

inline LossReport unbiased_loss(Problem problem, const CoupledSplit& split, const DecisionRule& rule) {
  return score_action(problem, split, rule(split.training));
}

// ---------------------------------------------------------------------------
// Method comparison

struct CompareOptions {
  Problem problem = Problem::mse;
  double omega = kDefaultOmega;
  int replications = 100;
  std::uint64_t seed = 0;
  /// Top-m: explicit m for ungrouped selection; otherwise ceil(fraction * n).
  std::optional<std::size_t> m;
  double top_fraction = 1.0 / 3.0;
  /// Select within groups when the dataset carries group keys.
  bool use_groups = true;
  methods::MethodOptions method_options;
  unsigned threads = 1;
};

/// Turns posterior means into the action for a problem.
inline Action make_action(Problem problem, std::span<const double> theta_hat, const Dataset& data,
                          const CompareOptions& opts) {
  switch (problem) {
    case Problem::mse:
      return std::vector<double>(theta_hat.begin(), theta_hat.end());
    case Problem::utilmax:
      return decisions::select_utility(theta_hat);
    case Problem::topm:
      if (opts.use_groups && data.has_groups())
        return decisions::select_top_fraction_by_group(theta_hat, data.groups(), opts.top_fraction);
      if (opts.m) return decisions::select_top_m(theta_hat, *opts.m);
      return decisions::select_top_m(
          theta_hat, std::max<std::size_t>(
                         1, static_cast<std::size_t>(std::ceil(
                                opts.top_fraction * static_cast<double>(theta_hat.size()) - 1e-9))));
  }
  throw InputError("unknown problem");
}

namespace detail {

/// Uniformly random subset of `units` of the given size (partial Fisher-Yates).
inline void mark_random(std::vector<std::size_t> units, std::size_t count, Stream& rng,
                        std::vector<bool>& selected) {
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t pick = j + static_cast<std::size_t>(rng.index(units.size() - j));
    std::swap(units[j], units[pick]);
    selected[units[j]] = true;
  }
}

/// Random selection matching the per-group sizes of `reference`.
inline decisions::SelectionResult random_like(const decisions::SelectionResult& reference,
                                              const Dataset& data, bool grouped, Stream& rng) {
  decisions::SelectionResult out;
  out.m = reference.m;
  out.selected.assign(reference.selected.size(), false);
  std::map<std::string, std::pair<std::vector<std::size_t>, std::size_t>> members;
  for (std::size_t i = 0; i < reference.selected.size(); ++i) {
    auto& slot = members[grouped ? data.groups()[i] : std::string()];
    slot.first.push_back(i);
    slot.second += reference.selected[i] ? 1 : 0;
  }
  for (auto& [key, slot] : members) mark_random(std::move(slot.first), slot.second, rng, out.selected);
  return out;
}

}  // namespace detail

struct MethodLossRow {
  MethodTag method = MethodTag::naive;
  Problem problem = Problem::mse;
  double estimate = 0.0;          // mean T over replications
  double std_error = 0.0;         // MC standard error across replications
  double plugin_std_error = 0.0;  // mean conditional-variance standard error
  double diff_vs_naive = 0.0;
  double diff_vs_random = std::numeric_limits<double>::quiet_NaN();
  int replications = 0;  // successful replications
  int failures = 0;
};

inline std::vector<MethodLossRow> compare_methods(const Dataset& data,
                                                  std::span<const MethodTag> method_list,
                                                  const CompareOptions& opts) {
  if (opts.replications < 1) throw InputError("compare_methods: replications must be at least 1");
  if (method_list.empty()) throw InputError("compare_methods: no methods given");
  const std::size_t n_methods = method_list.size();
  const auto reps = static_cast<std::size_t>(opts.replications);
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  const bool selection = opts.problem != Problem::mse;
  const bool grouped = opts.problem == Problem::topm && opts.use_groups && data.has_groups();

  struct Cell {
    double t = kNaN, se = kNaN, naive = kNaN, random = kNaN;
  };
  std::vector<std::vector<Cell>> cells(reps, std::vector<Cell>(n_methods));

  parallel_for(reps, opts.threads, [&](std::size_t r) {
    const CoupledSplit sp = split(data, opts.omega, opts.seed, r);
    const auto naive_action = make_action(opts.problem, sp.y1, sp.training, opts);
    const double naive_t = score_action(opts.problem, sp, naive_action).estimate;
    for (std::size_t k = 0; k < n_methods; ++k) {
      Cell& cell = cells[r][k];
      try {
        const DecisionRule rule = [&](const Dataset& training) {
          const auto model = methods::fit_method(training, method_list[k], opts.method_options);
          const auto means = methods::posterior_means(methods::posterior(model, training));
          return make_action(opts.problem, means, training, opts);
        };
        const Action action = rule(sp.training);
        const auto report = score_action(opts.problem, sp, action);
        cell.t = report.estimate;
        cell.se = report.std_error;
        cell.naive = naive_t;
        if (selection) {
          // Same stream for every method so that top-m baselines coincide.
          Stream rng(opts.seed ^ 0x5EEDBA5E11ULL, r);
          const auto& sel = std::get<decisions::SelectionResult>(action);
          const Action random_action = detail::random_like(sel, sp.training, grouped, rng);
          cell.random = score_action(opts.problem, sp, random_action).estimate;
        }
      } catch (const std::exception&) {
        cell = Cell{};
      }
    }
  });

  std::vector<MethodLossRow> rows(n_methods);
  for (std::size_t k = 0; k < n_methods; ++k) {
    MethodLossRow& row = rows[k];
    row.method = method_list[k];
    row.problem = opts.problem;
    double sum = 0.0, sum_se = 0.0, sum_naive = 0.0, sum_random = 0.0;
    std::vector<double> values;
    for (std::size_t r = 0; r < reps; ++r) {
      const Cell& c = cells[r][k];
      if (std::isnan(c.t)) {
        ++row.failures;
        continue;
      }
      values.push_back(c.t);
      sum += c.t;
      sum_se += c.se;
      sum_naive += c.t - c.naive;
      sum_random += c.t - c.random;
    }
    row.replications = static_cast<int>(values.size());
    if (values.empty()) {
      row.estimate = row.std_error = row.plugin_std_error = row.diff_vs_naive = kNaN;
      continue;
    }
    const double count = static_cast<double>(values.size());
    row.estimate = sum / count;
    row.plugin_std_error = sum_se / count;
    row.diff_vs_naive = sum_naive / count;
    row.diff_vs_random = selection ? sum_random / count : kNaN;
    if (values.size() >= 2) {
      double ss = 0.0;
      for (double v : values) ss += (v - row.estimate) * (v - row.estimate);
      row.std_error = std::sqrt(ss / (count - 1.0) / count);
    } else {
      row.std_error = row.plugin_std_error;
    }
  }
  return rows;
}

}  // namespace closeeb::validation
