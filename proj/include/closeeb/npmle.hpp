// Grid construction and maximization of the heteroskedastic Gaussian mixture
// likelihood over the simplex of grid weights.
//
// The solver alternates a multiplicative EM update w_k <- w_k D_k with a
// vertex-exchange step that moves mass from the worst support point to the
// best grid point with an exact line search. Both steps are ascent steps.
// Convergence is certified with the directional-derivative bound
//
//   loglik(optimum) - loglik(w) <= max_k D_k - 1,
//   D_k = (1/n) sum_i phi((z_i - tau_k)/nu_i) / (nu_i f_i),
//
// which follows from concavity and sum_k w_k D_k = 1.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "closeeb/core.hpp"

namespace closeeb::npmle {

struct GridSpec {
  double fine_lo = -6.0;
  double fine_hi = 6.0;
  int fine_count = 400;
  int coarse_count = 100;

  void validate() const {
    if (!(fine_lo < fine_hi)) throw InputError("grid: fine_lo must be below fine_hi");
    if (fine_count < 1 || coarse_count < 1) throw InputError("grid: counts must be at least 1");
  }
};

struct SolverOptions {
  /// Target for the gap certificate. Unset: kappa_n when n >= 7, else 1e-9.
  std::optional<double> tolerance;
  int max_iterations = 100000;
  /// Run a vertex-exchange step after every this many EM updates (0 disables).
  int exchange_every = 1;
  bool record_trace = false;
};

struct NpmleFit {
  DiscretePrior prior = DiscretePrior::point_mass(0.0);
  double loglik = 0.0;  // average per-unit log-likelihood
  int iterations = 0;
  double gap_certificate = 0.0;
  double kappa_n = 0.0;
  double tolerance = 0.0;
  std::vector<double> trace;  // loglik after each step when record_trace is set
  std::vector<std::string> warnings;
};

/// Thrown when the iteration cap is hit; carries the best iterate.
class ConvergenceError : public std::runtime_error {
 public:
  explicit ConvergenceError(NpmleFit best)
      : std::runtime_error(message(best)),
        best_(std::move(best)) {}
  const NpmleFit& best() const { return best_; }

 private:
  static std::string message(const NpmleFit& f) {
    std::ostringstream out;
    out << "npmle did not reach gap tolerance " << f.tolerance << " (gap " << f.gap_certificate
        << " after " << f.iterations << " iterations)";
    return out.str();
  }

  NpmleFit best_;
};

/// kappa_n = (2/n) log(n / (sqrt(2 pi) e)); positive for n >= 7.
inline double kappa_n(std::size_t n) {
  const double nd = static_cast<double>(n);
  return 2.0 / nd * (std::log(nd) - kLogSqrt2Pi - 1.0);
}

namespace detail {

inline void linspace_into(double lo, double hi, int count, std::vector<double>& out) {
  if (count == 1) {
    out.push_back(0.5 * (lo + hi));
    return;
  }
  const double step = (hi - lo) / (count - 1);
  for (int j = 0; j < count; ++j) out.push_back(j == count - 1 ? hi : lo + step * j);
}

}  // namespace detail

/// Fine grid on the window intersected with the data range, plus coarse
/// points on the parts of the data range outside the window, split in
/// proportion to their lengths.
inline std::vector<double> build_grid(std::span<const double> z, const GridSpec& spec = {}) {
  if (z.empty()) throw InputError("build_grid: empty data");
  spec.validate();
  for (double v : z)
    if (!std::isfinite(v)) throw InputError("build_grid: non-finite data");
  const auto [min_it, max_it] = std::minmax_element(z.begin(), z.end());
  const double lo = *min_it;
  const double hi = *max_it;

  std::vector<double> grid;
  if (lo == hi) return {lo};

  const double inner_lo = std::max(lo, spec.fine_lo);
  const double inner_hi = std::min(hi, spec.fine_hi);
  if (inner_lo <= inner_hi) {
    if (inner_lo == inner_hi)
      grid.push_back(inner_lo);
    else
      detail::linspace_into(inner_lo, inner_hi, spec.fine_count, grid);

    const double left = std::max(0.0, spec.fine_lo - lo);
    const double right = std::max(0.0, hi - spec.fine_hi);
    if (left + right > 0.0) {
      int n_left = static_cast<int>(std::lround(spec.coarse_count * left / (left + right)));
      if (left > 0.0 && n_left == 0) n_left = 1;
      if (right > 0.0 && n_left == spec.coarse_count) n_left = spec.coarse_count - 1;
      int n_right = spec.coarse_count - n_left;
      if (right > 0.0 && n_right == 0) n_right = 1;
      // Half-open pieces: the fine window endpoints are already present.
      for (int j = 0; j < n_left; ++j) grid.push_back(lo + left * j / n_left);
      for (int j = 0; j < n_right; ++j) grid.push_back(hi - right * j / n_right);
    }
  } else {
    detail::linspace_into(lo, hi, std::max(spec.coarse_count, 2), grid);
  }

  std::sort(grid.begin(), grid.end());
  const double scale = std::max({1.0, std::abs(lo), std::abs(hi)});
  std::vector<double> out;
  out.reserve(grid.size());
  for (double g : grid) {
    g = std::clamp(g, lo, hi);
    if (out.empty() || g - out.back() > 1e-12 * scale) out.push_back(g);
  }
  return out;
}

struct LoglikDetail {
  double value = 0.0;
  std::vector<std::size_t> underflowed_units;
};

/// (1/n) sum_i log f_{prior, nu_i}(z_i), summed in unit order.
inline LoglikDetail loglik_detail(const DiscretePrior& prior, std::span<const double> z,
                                  std::span<const double> nu) {
  if (z.size() != nu.size()) throw InputError("loglik: z and nu lengths differ");
  if (z.empty()) throw InputError("loglik: empty data");
  LoglikDetail out;
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double lf = log_mixture_density(prior, z[i], nu[i]);
    if (!std::isfinite(lf)) out.underflowed_units.push_back(i);
    total += lf;
  }
  out.value = out.underflowed_units.empty() ? total / static_cast<double>(z.size())
                                            : -std::numeric_limits<double>::infinity();
  return out;
}

inline double loglik(const DiscretePrior& prior, std::span<const double> z,
                     std::span<const double> nu) {
  return loglik_detail(prior, z, nu).value;
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Mixture likelihood state on a fixed grid. Row i of the kernel matrix is
/// scaled by exp(-offset_i) so that its largest entry is one.
class MixtureProblem {
 public:
  MixtureProblem(std::span<const double> z, std::span<const double> nu,
                 const std::vector<double>& grid)
      : n_(z.size()), k_(grid.size()), kernel_(n_, k_), offset_(n_) {
    for (std::size_t i = 0; i < n_; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < k_; ++k) {
        const double lp = normal_log_pdf((z[i] - grid[k]) / nu[i]);
        kernel_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = lp;
        top = std::max(top, lp);
      }
      for (std::size_t k = 0; k < k_; ++k) {
        auto& e = kernel_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        e = std::exp(e - top);
      }
      offset_[static_cast<Eigen::Index>(i)] = top - std::log(nu[i]);
    }
  }

  std::size_t n() const { return n_; }
  std::size_t k() const { return k_; }
  const RowMatrix& kernel() const { return kernel_; }

  /// Recomputes f = L w, D = L' (1/f) / n and the average log-likelihood.
  void evaluate(const Eigen::VectorXd& w, Eigen::VectorXd& f, Eigen::VectorXd& d,
                double& ll) const {
    f.noalias() = kernel_ * w;
    refresh_from_f(f, d, ll);
  }

  void refresh_from_f(const Eigen::VectorXd& f, Eigen::VectorXd& d, double& ll) const {
    const Eigen::VectorXd inv = f.cwiseInverse() / static_cast<double>(n_);
    d.noalias() = kernel_.transpose() * inv;
    double total = 0.0;
    for (Eigen::Index i = 0; i < f.size(); ++i) total += std::log(f[i]) + offset_[i];
    ll = total / static_cast<double>(n_);
  }

 private:
  std::size_t n_;
  std::size_t k_;
  RowMatrix kernel_;
  Eigen::VectorXd offset_;
};

/// Maximizes sum_i log(f_i + a d_i) over a in [0, cap] where the derivative
/// at zero is positive. The objective is concave in a.
inline double exchange_step_length(const Eigen::VectorXd& f, const Eigen::VectorXd& diff,
                                   double cap) {
  auto slope = [&](double a) {
    double g = 0.0;
    for (Eigen::Index i = 0; i < f.size(); ++i) g += diff[i] / (f[i] + a * diff[i]);
    return g;
  };
  if (slope(cap) >= 0.0) return cap;
  double lo = 0.0;
  double hi = cap;
  double a = 0.5 * cap;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * cap; ++it) {
    double g = 0.0;
    double h = 0.0;
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      const double r = diff[i] / (f[i] + a * diff[i]);
      g += r;
      h += r * r;
    }
    if (g > 0.0)
      lo = a;
    else
      hi = a;
    const double newton = h > 0.0 ? a + g / h : 0.5 * (lo + hi);
    a = (newton > lo && newton < hi) ? newton : 0.5 * (lo + hi);
  }
  return lo;
}

}  // namespace detail

/// NPMLE on a caller-supplied grid.
inline NpmleFit fit_on_grid(std::span<const double> z, std::span<const double> nu,
                            std::vector<double> grid, const SolverOptions& opts = {}) {
  if (z.empty()) throw InputError("npmle: empty data");
  if (z.size() != nu.size()) throw InputError("npmle: z and nu lengths differ");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i]) || !std::isfinite(nu[i]))
      throw InputError("npmle: non-finite input at unit " + std::to_string(i));
    if (!(nu[i] > 0.0)) throw InputError("npmle: nu must be positive at unit " + std::to_string(i));
  }
  if (grid.empty()) throw InputError("npmle: empty grid");
  if (opts.max_iterations < 1) throw InputError("npmle: max_iterations must be positive");

  const std::size_t n = z.size();
  NpmleFit out;
  out.kappa_n = kappa_n(n);
  if (opts.tolerance) {
    if (!(*opts.tolerance > 0.0)) throw InputError("npmle: tolerance must be positive");
    out.tolerance = *opts.tolerance;
  } else if (n >= 7) {
    out.tolerance = out.kappa_n;
  } else {
    out.tolerance = 1e-9;
    out.warnings.push_back("n = " + std::to_string(n) +
                           " < 7: kappa_n is not positive, using tolerance 1e-9");
  }

  const detail::MixtureProblem problem(z, nu, grid);
  const auto k = static_cast<Eigen::Index>(problem.k());
  Eigen::VectorXd w = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  Eigen::VectorXd f, d;
  double ll = 0.0;
  problem.evaluate(w, f, d, ll);
  if (opts.record_trace) out.trace.push_back(ll);

  auto finish = [&](int iterations, double gap) {
    std::vector<double> weights(w.data(), w.data() + w.size());
    out.prior = DiscretePrior::normalized(grid, std::move(weights));
    out.loglik = ll;
    out.iterations = iterations;
    out.gap_certificate = std::max(0.0, gap);
  };

  Eigen::VectorXd diff(static_cast<Eigen::Index>(n));
  for (int iter = 0;; ++iter) {
    const double gap = d.maxCoeff() - 1.0;
    if (gap <= out.tolerance) {
      finish(iter, gap);
      return out;
    }
    if (iter >= opts.max_iterations) {
      finish(iter, gap);
      throw ConvergenceError(std::move(out));
    }

    // EM update; sum_k w_k D_k = 1 up to rounding.
    w = w.cwiseProduct(d);
    w /= w.sum();
    problem.evaluate(w, f, d, ll);
    if (opts.record_trace) out.trace.push_back(ll);

    if (opts.exchange_every > 0 && (iter + 1) % opts.exchange_every == 0) {
      Eigen::Index best = 0;
      d.maxCoeff(&best);
      Eigen::Index worst = -1;
      for (Eigen::Index j = 0; j < k; ++j)
        if (w[j] > 0.0 && (worst < 0 || d[j] < d[worst])) worst = j;
      if (worst >= 0 && worst != best && d[best] > d[worst]) {
        diff = problem.kernel().col(best) - problem.kernel().col(worst);
        const double step = detail::exchange_step_length(f, diff, w[worst]);
        if (step > 0.0) {
          const double prev = ll;
          const Eigen::VectorXd w_prev = w;
          if (step >= w[worst]) {
            w[best] += w[worst];
            w[worst] = 0.0;
          } else {
            w[best] += step;
            w[worst] -= step;
          }
          f += std::min(step, w_prev[worst]) * diff;
          problem.refresh_from_f(f, d, ll);
          if (ll < prev) {
            // Rounding-level regression; keep the previous iterate.
            w = w_prev;
            problem.evaluate(w, f, d, ll);
          }
          if (opts.record_trace) out.trace.push_back(ll);
        }
      }
    }
  }
}

/// NPMLE with the grid built from the data range.
inline NpmleFit fit(std::span<const double> z, std::span<const double> nu,
                    const GridSpec& spec = {}, const SolverOptions& opts = {}) {
  return fit_on_grid(z, nu, build_grid(z, spec), opts);
}

}  // namespace closeeb::npmle
