// Domain types and exact posterior computations for discrete-prior
// heteroskedastic Gaussian mixtures.
//
// Notation used throughout: a unit reports an estimate y with standard error
// sigma; the latent parameter theta = m + s * tau where tau is drawn from a
// discrete prior on a grid. After the transformation z = (y - m) / s,
// nu = sigma / s the model is z | tau ~ N(tau, nu^2).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace closeeb {

/// Invalid arguments or malformed data.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every posterior weight vanished (non-finite log kernel terms).
class DegeneratePosteriorError : public std::runtime_error {
 public:
  explicit DegeneratePosteriorError(const std::string& what,
                                    std::optional<std::size_t> unit = {})
      : std::runtime_error(unit ? what + " (unit " + std::to_string(*unit) + ")"
                                : what),
        unit_(unit) {}

  std::optional<std::size_t> unit() const { return unit_; }

 private:
  std::optional<std::size_t> unit_;
};

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))

inline double normal_log_pdf(double u) { return -0.5 * u * u - kLogSqrt2Pi; }
inline double normal_pdf(double u) { return std::exp(normal_log_pdf(u)); }

// ---------------------------------------------------------------------------
// Data

struct Observation {
  double y = 0.0;
  double sigma = 1.0;
  std::vector<double> covariates;
};

/// Ordered collection of observations; the position defines the unit index.
/// Optional string group keys travel with the units (used for grouped
/// selection).
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(std::vector<Observation> observations,
                   std::vector<std::string> groups = {})
      : obs_(std::move(observations)), groups_(std::move(groups)) {
    if (obs_.empty()) throw InputError("dataset must contain at least one observation");
    if (!groups_.empty() && groups_.size() != obs_.size())
      throw InputError("group keys must have one entry per observation");
    const std::size_t dim = obs_.front().covariates.size();
    for (std::size_t i = 0; i < obs_.size(); ++i) {
      const auto& o = obs_[i];
      if (!std::isfinite(o.y) || !std::isfinite(o.sigma))
        throw InputError("non-finite y or sigma at unit " + std::to_string(i));
      if (!(o.sigma > 0.0))
        throw InputError("sigma must be positive at unit " + std::to_string(i));
      if (o.covariates.size() != dim)
        throw InputError("covariate dimension mismatch at unit " + std::to_string(i));
      for (double x : o.covariates)
        if (!std::isfinite(x))
          throw InputError("non-finite covariate at unit " + std::to_string(i));
    }
  }

  static Dataset from_columns(std::span<const double> y, std::span<const double> sigma) {
    if (y.size() != sigma.size()) throw InputError("y and sigma lengths differ");
    std::vector<Observation> obs(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) obs[i] = {y[i], sigma[i], {}};
    return Dataset(std::move(obs));
  }

  std::size_t size() const { return obs_.size(); }
  const Observation& operator[](std::size_t i) const { return obs_[i]; }
  const std::vector<Observation>& observations() const { return obs_; }
  std::size_t covariate_dim() const { return obs_.empty() ? 0 : obs_.front().covariates.size(); }
  bool has_groups() const { return !groups_.empty(); }
  const std::vector<std::string>& groups() const { return groups_; }

  std::vector<double> y() const {
    std::vector<double> out(obs_.size());
    for (std::size_t i = 0; i < obs_.size(); ++i) out[i] = obs_[i].y;
    return out;
  }
  std::vector<double> sigma() const {
    std::vector<double> out(obs_.size());
    for (std::size_t i = 0; i < obs_.size(); ++i) out[i] = obs_[i].sigma;
    return out;
  }

  /// Same units (covariates, groups) with replaced estimates and standard errors.
  Dataset with_values(std::span<const double> y, std::span<const double> sigma) const {
    if (y.size() != obs_.size() || sigma.size() != obs_.size())
      throw InputError("replacement columns must match dataset size");
    std::vector<Observation> obs = obs_;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      obs[i].y = y[i];
      obs[i].sigma = sigma[i];
    }
    return Dataset(std::move(obs), groups_);
  }

  /// FNV-1a over the bit patterns of (y, sigma, covariates).
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](double v) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 1099511628211ULL;
      }
    };
    for (const auto& o : obs_) {
      mix(o.y);
      mix(o.sigma);
      for (double x : o.covariates) mix(x);
    }
    return h;
  }

 private:
  std::vector<Observation> obs_;
  std::vector<std::string> groups_;
};

// ---------------------------------------------------------------------------
// Priors

/// Mixing distribution on a strictly increasing grid.
class DiscretePrior {
 public:
  DiscretePrior(std::vector<double> support, std::vector<double> weights)
      : support_(std::move(support)), weights_(std::move(weights)) {
    if (support_.empty()) throw InputError("prior needs at least one support point");
    if (support_.size() != weights_.size())
      throw InputError("prior support and weights differ in length");
    double total = 0.0;
    for (std::size_t k = 0; k < support_.size(); ++k) {
      if (!std::isfinite(support_[k]) || !std::isfinite(weights_[k]))
        throw InputError("prior contains non-finite values");
      if (weights_[k] < 0.0) throw InputError("prior weights must be non-negative");
      if (k > 0 && !(support_[k] > support_[k - 1]))
        throw InputError("prior support must be strictly increasing");
      total += weights_[k];
    }
    if (std::abs(total - 1.0) > 1e-10)
      throw InputError("prior weights must sum to one (got " + std::to_string(total) + ")");
  }

  /// Rescales arbitrary non-negative weights onto the simplex.
  static DiscretePrior normalized(std::vector<double> support, std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw InputError("prior weights sum to zero");
    for (double& w : weights) w /= total;
    return DiscretePrior(std::move(support), std::move(weights));
  }

  static DiscretePrior point_mass(double at) { return DiscretePrior({at}, {1.0}); }

  std::size_t size() const { return support_.size(); }
  const std::vector<double>& support() const { return support_; }
  const std::vector<double>& weights() const { return weights_; }

  double mean() const {
    double m = 0.0;
    for (std::size_t k = 0; k < size(); ++k) m += weights_[k] * support_[k];
    return m;
  }
  double variance() const {
    const double m = mean();
    double v = 0.0;
    for (std::size_t k = 0; k < size(); ++k) v += weights_[k] * (support_[k] - m) * (support_[k] - m);
    return v;
  }

 private:
  std::vector<double> support_;
  std::vector<double> weights_;
};

/// Posterior quantities for one unit. moments_theta[v-1] = E[theta^v | y, sigma].
struct PosteriorSummary {
  double mean_theta = 0.0;
  std::vector<double> moments_theta;
  double mean_tau = 0.0;
  double log_marginal_density = 0.0;

  double variance_theta() const {
    if (moments_theta.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    return moments_theta[1] - moments_theta[0] * moments_theta[0];
  }
};

struct TransformedUnit {
  double z_hat = 0.0;
  double nu_hat = 1.0;
};

// ---------------------------------------------------------------------------
// Mixture computations

namespace detail {

inline void check_point(double z, double nu) {
  if (!std::isfinite(z) || !std::isfinite(nu)) throw InputError("non-finite z or nu");
  if (!(nu > 0.0)) throw InputError("nu must be positive");
}

/// Fills terms[k] = log w_k + log phi((z - tau_k)/nu) - log nu and returns the
/// maximum term.
inline double log_kernel_terms(const DiscretePrior& prior, double z, double nu,
                               std::vector<double>& terms) {
  check_point(z, nu);
  const auto& tau = prior.support();
  const auto& w = prior.weights();
  terms.resize(tau.size());
  const double log_nu = std::log(nu);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < tau.size(); ++k) {
    const double u = (z - tau[k]) / nu;
    terms[k] = (w[k] > 0.0 ? std::log(w[k]) : -std::numeric_limits<double>::infinity()) +
               normal_log_pdf(u) - log_nu;
    top = std::max(top, terms[k]);
  }
  return top;
}

/// Converts log terms to normalized posterior weights in place; returns
/// log of the unnormalized sum.
inline double normalize_log_terms(std::vector<double>& terms, double top) {
  if (!std::isfinite(top)) throw DegeneratePosteriorError("all posterior weights underflowed");
  double total = 0.0;
  for (double& t : terms) {
    t = std::exp(t - top);
    total += t;
  }
  for (double& t : terms) t /= total;
  return top + std::log(total);
}

}  // namespace detail

/// log f(z) where f(z) = sum_k w_k phi((z - tau_k)/nu) / nu.
inline double log_mixture_density(const DiscretePrior& prior, double z, double nu) {
  std::vector<double> terms;
  const double top = detail::log_kernel_terms(prior, z, nu, terms);
  if (!std::isfinite(top)) return -std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (double t : terms) total += std::exp(t - top);
  return top + std::log(total);
}

inline double mixture_density(const DiscretePrior& prior, double z, double nu) {
  return std::exp(log_mixture_density(prior, z, nu));
}

/// Posterior probabilities of each grid point given z; also returns log f(z).
inline std::vector<double> posterior_weights(const DiscretePrior& prior, double z, double nu,
                                             double* log_density = nullptr) {
  std::vector<double> terms;
  const double top = detail::log_kernel_terms(prior, z, nu, terms);
  const double lf = detail::normalize_log_terms(terms, top);
  if (log_density) *log_density = lf;
  return terms;
}

/// E[tau^v | z] for v = 1..max_order.
inline std::vector<double> posterior_tau_moments(const DiscretePrior& prior, double z, double nu,
                                                 int max_order = 2) {
  if (max_order < 1) throw InputError("max_order must be at least 1");
  const auto p = posterior_weights(prior, z, nu);
  const auto& tau = prior.support();
  std::vector<double> out(static_cast<std::size_t>(max_order), 0.0);
  for (std::size_t k = 0; k < tau.size(); ++k) {
    double power = 1.0;
    for (int v = 0; v < max_order; ++v) {
      power *= tau[k];
      out[static_cast<std::size_t>(v)] += p[k] * power;
    }
  }
  return out;
}

/// Posterior mean via E[tau | z] = z + nu^2 f'(z) / f(z), with f' evaluated
/// from the analytic kernel derivative phi'(u) = -u phi(u).
inline double tweedie_posterior_mean(const DiscretePrior& prior, double z, double nu) {
  std::vector<double> terms;
  const double top = detail::log_kernel_terms(prior, z, nu, terms);
  if (!std::isfinite(top)) throw DegeneratePosteriorError("all posterior weights underflowed");
  const auto& tau = prior.support();
  // Both sums share the exp(-top) scale, which cancels in the ratio.
  double f = 0.0;
  double f_prime = 0.0;
  const double nu_sq = nu * nu;
  for (std::size_t k = 0; k < tau.size(); ++k) {
    const double e = std::exp(terms[k] - top);
    f += e;
    f_prime += e * (tau[k] - z) / nu_sq;
  }
  return z + nu_sq * f_prime / f;
}

/// Posterior summary for theta = m + s * tau given one observation.
inline PosteriorSummary posterior_theta_summary(const DiscretePrior& prior, const Observation& unit,
                                                double m, double s, int max_order = 2) {
  if (!(s > 0.0) || !std::isfinite(s)) throw InputError("s must be positive and finite");
  if (!std::isfinite(m)) throw InputError("m must be finite");
  if (max_order < 1) throw InputError("max_order must be at least 1");
  const double z = (unit.y - m) / s;
  const double nu = unit.sigma / s;
  double log_f = 0.0;
  const auto p = posterior_weights(prior, z, nu, &log_f);
  const auto& tau = prior.support();

  PosteriorSummary out;
  out.moments_theta.assign(static_cast<std::size_t>(max_order), 0.0);
  for (std::size_t k = 0; k < tau.size(); ++k) {
    const double theta = s * tau[k] + m;
    double power = 1.0;
    for (int v = 0; v < max_order; ++v) {
      power *= theta;
      out.moments_theta[static_cast<std::size_t>(v)] += p[k] * power;
    }
    out.mean_tau += p[k] * tau[k];
  }
  out.mean_theta = out.moments_theta[0];
  // Density of y itself: f_y(y) = f_z(z) / s.
  out.log_marginal_density = log_f - std::log(s);
  return out;
}

/// Raw moments E[X^v], v = 1..max_order, of N(mean, variance).
inline std::vector<double> gaussian_raw_moments(double mean, double variance, int max_order) {
  std::vector<double> out(static_cast<std::size_t>(std::max(max_order, 0)));
  double prev2 = 1.0;  // E[X^0]
  double prev1 = mean;  // E[X^1]
  for (int v = 1; v <= max_order; ++v) {
    double cur;
    if (v == 1) {
      cur = mean;
    } else {
      cur = mean * prev1 + (v - 1) * variance * prev2;
      prev2 = prev1;
      prev1 = cur;
    }
    out[static_cast<std::size_t>(v - 1)] = cur;
  }
  return out;
}

/// Moments of X + c from moments of X (binomial expansion).
inline std::vector<double> shift_raw_moments(const std::vector<double>& moments, double c) {
  std::vector<double> out(moments.size(), 0.0);
  for (std::size_t v = 1; v <= moments.size(); ++v) {
    double binom = 1.0;  // C(v, j)
    double total = 0.0;
    for (std::size_t j = 0; j <= v; ++j) {
      const double ej = j == 0 ? 1.0 : moments[j - 1];
      total += binom * std::pow(c, static_cast<double>(v - j)) * ej;
      binom = binom * static_cast<double>(v - j) / static_cast<double>(j + 1);
    }
    out[v - 1] = total;
  }
  return out;
}

}  // namespace closeeb
