// End-to-end estimator pipelines. Each method fits on a dataset and then
// produces posterior summaries for units of (usually) the same dataset.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "closeeb/core.hpp"
#include "closeeb/npmle.hpp"
#include "closeeb/nuisance.hpp"

namespace closeeb::methods {

enum class MethodTag { naive, independent_gauss, independent_npmle, close_gauss, close_npmle };

inline constexpr std::array<MethodTag, 5> kAllMethods = {
    MethodTag::naive, MethodTag::independent_gauss, MethodTag::independent_npmle,
    MethodTag::close_gauss, MethodTag::close_npmle};

inline std::string_view to_string(MethodTag tag) {
  switch (tag) {
    case MethodTag::naive: return "naive";
    case MethodTag::independent_gauss: return "independent_gauss";
    case MethodTag::independent_npmle: return "independent_npmle";
    case MethodTag::close_gauss: return "close_gauss";
    case MethodTag::close_npmle: return "close_npmle";
  }
  return "unknown";
}

inline MethodTag parse_method(std::string_view name) {
  for (MethodTag tag : kAllMethods)
    if (to_string(tag) == name) return tag;
  throw InputError("unknown method '" + std::string(name) + "'");
}

inline bool uses_npmle(MethodTag tag) {
  return tag == MethodTag::independent_npmle || tag == MethodTag::close_npmle;
}
inline bool uses_nuisance(MethodTag tag) {
  return tag == MethodTag::close_gauss || tag == MethodTag::close_npmle;
}

struct MethodOptions {
  npmle::GridSpec grid;
  npmle::SolverOptions solver;
  nuisance::NuisanceOptions nuisance;
  /// Residualize against covariates when the dataset carries them.
  bool residualize = true;
};

struct GlobalMoments {
  double mean = 0.0;
  double variance = 0.0;
};

struct FittedModel {
  MethodTag tag = MethodTag::naive;
  std::optional<nuisance::NuisanceFit> nuisance;
  std::optional<DiscretePrior> prior;
  std::optional<npmle::NpmleFit> npmle_fit;
  std::optional<GlobalMoments> global_moments;
  std::optional<std::vector<double>> beta;  // intercept first
  std::uint64_t dataset_fingerprint = 0;
  std::vector<std::string> diagnostics;
};

// ---------------------------------------------------------------------------
// Covariates

struct Residualized {
  Dataset data;
  std::vector<double> beta;  // intercept first
};

/// X_i' beta with an intercept column prepended.
inline double linear_index(const Observation& o, std::span<const double> beta) {
  double v = beta[0];
  for (std::size_t c = 0; c < o.covariates.size(); ++c) v += beta[c + 1] * o.covariates[c];
  return v;
}

/// Weighted least squares of y on [1, X] with weights 1/sigma^2; returns the
/// residual dataset and the coefficients.
inline Residualized residualize(const Dataset& data) {
  const std::size_t n = data.size();
  const std::size_t p = data.covariate_dim() + 1;
  if (n < p) throw InputError("residualize: fewer observations than regressors");
  Eigen::MatrixXd design(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Eigen::VectorXd response(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = data[i];
    const double root_w = 1.0 / o.sigma;
    const auto r = static_cast<Eigen::Index>(i);
    design(r, 0) = root_w;
    for (std::size_t c = 0; c + 1 < p; ++c)
      design(r, static_cast<Eigen::Index>(c + 1)) = root_w * o.covariates[c];
    response[r] = root_w * o.y;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < static_cast<Eigen::Index>(p)) {
    std::string names;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index j = qr.rank(); j < static_cast<Eigen::Index>(p); ++j) {
      const auto col = perm[j];
      if (!names.empty()) names += ", ";
      names += col == 0 ? std::string("intercept") : "x" + std::to_string(col);
    }
    throw InputError("residualize: covariate design is rank deficient; collinear column(s): " +
                     names);
  }
  const Eigen::VectorXd coef = qr.solve(response);
  Residualized out{data, std::vector<double>(coef.data(), coef.data() + coef.size())};
  std::vector<double> y(n), sigma = data.sigma();
  for (std::size_t i = 0; i < n; ++i) y[i] = data[i].y - linear_index(data[i], out.beta);
  out.data = data.with_values(y, sigma);
  return out;
}

// ---------------------------------------------------------------------------
// Fitting

/// Precision-weighted method of moments for a Gaussian prior independent of sigma.
inline GlobalMoments precision_weighted_moments(const Dataset& data) {
  double sw = 0.0, swy = 0.0;
  for (const auto& o : data.observations()) {
    const double w = 1.0 / (o.sigma * o.sigma);
    sw += w;
    swy += w * o.y;
  }
  const double mean = swy / sw;
  double excess = 0.0;
  for (const auto& o : data.observations()) {
    const double w = 1.0 / (o.sigma * o.sigma);
    excess += w * ((o.y - mean) * (o.y - mean) - o.sigma * o.sigma);
  }
  return {mean, std::max(0.0, excess / sw)};
}

/// Grid for a prior on the raw y scale: the fine window is mean(y) +- 6 sd(y).
inline npmle::GridSpec raw_scale_grid(std::span<const double> y, npmle::GridSpec spec) {
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  const double sd = y.size() > 1 ? std::sqrt(var / static_cast<double>(y.size() - 1)) : 0.0;
  const double half_lo = -spec.fine_lo / 6.0;
  const double half_hi = spec.fine_hi / 6.0;
  if (sd > 0.0) {
    spec.fine_lo = mean - 6.0 * sd * half_lo;
    spec.fine_hi = mean + 6.0 * sd * half_hi;
  }
  return spec;
}

inline FittedModel fit_method(const Dataset& input, MethodTag tag, const MethodOptions& opts = {}) {
  FittedModel model;
  model.tag = tag;
  model.dataset_fingerprint = input.fingerprint();
  if (tag == MethodTag::naive) return model;

  const Dataset* data = &input;
  std::optional<Residualized> resid;
  if (opts.residualize && input.covariate_dim() > 0) {
    resid = residualize(input);
    data = &resid->data;
    model.beta = resid->beta;
  }
  const std::size_t n = data->size();
  if (uses_npmle(tag) && n < 7) model.diagnostics.push_back("fewer than 7 units for an NPMLE fit");

  switch (tag) {
    case MethodTag::naive:
      break;
    case MethodTag::independent_gauss:
      model.global_moments = precision_weighted_moments(*data);
      break;
    case MethodTag::independent_npmle: {
      const auto y = data->y();
      const auto sigma = data->sigma();
      auto fit = npmle::fit(y, sigma, raw_scale_grid(y, opts.grid), opts.solver);
      model.prior = fit.prior;
      model.npmle_fit = std::move(fit);
      break;
    }
    case MethodTag::close_gauss:
    case MethodTag::close_npmle: {
      if (n < 10) throw InputError("close methods need at least 10 observations");
      model.nuisance = nuisance::fit_nuisance(*data, opts.nuisance);
      for (const auto& d : model.nuisance->diagnostics) model.diagnostics.push_back(d);
      if (tag == MethodTag::close_npmle) {
        std::vector<double> z(n), nu(n);
        for (std::size_t i = 0; i < n; ++i) {
          const auto& o = (*data)[i];
          const double s = model.nuisance->s(o.sigma);
          z[i] = (o.y - model.nuisance->m(o.sigma)) / s;
          nu[i] = o.sigma / s;
        }
        auto fit = npmle::fit(z, nu, opts.grid, opts.solver);
        model.prior = fit.prior;
        model.npmle_fit = std::move(fit);
      }
      break;
    }
  }
  if (model.npmle_fit)
    for (const auto& w : model.npmle_fit->warnings) model.diagnostics.push_back(w);
  return model;
}

// ---------------------------------------------------------------------------
// Posteriors

struct PosteriorOptions {
  int max_order = 2;
  /// Score a dataset other than the one used for fitting.
  bool allow_out_of_sample = false;
};

/// Gaussian-prior posterior: theta | y ~ N(w m + (1 - w) y, s^2 sigma^2 / (s^2 + sigma^2))
/// with w = sigma^2 / (s^2 + sigma^2).
inline PosteriorSummary gaussian_posterior(double y, double sigma, double m, double s_sq,
                                           int max_order) {
  const double sigma_sq = sigma * sigma;
  const double total = s_sq + sigma_sq;
  const double mean = sigma_sq / total * m + s_sq / total * y;
  const double var = s_sq * sigma_sq / total;
  PosteriorSummary out;
  out.moments_theta = gaussian_raw_moments(mean, var, max_order);
  out.mean_theta = mean;
  out.mean_tau = s_sq > 0.0 ? (mean - m) / std::sqrt(s_sq) : 0.0;
  out.log_marginal_density = normal_log_pdf((y - m) / std::sqrt(total)) - 0.5 * std::log(total);
  return out;
}

inline std::vector<PosteriorSummary> posterior(const FittedModel& model, const Dataset& data,
                                               const PosteriorOptions& opts = {}) {
  if (opts.max_order < 1) throw InputError("posterior: max_order must be at least 1");
  if (!opts.allow_out_of_sample && data.fingerprint() != model.dataset_fingerprint)
    throw InputError("posterior: dataset differs from the fitting dataset "
                     "(enable out-of-sample scoring to override)");
  if (model.beta && model.beta->size() != data.covariate_dim() + 1)
    throw InputError("posterior: covariate dimension does not match the fitted model");

  const std::size_t n = data.size();
  std::vector<PosteriorSummary> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = data[i];
    const double shift = model.beta ? linear_index(o, *model.beta) : 0.0;
    const double y = o.y - shift;
    PosteriorSummary& post = out[i];
    try {
      switch (model.tag) {
        case MethodTag::naive:
          post.moments_theta.resize(static_cast<std::size_t>(opts.max_order));
          for (int v = 1; v <= opts.max_order; ++v)
            post.moments_theta[static_cast<std::size_t>(v - 1)] = std::pow(y, v);
          post.mean_theta = y;
          post.mean_tau = std::numeric_limits<double>::quiet_NaN();
          post.log_marginal_density = std::numeric_limits<double>::quiet_NaN();
          break;
        case MethodTag::independent_gauss: {
          if (!model.global_moments) throw InputError("posterior: model lacks global moments");
          post = gaussian_posterior(y, o.sigma, model.global_moments->mean,
                                    model.global_moments->variance, opts.max_order);
          break;
        }
        case MethodTag::close_gauss: {
          if (!model.nuisance) throw InputError("posterior: model lacks a nuisance fit");
          const double s = model.nuisance->s(o.sigma);
          post = gaussian_posterior(y, o.sigma, model.nuisance->m(o.sigma), s * s, opts.max_order);
          break;
        }
        case MethodTag::independent_npmle: {
          if (!model.prior) throw InputError("posterior: model lacks a prior");
          Observation unit{y, o.sigma, {}};
          post = posterior_theta_summary(*model.prior, unit, 0.0, 1.0, opts.max_order);
          break;
        }
        case MethodTag::close_npmle: {
          if (!model.prior || !model.nuisance)
            throw InputError("posterior: model lacks a prior or nuisance fit");
          Observation unit{y, o.sigma, {}};
          post = posterior_theta_summary(*model.prior, unit, model.nuisance->m(o.sigma),
                                         model.nuisance->s(o.sigma), opts.max_order);
          break;
        }
      }
    } catch (const DegeneratePosteriorError&) {
      throw DegeneratePosteriorError("posterior: all posterior weights underflowed", i);
    }
    if (shift != 0.0) {
      post.moments_theta = shift_raw_moments(post.moments_theta, shift);
      post.mean_theta = post.moments_theta[0];
    }
  }
  return out;
}

inline std::vector<double> posterior_means(const std::vector<PosteriorSummary>& post) {
  std::vector<double> out(post.size());
  for (std::size_t i = 0; i < post.size(); ++i) out[i] = post[i].mean_theta;
  return out;
}

}  // namespace closeeb::methods
