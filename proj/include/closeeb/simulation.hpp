// Synthetic data-generating processes with known priors, oracle posteriors
// under the true prior, and the Monte Carlo relative-MSE harness.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "closeeb/core.hpp"
#include "closeeb/methods.hpp"
#include "closeeb/npmle.hpp"
#include "closeeb/nuisance.hpp"
#include "closeeb/parallel.hpp"
#include "closeeb/rng.hpp"

namespace closeeb::simulation {

using methods::MethodTag;

enum class Variant { gaussian_ls, vingtile_npmle, weibull_ls };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::gaussian_ls: return "gaussian_ls";
    case Variant::vingtile_npmle: return "vingtile_npmle";
    case Variant::weibull_ls: return "weibull_ls";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::gaussian_ls, Variant::vingtile_npmle, Variant::weibull_ls})
    if (to_string(v) == name) return v;
  throw InputError("unknown dgp variant '" + std::string(name) + "'");
}

/// a + b log10(sigma) + c sigma.
struct AffineInSigma {
  double intercept = 0.0;
  double log10_slope = 0.0;
  double linear_slope = 0.0;

  double operator()(double sigma) const {
    return intercept + log10_slope * std::log10(sigma) + linear_slope * sigma;
  }
};

struct SigmaSampler {
  enum class Kind { log_uniform, uniform, empirical };
  Kind kind = Kind::log_uniform;
  double lo = 0.1;
  double hi = 1.0;
  std::vector<double> values;  // empirical support

  double draw(Stream& rng) const {
    switch (kind) {
      case Kind::log_uniform:
        return std::exp(rng.uniform(std::log(lo), std::log(hi)));
      case Kind::uniform:
        return rng.uniform(lo, hi);
      case Kind::empirical:
        return values[static_cast<std::size_t>(rng.index(values.size()))];
    }
    return lo;
  }

  void validate() const {
    if (kind == Kind::empirical) {
      if (values.empty()) throw InputError("sigma sampler: empty empirical support");
      for (double v : values)
        if (!(v > 0.0)) throw InputError("sigma sampler: non-positive sigma");
    } else if (!(lo > 0.0 && hi >= lo)) {
      throw InputError("sigma sampler: need 0 < lo <= hi");
    }
  }
};

/// Per-sigma-bin standardized priors calibrated from a pilot dataset.
struct VingtileCalibration {
  std::vector<double> edges;  // inner bin boundaries, ascending
  std::vector<DiscretePrior> priors;
  std::vector<std::string> warnings;

  std::size_t bin_of(double sigma) const {
    return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), sigma) -
                                    edges.begin());
  }
};

struct Dgp {
  Variant variant = Variant::gaussian_ls;
  std::function<double(double)> m0;
  std::function<double(double)> s0;
  SigmaSampler sigma;
  /// theta also includes X' beta with X ~ N(0, I) of dimension beta.size().
  std::vector<double> beta;
  std::optional<VingtileCalibration> vingtiles;
};

struct SimDraw {
  Dataset dataset;
  std::vector<double> theta_true;
  std::vector<double> tau_true;
  std::vector<double> alpha;  // Weibull shapes (weibull_ls only)
  std::vector<std::size_t> bin;  // sigma bin (vingtile_npmle only)
};

inline Dgp gaussian_ls(AffineInSigma m0, AffineInSigma s0, SigmaSampler sigma = {}) {
  Dgp d;
  d.variant = Variant::gaussian_ls;
  d.m0 = m0;
  d.s0 = s0;
  d.sigma = std::move(sigma);
  return d;
}

inline Dgp weibull_ls(AffineInSigma m0, AffineInSigma s0, SigmaSampler sigma = {}) {
  Dgp d = gaussian_ls(m0, s0, std::move(sigma));
  d.variant = Variant::weibull_ls;
  return d;
}

/// m0 = 0.5 log10(sigma), s0 = 0.5, sigma log-uniform on [0.1, 1].
inline Dgp default_gaussian_ls() { return gaussian_ls({0.0, 0.5, 0.0}, {0.5, 0.0, 0.0}); }

/// Mean and standard deviation of Weibull(shape, 1).
inline std::pair<double, double> weibull_moments(double shape) {
  const double g1 = std::tgamma(1.0 + 1.0 / shape);
  const double g2 = std::tgamma(1.0 + 2.0 / shape);
  return {g1, std::sqrt(g2 - g1 * g1)};
}

struct CalibrationOptions {
  std::size_t bins = 20;
  std::size_t min_per_bin = 20;
  methods::MethodOptions method_options;
};

/// Fits the location-scale nuisance on the pilot, then an NPMLE within each
/// sigma bin on the transformed data, each affinely rescaled to mean zero and
/// variance one. Sigma is resampled from the pilot.
inline Dgp calibrate_vingtile(const Dataset& pilot_in, const CalibrationOptions& opts = {}) {
  Dataset pilot = pilot_in;
  if (pilot.covariate_dim() > 0) pilot = methods::residualize(pilot).data;
  const std::size_t n = pilot.size();
  if (n < 10) throw InputError("vingtile calibration: pilot needs at least 10 units");

  VingtileCalibration cal;
  std::size_t bins = std::max<std::size_t>(1, std::min(opts.bins, n / opts.min_per_bin));
  if (bins < opts.bins)
    cal.warnings.push_back("pilot has fewer than " + std::to_string(opts.min_per_bin) +
                           " units per bin; merged into " + std::to_string(bins) + " bins");

  auto nuis = std::make_shared<nuisance::NuisanceFit>(
      nuisance::fit_nuisance(pilot, opts.method_options.nuisance));
  auto sigma = pilot.sigma();
  std::vector<double> sorted = sigma;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t j = 1; j < bins; ++j) cal.edges.push_back(sorted[j * n / bins]);

  std::vector<std::vector<double>> z(bins), nu(bins);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = pilot[i];
    const double s = nuis->s(o.sigma);
    const std::size_t b = cal.bin_of(o.sigma);
    z[b].push_back((o.y - nuis->m(o.sigma)) / s);
    nu[b].push_back(o.sigma / s);
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (z[b].empty()) {
      cal.warnings.push_back("empty sigma bin " + std::to_string(b) + "; using a standard two-point prior");
      cal.priors.push_back(DiscretePrior({-1.0, 1.0}, {0.5, 0.5}));
      continue;
    }
    DiscretePrior fitted = [&] {
      try {
        return npmle::fit(z[b], nu[b], opts.method_options.grid, opts.method_options.solver).prior;
      } catch (const npmle::ConvergenceError& e) {
        cal.warnings.push_back("bin " + std::to_string(b) + ": " + e.what());
        return e.best().prior;
      }
    }();
    const double mean = fitted.mean();
    const double sd = std::sqrt(fitted.variance());
    if (!(sd > 1e-12)) {
      cal.warnings.push_back("bin " + std::to_string(b) + " prior is degenerate; using a standard two-point prior");
      cal.priors.push_back(DiscretePrior({-1.0, 1.0}, {0.5, 0.5}));
      continue;
    }
    std::vector<double> support = fitted.support();
    for (double& t : support) t = (t - mean) / sd;
    cal.priors.push_back(DiscretePrior::normalized(std::move(support), fitted.weights()));
  }

  Dgp d;
  d.variant = Variant::vingtile_npmle;
  d.m0 = [nuis](double s) { return nuis->m(s); };
  d.s0 = [nuis](double s) { return nuis->s(s); };
  d.sigma.kind = SigmaSampler::Kind::empirical;
  d.sigma.values = std::move(sigma);
  d.vingtiles = std::move(cal);
  return d;
}

inline SimDraw sample(const Dgp& dgp, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InputError("sample: n must be at least 1");
  if (!dgp.m0 || !dgp.s0) throw InputError("sample: dgp lacks m0/s0");
  dgp.sigma.validate();
  if (dgp.variant == Variant::vingtile_npmle && !dgp.vingtiles)
    throw InputError("sample: vingtile dgp is not calibrated");

  const std::size_t p = dgp.beta.size();
  std::vector<Observation> obs(n);
  std::vector<double> tau_draw(n), noise(n), m0(n), s0(n);
  SimDraw out;
  out.theta_true.resize(n);
  out.tau_true.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Stream rng(seed, i, 0x51D);
    auto& o = obs[i];
    o.sigma = dgp.sigma.draw(rng);
    o.covariates.resize(p);
    for (auto& x : o.covariates) x = rng.normal();
    tau_draw[i] = dgp.variant == Variant::gaussian_ls ? rng.normal() : rng.uniform();
    noise[i] = rng.normal();
    m0[i] = dgp.m0(o.sigma);
    s0[i] = dgp.s0(o.sigma);
    if (!(s0[i] > 0.0)) throw InputError("sample: s0(sigma) must be positive");
  }

  switch (dgp.variant) {
    case Variant::gaussian_ls:
      out.tau_true = tau_draw;
      break;
    case Variant::weibull_ls: {
      const auto [lo_it, hi_it] = std::minmax_element(m0.begin(), m0.end());
      const double lo = *lo_it, hi = *hi_it;
      out.alpha.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        out.alpha[i] = hi > lo ? 0.5 + 0.5 * (m0[i] - lo) / (hi - lo) : 0.75;
        const auto [mean, sd] = weibull_moments(out.alpha[i]);
        const double w = std::pow(-std::log(tau_draw[i]), 1.0 / out.alpha[i]);
        out.tau_true[i] = (w - mean) / sd;
      }
      break;
    }
    case Variant::vingtile_npmle: {
      out.bin.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        out.bin[i] = dgp.vingtiles->bin_of(obs[i].sigma);
        const auto& prior = dgp.vingtiles->priors[out.bin[i]];
        double cumulative = 0.0;
        std::size_t k = 0;
        for (; k + 1 < prior.size(); ++k) {
          cumulative += prior.weights()[k];
          if (tau_draw[i] < cumulative) break;
        }
        out.tau_true[i] = prior.support()[k];
      }
      break;
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    double theta = s0[i] * out.tau_true[i] + m0[i];
    for (std::size_t c = 0; c < p; ++c) theta += dgp.beta[c] * obs[i].covariates[c];
    out.theta_true[i] = theta;
    obs[i].y = theta + obs[i].sigma * noise[i];
  }
  out.dataset = Dataset(std::move(obs));
  return out;
}

/// Equal-weight quantile discretization of the standardized Weibull(shape).
inline DiscretePrior weibull_quadrature(double shape, std::size_t points = 10001) {
  const auto [mean, sd] = weibull_moments(shape);
  std::vector<double> support(points), weights(points, 1.0 / static_cast<double>(points));
  for (std::size_t k = 0; k < points; ++k) {
    const double u = (static_cast<double>(k) + 0.5) / static_cast<double>(points);
    support[k] = (std::pow(-std::log1p(-u), 1.0 / shape) - mean) / sd;
  }
  return DiscretePrior::normalized(std::move(support), std::move(weights));
}

/// Posterior under the true conditional prior of the DGP.
inline std::vector<PosteriorSummary> oracle_posterior(const Dgp& dgp, const SimDraw& draw,
                                                      int max_order = 2) {
  const Dataset& data = draw.dataset;
  const std::size_t n = data.size();
  std::vector<PosteriorSummary> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = data[i];
    double shift = 0.0;
    for (std::size_t c = 0; c < dgp.beta.size(); ++c) shift += dgp.beta[c] * o.covariates[c];
    const Observation unit{o.y - shift, o.sigma, {}};
    const double m = dgp.m0(o.sigma);
    const double s = dgp.s0(o.sigma);
    switch (dgp.variant) {
      case Variant::gaussian_ls:
        out[i] = methods::gaussian_posterior(unit.y, unit.sigma, m, s * s, max_order);
        break;
      case Variant::weibull_ls:
        out[i] = posterior_theta_summary(weibull_quadrature(draw.alpha[i]), unit, m, s, max_order);
        break;
      case Variant::vingtile_npmle:
        out[i] = posterior_theta_summary(dgp.vingtiles->priors[draw.bin[i]], unit, m, s, max_order);
        break;
    }
    if (shift != 0.0) {
      out[i].moments_theta = shift_raw_moments(out[i].moments_theta, shift);
      out[i].mean_theta = out[i].moments_theta[0];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo harness

struct MseRow {
  std::string method;
  double mse = 0.0;
  double mse_se = 0.0;
  double relative = 0.0;  // 100 (naive - method) / (naive - oracle)
  double relative_se = 0.0;
  int replications = 0;
  int failures = 0;
};

struct MseTableOptions {
  methods::MethodOptions method_options;
  unsigned threads = 1;
};

inline double mean_squared_error(std::span<const double> a, std::span<const double> b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return total / static_cast<double>(a.size());
}

/// Rows: naive, the requested methods (naive not repeated), then oracle.
inline std::vector<MseRow> mse_table(const Dgp& dgp, std::size_t n,
                                     std::span<const MethodTag> method_list, int replications,
                                     std::uint64_t seed, const MseTableOptions& opts = {}) {
  if (replications < 1) throw InputError("mse_table: replications must be at least 1");
  std::vector<MethodTag> tags{MethodTag::naive};
  for (MethodTag t : method_list)
    if (t != MethodTag::naive) tags.push_back(t);
  const std::size_t cols = tags.size() + 1;  // last column: oracle
  const auto reps = static_cast<std::size_t>(replications);
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> mse(reps, std::vector<double>(cols, kNaN));

  parallel_for(reps, opts.threads, [&](std::size_t r) {
    const SimDraw draw = sample(dgp, n, splitmix64(seed) ^ splitmix64(r + 1));
    for (std::size_t k = 0; k < tags.size(); ++k) {
      try {
        const auto model = methods::fit_method(draw.dataset, tags[k], opts.method_options);
        const auto means = methods::posterior_means(methods::posterior(model, draw.dataset));
        mse[r][k] = mean_squared_error(means, draw.theta_true);
      } catch (const std::exception&) {
        mse[r][k] = kNaN;
      }
    }
    mse[r][cols - 1] =
        mean_squared_error(methods::posterior_means(oracle_posterior(dgp, draw)), draw.theta_true);
  });

  std::vector<MseRow> rows(cols);
  for (std::size_t k = 0; k < cols; ++k) {
    MseRow& row = rows[k];
    row.method = k + 1 == cols ? "oracle" : std::string(methods::to_string(tags[k]));
    std::vector<double> a, b, m;  // naive - method, naive - oracle, method
    for (std::size_t r = 0; r < reps; ++r) {
      if (std::isnan(mse[r][k])) {
        ++row.failures;
        continue;
      }
      m.push_back(mse[r][k]);
      a.push_back(mse[r][0] - mse[r][k]);
      b.push_back(mse[r][0] - mse[r][cols - 1]);
    }
    row.replications = static_cast<int>(m.size());
    if (m.empty()) {
      row.mse = row.mse_se = row.relative = row.relative_se = kNaN;
      continue;
    }
    const double count = static_cast<double>(m.size());
    double sum_m = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (std::size_t j = 0; j < m.size(); ++j) {
      sum_m += m[j];
      sum_a += a[j];
      sum_b += b[j];
    }
    row.mse = sum_m / count;
    row.relative = 100.0 * sum_a / sum_b;
    if (m.size() >= 2) {
      double ss_m = 0.0, ss_lin = 0.0;
      const double ratio = sum_a / sum_b;
      for (std::size_t j = 0; j < m.size(); ++j) {
        ss_m += (m[j] - row.mse) * (m[j] - row.mse);
        const double lin = a[j] - ratio * b[j];  // delta method for a ratio of means
        ss_lin += lin * lin;
      }
      row.mse_se = std::sqrt(ss_m / (count - 1.0) / count);
      row.relative_se = 100.0 * std::sqrt(ss_lin / (count - 1.0) / count) / std::abs(sum_b / count);
    } else {
      row.mse_se = row.relative_se = kNaN;
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Declarative configuration

/// Key-value DGP description. Lines are `key = value`; `#` starts a comment.
struct DgpConfig {
  Variant variant = Variant::gaussian_ls;
  std::size_t n = 2000;
  int replications = 10;
  std::uint64_t seed = 1;
  SigmaSampler::Kind sigma_kind = SigmaSampler::Kind::log_uniform;
  double sigma_lo = 0.1;
  double sigma_hi = 1.0;
  AffineInSigma m0{0.0, 0.5, 0.0};
  AffineInSigma s0{0.5, 0.0, 0.0};
  std::vector<double> beta;
  std::string pilot;  // CSV path for vingtile calibration; empty = generated pilot
  std::size_t pilot_n = 2000;
  std::vector<MethodTag> methods{MethodTag::independent_gauss, MethodTag::independent_npmle,
                                 MethodTag::close_gauss, MethodTag::close_npmle};

  void set(const std::string& key, const std::string& value) {
    auto number = [&](const std::string& v) {
      std::size_t used = 0;
      double d = 0.0;
      try {
        d = std::stod(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != v.size()) throw InputError("config: bad number '" + v + "' for key " + key);
      return d;
    };
    auto list = [](const std::string& v) {
      std::vector<std::string> out;
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
      }
      return out;
    };
    if (key == "variant" || key == "dgp") variant = parse_variant(value);
    else if (key == "n") n = static_cast<std::size_t>(number(value));
    else if (key == "replications" || key == "reps") replications = static_cast<int>(number(value));
    else if (key == "seed") seed = static_cast<std::uint64_t>(number(value));
    else if (key == "sigma_dist") {
      if (value == "log_uniform") sigma_kind = SigmaSampler::Kind::log_uniform;
      else if (value == "uniform") sigma_kind = SigmaSampler::Kind::uniform;
      else throw InputError("config: sigma_dist must be log_uniform or uniform");
    }
    else if (key == "sigma_lo") sigma_lo = number(value);
    else if (key == "sigma_hi") sigma_hi = number(value);
    else if (key == "m0_intercept") m0.intercept = number(value);
    else if (key == "m0_log10_slope") m0.log10_slope = number(value);
    else if (key == "m0_linear_slope") m0.linear_slope = number(value);
    else if (key == "s0_intercept") s0.intercept = number(value);
    else if (key == "s0_log10_slope") s0.log10_slope = number(value);
    else if (key == "s0_linear_slope") s0.linear_slope = number(value);
    else if (key == "beta") {
      beta.clear();
      for (const auto& item : list(value)) beta.push_back(number(item));
    }
    else if (key == "pilot") pilot = value;
    else if (key == "pilot_n") pilot_n = static_cast<std::size_t>(number(value));
    else if (key == "methods") {
      methods.clear();
      for (const auto& item : list(value)) methods.push_back(methods::parse_method(item));
    }
    else throw InputError("config: unknown key '" + key + "'");
  }

  static DgpConfig parse(std::istream& in) {
    DgpConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw InputError("config line " + std::to_string(line_no) + ": expected key = value");
      auto trim = [](std::string s) {
        const auto first = s.find_first_not_of(" \t\r");
        const auto last = s.find_last_not_of(" \t\r");
        return first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
      };
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  SigmaSampler sigma_sampler() const {
    SigmaSampler s;
    s.kind = sigma_kind;
    s.lo = sigma_lo;
    s.hi = sigma_hi;
    return s;
  }
};

/// Builds the DGP; vingtile variants calibrate on `pilot` or, when absent, on
/// a gaussian_ls draw from the configured sigma distribution and moments.
inline Dgp make_dgp(const DgpConfig& cfg, const std::optional<Dataset>& pilot = {},
                    const CalibrationOptions& calibration = {}) {
  Dgp d;
  switch (cfg.variant) {
    case Variant::gaussian_ls:
      d = gaussian_ls(cfg.m0, cfg.s0, cfg.sigma_sampler());
      break;
    case Variant::weibull_ls:
      d = weibull_ls(cfg.m0, cfg.s0, cfg.sigma_sampler());
      break;
    case Variant::vingtile_npmle: {
      if (pilot) {
        d = calibrate_vingtile(*pilot, calibration);
      } else {
        const Dgp base = gaussian_ls(cfg.m0, cfg.s0, cfg.sigma_sampler());
        d = calibrate_vingtile(sample(base, cfg.pilot_n, splitmix64(cfg.seed ^ 0x9170ULL)).dataset,
                               calibration);
      }
      break;
    }
  }
  d.beta = cfg.beta;
  return d;
}

}  // namespace closeeb::simulation
