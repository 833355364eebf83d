// Local-linear estimation of the conditional moments m0(sigma) = E[Y | sigma]
// and s0^2(sigma) = Var(Y | sigma) - sigma^2, regressing on x = log10(sigma).

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "closeeb/core.hpp"

namespace closeeb::nuisance {

/// Epanechnikov kernel on [-1, 1].
inline double epanechnikov(double u) { return std::abs(u) < 1.0 ? 0.75 * (1.0 - u * u) : 0.0; }

/// Linear-smoother weights of a local-linear fit at one evaluation point.
/// index[j] refers to the original (unsorted) design order.
struct SmootherWeights {
  std::vector<std::size_t> index;
  std::vector<double> weight;
  bool fallback_mean = false;     // singular local design, kernel-weighted mean used
  bool fallback_nearest = false;  // no design point in the window
};

/// Local-linear regression with an Epanechnikov kernel. Immutable after
/// construction; evaluation is thread-safe.
class LocalLinear {
 public:
  LocalLinear(std::span<const double> x, std::span<const double> y, double bandwidth)
      : bandwidth_(bandwidth) {
    if (x.size() != y.size()) throw InputError("llr: x and y lengths differ");
    if (x.size() < 2) throw InputError("llr: need at least two points");
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth))
      throw InputError("llr: bandwidth must be positive");
    order_.resize(x.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::stable_sort(order_.begin(), order_.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    xs_.resize(x.size());
    y_.assign(y.begin(), y.end());
    for (std::size_t j = 0; j < order_.size(); ++j) {
      if (!std::isfinite(x[order_[j]]) || !std::isfinite(y[order_[j]]))
        throw InputError("llr: non-finite input");
      xs_[j] = x[order_[j]];
    }
  }

  double bandwidth() const { return bandwidth_; }
  std::size_t size() const { return xs_.size(); }

  SmootherWeights weights(double x0) const {
    SmootherWeights out;
    const auto first = static_cast<std::size_t>(
        std::upper_bound(xs_.begin(), xs_.end(), x0 - bandwidth_) - xs_.begin());
    const auto last = static_cast<std::size_t>(
        std::lower_bound(xs_.begin(), xs_.end(), x0 + bandwidth_) - xs_.begin());

    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    std::vector<double> kern;
    kern.reserve(last > first ? last - first : 0);
    for (std::size_t j = first; j < last; ++j) {
      const double u = (xs_[j] - x0) / bandwidth_;
      const double k = epanechnikov(u);
      kern.push_back(k);
      s0 += k;
      s1 += k * u;
      s2 += k * u * u;
    }

    if (!(s0 > 0.0)) {
      // Nearest design point; ties go to the lower x.
      const auto hi = static_cast<std::size_t>(
          std::lower_bound(xs_.begin(), xs_.end(), x0) - xs_.begin());
      std::size_t pick = hi == xs_.size() ? xs_.size() - 1 : hi;
      if (hi > 0 && (hi == xs_.size() || x0 - xs_[hi - 1] <= xs_[hi] - x0)) pick = hi - 1;
      out.index.push_back(order_[pick]);
      out.weight.push_back(1.0);
      out.fallback_nearest = true;
      return out;
    }

    bool distinct = false;
    for (std::size_t j = first + 1; j < last && !distinct; ++j)
      if (kern[j - first] > 0.0 && xs_[j] != xs_[first]) distinct = true;
    const double det = s0 * s2 - s1 * s1;
    const bool singular = !distinct || !(det > 1e-12 * s0 * s2);

    out.index.reserve(last - first);
    out.weight.reserve(last - first);
    for (std::size_t j = first; j < last; ++j) {
      const double k = kern[j - first];
      if (k == 0.0) continue;
      const double u = (xs_[j] - x0) / bandwidth_;
      out.index.push_back(order_[j]);
      out.weight.push_back(singular ? k / s0 : k * (s2 - u * s1) / det);
    }
    out.fallback_mean = singular;
    return out;
  }

  struct Evaluation {
    double value = 0.0;
    bool fallback_mean = false;
    bool fallback_nearest = false;
  };

  Evaluation evaluate(double x0) const {
    const auto w = weights(x0);
    Evaluation out{0.0, w.fallback_mean, w.fallback_nearest};
    for (std::size_t j = 0; j < w.index.size(); ++j) out.value += w.weight[j] * y_[w.index[j]];
    return out;
  }

  double operator()(double x0) const { return evaluate(x0).value; }

 private:
  double bandwidth_;
  std::vector<std::size_t> order_;  // sorted position -> original index
  std::vector<double> xs_;          // sorted design
  std::vector<double> y_;           // original order
};

inline LocalLinear llr_fit(std::span<const double> x, std::span<const double> y, double bandwidth) {
  return LocalLinear(x, y, bandwidth);
}

struct BandwidthChoice {
  double bandwidth = 0.0;
  double unprojected = 0.0;
  bool degenerate = false;  // constant design; upper projection end returned
};

/// Projection interval [n^(-1/5) / c_h, c_h n^(-1/5)].
inline std::pair<double, double> bandwidth_bounds(std::size_t n, double c_h) {
  const double base = std::pow(static_cast<double>(n), -0.2);
  return {base / c_h, base * c_h};
}

/// Rule-of-thumb plug-in bandwidth for local-linear regression: global
/// quartic pilot for curvature and residual variance, then the asymptotically
/// optimal formula h = C_K [sigma^2 (b - a) / sum_i m''(x_i)^2]^(1/5) with
/// C_K = (R(K) / mu_2(K)^2)^(1/5) for the Epanechnikov kernel, projected onto
/// the rate interval.
inline BandwidthChoice select_bandwidth(std::span<const double> x, std::span<const double> y,
                                        double c_h = 10.0) {
  const std::size_t n = x.size();
  if (n != y.size()) throw InputError("select_bandwidth: x and y lengths differ");
  if (n < 10) throw InputError("select_bandwidth: need at least 10 points");
  if (!(c_h > 1.0)) throw InputError("select_bandwidth: c_h must exceed 1");
  const auto [lo_h, hi_h] = bandwidth_bounds(n, c_h);

  const auto [min_it, max_it] = std::minmax_element(x.begin(), x.end());
  const double a = *min_it;
  const double b = *max_it;
  BandwidthChoice out;
  if (!(b > a)) {
    out.bandwidth = hi_h;
    out.unprojected = hi_h;
    out.degenerate = true;
    return out;
  }

  // Quartic in the standardized variable t = (x - center) / half_range.
  const double center = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  Eigen::MatrixXd design(static_cast<Eigen::Index>(n), 5);
  Eigen::VectorXd response(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (x[i] - center) / half;
    double p = 1.0;
    for (int c = 0; c < 5; ++c) {
      design(static_cast<Eigen::Index>(i), c) = p;
      p *= t;
    }
    response[static_cast<Eigen::Index>(i)] = y[i];
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  const Eigen::VectorXd coef = qr.solve(response);
  const Eigen::VectorXd resid = response - design * coef;
  const auto dof = static_cast<double>(n) - static_cast<double>(std::min<Eigen::Index>(qr.rank(), 5));
  const double sigma_sq = resid.squaredNorm() / std::max(1.0, dof);

  double curvature = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (x[i] - center) / half;
    const double second_t = 2.0 * coef[2] + 6.0 * coef[3] * t + 12.0 * coef[4] * t * t;
    const double second_x = second_t / (half * half);
    curvature += second_x * second_x;
  }

  constexpr double kEpanechnikovConstant = 1.7187719275874789;  // 15^(1/5)
  double h;
  if (!(curvature > 0.0) || !(sigma_sq > 0.0)) {
    h = curvature > 0.0 ? lo_h : hi_h;
  } else {
    h = kEpanechnikovConstant * std::pow(sigma_sq * (b - a) / curvature, 0.2);
  }
  out.unprojected = h;
  out.bandwidth = std::clamp(h, lo_h, hi_h);
  return out;
}

/// p_n = (1/n) sum_j 1 / sum_i l_i(x_j)^2 over the design points x_j.
inline double effective_sample_size(std::span<const double> x, double bandwidth) {
  if (x.size() < 2) throw InputError("effective_sample_size: need at least two points");
  const std::vector<double> zeros(x.size(), 0.0);
  const LocalLinear smoother(x, zeros, bandwidth);
  double total = 0.0;
  for (double x0 : x) {
    const auto w = smoother.weights(x0);
    double sq = 0.0;
    for (double v : w.weight) sq += v * v;
    total += 1.0 / sq;
  }
  return total / static_cast<double>(x.size());
}

/// max(v - sigma^2, 2 v / (p_n + 2)) under a square root.
inline double truncated_sd(double v_hat, double sigma_sq, double p_n) {
  return std::sqrt(std::max(v_hat - sigma_sq, 2.0 / (p_n + 2.0) * v_hat));
}

struct NuisanceOptions {
  double c_h = 10.0;
  /// Smooth (R^2 - sigma^2) instead of smoothing R^2 and subtracting sigma^2.
  bool smooth_difference = false;
  double variance_floor = 1e-12;
};

/// Conditional moment estimates as functions of sigma.
struct NuisanceFit {
  std::function<double(double)> m_hat;
  std::function<double(double)> s_hat;
  double p_n = 0.0;
  double h_m = 0.0;
  double h_s = 0.0;
  std::vector<std::string> diagnostics;

  double m(double sigma) const { return m_hat(sigma); }
  double s(double sigma) const { return s_hat(sigma); }

  /// Nuisance fit from known functions (oracle or deserialized tables).
  static NuisanceFit from_functions(std::function<double(double)> m,
                                    std::function<double(double)> s) {
    NuisanceFit out;
    out.m_hat = std::move(m);
    out.s_hat = std::move(s);
    return out;
  }
};

inline NuisanceFit fit_nuisance(const Dataset& data, const NuisanceOptions& opts = {}) {
  const std::size_t n = data.size();
  if (n < 10) throw InputError("fit_nuisance: need at least 10 observations");
  std::vector<double> x(n), y = data.y(), sigma = data.sigma();
  for (std::size_t i = 0; i < n; ++i) x[i] = std::log10(sigma[i]);

  NuisanceFit out;
  const auto hm = select_bandwidth(x, y, opts.c_h);
  if (hm.degenerate) out.diagnostics.push_back("constant sigma: mean bandwidth set to upper bound");
  out.h_m = hm.bandwidth;
  auto mean_fit = std::make_shared<const LocalLinear>(llr_fit(x, y, out.h_m));

  std::vector<double> target(n);
  std::size_t nearest_fallbacks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = mean_fit->evaluate(x[i]);
    nearest_fallbacks += e.fallback_nearest ? 1 : 0;
    const double r = y[i] - e.value;
    target[i] = opts.smooth_difference ? r * r - sigma[i] * sigma[i] : r * r;
  }
  if (nearest_fallbacks > 0)
    out.diagnostics.push_back("mean fit used nearest-neighbor fallback at " +
                              std::to_string(nearest_fallbacks) + " points");

  const auto hs = select_bandwidth(x, target, opts.c_h);
  out.h_s = hs.bandwidth;
  auto var_fit = std::make_shared<const LocalLinear>(llr_fit(x, target, out.h_s));
  out.p_n = effective_sample_size(x, out.h_s);

  std::size_t floored = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (*var_fit)(x[i]) + (opts.smooth_difference ? sigma[i] * sigma[i] : 0.0);
    if (!(v > opts.variance_floor)) ++floored;
  }
  if (floored > 0)
    out.diagnostics.push_back("variance estimate floored at " + std::to_string(floored) +
                              " design points");

  out.m_hat = [mean_fit](double s) { return (*mean_fit)(std::log10(s)); };
  out.s_hat = [var_fit, p = out.p_n, floor = opts.variance_floor,
               diff = opts.smooth_difference](double s) {
    double v = (*var_fit)(std::log10(s)) + (diff ? s * s : 0.0);
    v = std::max(v, floor);
    return truncated_sd(v, s * s, p);
  };
  return out;
}

}  // namespace closeeb::nuisance
