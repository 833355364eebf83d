// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "closeeb/decisions.hpp"
#include "closeeb/io.hpp"
#include "closeeb/methods.hpp"
#include "closeeb/npmle.hpp"
#include "closeeb/nuisance.hpp"
#include "closeeb/simulation.hpp"
#include "closeeb/validation.hpp"

using namespace closeeb;
using decisions::Problem;
using methods::MethodTag;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

struct MeanSe {
  double mean = 0.0, se = 0.0;
};

MeanSe mean_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

DiscretePrior gaussian_grid_prior(std::size_t points = 801, double half_width = 8.0) {
  std::vector<double> support(points), weights(points);
  for (std::size_t k = 0; k < points; ++k) {
    support[k] = -half_width + 2.0 * half_width * static_cast<double>(k) / static_cast<double>(points - 1);
    weights[k] = normal_pdf(support[k]);
  }
  return DiscretePrior::normalized(support, weights);
}

DiscretePrior discretize_onto(const DiscretePrior& prior, const std::vector<double>& grid) {
  std::vector<double> w(grid.size(), 0.0);
  for (std::size_t k = 0; k < prior.size(); ++k) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < grid.size(); ++j)
      if (std::abs(grid[j] - prior.support()[k]) < std::abs(grid[best] - prior.support()[k])) best = j;
    w[best] += prior.weights()[k];
  }
  return DiscretePrior::normalized(grid, w);
}

// ---------------------------------------------------------------------------

void near_oracle_mse(Outcome& out) {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<MethodTag> tags{MethodTag::independent_gauss, MethodTag::close_gauss, MethodTag::close_npmle};
  const auto rows = simulation::mse_table(simulation::default_gaussian_ls(), 10000, tags, 50, 20240601);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  auto row = [&](const std::string& name) -> const simulation::MseRow& {
    for (const auto& r : rows)
      if (r.method == name) return r;
    throw std::runtime_error("missing row " + name);
  };
  for (const auto& r : rows)
    out.detail << r.method << " " << r.relative << " (se " << r.relative_se << ", failures " << r.failures << "); ";
  out.detail << "runtime " << seconds << " s";
  out.require(row("close_npmle").relative >= 90.0, "close_npmle >= 90");
  out.require(row("close_gauss").relative >= 90.0, "close_gauss >= 90");
  out.require(row("independent_gauss").relative <= row("close_npmle").relative, "independent_gauss <= close_npmle");
  out.require(row("close_npmle").failures == 0 && row("close_gauss").failures == 0, "no failed replications");
  out.require(seconds <= 300.0, "runtime <= 5 min");
}

void approximate_maximizer(Outcome& out) {
  std::size_t fits = 0, comparisons = 0;
  double worst = INFINITY;  // smallest fitted - (other - kappa)
  auto certify = [&](const npmle::NpmleFit& fit, const std::vector<double>& z, const std::vector<double>& nu,
                     const std::optional<DiscretePrior>& truth, const std::string& label) {
    ++fits;
    const double fitted = npmle::loglik(fit.prior, z, nu);
    const auto& grid = fit.prior.support();
    auto check = [&](const DiscretePrior& h, const std::string& what) {
      ++comparisons;
      const double margin = fitted - (npmle::loglik(h, z, nu) - fit.kappa_n);
      worst = std::min(worst, margin);
      if (!(margin >= -1e-12)) out.require(false, label + " vs " + what);
    };
    for (double g : grid) check(DiscretePrior::point_mass(g), "atom " + std::to_string(g));
    check(DiscretePrior(grid, std::vector<double>(grid.size(), 1.0 / static_cast<double>(grid.size()))), "uniform");
    if (truth) check(discretize_onto(*truth, grid), "true prior");
  };

  // Direct fits on transformed data with known priors.
  const std::vector<std::pair<std::string, DiscretePrior>> priors{
      {"two-point", DiscretePrior({-2.0, 1.0}, {0.3, 0.7})},
      {"gaussian", gaussian_grid_prior()},
      {"three-point", DiscretePrior({-3.0, 0.0, 4.0}, {0.2, 0.5, 0.3})},
  };
  for (const auto& [name, prior] : priors)
    for (std::size_t n : {10, 50, 400, 3000}) {
      Stream rng(n, prior.size());
      std::vector<double> z(n), nu(n);
      for (std::size_t i = 0; i < n; ++i) {
        double u = rng.uniform(), acc = 0.0, tau = prior.support().back();
        for (std::size_t k = 0; k < prior.size(); ++k) {
          acc += prior.weights()[k];
          if (u < acc) {
            tau = prior.support()[k];
            break;
          }
        }
        nu[i] = rng.uniform(0.2, 1.5);
        z[i] = tau + nu[i] * rng.normal();
      }
      certify(npmle::fit(z, nu), z, nu, prior, name + " n=" + std::to_string(n));
    }

  // Fits made inside the estimation methods, checked on the data they saw.
  const std::vector<std::pair<std::string, simulation::Dgp>> dgps{
      {"gaussian_ls", simulation::default_gaussian_ls()},
      {"weibull_ls", simulation::weibull_ls({0.0, 0.5, 0.0}, {0.5, 0.0, 0.0})},
  };
  for (const auto& [name, dgp] : dgps)
    for (auto tag : {MethodTag::independent_npmle, MethodTag::close_npmle}) {
      const auto draw = simulation::sample(dgp, 2000, 77);
      const auto model = methods::fit_method(draw.dataset, tag);
      const std::size_t n = draw.dataset.size();
      std::vector<double> z(n), nu(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& o = draw.dataset[i];
        double y = o.y;
        if (model.beta) y -= methods::linear_index(o, *model.beta);
        const double m = model.nuisance ? model.nuisance->m(o.sigma) : 0.0;
        const double s = model.nuisance ? model.nuisance->s(o.sigma) : 1.0;
        z[i] = (y - m) / s;
        nu[i] = o.sigma / s;
      }
      std::optional<DiscretePrior> truth;
      if (tag == MethodTag::close_npmle && name == "gaussian_ls") truth = gaussian_grid_prior();
      certify(*model.npmle_fit, z, nu, truth, name + " " + std::string(methods::to_string(tag)));
    }
  out.detail << fits << " fits, " << comparisons << " comparisons, smallest margin " << worst;
}

void tweedie_equivalence(Outcome& out) {
  Stream rng(31337, 0);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t k = 1 + rng.index(12);
    std::vector<double> support(k), weights(k);
    double t = rng.uniform(-4.0, -2.0);
    for (std::size_t j = 0; j < k; ++j) {
      support[j] = t;
      t += rng.uniform(0.05, 1.5);
      weights[j] = rng.uniform();
    }
    const auto prior = DiscretePrior::normalized(support, weights);
    const double z = rng.uniform(-8.0, 8.0), nu = rng.uniform(0.1, 3.0);
    const double direct = posterior_tau_moments(prior, z, nu, 1)[0];
    const double tweedie = tweedie_posterior_mean(prior, z, nu);
    // Relative to the magnitude of the mean, floored at 1 so means near zero are compared absolutely.
    const double rel = std::abs(tweedie - direct) / std::max(1.0, std::abs(direct));
    worst = std::max(worst, rel);
  }
  out.detail << "1000 triples, max relative difference " << worst;
  out.require(worst <= 1e-10, "relative difference <= 1e-10");
}

void coupled_bootstrap(Outcome& out) {
  const std::size_t n = 50;
  std::vector<double> theta(n), sigma(n), fixed(n);
  Stream rng(404, 0);
  for (std::size_t i = 0; i < n; ++i) {
    theta[i] = rng.normal();
    sigma[i] = rng.uniform(0.3, 1.5);
    fixed[i] = theta[i] + rng.uniform(-1.0, 1.0);
  }
  auto draw = [&](std::uint64_t seed) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = theta[i] + sigma[i] * Stream(seed, i, 77).normal();
    return Dataset::from_columns(y, sigma);
  };
  const std::vector<std::pair<Problem, validation::Action>> actions{
      {Problem::mse, validation::Action(fixed)},
      {Problem::utilmax, validation::Action(decisions::select_utility(fixed))},
      {Problem::topm, validation::Action(decisions::select_top_m(fixed, n / 3))},
  };
  for (const auto& [problem, action] : actions) {
    const double truth = decisions::loss(problem, action, theta);
    std::vector<double> t;
    for (std::uint64_t r = 0; r < 2000; ++r) {
      const auto sp = validation::split(draw(5000 + r), 1.0 / 9.0, 99, r);
      t.push_back(validation::score_action(problem, sp, action).estimate);
    }
    const auto s = mean_se(t);
    const double z = (s.mean - truth) / s.se;
    out.detail << decisions::to_string(problem) << " z=" << z << "; ";
    out.require(std::abs(z) <= 4.0, std::string(decisions::to_string(problem)) + " within 4 SE");
  }

  double worst = 0.0;
  Stream big(405, 0);
  std::vector<double> y(5000), sd(5000);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 10.0 * big.normal();
    sd[i] = big.uniform(0.01, 5.0);
  }
  const auto data = Dataset::from_columns(y, sd);
  for (double omega : {1.0 / 9.0, 0.5, 2.0}) {
    const auto sp = validation::split(data, omega, 17);
    for (std::size_t i = 0; i < y.size(); ++i)
      worst = std::max(worst, std::abs((sp.y1[i] + omega * sp.y2[i]) / (1.0 + omega) - y[i]) /
                                  std::max(1.0, std::abs(y[i])));
  }
  out.detail << "reconstruction max error " << worst;
  out.require(worst <= 1e-12, "reconstruction identity");
}

void regret_bounds(Outcome& out) {
  const auto dgp = simulation::default_gaussian_ls();
  const std::size_t n = 2000, m = n / 3;
  for (auto tag : {MethodTag::close_npmle, MethodTag::independent_gauss}) {
    std::vector<double> um_gap, top_gap, um, top;
    for (std::uint64_t r = 0; r < 20; ++r) {
      const auto draw = simulation::sample(dgp, n, 900 + r);
      const auto star = methods::posterior_means(simulation::oracle_posterior(dgp, draw));
      const auto model = methods::fit_method(draw.dataset, tag);
      const auto hat = methods::posterior_means(methods::posterior(model, draw.dataset));
      const auto b = decisions::regret_bounds_check(hat, star, m);
      const auto& theta = draw.theta_true;
      const double um_r = decisions::loss(Problem::utilmax, decisions::select_utility(hat), theta) -
                          decisions::loss(Problem::utilmax, decisions::select_utility(star), theta);
      const double top_r = decisions::loss(Problem::topm, decisions::select_top_m(hat, m), theta) -
                           decisions::loss(Problem::topm, decisions::select_top_m(star, m), theta);
      um.push_back(um_r);
      top.push_back(top_r);
      um_gap.push_back(um_r - b.utilmax_bound);
      top_gap.push_back(top_r - b.topm_bound);
    }
    const auto ug = mean_se(um_gap), tg = mean_se(top_gap);
    const std::string name(methods::to_string(tag));
    out.detail << name << ": UM regret " << mean_se(um).mean << " vs bound gap " << ug.mean << " (se " << ug.se
               << "), top regret " << mean_se(top).mean << " vs bound gap " << tg.mean << " (se " << tg.se << "); ";
    out.require(ug.mean <= 3.0 * ug.se, name + " UM regret <= bound + 3 SE");
    out.require(tg.mean <= 3.0 * tg.se, name + " top-m regret <= bound + 3 SE");
  }
}

void nuisance_exactness(Outcome& out) {
  double worst = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Stream rng(seed, 0);
    const double a = rng.uniform(-3.0, 3.0), b = rng.uniform(-3.0, 3.0);
    std::vector<double> x(300), y(300);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = rng.uniform(-1.0, 0.0);
      y[i] = a + b * x[i];
    }
    for (double h : {0.05, 0.3, 1.0, 50.0}) {
      const auto fit = nuisance::llr_fit(x, y, h);
      for (int k = 0; k <= 100; ++k) {
        const double x0 = -1.0 + k / 100.0;
        worst = std::max(worst, std::abs(fit(x0) - (a + b * x0)));
      }
    }
  }
  out.detail << "affine max error " << worst << "; ";
  out.require(worst <= 1e-8, "affine reproduction to 1e-8");

  // Residual variance far below sigma^2 everywhere.
  double smallest = INFINITY;
  for (double scale : {0.0, 1e-3, 0.1}) {
    Stream rng(7, 0);
    std::vector<double> y(500), sigma(500);
    bool below = true;
    for (std::size_t i = 0; i < y.size(); ++i) {
      sigma[i] = rng.uniform(1.0, 3.0);
      y[i] = 2.0 + scale * rng.normal();
      below = below && (y[i] - 2.0) * (y[i] - 2.0) < sigma[i] * sigma[i];
    }
    out.require(below, "adversarial design");
    const auto fit = nuisance::fit_nuisance(Dataset::from_columns(y, sigma));
    for (int k = 0; k <= 200; ++k) {
      const double s = fit.s(1.0 + 2.0 * k / 200.0);
      smallest = std::min(smallest, std::isfinite(s) ? s : -INFINITY);
    }
  }
  out.detail << "adversarial min s_hat " << smallest;
  out.require(smallest > 0.0, "s_hat strictly positive");
}

void gaussian_conjugacy(Outcome& out) {
  Stream rng(12, 0);
  std::vector<double> y(1000), sigma(1000);
  auto m0 = [](double s) { return 0.5 * std::log10(s); };
  auto s0 = [](double s) { return 0.3 + 0.4 * s; };
  for (std::size_t i = 0; i < y.size(); ++i) {
    sigma[i] = std::pow(10.0, rng.uniform(-1.0, 0.0));
    y[i] = m0(sigma[i]) + s0(sigma[i]) * rng.normal() + sigma[i] * rng.normal();
  }
  const auto data = Dataset::from_columns(y, sigma);
  methods::FittedModel gauss;
  gauss.tag = MethodTag::close_gauss;
  gauss.nuisance = nuisance::NuisanceFit::from_functions(m0, s0);
  gauss.dataset_fingerprint = data.fingerprint();
  methods::FittedModel npmle = gauss;
  npmle.tag = MethodTag::close_npmle;
  npmle.prior = gaussian_grid_prior();
  const auto a = methods::posterior(gauss, data);
  const auto b = methods::posterior(npmle, data);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i].mean_theta - b[i].mean_theta));
  out.detail << "1000 units, max |difference| " << worst;
  out.require(worst <= 2e-3, "posterior means within 2e-3");
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void cli_determinism(Outcome& out) {
  const fs::path dir = fs::temp_directory_path() / ("closeeb_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto at = [&](const std::string& name) { return (dir / name).string(); };

  auto dgp = simulation::default_gaussian_ls();
  dgp.beta = {0.4};
  const auto draw = simulation::sample(dgp, 800, 3);
  std::vector<std::string> groups(800);
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i] = "g" + std::to_string(i % 4);
  io::write_file(at("data.csv"), io::to_csv(Dataset(draw.dataset.observations(), groups)));
  const auto input_before = io::read_file(at("data.csv"));

  struct Command {
    std::string name, args;
    std::vector<std::string> outputs;
  };
  const std::string data = at("data.csv");
  auto commands = [&](const std::string& tag) {
    return std::vector<Command>{
        {"fit", "fit -i " + data + " -o " + at("model" + tag + ".json"), {"model" + tag + ".json"}},
        {"posterior", "posterior -i " + data + " -o " + at("post" + tag + ".csv"), {"post" + tag + ".csv"}},
        {"select", "select -i " + data + " --problem topm -o " + at("sel" + tag + ".csv"), {"sel" + tag + ".csv"}},
        {"validate",
         "validate -i " + data + " --omega 0.1111111 --replications 20 --seed 7 -o " + at("val" + tag + ".csv"),
         {"val" + tag + ".csv", "val" + tag + ".json"}},
        {"simulate", "simulate --dgp weibull_ls --n 1000 --reps 3 --seed 11 -o " + at("sim" + tag + ".csv"),
         {"sim" + tag + ".csv"}},
    };
  };
  for (const std::string threads : {"1", "2"}) {
    const auto first = commands("_a" + threads), second = commands("_b" + threads);
    for (std::size_t c = 0; c < first.size(); ++c) {
      bool same = true;
      for (const auto* run : {&first[c], &second[c]}) {
        const int rc = shell("CLOSEEB_THREADS=" + threads + " " + std::string(CLOSEEB_CLI_PATH) + " " + run->args +
                             " > /dev/null 2>&1");
        if (rc != 0) out.require(false, run->name + " exit code " + std::to_string(rc));
      }
      for (std::size_t k = 0; k < first[c].outputs.size(); ++k) {
        const auto a = at(first[c].outputs[k]), b = at(second[c].outputs[k]);
        if (!fs::exists(a) || !fs::exists(b) || io::read_file(a) != io::read_file(b)) same = false;
      }
      // Manifests differ only in the output names they record.
      const auto ma = io::json::parse(io::read_file(at(first[c].outputs[0]) + ".manifest.json"));
      const auto mb = io::json::parse(io::read_file(at(second[c].outputs[0]) + ".manifest.json"));
      for (const char* key : {"tool", "version", "input_hash", "diagnostics"})
        if (ma.value(key, io::json()) != mb.value(key, io::json())) same = false;
      out.require(same, first[c].name + " threads=" + threads);
      out.detail << first[c].name << "@" << threads << (same ? " identical" : " DIFFERS") << "; ";
    }
  }
  out.require(io::read_file(data) == input_before, "input unchanged");
  fs::remove_all(dir);
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"1 near-oracle MSE", near_oracle_mse},
      {"2 approximate-maximizer certificate", approximate_maximizer},
      {"3 Tweedie equivalence", tweedie_equivalence},
      {"4 coupled-bootstrap unbiasedness", coupled_bootstrap},
      {"5 regret-bound inequality", regret_bounds},
      {"6 nuisance exactness", nuisance_exactness},
      {"7 Gaussian-conjugacy cross-check", gaussian_conjugacy},
      {"8 CLI determinism", cli_determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome out;
    try {
      check(out);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << "exception: " << e.what();
    }
    if (!out.pass) ++failures;
    std::cout << (out.pass ? "PASS" : "FAIL") << " criterion " << name << ": " << out.detail.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
