// CSV ingestion/export and JSON serialization of fitted models and reports.

#pragma once

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "closeeb/core.hpp"
#include "closeeb/methods.hpp"
#include "closeeb/simulation.hpp"
#include "closeeb/validation.hpp"

namespace closeeb::io {

using nlohmann::json;

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// FNV-1a of raw bytes.
inline std::uint64_t hash_bytes(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_double(const std::string& text, double& out) {
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last;
}

/// Reads a CSV with columns `y`, `sigma`, optional `x1..xk` covariates and an
/// optional group column. Rows with non-finite values or sigma <= 0 are
/// reported by line number.
inline Dataset parse_csv(const std::string& text, const std::string& group_column = "group",
                         const std::string& source = "<input>") {
  std::stringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    header = split_csv_line(line);
    break;
  }
  if (header.empty()) throw InputError(source + ": empty file");

  int y_col = -1, sigma_col = -1, group_col = -1;
  std::map<int, int> covariate_cols;  // covariate number -> column
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const auto& name = header[static_cast<std::size_t>(c)];
    if (name == "y") y_col = c;
    else if (name == "sigma") sigma_col = c;
    else if (!group_column.empty() && name == group_column) group_col = c;
    else if (name.size() > 1 && name[0] == 'x' &&
             std::all_of(name.begin() + 1, name.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
      covariate_cols[std::stoi(name.substr(1))] = c;
  }
  if (y_col < 0 || sigma_col < 0)
    throw InputError(source + ": header must contain columns 'y' and 'sigma'");
  int expected = 1;
  for (const auto& [number, col] : covariate_cols) {
    if (number != expected)
      throw InputError(source + ": covariate columns must be x1..xk without gaps");
    ++expected;
  }

  std::vector<Observation> obs;
  std::vector<std::string> groups;
  std::vector<int> bad_rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw InputError(source + ": line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, found " +
                       std::to_string(cells.size()));
    auto number = [&](int col) {
      double v = 0.0;
      if (!parse_double(cells[static_cast<std::size_t>(col)], v))
        throw InputError(source + ": line " + std::to_string(line_no) + ", column '" +
                         header[static_cast<std::size_t>(col)] + "': cannot parse '" +
                         cells[static_cast<std::size_t>(col)] + "'");
      return v;
    };
    Observation o;
    o.y = number(y_col);
    o.sigma = number(sigma_col);
    for (const auto& [num, col] : covariate_cols) o.covariates.push_back(number(col));
    bool ok = std::isfinite(o.y) && std::isfinite(o.sigma) && o.sigma > 0.0;
    for (double x : o.covariates) ok = ok && std::isfinite(x);
    if (!ok) bad_rows.push_back(line_no);
    obs.push_back(std::move(o));
    if (group_col >= 0) groups.push_back(cells[static_cast<std::size_t>(group_col)]);
  }
  if (!bad_rows.empty()) {
    std::string list;
    for (std::size_t j = 0; j < bad_rows.size() && j < 20; ++j)
      list += (j ? ", " : "") + std::to_string(bad_rows[j]);
    if (bad_rows.size() > 20) list += ", ...";
    throw InputError(source + ": rows with sigma <= 0 or non-finite values at line(s) " + list);
  }
  if (obs.empty()) throw InputError(source + ": no data rows");
  return Dataset(std::move(obs), std::move(groups));
}

inline Dataset ingest_csv(const std::string& path, const std::string& group_column = "group") {
  return parse_csv(read_file(path), group_column, path);
}

inline std::string to_csv(const Dataset& data) {
  std::string out = "y,sigma";
  for (std::size_t c = 0; c < data.covariate_dim(); ++c) out += ",x" + std::to_string(c + 1);
  if (data.has_groups()) out += ",group";
  out += '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out += format_double(data[i].y) + "," + format_double(data[i].sigma);
    for (double x : data[i].covariates) out += "," + format_double(x);
    if (data.has_groups()) out += "," + data.groups()[i];
    out += '\n';
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << content;
  out.flush();
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Priors and models

inline json prior_to_json(const DiscretePrior& prior, const npmle::NpmleFit* fit = nullptr) {
  json j;
  j["support"] = prior.support();
  j["weights"] = prior.weights();
  if (fit) {
    j["loglik"] = fit->loglik;
    j["gap"] = fit->gap_certificate;
    j["kappa_n"] = fit->kappa_n;
    j["iterations"] = fit->iterations;
  }
  return j;
}

inline DiscretePrior prior_from_json(const json& j) {
  return DiscretePrior::normalized(j.at("support").get<std::vector<double>>(),
                                   j.at("weights").get<std::vector<double>>());
}

/// Piecewise-linear interpolation in log10(sigma), constant beyond the ends.
class TabulatedFunction {
 public:
  TabulatedFunction(std::vector<double> sigma, std::vector<double> values)
      : x_(sigma.size()), v_(std::move(values)) {
    if (sigma.empty() || sigma.size() != v_.size())
      throw InputError("tabulated nuisance: sigma and values must be non-empty and equal length");
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      if (!(sigma[i] > 0.0)) throw InputError("tabulated nuisance: sigma must be positive");
      x_[i] = std::log10(sigma[i]);
      if (i > 0 && !(x_[i] > x_[i - 1]) && !(x_[i] == x_[i - 1] && sigma.size() == 1))
        throw InputError("tabulated nuisance: sigma grid must be strictly increasing");
    }
  }

  double operator()(double sigma) const {
    const double x = std::log10(sigma);
    if (x <= x_.front()) return v_.front();
    if (x >= x_.back()) return v_.back();
    const auto hi = static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin());
    const std::size_t lo = hi - 1;
    const double t = (x - x_[lo]) / (x_[hi] - x_[lo]);
    return v_[lo] + t * (v_[hi] - v_[lo]);
  }

 private:
  std::vector<double> x_;
  std::vector<double> v_;
};

inline constexpr std::size_t kNuisanceGridPoints = 2048;

inline json model_to_json(const methods::FittedModel& model, const Dataset& fitted_on) {
  json j;
  j["method"] = std::string(methods::to_string(model.tag));
  j["dataset_fingerprint"] = hex64(model.dataset_fingerprint);
  if (model.prior) j["prior"] = prior_to_json(*model.prior, model.npmle_fit ? &*model.npmle_fit : nullptr);
  if (model.global_moments)
    j["global_moments"] = {{"mean", model.global_moments->mean},
                           {"variance", model.global_moments->variance}};
  if (model.beta) j["beta"] = *model.beta;
  if (model.nuisance) {
    const auto sigma = fitted_on.sigma();
    const auto [lo, hi] = std::minmax_element(sigma.begin(), sigma.end());
    std::vector<double> grid, m, s;
    const std::size_t points = *hi > *lo ? kNuisanceGridPoints : 1;
    for (std::size_t k = 0; k < points; ++k) {
      const double t = points == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(points - 1);
      const double g = k + 1 == points ? *hi : std::pow(10.0, std::log10(*lo) + t * (std::log10(*hi) - std::log10(*lo)));
      grid.push_back(g);
      m.push_back(model.nuisance->m(g));
      s.push_back(model.nuisance->s(g));
    }
    j["nuisance"] = {{"sigma", grid}, {"m_hat", m},           {"s_hat", s},
                     {"p_n", model.nuisance->p_n}, {"h_m", model.nuisance->h_m},
                     {"h_s", model.nuisance->h_s}};
  }
  j["diagnostics"] = model.diagnostics;
  return j;
}

inline methods::FittedModel model_from_json(const json& j) {
  methods::FittedModel model;
  model.tag = methods::parse_method(j.at("method").get<std::string>());
  model.dataset_fingerprint = std::stoull(j.at("dataset_fingerprint").get<std::string>(), nullptr, 16);
  if (j.contains("prior")) model.prior = prior_from_json(j.at("prior"));
  if (j.contains("global_moments"))
    model.global_moments = methods::GlobalMoments{j.at("global_moments").at("mean").get<double>(),
                                                  j.at("global_moments").at("variance").get<double>()};
  if (j.contains("beta")) model.beta = j.at("beta").get<std::vector<double>>();
  if (j.contains("nuisance")) {
    const auto& nj = j.at("nuisance");
    const auto grid = nj.at("sigma").get<std::vector<double>>();
    auto m = std::make_shared<TabulatedFunction>(grid, nj.at("m_hat").get<std::vector<double>>());
    auto s = std::make_shared<TabulatedFunction>(grid, nj.at("s_hat").get<std::vector<double>>());
    auto fit = nuisance::NuisanceFit::from_functions([m](double x) { return (*m)(x); },
                                                     [s](double x) { return (*s)(x); });
    fit.p_n = nj.value("p_n", 0.0);
    fit.h_m = nj.value("h_m", 0.0);
    fit.h_s = nj.value("h_s", 0.0);
    model.nuisance = std::move(fit);
  }
  if (methods::uses_npmle(model.tag) && !model.prior) throw InputError("model JSON lacks a prior");
  if (methods::uses_nuisance(model.tag) && !model.nuisance)
    throw InputError("model JSON lacks a nuisance table");
  if (model.tag == methods::MethodTag::independent_gauss && !model.global_moments)
    throw InputError("model JSON lacks global moments");
  return model;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string posterior_csv(const std::vector<PosteriorSummary>& post, int max_order) {
  std::string out = "unit,theta_hat";
  for (int v = 1; v <= max_order; ++v) out += ",moment_" + std::to_string(v);
  out += ",mean_tau,log_marginal_density\n";
  for (std::size_t i = 0; i < post.size(); ++i) {
    out += std::to_string(i) + "," + format_double(post[i].mean_theta);
    for (double m : post[i].moments_theta) out += "," + format_double(m);
    out += "," + format_double(post[i].mean_tau) + "," + format_double(post[i].log_marginal_density) + "\n";
  }
  return out;
}

inline std::string selection_csv(const decisions::SelectionResult& sel, const Dataset& data) {
  std::string out = "unit,selected,group\n";
  for (std::size_t i = 0; i < sel.selected.size(); ++i)
    out += std::to_string(i) + "," + (sel.selected[i] ? "1" : "0") + "," +
           (data.has_groups() ? data.groups()[i] : std::string()) + "\n";
  return out;
}

inline std::string loss_table_csv(const std::vector<validation::MethodLossRow>& rows) {
  std::string out = "method,problem,estimate,std_error,diff_vs_naive,diff_vs_random\n";
  for (const auto& r : rows)
    out += std::string(methods::to_string(r.method)) + "," + std::string(decisions::to_string(r.problem)) +
           "," + format_double(r.estimate) + "," + format_double(r.std_error) + "," +
           format_double(r.diff_vs_naive) + "," + format_double(r.diff_vs_random) + "\n";
  return out;
}

inline json nan_to_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

inline json loss_table_json(const std::vector<validation::MethodLossRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"method", methods::to_string(r.method)},
                   {"problem", decisions::to_string(r.problem)},
                   {"estimate", nan_to_null(r.estimate)},
                   {"std_error", nan_to_null(r.std_error)},
                   {"plugin_std_error", nan_to_null(r.plugin_std_error)},
                   {"diff_vs_naive", nan_to_null(r.diff_vs_naive)},
                   {"diff_vs_random", nan_to_null(r.diff_vs_random)},
                   {"replications", r.replications},
                   {"failures", r.failures}});
  return arr;
}

inline std::string mse_table_csv(const std::vector<simulation::MseRow>& rows) {
  std::string out = "method,mse,mse_se,relative_score,relative_se,replications,failures\n";
  for (const auto& r : rows)
    out += r.method + "," + format_double(r.mse) + "," + format_double(r.mse_se) + "," +
           format_double(r.relative) + "," + format_double(r.relative_se) + "," +
           std::to_string(r.replications) + "," + std::to_string(r.failures) + "\n";
  return out;
}

}  // namespace closeeb::io
