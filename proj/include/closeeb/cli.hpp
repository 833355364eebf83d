// Command-line front end: argument parsing into a RunConfig and execution of
// the fit / posterior / select / validate / simulate subcommands.

#pragma once

#include "CLI11.hpp"
#include "json.hpp"

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "closeeb/decisions.hpp"
#include "closeeb/io.hpp"
#include "closeeb/methods.hpp"
#include "closeeb/parallel.hpp"
#include "closeeb/simulation.hpp"
#include "closeeb/validation.hpp"

namespace closeeb::cli {

inline constexpr const char* kVersion = "0.1.0";

struct RunConfig {
  std::string subcommand;
  std::string input;
  std::string output;
  std::string model;  // posterior/select: previously fitted model JSON
  std::string method = "close_npmle";
  std::vector<std::string> methods{"naive", "independent_gauss", "independent_npmle",
                                   "close_gauss", "close_npmle"};
  std::string problem = "topm";
  std::optional<std::size_t> m;
  double fraction = 1.0 / 3.0;
  std::string group_column = "group";
  bool use_groups = true;
  double omega = validation::kDefaultOmega;
  int replications = 100;
  std::uint64_t seed = 1;
  int max_order = 2;
  bool out_of_sample = false;
  npmle::GridSpec grid;
  double c_h = 10.0;
  bool smooth_difference = false;
  // simulate
  std::string dgp_config;  // key-value file
  std::optional<std::string> dgp;
  std::optional<std::size_t> n;
  std::optional<int> reps;
  unsigned threads = 1;
};

/// Parses argv into a RunConfig. Returns std::nullopt after printing help.
inline std::optional<RunConfig> parse_args(int argc, const char* const* argv) {
  RunConfig cfg;
  CLI::App app{"Empirical Bayes shrinkage for heteroskedastic estimates", "closeeb"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto add_common = [&](CLI::App* sub, bool needs_input) {
    auto* opt = sub->add_option("-i,--input", cfg.input, "Input CSV (columns y, sigma, x1..xk, group)");
    if (needs_input) opt->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--output", cfg.output, "Output path")->required();
    sub->add_option("--group-column", cfg.group_column, "Name of the group column");
    sub->add_option("--grid-lo", cfg.grid.fine_lo, "Fine grid lower end");
    sub->add_option("--grid-hi", cfg.grid.fine_hi, "Fine grid upper end");
    sub->add_option("--grid-fine", cfg.grid.fine_count, "Fine grid point count");
    sub->add_option("--grid-coarse", cfg.grid.coarse_count, "Coarse grid point count");
    sub->add_option("--bandwidth-constant", cfg.c_h, "Bandwidth projection constant C_h");
    sub->add_flag("--smooth-difference", cfg.smooth_difference,
                  "Smooth squared residuals minus sigma^2 for the variance fit");
  };

  auto* fit = app.add_subcommand("fit", "Fit a method and write the model JSON");
  add_common(fit, true);
  fit->add_option("--method", cfg.method, "Method");

  auto* post = app.add_subcommand("posterior", "Write posterior means and moments");
  add_common(post, true);
  post->add_option("--method", cfg.method, "Method (ignored with --model)");
  post->add_option("--model", cfg.model, "Previously fitted model JSON")->check(CLI::ExistingFile);
  post->add_option("--max-order", cfg.max_order, "Highest posterior moment")->check(CLI::PositiveNumber);
  post->add_flag("--out-of-sample", cfg.out_of_sample, "Allow scoring data other than the fitting data");

  auto* select = app.add_subcommand("select", "Select units by posterior mean");
  add_common(select, true);
  select->add_option("--method", cfg.method, "Method (ignored with --model)");
  select->add_option("--model", cfg.model, "Previously fitted model JSON")->check(CLI::ExistingFile);
  select->add_option("--problem", cfg.problem, "utilmax or topm");
  select->add_option("--m", cfg.m, "Number of units for ungrouped top-m");
  select->add_option("--fraction", cfg.fraction, "Top fraction (default 1/3, within groups)");
  select->add_flag("--out-of-sample", cfg.out_of_sample, "Allow scoring data other than the fitting data");
  select->add_flag("!--no-groups", cfg.use_groups, "Ignore the group column");

  auto* validate = app.add_subcommand("validate", "Coupled-bootstrap comparison of methods");
  add_common(validate, true);
  validate->add_option("--methods", cfg.methods, "Methods to compare")->delimiter(',');
  validate->add_option("--problem", cfg.problem, "mse, utilmax or topm");
  validate->add_option("--m", cfg.m, "Number of units for ungrouped top-m");
  validate->add_option("--fraction", cfg.fraction, "Top fraction (default 1/3, within groups)");
  validate->add_option("--omega", cfg.omega, "Coupled bootstrap omega")->check(CLI::PositiveNumber);
  validate->add_option("--replications", cfg.replications, "Replications")->check(CLI::PositiveNumber);
  validate->add_option("--seed", cfg.seed, "Seed");
  validate->add_flag("!--no-groups", cfg.use_groups, "Ignore the group column");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo relative-MSE table");
  add_common(simulate, false);
  simulate->add_option("--config", cfg.dgp_config, "DGP key-value config file")->check(CLI::ExistingFile);
  simulate->add_option("--dgp", cfg.dgp, "gaussian_ls, vingtile_npmle or weibull_ls");
  simulate->add_option("--n", cfg.n, "Units per replication");
  simulate->add_option("--reps", cfg.reps, "Replications");
  simulate->add_option("--seed", cfg.seed, "Seed");
  simulate->add_option("--methods", cfg.methods, "Methods")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return std::nullopt;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e);
    return std::nullopt;
  } catch (const CLI::ParseError& e) {
    throw InputError(e.what());
  }
  for (const auto* sub : {fit, post, select, validate, simulate})
    if (sub->parsed()) cfg.subcommand = sub->get_name();
  if (simulate->parsed() && simulate->count("--seed") == 0) cfg.seed = 0;  // 0: take from config
  if (simulate->parsed() && simulate->count("--methods") == 0) cfg.methods.clear();
  cfg.threads = default_thread_count();
  return cfg;
}

inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j = {{"subcommand", c.subcommand},
                      {"input", c.input},
                      {"output", c.output},
                      {"model", c.model},
                      {"method", c.method},
                      {"methods", c.methods},
                      {"problem", c.problem},
                      {"fraction", c.fraction},
                      {"group_column", c.group_column},
                      {"use_groups", c.use_groups},
                      {"omega", c.omega},
                      {"replications", c.replications},
                      {"seed", c.seed},
                      {"max_order", c.max_order},
                      {"out_of_sample", c.out_of_sample},
                      {"grid", {{"fine_lo", c.grid.fine_lo},
                                {"fine_hi", c.grid.fine_hi},
                                {"fine_count", c.grid.fine_count},
                                {"coarse_count", c.grid.coarse_count}}},
                      {"bandwidth_constant", c.c_h},
                      {"smooth_difference", c.smooth_difference},
                      {"dgp_config", c.dgp_config}};
  j["m"] = c.m ? nlohmann::json(*c.m) : nlohmann::json(nullptr);
  j["dgp"] = c.dgp ? nlohmann::json(*c.dgp) : nlohmann::json(nullptr);
  j["n"] = c.n ? nlohmann::json(*c.n) : nlohmann::json(nullptr);
  j["reps"] = c.reps ? nlohmann::json(*c.reps) : nlohmann::json(nullptr);
  return j;
}

namespace detail {

inline methods::MethodOptions method_options(const RunConfig& c) {
  methods::MethodOptions o;
  o.grid = c.grid;
  o.nuisance.c_h = c.c_h;
  o.nuisance.smooth_difference = c.smooth_difference;
  return o;
}

inline std::string with_suffix(const std::string& path, const std::string& ext) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot != std::string::npos && (slash == std::string::npos || dot > slash))
    return path.substr(0, dot) + ext;
  return path + ext;
}

inline methods::FittedModel load_or_fit(const RunConfig& c, const Dataset& data) {
  if (!c.model.empty()) return io::model_from_json(nlohmann::json::parse(io::read_file(c.model)));
  return methods::fit_method(data, methods::parse_method(c.method), method_options(c));
}

}  // namespace detail

struct RunResult {
  int exit_code = 0;
  std::vector<std::string> outputs;
  std::vector<std::string> diagnostics;
};

/// Executes one subcommand. Every run writes `<output>.manifest.json` holding
/// the full configuration, the version and a hash of the input file.
inline RunResult run(const RunConfig& c) {
  static const std::vector<std::string> kSubcommands{"fit", "posterior", "select", "validate", "simulate"};
  if (std::find(kSubcommands.begin(), kSubcommands.end(), c.subcommand) == kSubcommands.end())
    throw InputError("unknown subcommand '" + c.subcommand + "'");
  if (c.output.empty()) throw InputError("an output path is required");
  if (c.subcommand != "simulate" && c.input.empty()) throw InputError("an input CSV is required");
  if (c.subcommand != "simulate" && c.model.empty() && c.subcommand != "validate")
    methods::parse_method(c.method);
  c.grid.validate();

  RunResult result;
  nlohmann::json manifest = {{"tool", "closeeb"}, {"version", kVersion}, {"config", config_json(c)}};
  if (!c.input.empty()) manifest["input_hash"] = io::hex64(io::hash_bytes(io::read_file(c.input)));

  if (c.subcommand == "fit") {
    const Dataset data = io::ingest_csv(c.input, c.group_column);
    const auto model = methods::fit_method(data, methods::parse_method(c.method), detail::method_options(c));
    io::write_file(c.output, io::model_to_json(model, data).dump(2) + "\n");
    result.outputs.push_back(c.output);
    result.diagnostics = model.diagnostics;
  } else if (c.subcommand == "posterior") {
    const Dataset data = io::ingest_csv(c.input, c.group_column);
    const auto model = detail::load_or_fit(c, data);
    methods::PosteriorOptions po;
    po.max_order = c.max_order;
    po.allow_out_of_sample = c.out_of_sample;
    io::write_file(c.output, io::posterior_csv(methods::posterior(model, data, po), c.max_order));
    result.outputs.push_back(c.output);
    result.diagnostics = model.diagnostics;
  } else if (c.subcommand == "select") {
    const Dataset data = io::ingest_csv(c.input, c.group_column);
    const auto problem = decisions::parse_problem(c.problem);
    if (problem == decisions::Problem::mse) throw InputError("select: problem must be utilmax or topm");
    const auto model = detail::load_or_fit(c, data);
    methods::PosteriorOptions po;
    po.allow_out_of_sample = c.out_of_sample;
    const auto means = methods::posterior_means(methods::posterior(model, data, po));
    validation::CompareOptions co;
    co.m = c.m;
    co.top_fraction = c.fraction;
    co.use_groups = c.use_groups;
    const auto action = validation::make_action(problem, means, data, co);
    io::write_file(c.output, io::selection_csv(std::get<decisions::SelectionResult>(action), data));
    result.outputs.push_back(c.output);
    result.diagnostics = model.diagnostics;
  } else if (c.subcommand == "validate") {
    const Dataset data = io::ingest_csv(c.input, c.group_column);
    std::vector<methods::MethodTag> tags;
    for (const auto& name : c.methods) tags.push_back(methods::parse_method(name));
    validation::CompareOptions co;
    co.problem = decisions::parse_problem(c.problem);
    co.omega = c.omega;
    co.replications = c.replications;
    co.seed = c.seed;
    co.m = c.m;
    co.top_fraction = c.fraction;
    co.use_groups = c.use_groups;
    co.method_options = detail::method_options(c);
    co.threads = c.threads;
    const auto rows = validation::compare_methods(data, tags, co);
    io::write_file(c.output, io::loss_table_csv(rows));
    const auto json_path = detail::with_suffix(c.output, ".json");
    io::write_file(json_path, io::loss_table_json(rows).dump(2) + "\n");
    result.outputs = {c.output, json_path};
  } else {
    simulation::DgpConfig dc;
    if (!c.dgp_config.empty()) {
      std::istringstream in(io::read_file(c.dgp_config));
      dc = simulation::DgpConfig::parse(in);
      manifest["dgp_config_hash"] = io::hex64(io::hash_bytes(io::read_file(c.dgp_config)));
    }
    if (c.dgp) dc.variant = simulation::parse_variant(*c.dgp);
    if (c.n) dc.n = *c.n;
    if (c.reps) dc.replications = *c.reps;
    if (c.seed != 0) dc.seed = c.seed;
    if (!c.methods.empty()) {
      dc.methods.clear();
      for (const auto& name : c.methods) dc.methods.push_back(methods::parse_method(name));
    }
    std::optional<Dataset> pilot;
    if (!c.input.empty()) pilot = io::ingest_csv(c.input, c.group_column);
    else if (!dc.pilot.empty()) pilot = io::ingest_csv(dc.pilot, c.group_column);
    simulation::CalibrationOptions cal;
    cal.method_options = detail::method_options(c);
    const auto dgp = simulation::make_dgp(dc, pilot, cal);
    if (dgp.vingtiles) result.diagnostics = dgp.vingtiles->warnings;
    simulation::MseTableOptions mo;
    mo.method_options = detail::method_options(c);
    mo.threads = c.threads;
    const auto rows = simulation::mse_table(dgp, dc.n, dc.methods, dc.replications, dc.seed, mo);
    io::write_file(c.output, io::mse_table_csv(rows));
    result.outputs.push_back(c.output);
    manifest["resolved_dgp"] = {{"variant", simulation::to_string(dc.variant)},
                                {"n", dc.n},
                                {"replications", dc.replications},
                                {"seed", dc.seed}};
  }

  manifest["outputs"] = result.outputs;
  manifest["diagnostics"] = result.diagnostics;
  const auto manifest_path = c.output + ".manifest.json";
  io::write_file(manifest_path, manifest.dump(2) + "\n");
  result.outputs.push_back(manifest_path);
  return result;
}

/// Machine-readable error record for stderr.
inline std::string error_record(const std::exception& e) {
  std::string kind = "runtime_error";
  if (dynamic_cast<const InputError*>(&e)) kind = "input_error";
  else if (dynamic_cast<const DegeneratePosteriorError*>(&e)) kind = "degenerate_posterior";
  else if (dynamic_cast<const npmle::ConvergenceError*>(&e)) kind = "convergence_error";
  return nlohmann::json{{"error", {{"kind", kind}, {"message", e.what()}}}}.dump();
}

inline int main(int argc, const char* const* argv) {
  try {
    const auto cfg = parse_args(argc, argv);
    if (!cfg) return 0;
    const auto result = run(*cfg);
    for (const auto& d : result.diagnostics) std::cerr << "warning: " << d << "\n";
    std::cout.flush();
    return result.exit_code;
  } catch (const InputError& e) {
    std::cerr << error_record(e) << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << error_record(e) << std::endl;
    return 3;
  }
}

}  // namespace closeeb::cli
