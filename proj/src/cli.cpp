#include "twophase/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>

#include "twophase/cox.hpp"
#include "twophase/design.hpp"
#include "twophase/errors.hpp"
#include "twophase/io.hpp"
#include "twophase/mean_score.hpp"
#include "twophase/model.hpp"
#include "twophase/rng.hpp"
#include "twophase/selfcheck.hpp"
#include "twophase/simulation.hpp"

namespace twophase::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> parameter_names(int n_times, int n_covariates) {
  std::vector<std::string> names;
  for (int j = 1; j <= n_times; ++j) names.push_back("alpha" + std::to_string(j));
  for (int k = 1; k <= n_covariates; ++k) names.push_back("beta" + std::to_string(k));
  return names;
}

// Accepts alphaK / betaK or a covariate column name.
int target_index_from_name(const std::string& name, int n_times,
                           const std::vector<std::string>& covariate_columns) {
  if (name.rfind("alpha", 0) == 0) {
    const long j = io::parse_long(name.substr(5), "target");
    if (j < 1 || j > n_times) throw ArgumentError("target '" + name + "' out of range");
    return static_cast<int>(j) - 1;
  }
  if (name.rfind("beta", 0) == 0) {
    const long k = io::parse_long(name.substr(4), "target");
    if (k < 1 || k > static_cast<long>(covariate_columns.size()))
      throw ArgumentError("target '" + name + "' out of range");
    return n_times + static_cast<int>(k) - 1;
  }
  for (std::size_t k = 0; k < covariate_columns.size(); ++k)
    if (covariate_columns[k] == name) return n_times + static_cast<int>(k);
  throw ArgumentError("unknown target '" + name + "'");
}

std::vector<std::string> json_keys(const std::vector<StratumKey>& keys) {
  std::vector<std::string> out;
  out.reserve(keys.size());
  for (const auto& key : keys) out.push_back(key.to_string());
  return out;
}

std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << content;
}

void emit_warnings(std::ostream& out, const std::vector<std::string>& warnings) {
  for (const auto& warning : warnings) out << "warning: " << warning << "\n";
}

struct LoadedInputs {
  io::ColumnMapping mapping;
  io::DiscretizationSpec spec;
  io::LoadedCohort loaded;
};

LoadedInputs load_inputs(const std::string& cohort_path, const std::string& mapping_path) {
  LoadedInputs inputs;
  const io::KeyValues kv = io::read_key_values(mapping_path);
  inputs.mapping = io::mapping_from(kv);
  inputs.spec = io::discretization_from(kv);
  inputs.loaded = io::load_cohort(cohort_path, inputs.mapping, inputs.spec);
  return inputs;
}

// ---------------------------------------------------------------- simulate

sim::ScenarioConfig scenario_from_config(const io::KeyValues& kv, int* threads) {
  sim::ScenarioConfig config;
  config.cohort_size = io::parse_long(io::require(kv, "N"), "N");
  config.validation_size = io::parse_long(io::require(kv, "n"), "n");
  config.replications = io::parse_long(io::require(kv, "replications"), "replications");
  if (auto v = io::lookup(kv, "censoring"))
    config.censoring_target = io::parse_double(*v, "censoring");
  if (auto v = io::lookup(kv, "master_seed"))
    config.master_seed = static_cast<std::uint64_t>(io::parse_long(*v, "master_seed"));
  if (auto v = io::lookup(kv, "pilot_fraction"))
    config.pilot_fraction = io::parse_double(*v, "pilot_fraction");
  if (auto v = io::lookup(kv, "external_size"))
    config.external_size = io::parse_long(*v, "external_size");
  if (auto v = io::lookup(kv, "pilot_undersample_cap"))
    config.pilot_undersample_cap = io::parse_long(*v, "pilot_undersample_cap");
  if (auto v = io::lookup(kv, "alpha")) {
    const auto items = io::split_list(*v);
    config.alpha_true.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
      config.alpha_true[i] = io::parse_double(items[i], "alpha");
  }
  if (auto v = io::lookup(kv, "beta")) {
    const auto items = io::split_list(*v);
    config.beta_true.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
      config.beta_true[i] = io::parse_double(items[i], "beta");
  }
  std::vector<std::string> beta_names;
  for (int k = 1; k <= 4; ++k) beta_names.push_back("x" + std::to_string(k));
  if (auto v = io::lookup(kv, "target"))
    config.target_index = target_index_from_name(*v, sim::kCensorIndex, beta_names);
  if (auto v = io::lookup(kv, "threads")) *threads = static_cast<int>(io::parse_long(*v, "threads"));
  return config;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir, int cli_threads,
                 std::ostream& out) {
  int threads = 1;
  const io::KeyValues kv = io::read_key_values(config_path);
  sim::ScenarioConfig config = scenario_from_config(kv, &threads);
  if (cli_threads > 0) threads = cli_threads;
  const sim::ScenarioResult result = sim::run_scenario(config, threads);

  fs::create_directories(out_dir);
  const auto names = parameter_names(result.summary.n_times, result.summary.n_covariates);

  {
    std::vector<std::vector<std::string>> rows;
    for (const auto& est : result.summary.estimators) {
      for (std::size_t p = 0; p < names.size(); ++p) {
        rows.push_back({est.name, names[p], io::format_double(est.bias[p]),
                        io::format_double(est.sqrt_var[p]), io::format_double(est.sqrt_mse[p]),
                        std::to_string(est.n_converged), std::to_string(est.n_failed),
                        est.unreliable ? "1" : "0"});
      }
    }
    std::ostringstream csv;
    io::write_csv(csv, {"estimator", "parameter", "bias", "sqrt_var", "sqrt_mse", "n_converged",
                        "n_failed", "unreliable"},
                  rows);
    write_text_file(fs::path(out_dir) / "summary.csv", csv.str());
  }

  {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t r = 0; r < result.replications.size(); ++r) {
      for (int e = 0; e < sim::kEstimatorCount; ++e) {
        const auto& res = result.replications[r].results[e];
        std::vector<std::string> row{std::to_string(r), sim::kEstimatorNames[e],
                                     res.ok ? "1" : "0"};
        for (std::size_t p = 0; p < names.size(); ++p)
          row.push_back(res.ok ? io::format_double(res.estimate[p]) : "");
        rows.push_back(std::move(row));
      }
    }
    std::vector<std::string> header{"replication", "estimator", "converged"};
    header.insert(header.end(), names.begin(), names.end());
    std::ostringstream csv;
    io::write_csv(csv, header, rows);
    write_text_file(fs::path(out_dir) / "estimates.csv", csv.str());
  }

  {
    json doc;
    doc["format_version"] = io::kFormatVersion;
    json scenario;
    scenario["N"] = config.cohort_size;
    scenario["n"] = config.validation_size;
    scenario["censoring_target"] = config.censoring_target;
    scenario["replications"] = config.replications;
    scenario["master_seed"] = config.master_seed;
    scenario["pilot_fraction"] = config.pilot_fraction;
    scenario["target_index"] = config.target_index;
    scenario["external_size"] = config.external_size;
    if (config.pilot_undersample_cap)
      scenario["pilot_undersample_cap"] = *config.pilot_undersample_cap;
    doc["scenario"] = scenario;
    doc["alpha_used"] = to_std(result.alpha_used);
    doc["truth"] = to_std(result.summary.truth);
    doc["parameters"] = names;
    json estimators = json::array();
    for (const auto& est : result.summary.estimators) {
      json cell;
      cell["name"] = est.name;
      cell["bias"] = to_std(est.bias);
      cell["sqrt_var"] = to_std(est.sqrt_var);
      cell["sqrt_mse"] = to_std(est.sqrt_mse);
      cell["n_converged"] = est.n_converged;
      cell["n_failed"] = est.n_failed;
      cell["unreliable"] = est.unreliable;
      if (std::isfinite(est.mean_target_variance))
        cell["mean_target_variance"] = est.mean_target_variance;
      estimators.push_back(cell);
    }
    doc["estimators"] = estimators;
    write_text_file(fs::path(out_dir) / "summary.json", doc.dump(2) + "\n");
  }

  out << "wrote summary.csv, summary.json, estimates.csv to " << out_dir << "\n";
  for (const auto& est : result.summary.estimators)
    if (est.unreliable)
      out << "warning: estimator " << est.name << " failed on " << est.n_failed << " of "
          << result.summary.replications << " replications\n";
  return 0;
}

// ------------------------------------------------------------------ design

struct DesignOptions {
  std::string cohort_path;
  std::string mapping_path;
  std::string out_dir;
  std::string method;
  std::string target_name;
  std::string pilot_validated_path;
  long pilot_n = 0;
  long total_n = 0;
  long undersample_cap = -1;
  std::uint64_t seed = 20240901;
};

int cmd_design(const DesignOptions& opts, std::ostream& out) {
  LoadedInputs inputs = load_inputs(opts.cohort_path, opts.mapping_path);
  const Cohort& cohort = inputs.loaded.cohort;
  emit_warnings(out, inputs.loaded.warnings);
  const StratumTable strata = meanscore::build_strata(cohort, IndexList{});
  Rng rng(derive_seed(opts.seed, 0));

  const bool needs_nuisance = opts.method == "optimal" || opts.method == "adaptive";
  std::optional<design::NuisanceEstimates> nuisance;
  IndexList pilot_rows;
  Allocation pilot_alloc;
  bool have_pilot = false;

  if (!opts.pilot_validated_path.empty()) {
    pilot_rows = io::read_row_list(opts.pilot_validated_path, inputs.loaded);
    have_pilot = true;
  } else if (opts.pilot_n > 0) {
    // Rehearsal mode: draw the pilot here. Requires covariates on the drawn
    // rows, so the cohort must be fully validated.
    if (inputs.loaded.validated.size() != cohort.size())
      throw DataError("--pilot-n requires a fully validated cohort; use --pilot-validated");
    pilot_alloc = opts.undersample_cap >= 0
                      ? design::undersampled_pilot(
                            strata, opts.pilot_n,
                            design::intermittent_censoring_predicate(cohort.max_followup_index),
                            opts.undersample_cap)
                      : design::balanced_allocation(strata, opts.pilot_n);
    pilot_rows = design::draw_stratified(cohort, pilot_alloc, rng);
    have_pilot = true;
  }
  if (have_pilot && pilot_alloc.counts.empty()) {
    for (std::size_t idx : pilot_rows) ++pilot_alloc.counts[StratumKey::of(cohort.records[idx])];
    pilot_alloc.total = static_cast<long>(pilot_rows.size());
  }

  int target_index = -1;
  if (needs_nuisance) {
    if (opts.target_name.empty())
      throw ArgumentError("--target is required for the optimal and adaptive methods");
    target_index = target_index_from_name(opts.target_name, cohort.n_times,
                                          inputs.mapping.covariate_columns);
    if (have_pilot) {
      nuisance = design::pilot_nuisance(cohort, pilot_rows, Link::CLogLog);
    } else if (inputs.loaded.validated.size() == cohort.size()) {
      const FitResult reference = model::fit_mle(cohort, Link::CLogLog);
      nuisance = design::oracle_nuisance(cohort, Link::CLogLog, reference.theta);
    } else {
      throw ArgumentError(
          "the optimal design needs --pilot-validated, --pilot-n, or a fully validated cohort");
    }
  }

  Allocation allocation;
  if (opts.method == "srs") {
    allocation = design::srs_allocation(strata, opts.total_n, rng);
  } else if (opts.method == "balanced") {
    allocation = opts.undersample_cap >= 0
                     ? design::undersampled_pilot(
                           strata, opts.total_n,
                           design::intermittent_censoring_predicate(cohort.max_followup_index),
                           opts.undersample_cap)
                     : design::balanced_allocation(strata, opts.total_n);
  } else if (opts.method == "optimal") {
    allocation = design::optimal_allocation(strata, *nuisance, target_index, opts.total_n);
  } else if (opts.method == "adaptive") {
    if (!have_pilot)
      throw ArgumentError("the adaptive method needs --pilot-validated or --pilot-n");
    const Allocation optimal =
        design::optimal_allocation(strata, *nuisance, target_index, opts.total_n);
    allocation = design::adaptive_allocation(optimal, pilot_alloc, strata);
  } else {
    throw ArgumentError("unknown method '" + opts.method + "'");
  }

  fs::create_directories(opts.out_dir);
  {
    std::ostringstream csv;
    io::write_allocation_csv(csv, allocation);
    write_text_file(fs::path(opts.out_dir) / "allocation.csv", csv.str());
  }
  if (!pilot_rows.empty() && opts.pilot_validated_path.empty()) {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t idx : pilot_rows)
      rows.push_back({std::to_string(inputs.loaded.source_rows[idx])});
    std::ostringstream csv;
    io::write_csv(csv, {"row"}, rows);
    write_text_file(fs::path(opts.out_dir) / "pilot_rows.csv", csv.str());
  }
  {
    json doc;
    doc["format_version"] = io::kFormatVersion;
    doc["method"] = opts.method;
    doc["n"] = opts.total_n;
    doc["allocation_total"] = allocation.total;
    doc["n_strata"] = strata.cells.size();
    if (target_index >= 0) {
      doc["target"] = opts.target_name;
      doc["target_index"] = target_index;
    }
    if (nuisance) {
      doc["nuisance_source"] =
          nuisance->source == design::NuisanceEstimates::Source::Pilot ? "pilot" : "oracle";
      doc["pooled_fallback_strata"] = json_keys(nuisance->pooled_fallback);
    }
    std::vector<std::string> saturated;
    for (const auto& [key, count] : allocation.counts)
      if (count > 0 && count == strata.cells.at(key).n_phase1)
        saturated.push_back(key.to_string());
    doc["saturated_strata"] = saturated;
    doc["warnings"] = allocation.warnings;
    doc["dropped_intermittent"] = inputs.loaded.dropped_intermittent;
    if (have_pilot) doc["pilot_size"] = pilot_alloc.total;
    write_text_file(fs::path(opts.out_dir) / "design_report.json", doc.dump(2) + "\n");
  }
  emit_warnings(out, allocation.warnings);
  out << "wrote allocation.csv (" << allocation.total << " draws over " << allocation.counts.size()
      << " strata) to " << opts.out_dir << "\n";
  return 0;
}

// --------------------------------------------------------------------- fit

int cmd_fit(const std::string& cohort_path, const std::string& mapping_path,
            const std::string& validated_path, const std::string& link_name, bool strict,
            const std::string& out_dir, std::ostream& out) {
  LoadedInputs inputs = load_inputs(cohort_path, mapping_path);
  emit_warnings(out, inputs.loaded.warnings);
  const Cohort& cohort = inputs.loaded.cohort;
  IndexList validated = validated_path.empty()
                            ? inputs.loaded.validated
                            : io::read_row_list(validated_path, inputs.loaded);
  if (validated.empty()) throw DataError("no validated records to fit");
  const Link link = link_from_string(link_name);
  const auto mode = strict ? meanscore::CoverageMode::Strict : meanscore::CoverageMode::Permissive;

  const StratumTable table = meanscore::build_strata(cohort, validated);
  const FitResult fit = meanscore::mean_score_fit(cohort, validated, link, {}, mode);

  fs::create_directories(out_dir);
  json doc;
  doc["format_version"] = io::kFormatVersion;
  doc["link"] = link_name;
  doc["n_times"] = cohort.n_times;
  doc["n_records"] = cohort.size();
  doc["n_validated"] = validated.size();
  const auto names = parameter_names(cohort.n_times, cohort.n_covariates);
  doc["parameters"] = names;
  doc["estimate"] = to_std(fit.theta.packed());
  Vector se(fit.theta.dim());
  for (int p = 0; p < fit.theta.dim(); ++p) se[p] = std::sqrt(fit.covariance(p, p));
  doc["se"] = to_std(se);
  doc["alpha"] = to_std(fit.theta.alpha);
  doc["beta"] = to_std(fit.theta.beta);
  json convergence;
  convergence["converged"] = fit.converged;
  convergence["iterations"] = fit.iterations;
  convergence["gradient_norm"] = fit.gradient_norm;
  doc["convergence"] = convergence;
  json strata;
  strata["n_strata"] = table.cells.size();
  strata["uncovered"] = json_keys(table.uncovered());
  strata["singletons"] = json_keys(table.singletons());
  doc["strata"] = strata;
  doc["dropped_intermittent"] = inputs.loaded.dropped_intermittent;
  doc["warnings"] = fit.warnings;
  write_text_file(fs::path(out_dir) / "estimates.json", doc.dump(2) + "\n");
  emit_warnings(out, fit.warnings);
  out << "wrote estimates.json to " << out_dir << "\n";
  return 0;
}

// --------------------------------------------------------------------- cox

int cmd_cox(const std::string& cohort_path, const std::string& mapping_path,
            const std::string& weights_path, const std::string& out_dir, std::ostream& out) {
  LoadedInputs inputs = load_inputs(cohort_path, mapping_path);
  emit_warnings(out, inputs.loaded.warnings);
  const auto weighted = io::read_weighted_rows(weights_path, inputs.loaded);
  if (weighted.empty()) throw DataError("no weighted rows for the Cox fit");
  std::vector<cox::ContinuousRecord> records;
  records.reserve(weighted.size());
  for (const auto& [idx, weight] : weighted) {
    const auto& rec = inputs.loaded.cohort.records[idx];
    if (!rec.covariates)
      throw DataError("cohort row " + std::to_string(inputs.loaded.source_rows[idx]) +
                      " has no covariates");
    cox::ContinuousRecord cr;
    cr.time = inputs.loaded.raw_times[idx];
    cr.event = inputs.loaded.raw_events[idx] != 0;
    cr.covariates = *rec.covariates;
    cr.weight = weight;
    records.push_back(std::move(cr));
  }
  const cox::CoxFitResult fit = cox::cox_fit(records);

  fs::create_directories(out_dir);
  json doc;
  doc["format_version"] = io::kFormatVersion;
  doc["covariates"] = inputs.mapping.covariate_columns;
  doc["estimate"] = to_std(fit.beta);
  Vector se(fit.beta.size());
  for (int k = 0; k < fit.beta.size(); ++k) se[k] = std::sqrt(fit.covariance(k, k));
  doc["se"] = to_std(se);
  doc["loglik"] = fit.loglik;
  json convergence;
  convergence["converged"] = fit.converged;
  convergence["iterations"] = fit.iterations;
  convergence["gradient_norm"] = fit.gradient_norm;
  doc["convergence"] = convergence;
  doc["n_records"] = records.size();
  write_text_file(fs::path(out_dir) / "estimates.json", doc.dump(2) + "\n");
  out << "wrote estimates.json to " << out_dir << "\n";
  return 0;
}

// ------------------------------------------------------------------- check

int cmd_check(std::ostream& out) {
  const auto reports = selfcheck::run_all(40, 5, 12, 987654321u);
  bool all_pass = true;
  for (const auto& report : reports) {
    out << (report.pass ? "PASS" : "FAIL") << "  " << report.name << "  " << report.detail << "\n";
    all_pass = all_pass && report.pass;
  }
  if (!all_pass) throw NumericError("internal oracle suite failed");
  return 0;
}

void report_error(std::ostream& err, const std::string& type, const std::string& message) {
  json doc;
  doc["format_version"] = io::kFormatVersion;
  doc["error"]["type"] = type;
  doc["error"]["message"] = message;
  err << doc.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-phase design and estimation for discrete-time survival models"};
  app.require_subcommand(1);

  auto* simulate = app.add_subcommand("simulate", "Run a Monte Carlo scenario");
  std::string sim_config, sim_out;
  int sim_threads = 0;
  simulate->add_option("--config", sim_config, "scenario configuration file")->required();
  simulate->add_option("--out", sim_out, "output directory")->required();
  simulate->add_option("--threads", sim_threads, "worker threads (default from config)");

  auto* design_cmd = app.add_subcommand("design", "Compute a phase-two allocation");
  DesignOptions design_opts;
  design_cmd->add_option("--cohort", design_opts.cohort_path, "cohort CSV")->required();
  design_cmd->add_option("--mapping", design_opts.mapping_path, "column mapping file")->required();
  design_cmd->add_option("--n", design_opts.total_n, "total phase-two size")->required();
  design_cmd->add_option("--method", design_opts.method, "optimal|adaptive|balanced|srs")
      ->required();
  design_cmd->add_option("--target", design_opts.target_name, "parameter the design optimizes");
  design_cmd->add_option("--pilot-validated", design_opts.pilot_validated_path,
                         "row list of the pilot validation wave");
  design_cmd->add_option("--pilot-n", design_opts.pilot_n,
                         "draw a pilot of this size (fully validated cohorts)");
  design_cmd->add_option("--undersample-cap", design_opts.undersample_cap,
                         "cap for intermittently censored strata");
  design_cmd->add_option("--seed", design_opts.seed, "seed for the random draws");
  design_cmd->add_option("--out", design_opts.out_dir, "output directory")->required();

  auto* fit = app.add_subcommand("fit", "Mean score fit with sandwich standard errors");
  std::string fit_cohort, fit_mapping, fit_validated, fit_link = "cloglog", fit_out;
  bool fit_strict = false;
  fit->add_option("--cohort", fit_cohort, "cohort CSV")->required();
  fit->add_option("--mapping", fit_mapping, "column mapping file")->required();
  fit->add_option("--validated", fit_validated, "row list of validated records");
  fit->add_option("--link", fit_link, "logit|cloglog");
  fit->add_flag("--strict", fit_strict, "fail on uncovered strata");
  fit->add_option("--out", fit_out, "output directory")->required();

  auto* cox_cmd = app.add_subcommand("cox", "Weighted continuous-time Cox fit");
  std::string cox_cohort, cox_mapping, cox_weights, cox_out;
  cox_cmd->add_option("--cohort", cox_cohort, "cohort CSV")->required();
  cox_cmd->add_option("--mapping", cox_mapping, "column mapping file")->required();
  cox_cmd->add_option("--weights", cox_weights, "row,weight CSV")->required();
  cox_cmd->add_option("--out", cox_out, "output directory")->required();

  auto* check = app.add_subcommand("check", "Run the internal oracle suites");

  std::vector<std::string> argv(args.rbegin(), args.rend());  // CLI11 wants reversed args
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    report_error(err, "usage", e.what());
    return 1;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim_config, sim_out, sim_threads, out);
    if (design_cmd->parsed()) return cmd_design(design_opts, out);
    if (fit->parsed())
      return cmd_fit(fit_cohort, fit_mapping, fit_validated, fit_link, fit_strict, fit_out, out);
    if (cox_cmd->parsed()) return cmd_cox(cox_cohort, cox_mapping, cox_weights, cox_out, out);
    if (check->parsed()) return cmd_check(out);
    report_error(err, "usage", "no subcommand given");
    return 1;
  } catch (const ArgumentError& e) {
    report_error(err, "usage", e.what());
    return 1;
  } catch (const DataError& e) {
    report_error(err, "data", e.what());
    return 2;
  } catch (const NumericError& e) {
    report_error(err, "numeric", e.what());
    return 3;
  }
}

}  // namespace twophase::cli
