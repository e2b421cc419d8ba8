#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "twophase/cox.hpp"
#include "twophase/design.hpp"
#include "twophase/errors.hpp"
#include "twophase/mean_score.hpp"
#include "twophase/model.hpp"
#include "twophase/rng.hpp"
#include "twophase/selfcheck.hpp"
#include "twophase/simulation.hpp"

namespace py = pybind11;
using namespace twophase;

namespace {

// Python-friendly wrappers: index lists in, the library's engine seeded from
// an integer per call.
Rng engine(std::uint64_t seed) { return Rng(seed); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-phase design and estimation for discrete-time survival models";

  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_RuntimeError);

  py::enum_<Link>(m, "Link")
      .value("Logit", Link::Logit)
      .value("CLogLog", Link::CLogLog);

  py::class_<ThetaParams>(m, "ThetaParams")
      .def(py::init([](const Vector& alpha, const Vector& beta, Link link) {
             ThetaParams theta;
             theta.alpha = alpha;
             theta.beta = beta;
             theta.link = link;
             return theta;
           }),
           py::arg("alpha"), py::arg("beta"), py::arg("link") = Link::CLogLog)
      .def_readwrite("alpha", &ThetaParams::alpha)
      .def_readwrite("beta", &ThetaParams::beta)
      .def_readwrite("link", &ThetaParams::link)
      .def("packed", &ThetaParams::packed)
      .def_static("unpack", &ThetaParams::unpack, py::arg("packed"), py::arg("n_times"),
                  py::arg("link") = Link::CLogLog);

  py::class_<SubjectRecord>(m, "SubjectRecord")
      .def(py::init([](int time_index, bool event, const std::vector<int>& surrogate,
                       std::optional<Vector> covariates) {
             SubjectRecord rec;
             rec.time_index = time_index;
             rec.event = event;
             rec.surrogate = surrogate;
             rec.covariates = std::move(covariates);
             return rec;
           }),
           py::arg("time_index"), py::arg("event"), py::arg("surrogate") = std::vector<int>{},
           py::arg("covariates") = std::nullopt)
      .def_readwrite("time_index", &SubjectRecord::time_index)
      .def_readwrite("event", &SubjectRecord::event)
      .def_readwrite("surrogate", &SubjectRecord::surrogate)
      .def_readwrite("covariates", &SubjectRecord::covariates);

  py::class_<Cohort>(m, "Cohort")
      .def(py::init([](std::vector<SubjectRecord> records, int n_times, int n_covariates) {
             Cohort cohort;
             cohort.records = std::move(records);
             cohort.n_times = n_times;
             cohort.max_followup_index = n_times;
             cohort.n_covariates = n_covariates;
             cohort.check_valid();
             return cohort;
           }),
           py::arg("records"), py::arg("n_times"), py::arg("n_covariates"))
      .def_readonly("records", &Cohort::records)
      .def_readonly("n_times", &Cohort::n_times)
      .def_readonly("n_covariates", &Cohort::n_covariates)
      .def("__len__", [](const Cohort& c) { return c.size(); });

  py::class_<StratumKey>(m, "StratumKey")
      .def(py::init([](int time_index, bool event, const std::vector<int>& surrogate) {
             return StratumKey{time_index, event, surrogate};
           }),
           py::arg("time_index"), py::arg("event"), py::arg("surrogate"))
      .def_readonly("time_index", &StratumKey::time_index)
      .def_readonly("event", &StratumKey::event)
      .def_readonly("surrogate", &StratumKey::surrogate)
      .def("__str__", &StratumKey::to_string)
      .def("__repr__", &StratumKey::to_string)
      .def("__eq__", [](const StratumKey& a, const StratumKey& b) { return a == b; })
      .def("__lt__", [](const StratumKey& a, const StratumKey& b) { return a < b; })
      .def("__hash__", [](const StratumKey& key) { return py::hash(py::str(key.to_string())); });

  py::class_<StratumInfo>(m, "StratumInfo")
      .def_readonly("n_phase1", &StratumInfo::n_phase1)
      .def_readonly("n_validated", &StratumInfo::n_validated)
      .def("pi_hat", &StratumInfo::pi_hat);

  py::class_<StratumTable>(m, "StratumTable")
      .def_readonly("cells", &StratumTable::cells)
      .def_readonly("total_phase1", &StratumTable::total_phase1)
      .def_readonly("total_validated", &StratumTable::total_validated)
      .def("uncovered", &StratumTable::uncovered)
      .def("singletons", &StratumTable::singletons);

  py::class_<FitResult>(m, "FitResult")
      .def_readonly("theta", &FitResult::theta)
      .def_readonly("covariance", &FitResult::covariance)
      .def_readonly("converged", &FitResult::converged)
      .def_readonly("iterations", &FitResult::iterations)
      .def_readonly("gradient_norm", &FitResult::gradient_norm)
      .def_readonly("warnings", &FitResult::warnings);

  py::class_<Allocation>(m, "Allocation")
      .def_readonly("counts", &Allocation::counts)
      .def_readonly("total", &Allocation::total)
      .def_readonly("warnings", &Allocation::warnings)
      .def("count", &Allocation::count);

  // model ---------------------------------------------------------------
  m.def("hazard", &model::hazard, py::arg("theta"), py::arg("time_index"), py::arg("x"));
  m.def("survival_curve", &model::survival_curve, py::arg("theta"), py::arg("x"));
  m.def("loglik", &model::loglik, py::arg("theta"), py::arg("record"));
  m.def("score", &model::score, py::arg("theta"), py::arg("record"));
  m.def("hessian", &model::hessian, py::arg("theta"), py::arg("record"));
  m.def(
      "fit_weighted",
      [](const Cohort& cohort, const IndexList& indices, const std::vector<double>& weights,
         Link link, std::optional<ThetaParams> init, double tol, int max_iterations) {
        model::SolverConfig config;
        config.score_tol = tol;
        config.max_iterations = max_iterations;
        return model::fit_weighted(cohort, indices, weights, link, init, config);
      },
      py::arg("cohort"), py::arg("indices"), py::arg("weights"), py::arg("link"),
      py::arg("init") = std::nullopt, py::arg("tol") = 1e-8, py::arg("max_iterations") = 100);
  m.def("fit_mle",
        [](const Cohort& cohort, Link link) { return model::fit_mle(cohort, link); },
        py::arg("cohort"), py::arg("link"));

  // mean score ----------------------------------------------------------
  m.def("build_strata",
        [](const Cohort& cohort, const IndexList& validated) {
          return meanscore::build_strata(cohort, validated);
        },
        py::arg("cohort"), py::arg("validated"));
  m.def(
      "mean_score_fit",
      [](const Cohort& cohort, const IndexList& validated, Link link, bool strict,
         bool compute_covariance) {
        return meanscore::mean_score_fit(
            cohort, validated, link, {},
            strict ? meanscore::CoverageMode::Strict : meanscore::CoverageMode::Permissive,
            compute_covariance);
      },
      py::arg("cohort"), py::arg("validated"), py::arg("link"), py::arg("strict") = false,
      py::arg("compute_covariance") = true);
  m.def(
      "sandwich_variance",
      [](const ThetaParams& theta, const Cohort& cohort, const IndexList& validated) {
        const StratumTable table = meanscore::build_strata(cohort, validated);
        const auto result = meanscore::sandwich_variance(theta, cohort, validated, table);
        return py::make_tuple(result.covariance, result.info, result.omega, result.warnings);
      },
      py::arg("theta"), py::arg("cohort"), py::arg("validated"),
      "Returns (covariance, info, omega, warnings)");

  // design ----------------------------------------------------------------
  py::class_<design::NuisanceEstimates>(m, "NuisanceEstimates")
      .def_readonly("info", &design::NuisanceEstimates::info)
      .def_readonly("score_covariance", &design::NuisanceEstimates::score_covariance)
      .def_readonly("pooled", &design::NuisanceEstimates::pooled)
      .def_readonly("pooled_fallback", &design::NuisanceEstimates::pooled_fallback)
      .def_property_readonly("source", [](const design::NuisanceEstimates& n) {
        return n.source == design::NuisanceEstimates::Source::Pilot ? "pilot" : "oracle";
      });

  m.def(
      "srs_allocation",
      [](const StratumTable& strata, long n, std::uint64_t seed) {
        Rng rng = engine(seed);
        return design::srs_allocation(strata, n, rng);
      },
      py::arg("strata"), py::arg("n"), py::arg("seed"));
  m.def("balanced_allocation", &design::balanced_allocation, py::arg("strata"), py::arg("n"));
  m.def("optimal_allocation", &design::optimal_allocation, py::arg("strata"),
        py::arg("nuisance"), py::arg("target_index"), py::arg("n"));
  m.def("adaptive_allocation", &design::adaptive_allocation, py::arg("optimal"),
        py::arg("pilot"), py::arg("strata"));
  m.def(
      "undersampled_pilot",
      [](const StratumTable& strata, long n_pilot, long cap, int end_index) {
        return design::undersampled_pilot(
            strata, n_pilot, design::intermittent_censoring_predicate(end_index), cap);
      },
      py::arg("strata"), py::arg("n_pilot"), py::arg("cap"), py::arg("end_index"));
  m.def(
      "pilot_nuisance",
      [](const Cohort& cohort, const IndexList& pilot, Link link) {
        return design::pilot_nuisance(cohort, pilot, link);
      },
      py::arg("cohort"), py::arg("pilot"), py::arg("link"));
  m.def("oracle_nuisance", &design::oracle_nuisance, py::arg("external"), py::arg("link"),
        py::arg("theta"));
  m.def(
      "draw_stratified",
      [](const Cohort& cohort, const Allocation& allocation, std::uint64_t seed,
         const IndexList& exclude) {
        Rng rng = engine(seed);
        return design::draw_stratified(cohort, allocation, rng, exclude);
      },
      py::arg("cohort"), py::arg("allocation"), py::arg("seed"),
      py::arg("exclude") = IndexList{});
  m.def(
      "draw_srs",
      [](std::size_t population, long n, std::uint64_t seed) {
        Rng rng = engine(seed);
        return design::draw_srs(population, n, rng);
      },
      py::arg("population"), py::arg("n"), py::arg("seed"));

  // cox ---------------------------------------------------------------
  py::class_<cox::ContinuousRecord>(m, "ContinuousRecord")
      .def(py::init([](double time, bool event, const Vector& covariates, double weight) {
             cox::ContinuousRecord rec;
             rec.time = time;
             rec.event = event;
             rec.covariates = covariates;
             rec.weight = weight;
             return rec;
           }),
           py::arg("time"), py::arg("event"), py::arg("covariates"), py::arg("weight") = 1.0)
      .def_readwrite("time", &cox::ContinuousRecord::time)
      .def_readwrite("event", &cox::ContinuousRecord::event)
      .def_readwrite("covariates", &cox::ContinuousRecord::covariates)
      .def_readwrite("weight", &cox::ContinuousRecord::weight);

  py::class_<cox::CoxFitResult>(m, "CoxFitResult")
      .def_readonly("beta", &cox::CoxFitResult::beta)
      .def_readonly("covariance", &cox::CoxFitResult::covariance)
      .def_readonly("loglik", &cox::CoxFitResult::loglik)
      .def_readonly("converged", &cox::CoxFitResult::converged)
      .def_readonly("iterations", &cox::CoxFitResult::iterations)
      .def_readonly("gradient_norm", &cox::CoxFitResult::gradient_norm);

  py::class_<cox::EquivalenceReport>(m, "EquivalenceReport")
      .def_readonly("beta_cox", &cox::EquivalenceReport::beta_cox)
      .def_readonly("beta_discrete", &cox::EquivalenceReport::beta_discrete)
      .def_readonly("difference", &cox::EquivalenceReport::difference)
      .def_readonly("combined_se", &cox::EquivalenceReport::combined_se)
      .def_readonly("applicable", &cox::EquivalenceReport::applicable)
      .def_readonly("pass_flag", &cox::EquivalenceReport::pass);

  m.def(
      "cox_fit",
      [](const std::vector<cox::ContinuousRecord>& records, double tol, int max_iterations) {
        return cox::cox_fit(records, tol, max_iterations);
      },
      py::arg("records"), py::arg("tol") = 1e-8, py::arg("max_iterations") = 100);
  m.def(
      "discretize_equivalence_check",
      [](const std::vector<cox::ContinuousRecord>& records, const std::vector<double>& bounds) {
        return cox::discretize_equivalence_check(records, bounds);
      },
      py::arg("records"), py::arg("boundaries"));

  // simulation ----------------------------------------------------------
  py::class_<sim::ScenarioConfig>(m, "ScenarioConfig")
      .def(py::init<>())
      .def_readwrite("cohort_size", &sim::ScenarioConfig::cohort_size)
      .def_readwrite("validation_size", &sim::ScenarioConfig::validation_size)
      .def_readwrite("censoring_target", &sim::ScenarioConfig::censoring_target)
      .def_readwrite("beta_true", &sim::ScenarioConfig::beta_true)
      .def_readwrite("alpha_true", &sim::ScenarioConfig::alpha_true)
      .def_readwrite("pilot_fraction", &sim::ScenarioConfig::pilot_fraction)
      .def_readwrite("target_index", &sim::ScenarioConfig::target_index)
      .def_readwrite("replications", &sim::ScenarioConfig::replications)
      .def_readwrite("master_seed", &sim::ScenarioConfig::master_seed)
      .def_readwrite("external_size", &sim::ScenarioConfig::external_size)
      .def_readwrite("pilot_undersample_cap", &sim::ScenarioConfig::pilot_undersample_cap);

  py::class_<sim::EstimatorResult>(m, "EstimatorResult")
      .def_readonly("ok", &sim::EstimatorResult::ok)
      .def_readonly("estimate", &sim::EstimatorResult::estimate)
      .def_readonly("target_variance", &sim::EstimatorResult::target_variance)
      .def_readonly("error", &sim::EstimatorResult::error);

  py::class_<sim::ReplicationRecord>(m, "ReplicationRecord")
      .def_readonly("results", &sim::ReplicationRecord::results);

  py::class_<sim::EstimatorSummary>(m, "EstimatorSummary")
      .def_readonly("name", &sim::EstimatorSummary::name)
      .def_readonly("bias", &sim::EstimatorSummary::bias)
      .def_readonly("sqrt_var", &sim::EstimatorSummary::sqrt_var)
      .def_readonly("sqrt_mse", &sim::EstimatorSummary::sqrt_mse)
      .def_readonly("n_converged", &sim::EstimatorSummary::n_converged)
      .def_readonly("n_failed", &sim::EstimatorSummary::n_failed)
      .def_readonly("unreliable", &sim::EstimatorSummary::unreliable)
      .def_readonly("mean_target_variance", &sim::EstimatorSummary::mean_target_variance);

  py::class_<sim::MonteCarloSummary>(m, "MonteCarloSummary")
      .def_readonly("estimators", &sim::MonteCarloSummary::estimators)
      .def_readonly("truth", &sim::MonteCarloSummary::truth)
      .def_readonly("replications", &sim::MonteCarloSummary::replications)
      .def_readonly("n_times", &sim::MonteCarloSummary::n_times)
      .def_readonly("n_covariates", &sim::MonteCarloSummary::n_covariates)
      .def_readonly("target_index", &sim::MonteCarloSummary::target_index);

  py::class_<sim::ScenarioResult>(m, "ScenarioResult")
      .def_readonly("summary", &sim::ScenarioResult::summary)
      .def_readonly("replications", &sim::ScenarioResult::replications)
      .def_readonly("alpha_used", &sim::ScenarioResult::alpha_used);

  m.def(
      "gen_covariates",
      [](std::uint64_t seed, long n) {
        Rng rng = engine(seed);
        return sim::gen_covariates(rng, n);
      },
      py::arg("seed"), py::arg("n"));
  m.def(
      "gen_outcomes",
      [](std::uint64_t seed, const Matrix& covariates, const ThetaParams& theta,
         int censor_index) {
        Rng rng = engine(seed);
        const auto outcomes = sim::gen_outcomes(rng, covariates, theta, censor_index);
        std::vector<std::pair<int, bool>> out;
        out.reserve(outcomes.size());
        for (const auto& o : outcomes) out.emplace_back(o.time_index, o.event);
        return out;
      },
      py::arg("seed"), py::arg("covariates"), py::arg("theta"),
      py::arg("censor_index") = sim::kCensorIndex);
  m.def(
      "gen_surrogate",
      [](std::uint64_t seed, const Vector& x1, double noise_sd) {
        Rng rng = engine(seed);
        return sim::gen_surrogate(rng, x1, noise_sd);
      },
      py::arg("seed"), py::arg("x1"), py::arg("noise_sd") = 0.1);
  m.def(
      "calibrate_baseline",
      [](double censoring_target, std::uint64_t seed, long draws) {
        Rng rng = engine(seed);
        return sim::calibrate_baseline(censoring_target, rng, draws);
      },
      py::arg("censoring_target"), py::arg("seed"), py::arg("draws") = 1000000);
  m.def(
      "make_cohort",
      [](const Matrix& covariates, const std::vector<std::pair<int, bool>>& outcomes,
         const std::vector<int>& surrogate, int n_times) {
        std::vector<sim::Outcome> converted;
        converted.reserve(outcomes.size());
        for (const auto& [idx, event] : outcomes) converted.push_back({idx, event});
        return sim::make_cohort(covariates, converted, surrogate, n_times);
      },
      py::arg("covariates"), py::arg("outcomes"), py::arg("surrogate"),
      py::arg("n_times") = sim::kCensorIndex);
  m.def("run_scenario", &sim::run_scenario, py::arg("config"), py::arg("threads") = 1,
        py::call_guard<py::gil_scoped_release>());

  m.def("estimator_names", []() {
    return std::vector<std::string>(sim::kEstimatorNames.begin(), sim::kEstimatorNames.end());
  });

  m.def("self_check", [](int draws, int datasets, int instances, std::uint64_t seed) {
    py::list out;
    for (const auto& report : selfcheck::run_all(draws, datasets, instances, seed)) {
      py::dict item;
      item["name"] = report.name;
      item["pass"] = report.pass;
      item["detail"] = report.detail;
      out.append(item);
    }
    return out;
  }, py::arg("draws") = 20, py::arg("datasets") = 3, py::arg("instances") = 8,
     py::arg("seed") = 987654321u);
}
