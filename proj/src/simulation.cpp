#include "twophase/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <boost/math/distributions/beta.hpp>
#include <cmath>
#include <thread>

#include "twophase/errors.hpp"
#include "twophase/mean_score.hpp"
#include "twophase/model.hpp"

namespace twophase::sim {

namespace {

// Seed streams: replication r uses stream r + 16; the named streams below
// stay clear of that range.
constexpr std::uint64_t kCalibrationStream = 1;
constexpr std::uint64_t kOracleStream = 2;
constexpr std::uint64_t kReplicationBase = 16;

double normal_cdf(double w) { return 0.5 * std::erfc(-w / std::sqrt(2.0)); }

}  // namespace

void ScenarioConfig::check_valid() const {
  if (cohort_size < 1) throw ArgumentError("cohort size must be positive");
  if (validation_size < 1 || validation_size > cohort_size)
    throw ArgumentError("validation size must lie in 1..N");
  if (!(censoring_target > 0.0) || !(censoring_target < 1.0))
    throw ArgumentError("censoring target must lie in (0, 1)");
  if (!(pilot_fraction > 0.0) || !(pilot_fraction < 1.0))
    throw ArgumentError("pilot fraction must lie in (0, 1)");
  if (replications < 1) throw ArgumentError("at least one replication is required");
  if (external_size < 2) throw ArgumentError("external sample size too small");
  if (alpha_true.size() != 0 && alpha_true.size() != kCensorIndex)
    throw ArgumentError("alpha_true must have six entries");
  if (beta_true.size() != 0 && beta_true.size() != 4)
    throw ArgumentError("beta_true must have four entries");
  const int dim = kCensorIndex + 4;
  if (target_index < 0 || target_index >= dim)
    throw ArgumentError("target index outside the packed parameter vector");
  if (pilot_undersample_cap && *pilot_undersample_cap < 0)
    throw ArgumentError("under-sampling cap must be non-negative");
}

Matrix gen_covariates(Rng& rng, long n) {
  if (n < 1) throw ArgumentError("need at least one draw");
  Matrix cov(4, 4);
  for (int j = 0; j < 4; ++j)
    for (int k = 0; k < 4; ++k) cov(j, k) = std::pow(0.3, std::abs(j - k));
  const Matrix chol = cov.llt().matrixL();

  const boost::math::beta_distribution<double> beta1(2.0, 1.5);
  const boost::math::beta_distribution<double> beta2(3.0, 3.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Matrix x(n, 4);
  Vector z(4);
  for (long i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) z[j] = normal(rng);
    const Vector w = chol * z;
    const double p1 = std::clamp(normal_cdf(w[0]), 1e-15, 1.0 - 1e-15);
    const double p2 = std::clamp(normal_cdf(w[1]), 1e-15, 1.0 - 1e-15);
    x(i, 0) = boost::math::quantile(beta1, p1);
    x(i, 1) = boost::math::quantile(beta2, p2);
    x(i, 2) = unif(rng) < normal_cdf(w[2]) ? 1.0 : 0.0;
    x(i, 3) = unif(rng) < normal_cdf(w[3]) ? 1.0 : 0.0;
  }
  return x;
}

std::vector<Outcome> gen_outcomes(Rng& rng, const Matrix& covariates, const ThetaParams& theta,
                                  int censor_index) {
  if (theta.link != Link::CLogLog)
    throw ArgumentError("the generating model uses the complementary log-log link");
  if (censor_index < 1 || censor_index > theta.n_times())
    throw ArgumentError("censoring index outside the hazard sequence");
  if (covariates.cols() != theta.beta.size())
    throw ArgumentError("covariate dimension does not match beta");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Outcome> out;
  out.reserve(covariates.rows());
  for (long i = 0; i < covariates.rows(); ++i) {
    const double xb = theta.beta.dot(covariates.row(i));
    Outcome o{censor_index, false};
    for (int j = 1; j <= censor_index; ++j) {
      const double lam = model::inverse_link(Link::CLogLog, theta.alpha[j - 1] + xb);
      if (unif(rng) < lam) {
        o = Outcome{j, true};
        break;
      }
    }
    out.push_back(o);
  }
  return out;
}

std::vector<int> gen_surrogate(Rng& rng, const Vector& x1, double noise_sd) {
  std::normal_distribution<double> noise(0.0, noise_sd > 0.0 ? noise_sd : 1.0);
  std::vector<int> out;
  out.reserve(x1.size());
  for (long i = 0; i < x1.size(); ++i) {
    const double v = x1[i] + (noise_sd > 0.0 ? noise(rng) : 0.0);
    int code = 4;
    if (v <= 0.25)
      code = 1;
    else if (v <= 0.5)
      code = 2;
    else if (v <= 0.75)
      code = 3;
    out.push_back(code);
  }
  return out;
}

std::vector<double> gen_continuous_times(Rng& rng, const Matrix& covariates,
                                         const ThetaParams& theta) {
  if (theta.link != Link::CLogLog)
    throw ArgumentError("continuous times are generated from the cloglog parameterization");
  const int J = theta.n_times();
  Vector cum(J + 1);
  cum[0] = 0.0;
  for (int j = 0; j < J; ++j) cum[j + 1] = cum[j] + std::exp(theta.alpha[j]);
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> out;
  out.reserve(covariates.rows());
  for (long i = 0; i < covariates.rows(); ++i) {
    const double rr = std::exp(theta.beta.dot(covariates.row(i)));
    const double target = expo(rng) / rr;  // cumulative baseline hazard to spend
    if (target > cum[J]) {
      out.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    int j = 1;
    while (cum[j] < target) ++j;
    const double slope = std::exp(theta.alpha[j - 1]);
    out.push_back(static_cast<double>(j - 1) + (target - cum[j - 1]) / slope);
  }
  return out;
}

Vector calibrate_baseline_search(double censoring_target, Rng& rng, long draws) {
  if (!(censoring_target > 0.0) || !(censoring_target < 1.0))
    throw ArgumentError("censoring target must lie in (0, 1)");
  const Matrix x = gen_covariates(rng, draws);
  Vector beta(4);
  for (int k = 0; k < 4; ++k) beta[k] = kBetaTrue[k];
  double hazard_mass = 0.0;
  for (double a : kBaselineAlpha50) hazard_mass += std::exp(a);
  // P(T > t_6 | x) = exp(-e^c * s_i) with s_i = hazard_mass * exp(beta'x).
  Vector s(draws);
  for (long i = 0; i < draws; ++i) s[i] = hazard_mass * std::exp(beta.dot(x.row(i)));
  const auto censor_rate = [&](double c) {
    const double scale = std::exp(c);
    double total = 0.0;
    for (long i = 0; i < draws; ++i) total += std::exp(-scale * s[i]);
    return total / static_cast<double>(draws);
  };
  double lo = -6.0, hi = 6.0;
  if (censor_rate(lo) < censoring_target || censor_rate(hi) > censoring_target)
    throw NumericError("bisection bracket does not contain the censoring target");
  double mid = 0.0;
  for (int it = 0; it < 200; ++it) {
    mid = (lo + hi) / 2.0;
    const double rate = censor_rate(mid);
    if (std::abs(rate - censoring_target) <= 0.0049) break;
    (rate > censoring_target ? lo : hi) = mid;
    if (hi - lo < 1e-10) break;
  }
  Vector alpha(kCensorIndex);
  for (int j = 0; j < kCensorIndex; ++j) alpha[j] = kBaselineAlpha50[j] + mid;
  return alpha;
}

Vector calibrate_baseline(double censoring_target, Rng& rng, long draws) {
  if (std::abs(censoring_target - 0.50) < 1e-12) {
    Vector alpha(kCensorIndex);
    for (int j = 0; j < kCensorIndex; ++j) alpha[j] = kBaselineAlpha50[j];
    return alpha;
  }
  return calibrate_baseline_search(censoring_target, rng, draws);
}

Cohort make_cohort(const Matrix& covariates, const std::vector<Outcome>& outcomes,
                   const std::vector<int>& surrogate, int n_times) {
  if (static_cast<long>(outcomes.size()) != covariates.rows() ||
      surrogate.size() != outcomes.size())
    throw ArgumentError("covariates, outcomes and surrogates must align");
  Cohort cohort;
  cohort.n_times = n_times;
  cohort.max_followup_index = n_times;
  cohort.n_covariates = static_cast<int>(covariates.cols());
  cohort.records.reserve(outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    SubjectRecord rec;
    rec.time_index = outcomes[i].time_index;
    rec.event = outcomes[i].event;
    rec.surrogate = {surrogate[i]};
    rec.covariates = Vector(covariates.row(i));
    cohort.records.push_back(std::move(rec));
  }
  return cohort;
}

namespace {

ThetaParams scenario_truth(const ScenarioConfig& config, const Vector& alpha) {
  ThetaParams theta;
  theta.link = Link::CLogLog;
  theta.alpha = alpha;
  if (config.beta_true.size() == 4) {
    theta.beta = config.beta_true;
  } else {
    theta.beta.resize(4);
    for (int k = 0; k < 4; ++k) theta.beta[k] = kBetaTrue[k];
  }
  return theta;
}

EstimatorResult run_estimator(EstimatorKind kind, const Cohort& cohort,
                              const StratumTable& strata, const IndexList& srs,
                              const design::NuisanceEstimates& oracle,
                              const ScenarioConfig& config, Rng& rng) {
  EstimatorResult out;
  const int target = config.target_index;
  try {
    switch (kind) {
      case EstimatorKind::FullCohort: {
        const FitResult fit = model::fit_mle(cohort, Link::CLogLog);
        out.estimate = fit.theta.packed();
        out.target_variance = fit.covariance(target, target);
        break;
      }
      case EstimatorKind::CompleteCaseSrs: {
        std::vector<double> w(srs.size(), 1.0);
        const FitResult fit = model::fit_weighted(cohort, srs, w, Link::CLogLog);
        out.estimate = fit.theta.packed();
        out.target_variance = fit.covariance(target, target);
        break;
      }
      case EstimatorKind::MeanScoreSrs: {
        const FitResult fit = meanscore::mean_score_fit(cohort, srs, Link::CLogLog);
        out.estimate = fit.theta.packed();
        out.target_variance = fit.covariance(target, target);
        break;
      }
      case EstimatorKind::MeanScoreBalanced: {
        const Allocation alloc = design::balanced_allocation(strata, config.validation_size);
        const IndexList idx = design::draw_stratified(cohort, alloc, rng);
        const FitResult fit = meanscore::mean_score_fit(cohort, idx, Link::CLogLog);
        out.estimate = fit.theta.packed();
        out.target_variance = fit.covariance(target, target);
        break;
      }
      case EstimatorKind::MeanScoreAdaptive: {
        const long n_pilot = std::lround(config.pilot_fraction *
                                         static_cast<double>(config.validation_size));
        const Allocation pilot_alloc =
            config.pilot_undersample_cap
                ? design::undersampled_pilot(
                      strata, n_pilot,
                      design::intermittent_censoring_predicate(cohort.max_followup_index),
                      *config.pilot_undersample_cap)
                : design::balanced_allocation(strata, n_pilot);
        const IndexList pilot_idx = design::draw_stratified(cohort, pilot_alloc, rng);
        const design::NuisanceEstimates nuisance =
            design::pilot_nuisance(cohort, pilot_idx, Link::CLogLog);
        const Allocation opt =
            design::optimal_allocation(strata, nuisance, target, config.validation_size);
        const Allocation wave2 = design::adaptive_allocation(opt, pilot_alloc, strata);
        const IndexList extra_idx = design::draw_stratified(cohort, wave2, rng, pilot_idx);
        IndexList all;
        all.reserve(pilot_idx.size() + extra_idx.size());
        std::merge(pilot_idx.begin(), pilot_idx.end(), extra_idx.begin(), extra_idx.end(),
                   std::back_inserter(all));
        const FitResult fit = meanscore::mean_score_fit(cohort, all, Link::CLogLog);
        out.estimate = fit.theta.packed();
        out.target_variance = fit.covariance(target, target);
        break;
      }
      case EstimatorKind::MeanScoreOracle: {
        const Allocation opt =
            design::optimal_allocation(strata, oracle, target, config.validation_size);
        const IndexList idx = design::draw_stratified(cohort, opt, rng);
        const FitResult fit = meanscore::mean_score_fit(cohort, idx, Link::CLogLog);
        out.estimate = fit.theta.packed();
        out.target_variance = fit.covariance(target, target);
        break;
      }
    }
    out.ok = true;
  } catch (const std::exception& err) {
    out.ok = false;
    out.error = err.what();
  }
  return out;
}

ReplicationRecord run_replication(const ScenarioConfig& config, const ThetaParams& truth,
                                  const design::NuisanceEstimates& oracle, long replication) {
  ReplicationRecord record;
  try {
    Rng rng = make_rng(config.master_seed, kReplicationBase + replication);
    const Matrix x = gen_covariates(rng, config.cohort_size);
    const std::vector<Outcome> outcomes = gen_outcomes(rng, x, truth, kCensorIndex);
    const std::vector<int> z = gen_surrogate(rng, x.col(0));
    const Cohort cohort = make_cohort(x, outcomes, z, kCensorIndex);
    const StratumTable strata = meanscore::build_strata(cohort, IndexList{});
    const IndexList srs = design::draw_srs(cohort.size(), config.validation_size, rng);
    for (int e = 0; e < kEstimatorCount; ++e)
      record.results[e] = run_estimator(static_cast<EstimatorKind>(e), cohort, strata, srs,
                                        oracle, config, rng);
  } catch (const std::exception& err) {
    for (auto& result : record.results) {
      result.ok = false;
      result.error = err.what();
    }
  }
  return record;
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& config, int threads) {
  config.check_valid();

  Vector alpha;
  if (config.alpha_true.size() == kCensorIndex) {
    alpha = config.alpha_true;
  } else {
    Rng cal_rng = make_rng(config.master_seed, kCalibrationStream);
    alpha = calibrate_baseline(config.censoring_target, cal_rng);
  }
  const ThetaParams truth = scenario_truth(config, alpha);

  design::NuisanceEstimates oracle;
  {
    Rng oracle_rng = make_rng(config.master_seed, kOracleStream);
    const Matrix x = gen_covariates(oracle_rng, config.external_size);
    const std::vector<Outcome> outcomes = gen_outcomes(oracle_rng, x, truth, kCensorIndex);
    const std::vector<int> z = gen_surrogate(oracle_rng, x.col(0));
    const Cohort external = make_cohort(x, outcomes, z, kCensorIndex);
    oracle = design::oracle_nuisance(external, Link::CLogLog, truth);
  }

  const long R = config.replications;
  std::vector<ReplicationRecord> records(R);
  const int workers = std::max(1, threads);
  if (workers == 1) {
    for (long r = 0; r < R; ++r) records[r] = run_replication(config, truth, oracle, r);
  } else {
    std::atomic<long> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&]() {
        for (long r = next.fetch_add(1); r < R; r = next.fetch_add(1))
          records[r] = run_replication(config, truth, oracle, r);
      });
    }
    for (auto& worker : pool) worker.join();
  }

  ScenarioResult out;
  out.replications = std::move(records);
  out.alpha_used = alpha;
  MonteCarloSummary& summary = out.summary;
  summary.truth = truth.packed();
  summary.replications = R;
  summary.n_times = kCensorIndex;
  summary.n_covariates = static_cast<int>(truth.beta.size());
  summary.target_index = config.target_index;
  const int p = truth.dim();
  for (int e = 0; e < kEstimatorCount; ++e) {
    EstimatorSummary cell;
    cell.name = kEstimatorNames[e];
    Vector sum = Vector::Zero(p);
    Vector sq_err = Vector::Zero(p);
    double var_sum = 0.0;
    long var_n = 0;
    long ok = 0;
    std::vector<const Vector*> estimates;
    for (const auto& rec : out.replications) {
      const auto& res = rec.results[e];
      if (!res.ok) continue;
      ++ok;
      sum += res.estimate;
      estimates.push_back(&res.estimate);
      if (std::isfinite(res.target_variance)) {
        var_sum += res.target_variance;
        ++var_n;
      }
    }
    cell.n_converged = ok;
    cell.n_failed = R - ok;
    cell.unreliable = cell.n_failed * 20 > R;  // > 5%
    if (ok > 0) {
      const Vector mean = sum / static_cast<double>(ok);
      cell.bias = mean - summary.truth;
      Vector var = Vector::Zero(p);
      for (const Vector* est : estimates) {
        var += (*est - mean).cwiseAbs2();
        sq_err += (*est - summary.truth).cwiseAbs2();
      }
      var /= static_cast<double>(ok);
      sq_err /= static_cast<double>(ok);
      cell.sqrt_var = var.cwiseSqrt();
      cell.sqrt_mse = sq_err.cwiseSqrt();
    } else {
      cell.bias = Vector::Constant(p, std::numeric_limits<double>::quiet_NaN());
      cell.sqrt_var = cell.bias;
      cell.sqrt_mse = cell.bias;
    }
    if (var_n > 0) cell.mean_target_variance = var_sum / static_cast<double>(var_n);
    summary.estimators.push_back(std::move(cell));
  }
  return out;
}

}  // namespace twophase::sim
