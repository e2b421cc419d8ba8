#include <doctest.h>

#include <boost/math/distributions/beta.hpp>
#include <cmath>

#include "support/test_helpers.hpp"
#include "twophase/errors.hpp"
#include "twophase/model.hpp"
#include "twophase/simulation.hpp"

using namespace twophase;
using testsupport::scenario_truth;

TEST_CASE("covariate generator marginals and dependence") {
  Rng rng(1001);
  const long n = 100000;
  const Matrix x = sim::gen_covariates(rng, n);

  // Corr(X1, X2) close to the design value 0.290.
  Vector m = x.colwise().mean();
  double c12 = 0.0, v1 = 0.0, v2 = 0.0;
  for (long i = 0; i < n; ++i) {
    c12 += (x(i, 0) - m[0]) * (x(i, 1) - m[1]);
    v1 += (x(i, 0) - m[0]) * (x(i, 0) - m[0]);
    v2 += (x(i, 1) - m[1]) * (x(i, 1) - m[1]);
  }
  CHECK(c12 / std::sqrt(v1 * v2) == doctest::Approx(0.290).epsilon(0.035));

  // Kolmogorov-Smirnov distance of X1 to its target beta law.
  std::vector<double> sorted(x.col(0).data(), x.col(0).data() + n);
  std::sort(sorted.begin(), sorted.end());
  const boost::math::beta_distribution<double> beta1(2.0, 1.5);
  double ks = 0.0;
  for (long i = 0; i < n; ++i) {
    const double cdf = boost::math::cdf(beta1, sorted[i]);
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i + 1) / n));
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i) / n));
  }
  CHECK(ks < 0.01);

  // Binary covariates have mean one half and values in {0, 1}.
  CHECK(m[2] == doctest::Approx(0.5).epsilon(0.02));
  CHECK(m[3] == doctest::Approx(0.5).epsilon(0.02));
  for (long i = 0; i < 50; ++i) {
    CHECK((x(i, 2) == 0.0 || x(i, 2) == 1.0));
    CHECK(x(i, 0) > 0.0);
    CHECK(x(i, 0) < 1.0);
  }
}

TEST_CASE("outcome generator") {
  SUBCASE("certain first-interval hazard") {
    Rng rng(2);
    ThetaParams sure = scenario_truth();
    sure.alpha[0] = 30.0;  // hazard of interval one is 1 up to clamping
    const Matrix x = sim::gen_covariates(rng, 500);
    const auto outcomes = sim::gen_outcomes(rng, x, sure);
    for (const auto& o : outcomes) {
      CHECK(o.time_index == 1);
      CHECK(o.event);
    }
  }

  SUBCASE("marginal censoring rate of the 50% design") {
    Rng rng(3);
    const Matrix x = sim::gen_covariates(rng, 100000);
    const auto outcomes = sim::gen_outcomes(rng, x, scenario_truth());
    long censored = 0;
    for (const auto& o : outcomes) censored += o.event ? 0 : 1;
    CHECK(static_cast<double>(censored) / outcomes.size() == doctest::Approx(0.50).epsilon(0.04));
  }

  SUBCASE("empirical hazards match the model at fixed covariates") {
    Rng rng(4);
    const ThetaParams truth = scenario_truth();
    Matrix x(60000, 4);
    for (long i = 0; i < x.rows(); ++i) {
      x(i, 0) = 0.6;
      x(i, 1) = 0.4;
      x(i, 2) = 1.0;
      x(i, 3) = 0.0;
    }
    const auto outcomes = sim::gen_outcomes(rng, x, truth);
    const Vector xi = x.row(0);
    for (int j = 1; j <= 6; ++j) {
      long at_risk = 0, events = 0;
      for (const auto& o : outcomes) {
        if (o.time_index >= j) {
          ++at_risk;
          if (o.event && o.time_index == j) ++events;
        }
      }
      const double expected = model::hazard(truth, j, xi);
      const double se = std::sqrt(expected * (1 - expected) / at_risk);
      CHECK(std::abs(static_cast<double>(events) / at_risk - expected) < 4.0 * se + 1e-12);
    }
  }
}

TEST_CASE("surrogate generator") {
  SUBCASE("zero noise reproduces the exact discretization") {
    Rng rng(5);
    Vector x1(5);
    x1 << 0.1, 0.25, 0.5, 0.51, 0.9;
    const auto z = sim::gen_surrogate(rng, x1, 0.0);
    CHECK(z == std::vector<int>{1, 1, 2, 3, 4});
  }

  SUBCASE("discordance rate near the design value") {
    Rng rng(6);
    const Matrix x = sim::gen_covariates(rng, 100000);
    const auto z_true = sim::gen_surrogate(rng, x.col(0), 0.0);
    const auto z = sim::gen_surrogate(rng, x.col(0), 0.1);
    long mismatch = 0;
    for (std::size_t i = 0; i < z.size(); ++i) mismatch += z[i] != z_true[i] ? 1 : 0;
    CHECK(static_cast<double>(mismatch) / z.size() == doctest::Approx(0.284).epsilon(0.035));
  }

  SUBCASE("out-of-range perturbations land in the end bins") {
    Rng rng(7);
    Vector lo = Vector::Constant(2000, 0.01);
    Vector hi = Vector::Constant(2000, 0.99);
    for (int code : sim::gen_surrogate(rng, lo, 0.3)) CHECK((code >= 1 && code <= 4));
    for (int code : sim::gen_surrogate(rng, hi, 0.3)) CHECK((code >= 1 && code <= 4));
  }
}

TEST_CASE("baseline calibration") {
  SUBCASE("published vector at one half") {
    Rng rng(8);
    const Vector alpha = sim::calibrate_baseline(0.50, rng);
    for (int j = 0; j < 6; ++j) CHECK(alpha[j] == sim::kBaselineAlpha50[j]);
  }

  SUBCASE("search path recovers a near-zero shift at one half") {
    Rng rng(9);
    const Vector alpha = sim::calibrate_baseline_search(0.50, rng, 200000);
    CHECK(std::abs(alpha[0] - sim::kBaselineAlpha50[0]) < 0.05);
  }

  SUBCASE("seventy percent target is hit by construction") {
    Rng rng(10);
    const Vector alpha = sim::calibrate_baseline(0.70, rng, 200000);
    ThetaParams theta = scenario_truth();
    theta.alpha = alpha;
    Rng check_rng(11);
    const Matrix x = sim::gen_covariates(check_rng, 100000);
    const auto outcomes = sim::gen_outcomes(check_rng, x, theta);
    long censored = 0;
    for (const auto& o : outcomes) censored += o.event ? 0 : 1;
    CHECK(static_cast<double>(censored) / outcomes.size() == doctest::Approx(0.70).epsilon(0.02));
  }
}

TEST_CASE("scenario runs are deterministic across thread counts") {
  sim::ScenarioConfig config;
  config.cohort_size = 500;
  config.validation_size = 120;
  config.replications = 6;
  config.master_seed = 321;
  config.external_size = 1500;
  const auto serial = sim::run_scenario(config, 1);
  const auto parallel = sim::run_scenario(config, 4);
  REQUIRE(serial.replications.size() == parallel.replications.size());
  for (std::size_t r = 0; r < serial.replications.size(); ++r) {
    for (int e = 0; e < sim::kEstimatorCount; ++e) {
      const auto& a = serial.replications[r].results[e];
      const auto& b = parallel.replications[r].results[e];
      REQUIRE(a.ok == b.ok);
      if (a.ok) CHECK((a.estimate - b.estimate).lpNorm<Eigen::Infinity>() == 0.0);
    }
  }

  // Mean squared error decomposes exactly into bias^2 + variance.
  for (const auto& est : serial.summary.estimators) {
    if (est.n_converged == 0) continue;
    for (int p = 0; p < est.bias.size(); ++p) {
      const double mse = est.sqrt_mse[p] * est.sqrt_mse[p];
      const double decomposed = est.bias[p] * est.bias[p] + est.sqrt_var[p] * est.sqrt_var[p];
      CHECK(std::abs(mse - decomposed) < 1e-10);
    }
  }
}

TEST_CASE("full validation collapses every design to the full-cohort fit") {
  sim::ScenarioConfig config;
  config.cohort_size = 300;
  config.validation_size = 300;
  config.replications = 2;
  config.master_seed = 777;
  config.external_size = 1200;
  const auto result = sim::run_scenario(config, 1);
  for (const auto& rep : result.replications) {
    const auto& full = rep.results[static_cast<int>(sim::EstimatorKind::FullCohort)];
    REQUIRE(full.ok);
    for (int e = 1; e < sim::kEstimatorCount; ++e) {
      const auto& other = rep.results[e];
      REQUIRE(other.ok);
      CHECK((other.estimate - full.estimate).lpNorm<Eigen::Infinity>() < 1e-10);
    }
  }
}

TEST_CASE("scenario configuration is validated") {
  sim::ScenarioConfig config;
  config.cohort_size = 100;
  config.validation_size = 200;
  CHECK_THROWS_AS(config.check_valid(), ArgumentError);
  config.validation_size = 50;
  config.pilot_fraction = 1.5;
  CHECK_THROWS_AS(config.check_valid(), ArgumentError);
  config.pilot_fraction = 0.5;
  config.alpha_true = Vector::Zero(3);
  CHECK_THROWS_AS(config.check_valid(), ArgumentError);
}

TEST_CASE("variance ordering of the designs at adequate validation size") {
  // Mirrors the main comparison: at n = 400 drawn from N = 4000 with 50%
  // censoring, the oracle design beats the adaptive design beats balanced
  // sampling for the first regression coefficient, and the weighted SRS
  // estimator beats the complete-case SRS fit.
  sim::ScenarioConfig config;
  config.cohort_size = 4000;
  config.validation_size = 400;
  config.replications = 500;
  config.master_seed = 6020;
  const auto result = sim::run_scenario(config, 8);
  const auto& est = result.summary.estimators;
  const int b1 = config.target_index;
  const auto var_of = [&](sim::EstimatorKind kind) {
    const auto& cell = est[static_cast<int>(kind)];
    REQUIRE(cell.n_failed * 20 <= config.replications);
    return cell.sqrt_var[b1] * cell.sqrt_var[b1];
  };
  const double v_oracle = var_of(sim::EstimatorKind::MeanScoreOracle);
  const double v_adaptive = var_of(sim::EstimatorKind::MeanScoreAdaptive);
  const double v_balanced = var_of(sim::EstimatorKind::MeanScoreBalanced);
  const double v_ms_srs = var_of(sim::EstimatorKind::MeanScoreSrs);
  const double v_cc_srs = var_of(sim::EstimatorKind::CompleteCaseSrs);
  CHECK(v_oracle <= v_adaptive * 0.9);   // each step with at least a 10% margin
  CHECK(v_adaptive <= v_balanced * 0.9);
  CHECK(v_ms_srs < v_cc_srs);
}
