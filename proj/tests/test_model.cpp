#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "support/test_helpers.hpp"
#include "twophase/errors.hpp"
#include "twophase/model.hpp"
#include "twophase/selfcheck.hpp"

using namespace twophase;
using testsupport::scenario_cohort;
using testsupport::scenario_truth;

namespace {

ThetaParams make_theta(std::initializer_list<double> alpha, std::initializer_list<double> beta,
                       Link link) {
  ThetaParams theta;
  theta.alpha = Eigen::Map<const Vector>(std::data(alpha), std::ssize(alpha));
  theta.beta = Eigen::Map<const Vector>(std::data(beta), std::ssize(beta));
  theta.link = link;
  return theta;
}

}  // namespace

TEST_CASE("hazard closed forms") {
  const ThetaParams logit = make_theta({0.0}, {1.0}, Link::Logit);
  CHECK(model::hazard(logit, 1, Vector::Zero(1)) == doctest::Approx(0.5).epsilon(1e-12));

  const ThetaParams cloglog = make_theta({0.0}, {1.0}, Link::CLogLog);
  CHECK(model::hazard(cloglog, 1, Vector::Zero(1)) ==
        doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-12));

  // Published 50%-censoring baseline, first interval at x = 0.
  const ThetaParams paper = make_theta({-3.410, -3.027, -2.641, -2.249, -1.849, -1.435},
                                       {0.405, -0.357, 0.262, -0.262}, Link::CLogLog);
  CHECK(model::hazard(paper, 1, Vector::Zero(4)) ==
        doctest::Approx(1.0 - std::exp(-std::exp(-3.410))).epsilon(1e-12));

  CHECK_THROWS_AS(model::hazard(paper, 0, Vector::Zero(4)), ArgumentError);
  CHECK_THROWS_AS(model::hazard(paper, 7, Vector::Zero(4)), ArgumentError);
  CHECK_THROWS_AS(model::hazard(paper, 1, Vector::Zero(2)), ArgumentError);
}

TEST_CASE("hazard stays inside the open unit interval") {
  const ThetaParams wild = make_theta({40.0, -40.0}, {0.0}, Link::CLogLog);
  const double hi = model::hazard(wild, 1, Vector::Zero(1));
  const double lo = model::hazard(wild, 2, Vector::Zero(1));
  CHECK(hi < 1.0);
  CHECK(hi >= 1.0 - 2e-12);
  CHECK(lo > 0.0);
}

TEST_CASE("survival curve") {
  // Constant hazard 0.5 gives the geometric curve.
  const ThetaParams half = make_theta({0.0, 0.0, 0.0, 0.0}, {0.5}, Link::Logit);
  const Vector surv = model::survival_curve(half, Vector::Zero(1));
  for (int j = 0; j < 4; ++j) CHECK(surv[j] == doctest::Approx(std::pow(0.5, j)).epsilon(1e-12));

  // S_1 = 1 and monotone non-increasing for random parameters.
  Rng rng(7);
  std::uniform_real_distribution<double> unif(-2.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    ThetaParams theta;
    theta.link = rep % 2 ? Link::Logit : Link::CLogLog;
    theta.alpha = Vector::NullaryExpr(5, [&](auto) { return unif(rng); });
    theta.beta = Vector::NullaryExpr(3, [&](auto) { return unif(rng) / 2.0; });
    Vector x = Vector::NullaryExpr(3, [&](auto) { return unif(rng); });
    const Vector s = model::survival_curve(theta, x);
    CHECK(s[0] == 1.0);
    for (int j = 1; j < s.size(); ++j) {
      CHECK(s[j] <= s[j - 1]);
      CHECK(s[j] > 0.0);
    }
  }
}

TEST_CASE("marginal survival past the cutoff matches the 50% design") {
  Rng rng(2024);
  const Matrix x = sim::gen_covariates(rng, 100000);
  const ThetaParams truth = scenario_truth();
  double total = 0.0;
  for (long i = 0; i < x.rows(); ++i) {
    const Vector xi = x.row(i);
    double surv = 1.0;
    for (int j = 1; j <= 6; ++j) surv *= 1.0 - model::hazard(truth, j, xi);
    total += surv;
  }
  CHECK(total / static_cast<double>(x.rows()) == doctest::Approx(0.50).epsilon(0.04));
}

TEST_CASE("loglik closed forms and the person-period oracle") {
  const ThetaParams theta = make_theta({0.0, 0.0}, {0.0}, Link::Logit);
  SubjectRecord rec;
  rec.covariates = Vector::Zero(1);
  rec.time_index = 1;
  rec.event = true;
  CHECK(model::loglik(theta, rec) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));

  rec.time_index = 2;
  rec.event = false;
  CHECK(model::loglik(theta, rec) == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-12));

  SubjectRecord missing;
  missing.time_index = 1;
  CHECK_THROWS_AS(model::loglik(theta, missing), DataError);

  // Independent oracle: expand into one Bernoulli trial per at-risk period.
  Rng rng(99);
  std::uniform_real_distribution<double> unif(-2.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    ThetaParams t;
    t.link = rep % 2 ? Link::Logit : Link::CLogLog;
    t.alpha = Vector::NullaryExpr(4, [&](auto) { return unif(rng); });
    t.beta = Vector::NullaryExpr(2, [&](auto) { return unif(rng) / 2.0; });
    SubjectRecord r;
    r.covariates = Vector::NullaryExpr(2, [&](auto) { return unif(rng); });
    r.time_index = std::uniform_int_distribution<int>(1, 4)(rng);
    r.event = unif(rng) > -0.5;
    double expected = 0.0;
    for (int j = 1; j <= r.time_index; ++j) {
      const double lam = model::hazard(t, j, *r.covariates);
      const bool d = r.event && j == r.time_index;
      expected += d ? std::log(lam) : std::log(1.0 - lam);
    }
    CHECK(model::loglik(t, r) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("score and hessian match finite differences") {
  const auto report = selfcheck::gradient_check(25, 11);
  INFO(report.detail);
  CHECK(report.pass);
}

TEST_CASE("score and hessian structure") {
  // With D_ij = lambda_j by construction, the logit alpha component is zero.
  const ThetaParams theta = make_theta({0.0, 0.0}, {0.0}, Link::Logit);
  SubjectRecord rec;
  rec.covariates = Vector::Zero(1);
  rec.time_index = 1;
  rec.event = true;
  SubjectRecord rec2 = rec;
  rec2.event = false;
  const Vector sum = model::score(theta, rec) + model::score(theta, rec2);
  CHECK(std::abs(sum[0]) < 1e-14);  // D averages to 0.5 = lambda

  // Logit Hessian: off-diagonal alpha block is exactly zero.
  SubjectRecord late;
  late.covariates = Vector::Constant(1, 0.7);
  late.time_index = 2;
  late.event = true;
  const Matrix h = model::hessian(theta, late);
  CHECK(h(0, 1) == 0.0);
  CHECK(h(1, 0) == 0.0);
  CHECK(h == h.transpose());

  // Bernoulli concavity: single-record logit Hessian has no positive curvature.
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
  CHECK(eig.eigenvalues().maxCoeff() <= 1e-10);
}

TEST_CASE("unit-weight logit fit equals person-period IRLS") {
  const auto report = selfcheck::person_period_check(6, 21);
  INFO(report.detail);
  CHECK(report.pass);
}

TEST_CASE("weighted fit drives the weighted score to zero") {
  const Cohort cohort = scenario_cohort(5, 600);
  IndexList indices;
  std::vector<double> weights;
  Rng rng(17);
  std::uniform_real_distribution<double> wdist(0.5, 3.0);
  for (std::size_t i = 0; i < cohort.size(); i += 2) {
    indices.push_back(i);
    weights.push_back(wdist(rng));
  }
  for (Link link : {Link::Logit, Link::CLogLog}) {
    const FitResult fit = model::fit_weighted(cohort, indices, weights, link);
    CHECK(fit.converged);
    Vector total = Vector::Zero(fit.theta.dim());
    for (std::size_t k = 0; k < indices.size(); ++k)
      total += weights[k] * model::score(fit.theta, cohort.records[indices[k]]);
    CHECK(total.lpNorm<Eigen::Infinity>() < 1e-7);
  }
}

TEST_CASE("full-cohort cloglog fit recovers the generating coefficient") {
  // N = 8000 puts the Monte Carlo sd of beta_1 near 0.067.
  const Cohort cohort = scenario_cohort(31337, 8000);
  const FitResult fit = model::fit_mle(cohort, Link::CLogLog);
  CHECK(fit.converged);
  CHECK(std::abs(fit.theta.beta[0] - std::log(1.5)) < 3.0 * 0.067);
}

TEST_CASE("weight linearity: duplicated records at half weight") {
  const Cohort base = scenario_cohort(77, 300);
  IndexList indices(base.size());
  std::iota(indices.begin(), indices.end(), 0);
  std::vector<double> unit(base.size(), 1.0);
  const FitResult plain = model::fit_weighted(base, indices, unit, Link::Logit);

  Cohort doubled = base;
  doubled.records.insert(doubled.records.end(), base.records.begin(), base.records.end());
  IndexList all(doubled.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> halves(doubled.size(), 0.5);
  const FitResult dup = model::fit_weighted(doubled, all, halves, Link::Logit);
  CHECK((plain.theta.packed() - dup.theta.packed()).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("inestimable baseline hazard is reported") {
  Cohort cohort;
  cohort.n_times = 3;
  cohort.max_followup_index = 3;
  cohort.n_covariates = 1;
  for (int i = 0; i < 10; ++i) {
    SubjectRecord rec;
    rec.covariates = Vector::Constant(1, i % 2 ? 0.4 : -0.2);
    rec.time_index = 1;  // nobody survives into periods 2 and 3
    rec.event = i % 2 == 0;
    cohort.records.push_back(rec);
  }
  IndexList indices(cohort.size());
  std::iota(indices.begin(), indices.end(), 0);
  std::vector<double> weights(cohort.size(), 1.0);
  CHECK_THROWS_WITH_AS(model::fit_weighted(cohort, indices, weights, Link::Logit),
                       doctest::Contains("2,3"), DataError);
}

TEST_CASE("each link maximizes its own likelihood on cloglog data") {
  const Cohort cohort = scenario_cohort(4242, 2000);
  const FitResult cll = model::fit_mle(cohort, Link::CLogLog);
  const FitResult lgt = model::fit_mle(cohort, Link::Logit);
  CHECK(cll.converged);
  CHECK(lgt.converged);
  CHECK(cll.gradient_norm < 1e-8);
  CHECK(lgt.gradient_norm < 1e-8);
  // Different parameterizations give different coefficients in general.
  CHECK((cll.theta.beta - lgt.theta.beta).lpNorm<Eigen::Infinity>() > 1e-3);
}
