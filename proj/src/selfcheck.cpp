#include "twophase/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "twophase/design.hpp"
#include "twophase/errors.hpp"
#include "twophase/mean_score.hpp"
#include "twophase/model.hpp"
#include "twophase/rng.hpp"

namespace twophase::selfcheck {

namespace {

double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct RandomDraw {
  ThetaParams theta;
  SubjectRecord record;
};

RandomDraw random_draw(Rng& rng, Link link) {
  std::uniform_real_distribution<double> alpha_range(-3.5, -0.5);
  std::uniform_real_distribution<double> beta_range(-1.0, 1.0);
  std::uniform_real_distribution<double> x_range(-1.0, 1.0);
  constexpr int J = 5;
  constexpr int d = 3;
  RandomDraw out;
  out.theta.link = link;
  out.theta.alpha.resize(J);
  for (int j = 0; j < J; ++j) out.theta.alpha[j] = alpha_range(rng);
  out.theta.beta.resize(d);
  for (int k = 0; k < d; ++k) out.theta.beta[k] = beta_range(rng);
  Vector x(d);
  for (int k = 0; k < d; ++k) x[k] = x_range(rng);
  out.record.covariates = x;
  out.record.time_index = std::uniform_int_distribution<int>(1, J)(rng);
  out.record.event = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.5;
  return out;
}

}  // namespace

CheckReport gradient_check(int draws, std::uint64_t seed) {
  CheckReport report{"gradient_hessian_fd", true, ""};
  const double h = 1e-6;
  double worst_score = 0.0;
  double worst_hessian = 0.0;
  Rng rng(seed);
  for (Link link : {Link::Logit, Link::CLogLog}) {
    for (int draw = 0; draw < draws; ++draw) {
      const RandomDraw rd = random_draw(rng, link);
      const int p = rd.theta.dim();
      const Vector packed = rd.theta.packed();
      const Vector analytic = model::score(rd.theta, rd.record);
      const Matrix analytic_h = model::hessian(rd.theta, rd.record);
      for (int k = 0; k < p; ++k) {
        Vector up = packed, down = packed;
        up[k] += h;
        down[k] -= h;
        const ThetaParams theta_up = ThetaParams::unpack(up, rd.theta.n_times(), link);
        const ThetaParams theta_down = ThetaParams::unpack(down, rd.theta.n_times(), link);
        const double fd =
            (model::loglik(theta_up, rd.record) - model::loglik(theta_down, rd.record)) / (2 * h);
        worst_score = std::max(worst_score, rel_error(analytic[k], fd));
        const Vector fd_col =
            (model::score(theta_up, rd.record) - model::score(theta_down, rd.record)) / (2 * h);
        for (int m = 0; m < p; ++m)
          worst_hessian = std::max(worst_hessian, rel_error(analytic_h(m, k), fd_col[m]));
      }
    }
  }
  std::ostringstream detail;
  detail << "max rel err: score " << worst_score << ", hessian " << worst_hessian;
  report.detail = detail.str();
  report.pass = worst_score < 1e-6 && worst_hessian < 1e-5;
  return report;
}

namespace {

struct SyntheticData {
  Cohort cohort;
};

// Logit-hazard cohort with events guaranteed at every time index, so both
// solvers work on an interior optimum.
SyntheticData random_logit_cohort(Rng& rng, long max_n) {
  std::uniform_int_distribution<int> j_range(2, 5);
  std::uniform_int_distribution<int> d_range(1, 4);
  std::uniform_int_distribution<long> n_range(60, max_n);
  std::uniform_real_distribution<double> alpha_range(-2.0, -0.5);
  std::uniform_real_distribution<double> beta_range(-0.8, 0.8);
  std::uniform_real_distribution<double> x_range(-1.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const int J = j_range(rng);
    const int d = d_range(rng);
    const long n = n_range(rng);
    ThetaParams theta;
    theta.link = Link::Logit;
    theta.alpha.resize(J);
    for (int j = 0; j < J; ++j) theta.alpha[j] = alpha_range(rng);
    theta.beta.resize(d);
    for (int k = 0; k < d; ++k) theta.beta[k] = beta_range(rng);

    SyntheticData data;
    data.cohort.n_times = J;
    data.cohort.max_followup_index = J;
    data.cohort.n_covariates = d;
    std::vector<long> events(J, 0);
    std::vector<long> nonevents(J, 0);
    for (long i = 0; i < n; ++i) {
      Vector x(d);
      for (int k = 0; k < d; ++k) x[k] = x_range(rng);
      SubjectRecord rec;
      rec.covariates = x;
      rec.time_index = J;
      rec.event = false;
      const double xb = theta.beta.dot(x);
      for (int j = 1; j <= J; ++j) {
        const double lam = model::inverse_link(Link::Logit, theta.alpha[j - 1] + xb);
        if (unif(rng) < lam) {
          rec.time_index = j;
          rec.event = true;
          break;
        }
      }
      if (rec.event)
        ++events[rec.time_index - 1];
      for (int j = 0; j < rec.time_index; ++j)
        if (!(rec.event && j == rec.time_index - 1)) ++nonevents[j];
      data.cohort.records.push_back(std::move(rec));
    }
    bool interior = true;
    for (int j = 0; j < J; ++j) interior = interior && events[j] > 0 && nonevents[j] > 0;
    if (interior) return data;
  }
  throw NumericError("could not synthesize an interior logit dataset");
}

// Independent logistic IRLS on the person-period expansion.
Vector irls_person_period(const Cohort& cohort) {
  const int J = cohort.n_times;
  const int d = cohort.n_covariates;
  const int p = J + d;
  long rows = 0;
  for (const auto& rec : cohort.records) rows += rec.time_index;
  Matrix design(rows, p);
  Vector response(rows);
  long r = 0;
  for (const auto& rec : cohort.records) {
    for (int j = 1; j <= rec.time_index; ++j, ++r) {
      design.row(r).setZero();
      design(r, j - 1) = 1.0;
      design.block(r, J, 1, d) = rec.covariates->transpose();
      response[r] = (rec.event && j == rec.time_index) ? 1.0 : 0.0;
    }
  }
  Vector coef = Vector::Zero(p);
  for (int iter = 0; iter < 60; ++iter) {
    const Vector eta = design * coef;
    Vector mu(rows), w(rows);
    for (long i = 0; i < rows; ++i) {
      mu[i] = 1.0 / (1.0 + std::exp(-eta[i]));
      w[i] = mu[i] * (1.0 - mu[i]);
    }
    const Matrix xtwx = design.transpose() * w.asDiagonal() * design;
    const Vector rhs = design.transpose() * (response - mu);
    const Vector step = xtwx.ldlt().solve(rhs);
    coef += step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-12) break;
  }
  return coef;
}

}  // namespace

CheckReport person_period_check(int datasets, std::uint64_t seed) {
  CheckReport report{"person_period_irls", true, ""};
  Rng rng(seed);
  double worst = 0.0;
  for (int s = 0; s < datasets; ++s) {
    const SyntheticData data = random_logit_cohort(rng, 500);
    const FitResult fit = model::fit_mle(data.cohort, Link::Logit);
    const Vector oracle = irls_person_period(data.cohort);
    worst = std::max(worst, (fit.theta.packed() - oracle).lpNorm<Eigen::Infinity>());
  }
  std::ostringstream detail;
  detail << "max coefficient gap " << worst << " over " << datasets << " datasets";
  report.detail = detail.str();
  report.pass = worst < 1e-6;
  return report;
}

double allocation_objective(const std::vector<long>& sizes, const std::vector<double>& variances,
                            const std::vector<long>& counts) {
  double total = 0.0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    if (counts[s] == 0) {
      if (variances[s] > 0.0) return std::numeric_limits<double>::infinity();
      continue;
    }
    const double n_s = static_cast<double>(sizes[s]);
    total += n_s * n_s * variances[s] / static_cast<double>(counts[s]);
  }
  return total;
}

CheckReport allocation_check(int instances, std::uint64_t seed) {
  CheckReport report{"allocation_bruteforce", true, ""};
  Rng rng(seed);
  std::uniform_int_distribution<long> size_range(15, 60);
  std::uniform_int_distribution<long> n_range(8, 30);
  std::uniform_real_distribution<double> entry(-1.0, 1.0);
  double worst_gap = 0.0;
  int failures = 0;
  for (int inst = 0; inst < instances; ++inst) {
    constexpr int S = 3;
    constexpr int p = 2;
    StratumTable strata;
    std::vector<long> sizes(S);
    std::vector<StratumKey> keys;
    for (int s = 0; s < S; ++s) {
      sizes[s] = size_range(rng);
      StratumKey key{s + 1, true, {1}};
      keys.push_back(key);
      strata.cells[key].n_phase1 = sizes[s];
      strata.total_phase1 += sizes[s];
    }
    const long n = std::min(n_range(rng), strata.total_phase1);

    design::NuisanceEstimates nuisance;
    Matrix b(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) b(i, j) = entry(rng);
    nuisance.info = b * b.transpose() + Matrix::Identity(p, p);
    nuisance.pooled = Matrix::Zero(p, p);
    for (int s = 0; s < S; ++s) {
      Matrix a(p, p);
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) a(i, j) = entry(rng);
      nuisance.score_covariance[keys[s]] = a * a.transpose() + 0.05 * Matrix::Identity(p, p);
    }
    const int target = std::uniform_int_distribution<int>(0, p - 1)(rng);

    const Allocation ours = design::optimal_allocation(strata, nuisance, target, n);

    // Per-stratum target variances as the allocation sees them.
    Eigen::FullPivLU<Matrix> lu(nuisance.info);
    Vector basis = Vector::Zero(p);
    basis[target] = 1.0;
    const Vector a = lu.solve(basis);
    std::vector<double> variances(S);
    for (int s = 0; s < S; ++s)
      variances[s] = a.dot(nuisance.score_covariance[keys[s]] * a);

    // Exhaustive integer search.
    std::vector<long> best(S, 0);
    double best_obj = std::numeric_limits<double>::infinity();
    for (long m0 = 0; m0 <= std::min(n, sizes[0]); ++m0) {
      for (long m1 = 0; m1 + m0 <= n && m1 <= sizes[1]; ++m1) {
        const long m2 = n - m0 - m1;
        if (m2 < 0 || m2 > sizes[2]) continue;
        const std::vector<long> counts{m0, m1, m2};
        const double obj = allocation_objective(sizes, variances, counts);
        if (obj < best_obj) {
          best_obj = obj;
          best = counts;
        }
      }
    }

    // Best objective reachable by moving one unit away from the optimum.
    double neighbor_best = std::numeric_limits<double>::infinity();
    for (int from = 0; from < S; ++from) {
      for (int to = 0; to < S; ++to) {
        if (from == to || best[from] == 0 || best[to] >= sizes[to]) continue;
        std::vector<long> counts = best;
        --counts[from];
        ++counts[to];
        neighbor_best = std::min(neighbor_best, allocation_objective(sizes, variances, counts));
      }
    }

    std::vector<long> ours_counts(S);
    for (int s = 0; s < S; ++s) ours_counts[s] = ours.count(keys[s]);
    const double ours_obj = allocation_objective(sizes, variances, ours_counts);
    const double allowed =
        (std::isfinite(neighbor_best) ? neighbor_best : best_obj) * (1.0 + 1e-9);
    if (!(ours_obj <= allowed)) {
      ++failures;
      worst_gap = std::max(worst_gap, ours_obj / best_obj - 1.0);
    }
  }
  std::ostringstream detail;
  detail << failures << " of " << instances << " instances beyond the one-swap bound";
  if (failures > 0) detail << " (worst excess " << worst_gap << ")";
  report.detail = detail.str();
  report.pass = failures == 0;
  return report;
}

std::vector<CheckReport> run_all(int draws, int datasets, int instances, std::uint64_t seed) {
  return {gradient_check(draws, seed), person_period_check(datasets, seed + 1),
          allocation_check(instances, seed + 2)};
}

}  // namespace twophase::selfcheck
