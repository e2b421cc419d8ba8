#include "twophase/cox.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "twophase/errors.hpp"
#include "twophase/mean_score.hpp"

namespace twophase::cox {

namespace {

// Under a monotone partial likelihood the gradient still vanishes once the
// risk-set softmax saturates, so separation shows up as convergence at an
// absurd coefficient rather than as divergence. Flag both.
constexpr double kSeparationBound = 50.0;
constexpr double kConvergedMagnitudeBound = 15.0;

struct PartialDerivs {
  double loglik = 0.0;
  Vector gradient;
  Matrix information;  // negative Hessian of the weighted partial likelihood
};

// One sweep over the records in decreasing time order. Records tied on time
// enter the risk set before any of their events are scored, which is the
// Breslow convention: tied events share the full risk-set denominator.
PartialDerivs partial_derivs(std::span<const ContinuousRecord> records,
                             std::span<const std::size_t> order, const Vector& beta,
                             bool with_matrix) {
  const int d = static_cast<int>(beta.size());
  PartialDerivs out;
  out.gradient = Vector::Zero(d);
  if (with_matrix) out.information = Matrix::Zero(d, d);
  double s0 = 0.0;
  Vector s1 = Vector::Zero(d);
  Matrix s2 = Matrix::Zero(d, d);
  std::size_t pos = 0;
  while (pos < order.size()) {
    std::size_t tie_end = pos;
    const double t = records[order[pos]].time;
    while (tie_end < order.size() && records[order[tie_end]].time == t) ++tie_end;
    for (std::size_t k = pos; k < tie_end; ++k) {
      const auto& rec = records[order[k]];
      const double r = rec.weight * std::exp(beta.dot(rec.covariates));
      s0 += r;
      s1 += r * rec.covariates;
      if (with_matrix) s2 += r * (rec.covariates * rec.covariates.transpose());
    }
    for (std::size_t k = pos; k < tie_end; ++k) {
      const auto& rec = records[order[k]];
      if (!rec.event) continue;
      const Vector mean = s1 / s0;
      out.loglik += rec.weight * (beta.dot(rec.covariates) - std::log(s0));
      out.gradient += rec.weight * (rec.covariates - mean);
      if (with_matrix) out.information += rec.weight * (s2 / s0 - mean * mean.transpose());
    }
    pos = tie_end;
  }
  return out;
}

}  // namespace

CoxFitResult cox_fit(std::span<const ContinuousRecord> records, double tol, int max_iterations) {
  if (records.empty()) throw ArgumentError("no records for the Cox fit");
  const int d = static_cast<int>(records.front().covariates.size());
  bool any_event = false;
  for (const auto& rec : records) {
    if (!(rec.time > 0.0) || !std::isfinite(rec.time))
      throw ArgumentError("times must be positive and finite");
    if (!(rec.weight > 0.0) || !std::isfinite(rec.weight))
      throw ArgumentError("weights must be positive and finite");
    if (rec.covariates.size() != d || !rec.covariates.allFinite())
      throw ArgumentError("covariate rows must be finite with equal length");
    any_event |= rec.event;
  }
  if (!any_event) throw ArgumentError("at least one event is required");

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].time > records[b].time;
  });

  CoxFitResult out;
  Vector beta = Vector::Zero(d);
  double ll = partial_derivs(records, order, beta, false).loglik;
  bool converged = false;
  int iter = 0;
  Vector grad = Vector::Zero(d);
  for (; iter < max_iterations; ++iter) {
    auto derivs = partial_derivs(records, order, beta, true);
    grad = derivs.gradient;
    if (grad.lpNorm<Eigen::Infinity>() < tol) {
      converged = true;
      break;
    }
    Eigen::LDLT<Matrix> solver(derivs.information);
    Vector step = solver.solve(grad);
    if (solver.info() != Eigen::Success || !step.allFinite() || grad.dot(step) <= 0.0)
      step = grad;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= 20; ++h, t *= 0.5) {
      const Vector cand = beta + t * step;
      const double cand_ll = partial_derivs(records, order, cand, false).loglik;
      if (std::isfinite(cand_ll) && cand_ll >= ll - 1e-12 * (1.0 + std::abs(ll))) {
        beta = cand;
        ll = cand_ll;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (beta.lpNorm<Eigen::Infinity>() > kSeparationBound)
      throw NumericError(
          "monotone partial likelihood: a covariate separates the risk sets "
          "(|beta| exceeded " +
          std::to_string(static_cast<int>(kSeparationBound)) + ")");
  }
  if (!converged) {
    grad = partial_derivs(records, order, beta, false).gradient;
    converged = grad.lpNorm<Eigen::Infinity>() < tol;
  }
  if (!converged) {
    std::ostringstream msg;
    msg << "Cox fit did not converge after " << iter
        << " iterations (max|gradient| = " << grad.lpNorm<Eigen::Infinity>() << ")";
    throw NumericError(msg.str());
  }
  if (beta.lpNorm<Eigen::Infinity>() > kConvergedMagnitudeBound)
    throw NumericError("monotone partial likelihood: converged at |beta| > " +
                       std::to_string(static_cast<int>(kConvergedMagnitudeBound)) +
                       ", a covariate separates the risk sets");

  auto final_derivs = partial_derivs(records, order, beta, true);
  Eigen::FullPivLU<Matrix> lu(final_derivs.information);
  out.beta = beta;
  // Flat directions (a constant covariate) leave the estimate valid but the
  // model-based variance undefined there.
  out.covariance = lu.isInvertible()
                       ? Matrix(lu.inverse())
                       : Matrix::Constant(d, d, std::numeric_limits<double>::quiet_NaN());
  out.loglik = ll;
  out.converged = true;
  out.iterations = iter;
  out.gradient_norm = final_derivs.gradient.lpNorm<Eigen::Infinity>();
  return out;
}

EquivalenceReport discretize_equivalence_check(std::span<const ContinuousRecord> records,
                                               std::span<const double> boundaries) {
  if (boundaries.empty()) throw ArgumentError("at least one interval boundary is required");
  for (std::size_t j = 0; j < boundaries.size(); ++j) {
    if (!(boundaries[j] > 0.0)) throw ArgumentError("boundaries must be positive");
    if (j > 0 && !(boundaries[j] > boundaries[j - 1]))
      throw ArgumentError("boundaries must be strictly increasing");
  }
  const int J = static_cast<int>(boundaries.size());

  EquivalenceReport report;
  if (J == 1) {
    // A single interval leaves nothing for the grouped model to resolve.
    report.applicable = false;
    report.pass = false;
    return report;
  }

  const CoxFitResult cont = cox_fit(records);
  const int d = static_cast<int>(cont.beta.size());

  Cohort grouped;
  grouped.n_times = J;
  grouped.max_followup_index = J;
  grouped.n_covariates = d;
  std::vector<double> weights;
  IndexList indices;
  for (const auto& rec : records) {
    SubjectRecord subject;
    int idx = J;
    bool event = rec.event;
    if (rec.time > boundaries[J - 1]) {
      idx = J;
      event = false;  // beyond the grid: censored at the last interval
    } else {
      idx = 1;
      while (rec.time > boundaries[idx - 1]) ++idx;
    }
    subject.time_index = idx;
    subject.event = event;
    subject.covariates = rec.covariates;
    indices.push_back(grouped.records.size());
    grouped.records.push_back(std::move(subject));
    weights.push_back(rec.weight);
  }

  const FitResult discrete =
      model::fit_weighted(grouped, indices, weights, Link::CLogLog);

  report.beta_cox = cont.beta;
  report.beta_discrete = discrete.theta.beta;
  report.difference = report.beta_cox - report.beta_discrete;
  report.combined_se.resize(d);
  const Matrix& disc_cov = discrete.covariance;
  bool pass = true;
  for (int k = 0; k < d; ++k) {
    const double v_cox = cont.covariance(k, k);
    const double v_disc = disc_cov(J + k, J + k);
    report.combined_se[k] = std::sqrt(v_cox + v_disc);
    pass = pass && std::abs(report.difference[k]) < 3.0 * report.combined_se[k];
  }
  report.pass = pass;
  return report;
}

}  // namespace twophase::cox
