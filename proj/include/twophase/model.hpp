#pragma once

#include <optional>
#include <span>

#include "twophase/types.hpp"

namespace twophase::model {

// Hazards are clamped to [kHazardEps, 1 - kHazardEps] so that downstream
// logs stay finite. The model keeps hazards away from 0 and 1 anyway; the
// clamp is a numerical guard, not part of the model.
inline constexpr double kHazardEps = 1e-12;

// g(lambda) on the link scale.
double link_transform(Link link, double hazard);
// g^{-1}(eta), clamped to (0, 1).
double inverse_link(Link link, double eta);

// Conditional hazard lambda_j(x) for 1-based time index j.
double hazard(const ThetaParams& theta, int time_index, const Vector& x);

// S_j(x) = prod_{k<j} (1 - lambda_k(x)) for j = 1..J, with S_1 = 1.
Vector survival_curve(const ThetaParams& theta, const Vector& x);

// Per-subject log-likelihood
//   sum_{j<=J(i)} [ D_ij log(lambda_j/(1-lambda_j)) + log(1-lambda_j) ].
// Requires rec.covariates.
double loglik(const ThetaParams& theta, const SubjectRecord& rec);

// Analytic gradient of loglik in packed (alpha, beta) order.
Vector score(const ThetaParams& theta, const SubjectRecord& rec);

// Analytic Hessian of loglik. Symmetric, with a diagonal alpha block
// (d^2/d alpha_j d alpha_j' == 0 for j != j').
Matrix hessian(const ThetaParams& theta, const SubjectRecord& rec);

struct SolverConfig {
  double score_tol = 1e-8;   // converged when max|weighted score| < score_tol
  double param_tol = 1e-10;  // ... or when the max parameter change drops below
  int max_iterations = 100;
  int max_halvings = 20;     // step-halvings per Newton iteration
};

// Weighted maximum likelihood by damped Newton-Raphson over the records at
// `indices`, all of which must carry covariates. Weights are per selected
// record, strictly positive. The candidate Newton step is halved (up to
// max_halvings) whenever it fails to increase the weighted log-likelihood.
//
// The returned covariance is the model-based inverse of the weighted
// observed information; mean-score callers replace it with the sandwich.
//
// Throws DataError when some alpha_j is inestimable (no weighted at-risk
// mass at j) and NumericError on non-convergence (message carries the last
// iterate diagnostics).
FitResult fit_weighted(const Cohort& cohort,
                       std::span<const std::size_t> indices,
                       std::span<const double> weights,
                       Link link,
                       const std::optional<ThetaParams>& init = std::nullopt,
                       const SolverConfig& config = SolverConfig{});

// Unweighted MLE over every validated record of the cohort.
FitResult fit_mle(const Cohort& cohort, Link link,
                  const SolverConfig& config = SolverConfig{});

}  // namespace twophase::model
