#pragma once

#include <span>

#include "twophase/model.hpp"
#include "twophase/types.hpp"

namespace twophase::cox {

struct ContinuousRecord {
  double time = 0.0;
  bool event = false;
  Vector covariates;
  double weight = 1.0;
};

struct CoxFitResult {
  Vector beta;
  Matrix covariance;  // inverse of the weighted partial-likelihood information
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0.0;
};

// Weighted Cox partial likelihood with Breslow handling of ties, maximized
// by Newton-Raphson with step-halving. Throws NumericError on
// non-convergence or when a covariate separates the risk sets (monotone
// likelihood).
CoxFitResult cox_fit(std::span<const ContinuousRecord> records, double tol = 1e-8,
                     int max_iterations = 100);

struct EquivalenceReport {
  Vector beta_cox;
  Vector beta_discrete;
  Vector difference;
  Vector combined_se;
  bool applicable = true;  // false when the grid leaves a single interval
  bool pass = false;
};

// Fits (a) the weighted Cox model on the continuous times and (b) the
// grouped-time model with the complementary log-log link on the interval
// index, and reports whether each coefficient agrees within three combined
// standard errors. Times beyond the last boundary count as censored at the
// last interval.
EquivalenceReport discretize_equivalence_check(std::span<const ContinuousRecord> records,
                                               std::span<const double> boundaries);

}  // namespace twophase::cox
