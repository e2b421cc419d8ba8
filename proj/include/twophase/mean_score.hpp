#pragma once

#include <span>

#include "twophase/model.hpp"
#include "twophase/types.hpp"

namespace twophase::meanscore {

// Uncovered strata (N(s) > 0, n(s) = 0) break the positivity condition the
// weighted estimator relies on. Permissive mode proceeds with a warning;
// strict mode refuses.
enum class CoverageMode { Permissive, Strict };

// Tallies the phase-one stratum counts N(y, delta, z) and the validated
// counts n(y, delta, z) for the index set `validated`.
StratumTable build_strata(const Cohort& cohort, std::span<const std::size_t> validated);

struct SandwichResult {
  Matrix covariance;  // per-estimate scale: (I_V^-1 + I_V^-1 Omega I_V^-1) / N
  Matrix info;        // I_V hat (weighted average information)
  Matrix omega;       // Omega hat (weighting-induced inflation)
  std::vector<std::string> warnings;
};

// Two-part variance of the weighted estimator: the complete-data information
// inverse plus the inflation from sampling only a subset, estimated with
// weighted average information and within-stratum score covariances.
// Singleton strata contribute zero to the inflation term, with a warning.
SandwichResult sandwich_variance(const ThetaParams& theta_hat, const Cohort& cohort,
                                 std::span<const std::size_t> validated,
                                 const StratumTable& strata);

// Weighted fit over the validated set with weights 1/pi_hat(stratum), then
// the sandwich covariance. `compute_covariance = false` skips the sandwich
// (useful inside Monte Carlo loops that only need point estimates).
FitResult mean_score_fit(const Cohort& cohort, std::span<const std::size_t> validated,
                         Link link, const model::SolverConfig& config = model::SolverConfig{},
                         CoverageMode mode = CoverageMode::Permissive,
                         bool compute_covariance = true);

}  // namespace twophase::meanscore
