#pragma once

#include <functional>
#include <span>

#include "twophase/mean_score.hpp"
#include "twophase/rng.hpp"
#include "twophase/types.hpp"

namespace twophase::design {

// Inputs the optimal design needs: the average information matrix and the
// per-stratum covariance of the score. `pooled` is the unstratified score
// covariance, used for strata the estimation sample could not resolve
// (fewer than two members, or never seen); such keys are listed in
// `pooled_fallback`.
struct NuisanceEstimates {
  enum class Source { Pilot, Oracle };

  Matrix info;
  std::map<StratumKey, Matrix> score_covariance;
  Matrix pooled;
  Source source = Source::Pilot;
  std::vector<StratumKey> pooled_fallback;

  const Matrix& covariance_for(const StratumKey& key) const {
    auto it = score_covariance.find(key);
    return it == score_covariance.end() ? pooled : it->second;
  }
};

// Simple random sample of n subjects from the phase-one cohort; the
// allocation records the stratum tallies the draw induces.
Allocation srs_allocation(const StratumTable& strata, long n, Rng& rng);

// Equal counts per stratum, capping at stratum size and re-spreading any
// shortfall among unsaturated strata (deterministic remainder rule).
Allocation balanced_allocation(const StratumTable& strata, long n);

// Neyman-type allocation for component `target_index` (0-based position in
// the packed (alpha, beta) vector): counts proportional to
// N(s) * sqrt([I^-1 Var(U|s) I^-1]_kk), rounded by largest remainder and
// iteratively capped at stratum sizes. Strata with positive weight are kept
// at a minimum of one draw when the budget allows, since an empty stratum
// would make its weighting contribution undefined.
Allocation optimal_allocation(const StratumTable& strata, const NuisanceEstimates& nuisance,
                              int target_index, long n);

// Second-wave counts: optimal minus pilot, floored at zero, capped at the
// remaining stratum capacity, with any surplus or shortfall re-apportioned
// so the pilot and the wave together spend exactly `optimal.total` draws.
Allocation adaptive_allocation(const Allocation& optimal, const Allocation& pilot,
                               const StratumTable& strata);

using StratumPredicate = std::function<bool(const StratumKey&)>;

// Matches strata censored before the administrative end of follow-up.
StratumPredicate intermittent_censoring_predicate(int end_index);

// Pilot allocation that gives strata matching `predicate` at most
// `cap_per_stratum` members and spreads the rest evenly over the remaining
// strata; leftover that cannot be placed there is re-spread over all strata
// with capacity.
Allocation undersampled_pilot(const StratumTable& strata, long n_pilot,
                              const StratumPredicate& predicate, long cap_per_stratum);

// Nuisance estimates from a pilot validation subset: the information matrix
// by inverse-probability weighting over the pilot, the per-stratum score
// covariance as the within-stratum unbiased sample covariance, both at the
// pilot mean-score estimate.
NuisanceEstimates pilot_nuisance(const Cohort& cohort, std::span<const std::size_t> pilot,
                                 Link link,
                                 const model::SolverConfig& config = model::SolverConfig{});

// Nuisance estimates from an external fully-validated sample evaluated at a
// supplied theta (no weighting).
NuisanceEstimates oracle_nuisance(const Cohort& external, Link link, const ThetaParams& theta);

// Realizes an allocation: draws `allocation.counts[s]` members uniformly
// without replacement within each stratum, skipping `exclude` (sorted
// indices, e.g. an earlier wave).
IndexList draw_stratified(const Cohort& cohort, const Allocation& allocation, Rng& rng,
                          std::span<const std::size_t> exclude = {});

// n distinct indices uniformly from 0..population-1.
IndexList draw_srs(std::size_t population, long n, Rng& rng);

}  // namespace twophase::design
