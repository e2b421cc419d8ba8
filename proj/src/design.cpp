#include "twophase/design.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "twophase/errors.hpp"

namespace twophase::design {

namespace {

// Largest-remainder apportionment of `total` units over `keys` with
// non-negative weights and integer caps. Capped strata are frozen and the
// excess re-apportioned among the rest; at most one pass per stratum.
// Zero total weight falls back to equal shares. Ties in the fractional
// ranking break by key order.
std::map<StratumKey, long> apportion(const std::vector<StratumKey>& keys,
                                     std::map<StratumKey, double> weights,
                                     const std::map<StratumKey, long>& caps, long total) {
  std::map<StratumKey, long> counts;
  for (const auto& key : keys) counts[key] = 0;
  std::vector<StratumKey> active;
  for (const auto& key : keys)
    if (caps.at(key) > 0) active.push_back(key);
  long remaining = total;
  while (remaining > 0 && !active.empty()) {
    double weight_sum = 0.0;
    for (const auto& key : active) weight_sum += weights[key];
    if (!(weight_sum > 0.0))
      for (const auto& key : active) weights[key] = 1.0;
    weight_sum = 0.0;
    for (const auto& key : active) weight_sum += weights[key];

    std::map<StratumKey, long> share;
    std::vector<std::pair<double, StratumKey>> fractional;
    long placed = 0;
    for (const auto& key : active) {
      const double ideal = static_cast<double>(remaining) * weights[key] / weight_sum;
      const long base = static_cast<long>(std::floor(ideal + 1e-12));
      share[key] = base;
      placed += base;
      fractional.emplace_back(ideal - static_cast<double>(base), key);
    }
    std::stable_sort(fractional.begin(), fractional.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    long leftover = remaining - placed;
    for (const auto& [frac, key] : fractional) {
      if (leftover <= 0) break;
      ++share[key];
      --leftover;
    }

    bool capped = false;
    std::vector<StratumKey> next_active;
    for (const auto& key : active) {
      const long cap = caps.at(key) - counts.at(key);
      if (share[key] >= cap) {
        counts[key] += cap;
        remaining -= cap;
        capped = true;
      } else {
        next_active.push_back(key);
      }
    }
    if (!capped) {
      for (const auto& key : active) {
        counts[key] += share[key];
        remaining -= share[key];
      }
      break;
    }
    active = std::move(next_active);
  }
  if (remaining > 0)
    throw ArgumentError("allocation of " + std::to_string(total) +
                        " exceeds the available population");
  return counts;
}

std::vector<StratumKey> table_keys(const StratumTable& strata) {
  std::vector<StratumKey> keys;
  keys.reserve(strata.cells.size());
  for (const auto& [key, info] : strata.cells) keys.push_back(key);
  return keys;
}

std::map<StratumKey, long> table_caps(const StratumTable& strata) {
  std::map<StratumKey, long> caps;
  for (const auto& [key, info] : strata.cells) caps[key] = info.n_phase1;
  return caps;
}

}  // namespace

Allocation srs_allocation(const StratumTable& strata, long n, Rng& rng) {
  if (n < 0 || n > strata.total_phase1)
    throw ArgumentError("sample size outside 0..N");
  // Labels in key order; partial Fisher-Yates gives an exact without-
  // replacement draw, so the stratum tallies are multivariate hypergeometric.
  std::vector<int> labels;
  labels.reserve(strata.total_phase1);
  std::vector<StratumKey> keys = table_keys(strata);
  for (std::size_t s = 0; s < keys.size(); ++s)
    labels.insert(labels.end(), strata.cells.at(keys[s]).n_phase1, static_cast<int>(s));
  Allocation out;
  out.total = n;
  for (const auto& key : keys) out.counts[key] = 0;
  for (long i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, labels.size() - 1);
    std::swap(labels[i], labels[pick(rng)]);
    ++out.counts[keys[labels[i]]];
  }
  return out;
}

Allocation balanced_allocation(const StratumTable& strata, long n) {
  if (n < 0 || n > strata.total_phase1)
    throw ArgumentError("sample size outside 0..N");
  Allocation out;
  out.total = n;
  std::vector<StratumKey> keys = table_keys(strata);
  std::map<StratumKey, double> weights;
  for (const auto& key : keys) weights[key] = 1.0;
  out.counts = apportion(keys, weights, table_caps(strata), n);
  return out;
}

Allocation optimal_allocation(const StratumTable& strata, const NuisanceEstimates& nuisance,
                              int target_index, long n) {
  if (n < 0 || n > strata.total_phase1)
    throw ArgumentError("sample size outside 0..N");
  const int p = static_cast<int>(nuisance.info.rows());
  if (target_index < 0 || target_index >= p)
    throw ArgumentError("target index outside the parameter vector");

  Eigen::FullPivLU<Matrix> lu(nuisance.info);
  if (!lu.isInvertible())
    throw NumericError("information matrix singular; optimal allocation undefined");
  Vector basis = Vector::Zero(p);
  basis[target_index] = 1.0;
  const Vector a = lu.solve(basis);  // row of I^-1 for the target component

  Allocation out;
  out.total = n;
  std::vector<StratumKey> keys = table_keys(strata);
  std::map<StratumKey, double> weights;
  double weight_sum = 0.0;
  for (const auto& key : keys) {
    const double v = std::max(0.0, a.dot(nuisance.covariance_for(key) * a));
    const double w = static_cast<double>(strata.cells.at(key).n_phase1) * std::sqrt(v);
    weights[key] = w;
    weight_sum += w;
  }
  if (!(weight_sum > 0.0)) {
    out.warnings.push_back(
        "all stratum design weights are zero; falling back to proportional allocation");
    for (const auto& key : keys)
      weights[key] = static_cast<double>(strata.cells.at(key).n_phase1);
  }
  out.counts = apportion(keys, weights, table_caps(strata), n);

  // Keep every positive-weight stratum sampled at least once while the
  // budget allows: a zero-count stratum would have an undefined weighting
  // contribution. Donors are chosen to disturb the objective least.
  long positive = 0;
  for (const auto& key : keys)
    if (weights[key] > 0.0) ++positive;
  if (n >= positive) {
    bool changed = true;
    while (changed) {
      changed = false;
      for (const auto& key : keys) {
        if (!(weights[key] > 0.0) || out.counts[key] > 0) continue;
        const StratumKey* donor = nullptr;
        double donor_cost = std::numeric_limits<double>::infinity();
        for (const auto& other : keys) {
          const long m = out.counts[other];
          if (m < 2) continue;
          const double w = weights[other];
          const double cost = w * w / (static_cast<double>(m - 1) * static_cast<double>(m));
          if (cost < donor_cost) {
            donor_cost = cost;
            donor = &other;
          }
        }
        if (donor == nullptr) break;
        --out.counts[*donor];
        ++out.counts[key];
        changed = true;
      }
    }
  }
  return out;
}

Allocation adaptive_allocation(const Allocation& optimal, const Allocation& pilot,
                               const StratumTable& strata) {
  long pilot_total = 0;
  for (const auto& [key, count] : pilot.counts) {
    const auto it = strata.cells.find(key);
    const long capacity = it == strata.cells.end() ? 0 : it->second.n_phase1;
    if (count < 0 || count > capacity)
      throw ArgumentError("pilot count exceeds stratum size in " + key.to_string());
    pilot_total += count;
  }
  if (pilot_total > optimal.total)
    throw ArgumentError("pilot already exceeds the total validation budget");
  const long wave2 = optimal.total - pilot_total;

  Allocation out;
  out.total = wave2;
  std::vector<StratumKey> keys = table_keys(strata);
  std::map<StratumKey, long> base;
  std::map<StratumKey, long> room;
  long base_sum = 0;
  for (const auto& key : keys) {
    const long capacity = strata.cells.at(key).n_phase1;
    const long pilot_s = pilot.count(key);
    const long want = std::clamp(optimal.count(key) - pilot_s, 0L, capacity - pilot_s);
    base[key] = want;
    room[key] = capacity - pilot_s - want;
    base_sum += want;
  }

  if (base_sum == wave2) {
    out.counts = base;
  } else if (base_sum > wave2) {
    // Pilot overshoot elsewhere: scale the wave down, proportional to the
    // still-wanted counts.
    std::map<StratumKey, double> weights;
    for (const auto& key : keys) weights[key] = static_cast<double>(base[key]);
    out.counts = apportion(keys, weights, base, wave2);
  } else {
    // Saturated strata freed budget: spread it over strata with capacity,
    // proportional to the estimated optimal sizes.
    out.counts = base;
    std::map<StratumKey, double> weights;
    for (const auto& key : keys)
      weights[key] = room[key] > 0 ? static_cast<double>(optimal.count(key)) : 0.0;
    double weight_sum = 0.0;
    for (const auto& [key, w] : weights) weight_sum += w;
    if (!(weight_sum > 0.0))
      for (const auto& key : keys) weights[key] = static_cast<double>(room[key]);
    const auto extra = apportion(keys, weights, room, wave2 - base_sum);
    for (const auto& key : keys) out.counts[key] += extra.at(key);
  }
  return out;
}

StratumPredicate intermittent_censoring_predicate(int end_index) {
  return [end_index](const StratumKey& key) {
    return !key.event && key.time_index < end_index;
  };
}

Allocation undersampled_pilot(const StratumTable& strata, long n_pilot,
                              const StratumPredicate& predicate, long cap_per_stratum) {
  if (n_pilot < 0 || n_pilot > strata.total_phase1)
    throw ArgumentError("pilot size outside 0..N");
  if (cap_per_stratum < 0) throw ArgumentError("under-sampling cap must be non-negative");

  Allocation out;
  out.total = n_pilot;
  std::vector<StratumKey> keys = table_keys(strata);
  std::vector<StratumKey> matched;
  std::vector<StratumKey> rest;
  for (const auto& key : keys) (predicate(key) ? matched : rest).push_back(key);

  std::map<StratumKey, long> counts;
  for (const auto& key : keys) counts[key] = 0;
  long budget = n_pilot;

  std::map<StratumKey, long> matched_caps;
  long matched_want = 0;
  for (const auto& key : matched) {
    matched_caps[key] = std::min(cap_per_stratum, strata.cells.at(key).n_phase1);
    matched_want += matched_caps[key];
  }
  if (matched_want >= budget) {
    std::map<StratumKey, double> w;
    for (const auto& key : matched) w[key] = 1.0;
    const auto share = apportion(matched, w, matched_caps, budget);
    for (const auto& [key, c] : share) counts[key] = c;
    out.counts = counts;
    return out;
  }
  for (const auto& key : matched) counts[key] = matched_caps[key];
  budget -= matched_want;

  // Balance the remainder across the unmatched strata.
  std::map<StratumKey, long> rest_caps;
  long rest_capacity = 0;
  for (const auto& key : rest) {
    rest_caps[key] = strata.cells.at(key).n_phase1;
    rest_capacity += rest_caps[key];
  }
  const long to_rest = std::min(budget, rest_capacity);
  if (to_rest > 0) {
    std::map<StratumKey, double> w;
    for (const auto& key : rest) w[key] = 1.0;
    const auto share = apportion(rest, w, rest_caps, to_rest);
    for (const auto& [key, c] : share) counts[key] += c;
    budget -= to_rest;
  }

  // Anything left re-spreads over all strata with remaining capacity; the
  // total takes precedence over the cap.
  if (budget > 0) {
    std::map<StratumKey, long> room;
    std::map<StratumKey, double> w;
    for (const auto& key : keys) {
      room[key] = strata.cells.at(key).n_phase1 - counts[key];
      w[key] = 1.0;
    }
    const auto share = apportion(keys, w, room, budget);
    for (const auto& [key, c] : share) counts[key] += c;
  }
  out.counts = counts;
  return out;
}

namespace {

struct ScoreStats {
  Matrix info;
  std::map<StratumKey, Matrix> covariances;
  Matrix pooled;
  std::vector<StratumKey> fallback;
};

// Shared accumulation for pilot and oracle nuisance estimation. `weights`
// multiplies each record's -hessian in the information average; scores feed
// unbiased within-stratum covariances, with the pooled covariance standing
// in for strata with fewer than two members.
ScoreStats score_statistics(const Cohort& cohort, std::span<const std::size_t> indices,
                            std::span<const double> info_weights, double info_denominator,
                            const ThetaParams& theta) {
  const int p = cohort.n_times + cohort.n_covariates;
  ScoreStats out;
  out.info = Matrix::Zero(p, p);
  std::map<StratumKey, std::vector<Vector>> by_stratum;
  Vector pooled_sum = Vector::Zero(p);
  Matrix pooled_sq = Matrix::Zero(p, p);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& rec = cohort.records[indices[k]];
    out.info -= info_weights[k] * model::hessian(theta, rec);
    Vector u = model::score(theta, rec);
    pooled_sum += u;
    pooled_sq += u * u.transpose();
    by_stratum[StratumKey::of(rec)].push_back(std::move(u));
  }
  out.info /= info_denominator;

  const double m = static_cast<double>(indices.size());
  if (m >= 2.0) {
    const Vector mean = pooled_sum / m;
    out.pooled = (pooled_sq - m * (mean * mean.transpose())) / (m - 1.0);
  } else {
    out.pooled = Matrix::Zero(p, p);
  }

  for (auto& [key, scores] : by_stratum) {
    const double n_s = static_cast<double>(scores.size());
    if (scores.size() < 2) {
      out.covariances[key] = out.pooled;
      out.fallback.push_back(key);
      continue;
    }
    Vector mean = Vector::Zero(p);
    for (const auto& u : scores) mean += u;
    mean /= n_s;
    Matrix cov = Matrix::Zero(p, p);
    for (const auto& u : scores) cov += (u - mean) * (u - mean).transpose();
    cov /= n_s - 1.0;
    out.covariances[key] = cov;
  }
  return out;
}

}  // namespace

NuisanceEstimates pilot_nuisance(const Cohort& cohort, std::span<const std::size_t> pilot,
                                 Link link, const model::SolverConfig& config) {
  const StratumTable table = meanscore::build_strata(cohort, pilot);
  const FitResult fit = meanscore::mean_score_fit(cohort, pilot, link, config,
                                                  meanscore::CoverageMode::Permissive, false);
  std::vector<double> weights;
  weights.reserve(pilot.size());
  for (std::size_t idx : pilot) {
    const auto& cell = table.cells.at(StratumKey::of(cohort.records[idx]));
    weights.push_back(static_cast<double>(cell.n_phase1) / static_cast<double>(cell.n_validated));
  }
  ScoreStats stats = score_statistics(cohort, pilot, weights,
                                      static_cast<double>(cohort.size()), fit.theta);
  NuisanceEstimates out;
  out.source = NuisanceEstimates::Source::Pilot;
  out.info = std::move(stats.info);
  out.score_covariance = std::move(stats.covariances);
  out.pooled = std::move(stats.pooled);
  out.pooled_fallback = std::move(stats.fallback);
  // Record phase-one strata the pilot never saw: they also fall back to the
  // pooled covariance when the allocation asks for them.
  for (const auto& [key, info] : table.cells)
    if (info.n_validated == 0) out.pooled_fallback.push_back(key);
  return out;
}

NuisanceEstimates oracle_nuisance(const Cohort& external, Link link, const ThetaParams& theta) {
  IndexList indices;
  indices.reserve(external.size());
  for (std::size_t i = 0; i < external.size(); ++i) {
    if (!external.records[i].covariates)
      throw DataError("external sample must be fully validated");
    indices.push_back(i);
  }
  if (indices.empty()) throw ArgumentError("external sample is empty");
  ThetaParams at = theta;
  at.link = link;
  std::vector<double> unit(indices.size(), 1.0);
  ScoreStats stats =
      score_statistics(external, indices, unit, static_cast<double>(indices.size()), at);
  NuisanceEstimates out;
  out.source = NuisanceEstimates::Source::Oracle;
  out.info = std::move(stats.info);
  out.score_covariance = std::move(stats.covariances);
  out.pooled = std::move(stats.pooled);
  out.pooled_fallback = std::move(stats.fallback);
  return out;
}

IndexList draw_stratified(const Cohort& cohort, const Allocation& allocation, Rng& rng,
                          std::span<const std::size_t> exclude) {
  std::map<StratumKey, IndexList> members;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    members[StratumKey::of(cohort.records[i])].push_back(i);
  if (!exclude.empty()) {
    std::vector<bool> out_of_pool(cohort.size(), false);
    for (std::size_t idx : exclude) out_of_pool[idx] = true;
    for (auto& [key, list] : members)
      std::erase_if(list, [&](std::size_t idx) { return out_of_pool[idx]; });
  }
  IndexList drawn;
  drawn.reserve(static_cast<std::size_t>(allocation.total));
  for (const auto& [key, want] : allocation.counts) {
    if (want == 0) continue;
    auto it = members.find(key);
    const long available = it == members.end() ? 0 : static_cast<long>(it->second.size());
    if (want > available)
      throw ArgumentError("allocation wants " + std::to_string(want) + " from stratum " +
                          key.to_string() + " but only " + std::to_string(available) +
                          " remain");
    auto& pool = it->second;
    for (long k = 0; k < want; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
      drawn.push_back(pool[k]);
    }
  }
  std::sort(drawn.begin(), drawn.end());
  return drawn;
}

IndexList draw_srs(std::size_t population, long n, Rng& rng) {
  if (n < 0 || static_cast<std::size_t>(n) > population)
    throw ArgumentError("sample size outside 0..N");
  IndexList pool(population);
  std::iota(pool.begin(), pool.end(), 0);
  for (long i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  IndexList out(pool.begin(), pool.begin() + n);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace twophase::design
