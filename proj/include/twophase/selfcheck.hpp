#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twophase/types.hpp"

namespace twophase::selfcheck {

struct CheckReport {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Analytic score and Hessian against central finite differences of the
// log-likelihood, `draws` random (theta, record) pairs per link. Score must
// match within relative 1e-6, Hessian within 1e-5.
CheckReport gradient_check(int draws, std::uint64_t seed);

// Unit-weight logit fits against an independently coded IRLS logistic
// regression on the person-period expansion (one Bernoulli trial per
// at-risk interval, one-hot time indicators). Coefficients must agree to
// 1e-6 on every dataset.
CheckReport person_period_check(int datasets, std::uint64_t seed);

// Neyman-type allocation against exhaustive integer search of the design
// objective on random three-stratum instances (n <= 30). The returned
// allocation must come within one unit-transfer of the exhaustive optimum.
CheckReport allocation_check(int instances, std::uint64_t seed);

// The design-variance objective the allocation minimizes (up to constants):
// sum over strata of N(s)^2 * v(s) / m(s), infinite when a stratum with
// positive v gets no draws. Exposed for the exhaustive-search oracle.
double allocation_objective(const std::vector<long>& sizes, const std::vector<double>& variances,
                            const std::vector<long>& counts);

std::vector<CheckReport> run_all(int draws, int datasets, int instances, std::uint64_t seed);

}  // namespace twophase::selfcheck
