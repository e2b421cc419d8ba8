#pragma once

#include <Eigen/Dense>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace twophase {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using IndexList = std::vector<std::size_t>;

// Link for the discrete-time proportional hazards model. Logit uses the odds
// transform g(u) = u/(1-u); CLogLog uses g(u) = -log(1-u), the grouped-time
// counterpart of a continuous proportional hazards model.
enum class Link { Logit, CLogLog };

std::string to_string(Link link);
Link link_from_string(const std::string& name);

// Model parameters: one transformed baseline hazard per discrete time point
// plus the log-hazard-ratio coefficients, packed as (alpha_1..alpha_J,
// beta_1..beta_d) wherever a flat vector is needed.
struct ThetaParams {
  Vector alpha;
  Vector beta;
  Link link = Link::CLogLog;

  int n_times() const { return static_cast<int>(alpha.size()); }
  int n_covariates() const { return static_cast<int>(beta.size()); }
  int dim() const { return n_times() + n_covariates(); }

  Vector packed() const;
  static ThetaParams unpack(const Vector& packed, int n_times, Link link);

  // Throws ArgumentError on non-finite entries or empty alpha.
  void check_valid() const;
};

// One subject: censored survival time index Y (1-based), event indicator,
// phase-one surrogate codes, and the true covariates when validated.
// The derived per-period event indicators are D_ij = 1{j == time_index and
// event}, with D_ik = 0 for k < time_index.
struct SubjectRecord {
  int time_index = 1;
  bool event = false;
  std::vector<int> surrogate;
  std::optional<Vector> covariates;

  bool validated() const { return covariates.has_value(); }
};

struct Cohort {
  std::vector<SubjectRecord> records;
  int n_times = 0;            // J: number of discrete time points
  int max_followup_index = 0; // administrative end of follow-up (defaults to J)
  int n_covariates = 0;       // d

  std::size_t size() const { return records.size(); }

  // Structural invariants: 1 <= time_index <= n_times, covariate lengths
  // equal n_covariates. Throws ArgumentError.
  void check_valid() const;
};

// Phase-one cross-classification (y, delta, z) indexing sampling
// probabilities and allocations. Ordered so that map iteration (and the
// deterministic tie-breaks built on it) is stable.
struct StratumKey {
  int time_index = 0;
  bool event = false;
  std::vector<int> surrogate;

  auto operator<=>(const StratumKey&) const = default;

  static StratumKey of(const SubjectRecord& rec) {
    return StratumKey{rec.time_index, rec.event, rec.surrogate};
  }

  // Serialized join key: y:<int>|d:<0/1>|z:<code[,code...]>
  std::string to_string() const;
  static StratumKey parse(const std::string& text);
};

struct StratumInfo {
  long n_phase1 = 0;   // N(y, delta, z)
  long n_validated = 0; // n(y, delta, z)

  double pi_hat() const {
    return n_phase1 > 0 ? static_cast<double>(n_validated) / static_cast<double>(n_phase1) : 0.0;
  }
};

struct StratumTable {
  std::map<StratumKey, StratumInfo> cells;
  long total_phase1 = 0;
  long total_validated = 0;

  // Strata with N(s) > 0 but n(s) = 0 (condition "pi > 0" violated).
  std::vector<StratumKey> uncovered() const;
  // Strata with exactly one validated member.
  std::vector<StratumKey> singletons() const;
};

struct FitResult {
  ThetaParams theta;
  Matrix covariance;     // per-estimate scale, i.e. asymptotic Sigma / N
  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0.0; // max-norm of the weighted score at theta
  std::vector<std::string> warnings;
};

// Per-stratum validation counts. `total` is the number of draws the
// allocation represents (for adaptive designs: the second wave only).
struct Allocation {
  std::map<StratumKey, long> counts;
  long total = 0;
  std::vector<std::string> warnings;

  long count(const StratumKey& key) const {
    auto it = counts.find(key);
    return it == counts.end() ? 0 : it->second;
  }
};

}  // namespace twophase
