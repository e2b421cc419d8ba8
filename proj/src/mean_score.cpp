#include "twophase/mean_score.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <sstream>

#include "twophase/errors.hpp"

namespace twophase {

std::string StratumKey::to_string() const {
  std::ostringstream out;
  out << "y:" << time_index << "|d:" << (event ? 1 : 0) << "|z:";
  for (std::size_t i = 0; i < surrogate.size(); ++i) {
    if (i > 0) out << ',';
    out << surrogate[i];
  }
  return out.str();
}

StratumKey StratumKey::parse(const std::string& text) {
  StratumKey key;
  const auto bad = [&]() -> ArgumentError {
    return ArgumentError("malformed stratum key '" + text + "'");
  };
  std::size_t p1 = text.find('|');
  std::size_t p2 = text.find('|', p1 == std::string::npos ? p1 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos) throw bad();
  const std::string y_part = text.substr(0, p1);
  const std::string d_part = text.substr(p1 + 1, p2 - p1 - 1);
  const std::string z_part = text.substr(p2 + 1);
  if (y_part.rfind("y:", 0) != 0 || d_part.rfind("d:", 0) != 0 || z_part.rfind("z:", 0) != 0)
    throw bad();
  try {
    key.time_index = std::stoi(y_part.substr(2));
    key.event = std::stoi(d_part.substr(2)) != 0;
    std::string codes = z_part.substr(2);
    std::size_t pos = 0;
    while (pos < codes.size()) {
      std::size_t comma = codes.find(',', pos);
      if (comma == std::string::npos) comma = codes.size();
      key.surrogate.push_back(std::stoi(codes.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  } catch (const std::exception&) {
    throw bad();
  }
  return key;
}

std::vector<StratumKey> StratumTable::uncovered() const {
  std::vector<StratumKey> out;
  for (const auto& [key, info] : cells)
    if (info.n_phase1 > 0 && info.n_validated == 0) out.push_back(key);
  return out;
}

std::vector<StratumKey> StratumTable::singletons() const {
  std::vector<StratumKey> out;
  for (const auto& [key, info] : cells)
    if (info.n_validated == 1) out.push_back(key);
  return out;
}

namespace meanscore {

StratumTable build_strata(const Cohort& cohort, std::span<const std::size_t> validated) {
  StratumTable table;
  for (const auto& rec : cohort.records) ++table.cells[StratumKey::of(rec)].n_phase1;
  table.total_phase1 = static_cast<long>(cohort.size());
  for (std::size_t idx : validated) {
    if (idx >= cohort.size())
      throw ArgumentError("validated index " + std::to_string(idx) + " out of range");
    const auto& rec = cohort.records[idx];
    if (!rec.covariates)
      throw DataError("validated record " + std::to_string(idx) + " has no covariates");
    ++table.cells[StratumKey::of(rec)].n_validated;
    ++table.total_validated;
  }
  return table;
}

namespace {

std::string component_name(int index, int n_times) {
  if (index < n_times) return "alpha" + std::to_string(index + 1);
  return "beta" + std::to_string(index - n_times + 1);
}

}  // namespace

SandwichResult sandwich_variance(const ThetaParams& theta_hat, const Cohort& cohort,
                                 std::span<const std::size_t> validated,
                                 const StratumTable& strata) {
  const int J = cohort.n_times;
  const int p = J + cohort.n_covariates;
  const double N = static_cast<double>(cohort.size());
  SandwichResult out;

  Matrix info = Matrix::Zero(p, p);
  std::map<StratumKey, Vector> score_sum;
  std::map<StratumKey, Matrix> score_sq_sum;
  std::map<StratumKey, long> stratum_n;
  for (std::size_t idx : validated) {
    const auto& rec = cohort.records[idx];
    const StratumKey key = StratumKey::of(rec);
    const auto it = strata.cells.find(key);
    if (it == strata.cells.end() || it->second.n_validated == 0)
      throw ArgumentError("validated record in a stratum absent from the stratum table");
    const double inv_pi = 1.0 / it->second.pi_hat();
    info -= inv_pi * model::hessian(theta_hat, rec);
    const Vector u = model::score(theta_hat, rec);
    auto [sit, inserted] = score_sum.try_emplace(key, Vector::Zero(p));
    sit->second += u;
    auto [qit, qinserted] = score_sq_sum.try_emplace(key, Matrix::Zero(p, p));
    qit->second += u * u.transpose();
    ++stratum_n[key];
  }
  info /= N;
  out.info = info;

  Matrix omega = Matrix::Zero(p, p);
  std::vector<std::string> singleton_keys;
  for (const auto& [key, n_s] : stratum_n) {
    const auto& cell = strata.cells.at(key);
    const double share = static_cast<double>(cell.n_phase1) / N;
    const double inflate = 1.0 / cell.pi_hat() - 1.0;
    if (n_s < 2) {
      if (inflate > 0.0) singleton_keys.push_back(key.to_string());
      continue;
    }
    const Vector mean = score_sum.at(key) / static_cast<double>(n_s);
    Matrix cov = (score_sq_sum.at(key) - static_cast<double>(n_s) * (mean * mean.transpose())) /
                 static_cast<double>(n_s - 1);
    omega += share * inflate * cov;
  }
  out.omega = omega;
  if (!singleton_keys.empty()) {
    std::ostringstream msg;
    msg << "score variance undefined in " << singleton_keys.size()
        << " singleton stratum(s); contribution set to 0:";
    for (const auto& k : singleton_keys) msg << ' ' << k;
    out.warnings.push_back(msg.str());
  }

  Eigen::SelfAdjointEigenSolver<Matrix> eig(info);
  const double max_eval = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (!(eig.eigenvalues().minCoeff() > 1e-12 * std::max(1.0, max_eval))) {
    int weakest = 0;
    eig.eigenvectors().col(0).cwiseAbs().maxCoeff(&weakest);
    throw NumericError("estimated information matrix is singular; null direction loads on " +
                       component_name(weakest, J));
  }
  const Matrix info_inv = eig.eigenvectors() *
                          eig.eigenvalues().cwiseInverse().asDiagonal() *
                          eig.eigenvectors().transpose();
  out.covariance = (info_inv + info_inv * omega * info_inv) / N;
  // Symmetrize away accumulation round-off.
  out.covariance = ((out.covariance + out.covariance.transpose()) / 2.0).eval();
  return out;
}

FitResult mean_score_fit(const Cohort& cohort, std::span<const std::size_t> validated,
                         Link link, const model::SolverConfig& config, CoverageMode mode,
                         bool compute_covariance) {
  StratumTable table = build_strata(cohort, validated);
  const auto uncovered = table.uncovered();
  std::vector<std::string> warnings;
  if (!uncovered.empty()) {
    long missed = 0;
    std::ostringstream names;
    for (const auto& key : uncovered) {
      missed += table.cells.at(key).n_phase1;
      names << ' ' << key.to_string();
    }
    std::ostringstream msg;
    msg << uncovered.size() << " stratum(s) with no validated member (total N = " << missed
        << "); sampling probability estimate is zero there:" << names.str();
    if (mode == CoverageMode::Strict)
      throw DataError("positivity violated: " + msg.str());
    warnings.push_back(msg.str());
  }

  std::vector<double> weights;
  weights.reserve(validated.size());
  for (std::size_t idx : validated) {
    const auto& cell = table.cells.at(StratumKey::of(cohort.records[idx]));
    weights.push_back(static_cast<double>(cell.n_phase1) / static_cast<double>(cell.n_validated));
  }

  FitResult fit = model::fit_weighted(cohort, validated, weights, link, std::nullopt, config);
  fit.warnings.insert(fit.warnings.end(), warnings.begin(), warnings.end());
  if (compute_covariance) {
    SandwichResult sandwich = sandwich_variance(fit.theta, cohort, validated, table);
    fit.covariance = sandwich.covariance;
    fit.warnings.insert(fit.warnings.end(), sandwich.warnings.begin(), sandwich.warnings.end());
  }
  return fit;
}

}  // namespace meanscore
}  // namespace twophase
