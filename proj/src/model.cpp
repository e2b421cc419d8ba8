#include "twophase/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "twophase/errors.hpp"

namespace twophase {

std::string to_string(Link link) { return link == Link::Logit ? "logit" : "cloglog"; }

Link link_from_string(const std::string& name) {
  if (name == "logit") return Link::Logit;
  if (name == "cloglog") return Link::CLogLog;
  throw ArgumentError("unknown link '" + name + "' (expected logit or cloglog)");
}

Vector ThetaParams::packed() const {
  Vector out(dim());
  out.head(alpha.size()) = alpha;
  out.tail(beta.size()) = beta;
  return out;
}

ThetaParams ThetaParams::unpack(const Vector& packed, int n_times, Link link) {
  if (n_times < 1 || packed.size() < n_times)
    throw ArgumentError("packed parameter vector shorter than the number of time points");
  ThetaParams theta;
  theta.alpha = packed.head(n_times);
  theta.beta = packed.tail(packed.size() - n_times);
  theta.link = link;
  return theta;
}

void ThetaParams::check_valid() const {
  if (alpha.size() == 0) throw ArgumentError("theta has no baseline hazard parameters");
  if (!alpha.allFinite() || !beta.allFinite())
    throw ArgumentError("theta contains non-finite entries");
}

void Cohort::check_valid() const {
  if (n_times < 1) throw ArgumentError("cohort needs at least one discrete time point");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.time_index < 1 || rec.time_index > n_times)
      throw ArgumentError("record " + std::to_string(i) + ": time_index out of range");
    if (rec.covariates && rec.covariates->size() != n_covariates)
      throw ArgumentError("record " + std::to_string(i) + ": covariate length mismatch");
  }
}

namespace model {
namespace {

// Per-period derivatives of the Bernoulli contribution
//   l_j = D log(lambda) + (1-D) log(1-lambda)
// with respect to eta_j = alpha_j + beta'x. The cloglog event factor
// u/(1-e^{-u}), u = e^eta, is evaluated through expm1 so it stays accurate
// down to very small hazards.
struct PeriodDerivs {
  double ll;
  double d1;
  double d2;
};

inline PeriodDerivs period_derivs(Link link, double eta, bool event) {
  PeriodDerivs out{};
  const double d = event ? 1.0 : 0.0;
  if (link == Link::Logit) {
    const double lam = inverse_link(Link::Logit, eta);
    // log(1 - lambda) = -log(1 + e^eta), stable on both tails
    const double log1m = eta > 0.0 ? -eta - std::log1p(std::exp(-eta)) : -std::log1p(std::exp(eta));
    out.ll = d * eta + log1m;
    out.d1 = d - lam;
    out.d2 = -lam * (1.0 - lam);
  } else {
    const double u = std::exp(eta);
    const double one_minus_exp = -std::expm1(-u);  // = lambda before clamping
    const double lam = std::clamp(one_minus_exp, kHazardEps, 1.0 - kHazardEps);
    out.ll = event ? std::log(lam) : -u;
    if (event) {
      const double f = u / one_minus_exp;  // event factor u/(1-e^{-u})
      out.d1 = f - u;
      // d/deta of the event factor: u * [ (1-e^{-u}) - u e^{-u} ] / (1-e^{-u})^2
      const double g = one_minus_exp - u * std::exp(-u);
      out.d2 = u * g / (one_minus_exp * one_minus_exp) - u;
    } else {
      out.d1 = -u;
      out.d2 = -u;
    }
  }
  return out;
}

void require_covariates(const SubjectRecord& rec) {
  if (!rec.covariates) throw DataError("record lacks covariates required for likelihood work");
}

}  // namespace

double link_transform(Link link, double hazard_value) {
  if (!(hazard_value > 0.0) || !(hazard_value < 1.0))
    throw ArgumentError("hazard must lie strictly in (0, 1)");
  if (link == Link::Logit) return std::log(hazard_value / (1.0 - hazard_value));
  return std::log(-std::log1p(-hazard_value));
}

double inverse_link(Link link, double eta) {
  double lam;
  if (link == Link::Logit) {
    lam = eta >= 0.0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
  } else {
    lam = -std::expm1(-std::exp(eta));
  }
  return std::clamp(lam, kHazardEps, 1.0 - kHazardEps);
}

double hazard(const ThetaParams& theta, int time_index, const Vector& x) {
  if (time_index < 1 || time_index > theta.n_times())
    throw ArgumentError("time index " + std::to_string(time_index) + " outside 1.." +
                        std::to_string(theta.n_times()));
  if (x.size() != theta.beta.size())
    throw ArgumentError("covariate vector length does not match beta");
  const double eta = theta.alpha[time_index - 1] + theta.beta.dot(x);
  return inverse_link(theta.link, eta);
}

Vector survival_curve(const ThetaParams& theta, const Vector& x) {
  theta.check_valid();
  const int J = theta.n_times();
  Vector surv(J);
  double running = 1.0;
  for (int j = 1; j <= J; ++j) {
    surv[j - 1] = running;
    running *= 1.0 - hazard(theta, j, x);
  }
  return surv;
}

double loglik(const ThetaParams& theta, const SubjectRecord& rec) {
  require_covariates(rec);
  const double xb = theta.beta.dot(*rec.covariates);
  double total = 0.0;
  for (int j = 1; j <= rec.time_index; ++j) {
    const bool d = rec.event && j == rec.time_index;
    total += period_derivs(theta.link, theta.alpha[j - 1] + xb, d).ll;
  }
  return total;
}

Vector score(const ThetaParams& theta, const SubjectRecord& rec) {
  require_covariates(rec);
  const int J = theta.n_times();
  const Vector& x = *rec.covariates;
  const double xb = theta.beta.dot(x);
  Vector out = Vector::Zero(J + x.size());
  for (int j = 1; j <= rec.time_index; ++j) {
    const bool d = rec.event && j == rec.time_index;
    const double d1 = period_derivs(theta.link, theta.alpha[j - 1] + xb, d).d1;
    out[j - 1] += d1;
    out.tail(x.size()) += d1 * x;
  }
  return out;
}

Matrix hessian(const ThetaParams& theta, const SubjectRecord& rec) {
  require_covariates(rec);
  const int J = theta.n_times();
  const Vector& x = *rec.covariates;
  const int d = static_cast<int>(x.size());
  const double xb = theta.beta.dot(x);
  Matrix out = Matrix::Zero(J + d, J + d);
  for (int j = 1; j <= rec.time_index; ++j) {
    const bool ev = rec.event && j == rec.time_index;
    const double d2 = period_derivs(theta.link, theta.alpha[j - 1] + xb, ev).d2;
    out(j - 1, j - 1) += d2;
    out.block(j - 1, J, 1, d) += d2 * x.transpose();
    out.block(J, j - 1, d, 1) += d2 * x;
    out.block(J, J, d, d) += d2 * (x * x.transpose());
  }
  return out;
}

namespace {

// Baseline initialization: marginal link-transformed empirical hazards with
// beta = 0. Cheap and always inside the feasible region.
ThetaParams initial_theta(const Cohort& cohort, std::span<const std::size_t> indices,
                          std::span<const double> weights, Link link) {
  const int J = cohort.n_times;
  Vector events = Vector::Zero(J);
  Vector at_risk = Vector::Zero(J);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& rec = cohort.records[indices[k]];
    const double w = weights[k];
    for (int j = 1; j <= rec.time_index; ++j) at_risk[j - 1] += w;
    if (rec.event) events[rec.time_index - 1] += w;
  }
  const double n = static_cast<double>(indices.size());
  const double lo = 1.0 / (2.0 * std::max(1.0, n));
  ThetaParams theta;
  theta.link = link;
  theta.alpha.resize(J);
  for (int j = 0; j < J; ++j) {
    double h = at_risk[j] > 0.0 ? events[j] / at_risk[j] : lo;
    h = std::clamp(h, lo, 1.0 - lo);
    theta.alpha[j] = link_transform(link, h);
  }
  theta.beta = Vector::Zero(cohort.n_covariates);
  return theta;
}

struct WeightedDerivs {
  double loglik = 0.0;
  Vector score;
  Matrix hessian;
};

WeightedDerivs weighted_derivs(const Cohort& cohort, std::span<const std::size_t> indices,
                               std::span<const double> weights, const ThetaParams& theta,
                               bool with_matrix) {
  const int J = cohort.n_times;
  const int d = cohort.n_covariates;
  WeightedDerivs out;
  out.score = Vector::Zero(J + d);
  if (with_matrix) out.hessian = Matrix::Zero(J + d, J + d);
  Vector alpha_curv = Vector::Zero(J);   // sum of w * d2 per time index
  Vector alpha_grad = Vector::Zero(J);
  Vector beta_grad = Vector::Zero(d);
  Matrix cross = Matrix::Zero(J, d);
  Matrix beta_curv = Matrix::Zero(d, d);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& rec = cohort.records[indices[k]];
    const double w = weights[k];
    const Vector& x = *rec.covariates;
    const double xb = theta.beta.dot(x);
    for (int j = 1; j <= rec.time_index; ++j) {
      const bool ev = rec.event && j == rec.time_index;
      const auto pd = period_derivs(theta.link, theta.alpha[j - 1] + xb, ev);
      out.loglik += w * pd.ll;
      alpha_grad[j - 1] += w * pd.d1;
      beta_grad += (w * pd.d1) * x;
      if (with_matrix) {
        alpha_curv[j - 1] += w * pd.d2;
        cross.row(j - 1) += (w * pd.d2) * x.transpose();
        beta_curv += (w * pd.d2) * (x * x.transpose());
      }
    }
  }
  out.score.head(J) = alpha_grad;
  out.score.tail(d) = beta_grad;
  if (with_matrix) {
    out.hessian.topLeftCorner(J, J) = alpha_curv.asDiagonal();
    out.hessian.topRightCorner(J, d) = cross;
    out.hessian.bottomLeftCorner(d, J) = cross.transpose();
    out.hessian.bottomRightCorner(d, d) = beta_curv;
  }
  return out;
}

double weighted_loglik(const Cohort& cohort, std::span<const std::size_t> indices,
                       std::span<const double> weights, const ThetaParams& theta) {
  double total = 0.0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& rec = cohort.records[indices[k]];
    const double xb = theta.beta.dot(*rec.covariates);
    for (int j = 1; j <= rec.time_index; ++j) {
      const bool ev = rec.event && j == rec.time_index;
      total += weights[k] * period_derivs(theta.link, theta.alpha[j - 1] + xb, ev).ll;
    }
  }
  return total;
}

}  // namespace

FitResult fit_weighted(const Cohort& cohort, std::span<const std::size_t> indices,
                       std::span<const double> weights, Link link,
                       const std::optional<ThetaParams>& init, const SolverConfig& config) {
  if (indices.size() != weights.size())
    throw ArgumentError("indices and weights differ in length");
  if (indices.empty()) throw ArgumentError("no records selected for fitting");
  const int J = cohort.n_times;
  const int d = cohort.n_covariates;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= cohort.size())
      throw ArgumentError("record index " + std::to_string(indices[k]) + " out of range");
    if (!cohort.records[indices[k]].covariates)
      throw DataError("record " + std::to_string(indices[k]) + " selected for fitting has no covariates");
    if (!(weights[k] > 0.0)) throw ArgumentError("weights must be strictly positive");
  }

  // alpha_j is estimable only with weighted at-risk mass at time j.
  {
    Vector at_risk = Vector::Zero(J);
    for (std::size_t k = 0; k < indices.size(); ++k)
      for (int j = 1; j <= cohort.records[indices[k]].time_index; ++j) at_risk[j - 1] += weights[k];
    std::ostringstream missing;
    for (int j = 0; j < J; ++j)
      if (!(at_risk[j] > 0.0)) missing << (missing.tellp() > 0 ? "," : "") << (j + 1);
    if (missing.tellp() > 0)
      throw DataError("baseline hazard inestimable at time index(es) " + missing.str() +
                      ": no weighted at-risk mass");
  }

  ThetaParams theta = init ? *init : initial_theta(cohort, indices, weights, link);
  theta.link = link;
  if (theta.n_times() != J || theta.n_covariates() != d)
    throw ArgumentError("initial theta dimensions do not match the cohort");

  FitResult result;
  double ll = weighted_loglik(cohort, indices, weights, theta);
  double last_step = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iter = 0;
  Vector grad;
  Matrix hess;
  for (; iter < config.max_iterations; ++iter) {
    auto derivs = weighted_derivs(cohort, indices, weights, theta, true);
    grad = derivs.score;
    hess = derivs.hessian;
    if (grad.lpNorm<Eigen::Infinity>() < config.score_tol) {
      converged = true;
      break;
    }
    Eigen::LDLT<Matrix> solver(-hess);
    Vector step = solver.solve(grad);
    if (solver.info() != Eigen::Success || !step.allFinite() || grad.dot(step) <= 0.0) {
      // Non-concave iterate (cloglog): retreat to a guarded ascent direction.
      step = grad;
    }
    double t = 1.0;
    bool accepted = false;
    Vector packed = theta.packed();
    for (int h = 0; h <= config.max_halvings; ++h, t *= 0.5) {
      ThetaParams cand = ThetaParams::unpack(packed + t * step, J, link);
      if (!cand.alpha.allFinite() || !cand.beta.allFinite()) continue;
      const double cand_ll = weighted_loglik(cohort, indices, weights, cand);
      if (cand_ll >= ll - 1e-12 * (1.0 + std::abs(ll))) {
        last_step = (t * step).lpNorm<Eigen::Infinity>();
        theta = cand;
        ll = cand_ll;
        accepted = true;
        break;
      }
    }
    if (!accepted || last_step < config.param_tol) {
      // Stalled: treat as converged only if the step criterion says so.
      converged = last_step < config.param_tol;
      ++iter;
      grad = weighted_derivs(cohort, indices, weights, theta, false).score;
      break;
    }
  }
  if (iter == config.max_iterations)
    grad = weighted_derivs(cohort, indices, weights, theta, false).score;
  if (grad.lpNorm<Eigen::Infinity>() < config.score_tol) converged = true;

  result.theta = theta;
  result.converged = converged;
  result.iterations = iter;
  result.gradient_norm = grad.lpNorm<Eigen::Infinity>();
  if (!converged) {
    std::ostringstream msg;
    msg << "weighted fit did not converge after " << iter
        << " iterations (max|score| = " << result.gradient_norm << ")";
    throw NumericError(msg.str());
  }

  // Model-based covariance: inverse of the weighted observed information.
  auto final_derivs = weighted_derivs(cohort, indices, weights, theta, true);
  Eigen::FullPivLU<Matrix> lu(-final_derivs.hessian);
  if (lu.isInvertible()) {
    result.covariance = lu.inverse();
  } else {
    result.covariance = Matrix::Constant(J + d, J + d, std::numeric_limits<double>::quiet_NaN());
    result.warnings.push_back("observed information singular; model-based covariance unavailable");
  }
  return result;
}

FitResult fit_mle(const Cohort& cohort, Link link, const SolverConfig& config) {
  IndexList indices;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    if (cohort.records[i].covariates) indices.push_back(i);
  std::vector<double> weights(indices.size(), 1.0);
  return fit_weighted(cohort, indices, weights, link, std::nullopt, config);
}

}  // namespace model
}  // namespace twophase
