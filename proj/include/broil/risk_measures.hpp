#pragma once

// Risk measures over finite discrete distributions: value at risk, conditional
// value at risk (Rockafellar-Uryasev form), the sigma line search used by the
// policy gradient, and the entropic risk measure.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "broil/errors.hpp"

namespace broil {

enum class RiskMeasure { CVaR, ERM };

inline std::string to_string(RiskMeasure m) { return m == RiskMeasure::CVaR ? "cvar" : "erm"; }

inline RiskMeasure risk_measure_from_string(const std::string& s) {
  if (s == "cvar") return RiskMeasure::CVaR;
  if (s == "erm") return RiskMeasure::ERM;
  throw ParameterError("unknown risk measure '" + s + "' (expected cvar or erm)");
}

inline void check_cvar_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw ParameterError("CVaR/VaR alpha must lie in [0,1), got " + std::to_string(alpha));
}

inline void check_erm_alpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ParameterError("ERM alpha must be positive and finite, got " + std::to_string(alpha));
}

struct RiskParams {
  double alpha = 0.95;
  double lambda = 1.0;
  RiskMeasure measure = RiskMeasure::CVaR;

  void validate() const {
    if (measure == RiskMeasure::CVaR)
      check_cvar_alpha(alpha);
    else
      check_erm_alpha(alpha);
    if (!(lambda >= 0.0 && lambda <= 1.0))
      throw ParameterError("lambda must lie in [0,1], got " + std::to_string(lambda));
  }
};

// A finite set of (value, probability) atoms. Atoms need not be sorted or
// distinct.
class DiscreteDistribution {
 public:
  static constexpr double kProbTolerance = 1e-9;

  DiscreteDistribution(std::vector<double> values, std::vector<double> probs)
      : values_(std::move(values)), probs_(std::move(probs)) {
    if (values_.empty()) throw ParameterError("distribution must have at least one atom");
    if (values_.size() != probs_.size())
      throw ParameterError("distribution values and probs differ in length");
    double total = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      if (!std::isfinite(values_[i])) throw ParameterError("distribution value is not finite");
      if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i]))
        throw ParameterError("distribution probability is negative or not finite");
      total += probs_[i];
    }
    if (std::abs(total - 1.0) > kProbTolerance)
      throw ParameterError("distribution probabilities sum to " + std::to_string(total) + ", not 1");
  }

  std::span<const double> values() const { return values_; }
  std::span<const double> probs() const { return probs_; }
  std::size_t size() const { return values_.size(); }

  double mean() const {
    double m = 0.0;
    for (std::size_t i = 0; i < size(); ++i) m += probs_[i] * values_[i];
    return m;
  }

  double min_value() const { return *std::min_element(values_.begin(), values_.end()); }
  double max_value() const { return *std::max_element(values_.begin(), values_.end()); }

 private:
  std::vector<double> values_;
  std::vector<double> probs_;
};

// sup{x : Pr(X >= x) >= alpha}. Atoms are visited in descending order of value,
// accumulating the mass of every atom at or above the current value.
inline double value_at_risk(const DiscreteDistribution& dist, double alpha) {
  check_cvar_alpha(alpha);
  const auto values = dist.values();
  const auto probs = dist.probs();
  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  double mass = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double v = values[order[i]];
    while (i < order.size() && values[order[i]] == v) mass += probs[order[i++]];
    if (mass >= alpha - 1e-12) return v;
  }
  return values[order.back()];
}

// Rockafellar-Uryasev objective sigma - E[(sigma - X)_+] / (1 - alpha).
inline double cvar_objective(const DiscreteDistribution& dist, double alpha, double sigma) {
  const auto values = dist.values();
  const auto probs = dist.probs();
  double shortfall = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i)
    shortfall += probs[i] * std::max(0.0, sigma - values[i]);
  return sigma - shortfall / (1.0 - alpha);
}

struct CVaRResult {
  double value;
  double sigma_star;
};

// The objective is piecewise linear with breakpoints at the atoms, so the max
// over sigma is attained at one of them. Objective values within rounding noise
// of the maximum count as ties; among tied atoms the smallest sigma is
// returned, which makes {i : sigma* >= x_i} exactly the lower (1 - alpha) tail.
inline CVaRResult cvar(const DiscreteDistribution& dist, double alpha) {
  check_cvar_alpha(alpha);
  const auto values = dist.values();
  std::vector<double> objective(dist.size());
  double best = -std::numeric_limits<double>::infinity();
  double scale = 1.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    objective[i] = cvar_objective(dist, alpha, values[i]);
    best = std::max(best, objective[i]);
    scale = std::max(scale, std::abs(values[i]));
  }
  const double tol = 64.0 * std::numeric_limits<double>::epsilon() * scale * (2.0 + 1.0 / (1.0 - alpha));
  double sigma = std::numeric_limits<double>::infinity();
  double value = best;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (objective[i] >= best - tol && values[i] < sigma) {
      sigma = values[i];
      value = objective[i];
    }
  }
  return {value, sigma};
}

// Independent reference: the mass-weighted mean of the lowest (1 - alpha)
// probability mass, splitting the boundary atom.
inline double cvar_oracle(const DiscreteDistribution& dist, double alpha) {
  check_cvar_alpha(alpha);
  const auto values = dist.values();
  const auto probs = dist.probs();
  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  const double tail = 1.0 - alpha;
  double remaining = tail;
  double acc = 0.0;
  for (std::size_t idx : order) {
    if (remaining <= 0.0) break;
    const double take = std::min(probs[idx], remaining);
    acc += take * values[idx];
    remaining -= take;
  }
  // Rounding in the probabilities can leave a sliver of mass unassigned; it
  // belongs to the largest atom.
  if (remaining > 0.0) acc += remaining * values[order.back()];
  return acc / tail;
}

inline double solve_sigma(std::span<const double> rhos, std::span<const double> probs, double alpha) {
  DiscreteDistribution dist({rhos.begin(), rhos.end()}, {probs.begin(), probs.end()});
  return cvar(dist, alpha).sigma_star;
}

// -(1/alpha) log E[exp(-alpha X)], shifted by the minimum atom so that every
// exponent is non-positive.
inline double erm(const DiscreteDistribution& dist, double alpha) {
  check_erm_alpha(alpha);
  const auto values = dist.values();
  const auto probs = dist.probs();
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (probs[i] > 0.0) lo = std::min(lo, values[i]);
  // sum p_i * expm1(.) = E[exp(-alpha (X - lo))] - 1, accurate for tiny alpha.
  double s = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (probs[i] == 0.0) continue;
    s += probs[i] * std::expm1(-alpha * (values[i] - lo));
  }
  return lo - std::log1p(s) / alpha;
}

// Softmax coefficients p_i exp(-alpha rho_i) / sum_j p_j exp(-alpha rho_j).
inline std::vector<double> erm_softmax_weights(std::span<const double> rhos, std::span<const double> probs,
                                               double alpha) {
  DiscreteDistribution dist({rhos.begin(), rhos.end()}, {probs.begin(), probs.end()});
  check_erm_alpha(alpha);
  const std::size_t n = dist.size();
  std::vector<double> logits(n, -std::numeric_limits<double>::infinity());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (probs[i] > 0.0) logits[i] = std::log(probs[i]) - alpha * rhos[i];
    top = std::max(top, logits[i]);
  }
  std::vector<double> coef(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    coef[i] = std::exp(logits[i] - top);
    z += coef[i];
  }
  for (double& c : coef) c /= z;
  return coef;
}

// Risk value of a distribution under the configured measure.
inline double risk_value(const DiscreteDistribution& dist, const RiskParams& risk) {
  return risk.measure == RiskMeasure::CVaR ? cvar(dist, risk.alpha).value : erm(dist, risk.alpha);
}

}  // namespace broil
