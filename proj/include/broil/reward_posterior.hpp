#pragma once

// Discrete posteriors over linear reward functions r(s, a) = w . phi(s, a),
// and their inference from pairwise trajectory preferences by
// Metropolis-Hastings on the L1 unit sphere.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "broil/errors.hpp"
#include "broil/json_io.hpp"
#include "broil/risk_measures.hpp"
#include "broil/types.hpp"

namespace broil {

struct RewardHypothesis {
  Vec weights;
  double prob = 0.0;
};

class RewardPosterior {
 public:
  RewardPosterior(std::vector<RewardHypothesis> hypotheses, std::vector<std::string> feature_names = {})
      : hypotheses_(std::move(hypotheses)), feature_names_(std::move(feature_names)) {
    if (hypotheses_.empty()) throw ParameterError("posterior needs at least one hypothesis");
    const auto k = hypotheses_.front().weights.size();
    if (k == 0) throw DataError("reward weights must be non-empty");
    double total = 0.0;
    for (const auto& h : hypotheses_) {
      if (h.weights.size() != k) throw DataError("reward hypotheses disagree on feature dimension");
      if (!h.weights.allFinite()) throw DataError("reward weights must be finite");
      if (!(h.prob >= 0.0)) throw ParameterError("hypothesis probability must be non-negative");
      total += h.prob;
    }
    if (std::abs(total - 1.0) > DiscreteDistribution::kProbTolerance)
      throw ParameterError("posterior probabilities sum to " + std::to_string(total));
    if (feature_names_.empty())
      for (Eigen::Index j = 0; j < k; ++j) feature_names_.push_back("f" + std::to_string(j));
    if (feature_names_.size() != static_cast<std::size_t>(k))
      throw DataError("feature_names length does not match weight dimension");
  }

  std::size_t size() const { return hypotheses_.size(); }
  Eigen::Index feature_dim() const { return hypotheses_.front().weights.size(); }
  const std::vector<RewardHypothesis>& hypotheses() const { return hypotheses_; }
  const RewardHypothesis& operator[](std::size_t i) const { return hypotheses_[i]; }
  const std::vector<std::string>& feature_names() const { return feature_names_; }

  std::vector<double> probs() const {
    std::vector<double> p;
    for (const auto& h : hypotheses_) p.push_back(h.prob);
    return p;
  }

  // k x N matrix whose columns are the hypothesis weight vectors.
  Mat weight_matrix() const {
    Mat w(feature_dim(), static_cast<Eigen::Index>(size()));
    for (std::size_t i = 0; i < size(); ++i) w.col(static_cast<Eigen::Index>(i)) = hypotheses_[i].weights;
    return w;
  }

 private:
  std::vector<RewardHypothesis> hypotheses_;
  std::vector<std::string> feature_names_;
};

// sum_i coeffs[i] * w_i accumulated in hypothesis order. Both the posterior
// mean and the collapsed policy-gradient weight go through this one loop so
// that they agree bit for bit.
inline Vec combine_weights(const RewardPosterior& posterior, const std::vector<double>& coeffs) {
  if (coeffs.size() != posterior.size()) throw DataError("coefficient count does not match posterior size");
  Vec out = Vec::Zero(posterior.feature_dim());
  for (std::size_t i = 0; i < posterior.size(); ++i) {
    const Vec& w = posterior[i].weights;
    for (Eigen::Index j = 0; j < out.size(); ++j) out[j] += coeffs[i] * w[j];
  }
  return out;
}

inline Vec mean_hypothesis(const RewardPosterior& posterior) { return combine_weights(posterior, posterior.probs()); }

// Per-step feature vectors of one trajectory, one row per step.
using FeatureSequence = Mat;

inline FeatureSequence make_feature_sequence(const std::vector<std::vector<double>>& steps) {
  if (steps.empty()) throw DataError("trajectory has no steps");
  const std::size_t k = steps.front().size();
  FeatureSequence f(static_cast<Eigen::Index>(steps.size()), static_cast<Eigen::Index>(k));
  for (std::size_t t = 0; t < steps.size(); ++t) {
    if (steps[t].size() != k) throw DataError("feature dimension changes within a trajectory");
    for (std::size_t j = 0; j < k; ++j) f(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = steps[t][j];
  }
  return f;
}

// Undiscounted sum of per-step features.
inline Vec feature_counts(const FeatureSequence& trajectory) {
  if (trajectory.rows() == 0) throw DataError("trajectory has no steps");
  return trajectory.colwise().sum().transpose();
}

inline Vec feature_counts(const std::vector<std::vector<double>>& steps) {
  return feature_counts(make_feature_sequence(steps));
}

struct PreferenceDataset {
  Eigen::Index feature_dim = 0;
  std::vector<FeatureSequence> trajectories;
  // (i, j): trajectory i is preferred over trajectory j.
  std::vector<std::pair<std::size_t, std::size_t>> preferences;

  void validate() const {
    if (feature_dim <= 0) throw DataError("preference dataset needs a positive feature_dim");
    for (const auto& t : trajectories) {
      if (t.rows() == 0) throw DataError("preference dataset contains an empty trajectory");
      if (t.cols() != feature_dim) throw DataError("trajectory feature dimension does not match feature_dim");
    }
    for (const auto& [i, j] : preferences) {
      if (i >= trajectories.size() || j >= trajectories.size())
        throw DataError("preference index out of range");
      if (i == j) throw DataError("a preference pairs a trajectory with itself");
    }
  }

  std::vector<Vec> all_feature_counts() const {
    std::vector<Vec> out;
    out.reserve(trajectories.size());
    for (const auto& t : trajectories) out.push_back(feature_counts(t));
    return out;
  }
};

// log sigmoid(x) without overflow.
inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

// Bradley-Terry log-likelihood from the per-trajectory returns w . Phi_i.
inline double preference_log_likelihood_from_returns(const std::vector<double>& returns,
                                                     const std::vector<std::pair<std::size_t, std::size_t>>& prefs,
                                                     double beta) {
  double ll = 0.0;
  for (const auto& [i, j] : prefs) ll += log_sigmoid(beta * (returns[i] - returns[j]));
  return ll;
}

inline double preference_log_likelihood(const Vec& weights, const std::vector<Vec>& counts,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& prefs, double beta) {
  std::vector<double> returns(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) returns[i] = weights.dot(counts[i]);
  return preference_log_likelihood_from_returns(returns, prefs, beta);
}

inline double preference_log_likelihood(const Vec& weights, const PreferenceDataset& data, double beta) {
  if (!(beta > 0.0)) throw ParameterError("beta must be positive");
  if (weights.size() != data.feature_dim) throw DataError("weight dimension does not match dataset");
  data.validate();
  if (data.preferences.empty()) return 0.0;
  return preference_log_likelihood(weights, data.all_feature_counts(), data.preferences, beta);
}

struct McmcSettings {
  int steps = 20000;
  double proposal_step = 0.5;
  int burn_in = 500;
  int downsample_to = 20;
  double beta = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps <= burn_in) throw ParameterError("MCMC steps must exceed burn_in");
    if (burn_in < 0) throw ParameterError("burn_in must be non-negative");
    if (downsample_to < 1) throw ParameterError("downsample_to must be at least 1");
    if (steps - burn_in < downsample_to) throw ParameterError("not enough post-burn-in samples to downsample");
    if (!(proposal_step > 0.0)) throw ParameterError("proposal_step must be positive");
    if (!(beta > 0.0)) throw ParameterError("beta must be positive");
  }
};

// Full chain: the state after every transition and its log-likelihood.
struct McmcChain {
  std::vector<Vec> samples;
  std::vector<double> log_likelihoods;
  double acceptance_rate = 0.0;
};

inline Vec l1_normalized(const Vec& w) { return w / w.lpNorm<1>(); }

inline McmcChain mcmc_sample(const PreferenceDataset& data, const McmcSettings& settings) {
  settings.validate();
  if (data.trajectories.empty()) throw InferenceError("cannot infer a reward posterior without trajectories");
  data.validate();

  const auto counts = data.all_feature_counts();
  const auto k = data.feature_dim;
  Rng rng(settings.seed);
  std::normal_distribution<double> normal(0.0, settings.proposal_step);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Vec current = Vec::Constant(k, 1.0 / static_cast<double>(k));
  double current_ll = preference_log_likelihood(current, counts, data.preferences, settings.beta);

  McmcChain chain;
  chain.samples.reserve(static_cast<std::size_t>(settings.steps));
  chain.log_likelihoods.reserve(static_cast<std::size_t>(settings.steps));
  long accepted = 0;
  for (int step = 0; step < settings.steps; ++step) {
    Vec proposal(k);
    do {
      for (Eigen::Index j = 0; j < k; ++j) proposal[j] = current[j] + normal(rng);
    } while (proposal.lpNorm<1>() == 0.0);
    proposal = l1_normalized(proposal);
    const double proposal_ll = preference_log_likelihood(proposal, counts, data.preferences, settings.beta);
    // Uniform prior on the sphere: the acceptance ratio is the likelihood ratio.
    if (std::log(uniform(rng)) < proposal_ll - current_ll) {
      current = std::move(proposal);
      current_ll = proposal_ll;
      ++accepted;
    }
    chain.samples.push_back(current);
    chain.log_likelihoods.push_back(current_ll);
  }
  chain.acceptance_rate = static_cast<double>(accepted) / settings.steps;
  return chain;
}

// Evenly spaced thinning after burn-in, equal weights.
inline RewardPosterior thin_chain(const McmcChain& chain, int burn_in, int downsample_to,
                                  std::vector<std::string> feature_names = {}) {
  const int available = static_cast<int>(chain.samples.size()) - burn_in;
  if (burn_in < 0 || downsample_to < 1 || available < downsample_to)
    throw ParameterError("chain too short for the requested burn-in and downsampling");
  const int stride = available / downsample_to;
  std::vector<RewardHypothesis> hyps;
  for (int i = 0; i < downsample_to; ++i)
    hyps.push_back({chain.samples[static_cast<std::size_t>(burn_in + i * stride)], 1.0 / downsample_to});
  return RewardPosterior(std::move(hyps), std::move(feature_names));
}

inline RewardPosterior mcmc_infer(const PreferenceDataset& data, const McmcSettings& settings,
                                  std::vector<std::string> feature_names = {}) {
  return thin_chain(mcmc_sample(data, settings), settings.burn_in, settings.downsample_to, std::move(feature_names));
}

// Highest-likelihood visited weights: the maximum-likelihood (PBRL) reward.
inline RewardHypothesis map_hypothesis(const McmcChain& chain) {
  if (chain.samples.empty()) throw UsageError("map_hypothesis needs a non-empty chain");
  std::size_t best = 0;
  for (std::size_t i = 1; i < chain.samples.size(); ++i)
    if (chain.log_likelihoods[i] > chain.log_likelihoods[best]) best = i;
  return {chain.samples[best], 1.0};
}

// ---- file formats -----------------------------------------------------------

inline Json posterior_to_json(const RewardPosterior& p) {
  Json hyps = Json::array();
  for (const auto& h : p.hypotheses()) hyps.push_back({{"weights", to_json_array(h.weights)}, {"prob", h.prob}});
  return {{"feature_names", p.feature_names()}, {"hypotheses", hyps}};
}

inline RewardPosterior posterior_from_json(const Json& j) {
  try {
    std::vector<RewardHypothesis> hyps;
    for (const auto& h : j.at("hypotheses")) hyps.push_back({vec_from_json(h.at("weights")), h.at("prob").get<double>()});
    std::vector<std::string> names;
    if (j.contains("feature_names")) names = j.at("feature_names").get<std::vector<std::string>>();
    return RewardPosterior(std::move(hyps), std::move(names));
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed posterior document: ") + e.what());
  }
}

inline Json preferences_to_json(const PreferenceDataset& d) {
  Json trajs = Json::array();
  for (const auto& t : d.trajectories) {
    Json steps = Json::array();
    for (Eigen::Index r = 0; r < t.rows(); ++r) steps.push_back(to_json_array(t.row(r).transpose()));
    trajs.push_back(std::move(steps));
  }
  Json prefs = Json::array();
  for (const auto& [i, j] : d.preferences) prefs.push_back({i, j});
  return {{"feature_dim", d.feature_dim}, {"trajectories", trajs}, {"preferences", prefs}};
}

inline PreferenceDataset preferences_from_json(const Json& j) {
  try {
    PreferenceDataset d;
    d.feature_dim = j.at("feature_dim").get<Eigen::Index>();
    for (const auto& t : j.at("trajectories"))
      d.trajectories.push_back(make_feature_sequence(t.get<std::vector<std::vector<double>>>()));
    for (const auto& p : j.at("preferences")) {
      if (p.size() != 2) throw DataError("each preference must be a pair [i, j]");
      d.preferences.emplace_back(p[0].get<std::size_t>(), p[1].get<std::size_t>());
    }
    d.validate();
    return d;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed preference document: ") + e.what());
  }
}

}  // namespace broil
