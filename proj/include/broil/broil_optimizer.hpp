#pragma once

// PG-BROIL: policy gradients for a blend of expected return and a tail risk
// measure of the return distribution induced by a reward posterior.
//
// Per epoch: collect on-policy episodes, estimate the return rho_i of the
// policy under every hypothesis, solve for sigma* (CVaR) or the softmax
// coefficients (ERM), and ascend the policy gradient with per-step weights
//   w_t = sum_i c_i Phi_t^i,
//   c_i = p_i (lambda + (1 - lambda) / (1 - alpha) [sigma* >= rho_i])   (CVaR)
//   c_i = lambda p_i + (1 - lambda) softmax_i                           (ERM)
// where Phi_t^i is the reward-to-go (vanilla) or the standardised GAE
// advantage (PPO-clip) under hypothesis i.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "broil/environments.hpp"
#include "broil/errors.hpp"
#include "broil/json_io.hpp"
#include "broil/policy_net.hpp"
#include "broil/reward_posterior.hpp"
#include "broil/risk_measures.hpp"
#include "broil/types.hpp"

namespace broil {

enum class Metric { ExpectedReturn, BaselineRegret };
enum class Algorithm { Vanilla, PpoClip };

inline std::string to_string(Metric m) { return m == Metric::ExpectedReturn ? "expected-return" : "baseline-regret"; }
inline std::string to_string(Algorithm a) { return a == Algorithm::Vanilla ? "vanilla" : "ppo"; }

inline Metric metric_from_string(const std::string& s) {
  if (s == "expected-return") return Metric::ExpectedReturn;
  if (s == "baseline-regret") return Metric::BaselineRegret;
  throw ParameterError("unknown metric '" + s + "' (expected expected-return or baseline-regret)");
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "vanilla") return Algorithm::Vanilla;
  if (s == "ppo") return Algorithm::PpoClip;
  throw ParameterError("unknown algorithm '" + s + "' (expected vanilla or ppo)");
}

struct OptimizerConfig {
  RiskParams risk{};
  Metric metric = Metric::ExpectedReturn;
  Algorithm algorithm = Algorithm::PpoClip;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_ratio = 0.2;
  double target_kl = 0.01;
  int epochs = 50;
  int steps_per_epoch = 4000;
  double policy_lr = 2e-4;
  double value_lr = 1e-3;
  int policy_iters = 80;
  int value_iters = 80;
  std::uint64_t seed = 0;

  void validate() const {
    risk.validate();
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ParameterError("gamma must lie in (0,1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ParameterError("gae_lambda must lie in [0,1]");
    if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw ParameterError("clip_ratio must lie in (0,1)");
    if (!(target_kl > 0.0)) throw ParameterError("target_kl must be positive");
    if (epochs < 0) throw ParameterError("epochs must be non-negative");
    if (steps_per_epoch <= 0) throw ParameterError("steps_per_epoch must be positive");
    if (!(policy_lr > 0.0) || !(value_lr > 0.0)) throw ParameterError("learning rates must be positive");
    if (policy_iters <= 0 || value_iters <= 0) throw ParameterError("update iteration counts must be positive");
  }
};

// Complete episodes stored back to back; trajectory k occupies steps
// [starts[k], starts[k + 1]). Observations are the normalised policy inputs.
struct TrajectoryBatch {
  Mat observations;  // obs_dim x S
  Mat actions;       // action_dim x S
  Vec log_probs;     // S
  Mat features;      // S x k
  std::vector<Eigen::Index> starts{0};
  // Per trajectory: cut off at the horizon, and the observation after the
  // last step (obs_dim x |T|). Empty means every trajectory terminated.
  std::vector<char> truncated;
  Mat final_observations;

  std::size_t num_trajectories() const { return starts.size() - 1; }
  Eigen::Index total_steps() const { return starts.back(); }
  Eigen::Index length(std::size_t k) const { return starts[k + 1] - starts[k]; }

  // |T| x k matrix of per-trajectory feature counts.
  Mat feature_counts() const {
    Mat c(static_cast<Eigen::Index>(num_trajectories()), features.cols());
    for (std::size_t k = 0; k < num_trajectories(); ++k)
      c.row(static_cast<Eigen::Index>(k)) = features.middleRows(starts[k], length(k)).colwise().sum();
    return c;
  }
};

inline Vec policy_input(const Environment& env, const Vec& observation) {
  return observation.cwiseQuotient(env.observation_scale());
}

// Runs whole episodes until at least `min_steps` steps have been collected.
inline TrajectoryBatch collect_batch(Environment& env, const PolicyNet& policy, int min_steps, Rng& rng) {
  const Vec scale = env.observation_scale();
  std::vector<Vec> obs, acts, feats;
  std::vector<double> logps;
  std::vector<Vec> finals;
  TrajectoryBatch batch;
  while (static_cast<int>(obs.size()) < min_steps) {
    EnvState s = env.reset(rng());
    while (!s.done) {
      Vec o = s.observation.cwiseQuotient(scale);
      auto [a, lp] = policy.sample(o, rng);
      s = env.step(a);
      obs.push_back(std::move(o));
      acts.push_back(std::move(a));
      logps.push_back(lp);
      feats.push_back(s.features);
    }
    batch.starts.push_back(static_cast<Eigen::Index>(obs.size()));
    batch.truncated.push_back(env.truncated() ? 1 : 0);
    finals.push_back(s.observation.cwiseQuotient(scale));
  }
  const auto n = static_cast<Eigen::Index>(obs.size());
  batch.observations.resize(policy.obs_dim(), n);
  batch.actions.resize(policy.action_dim(), n);
  batch.log_probs.resize(n);
  batch.features.resize(n, env.feature_dim());
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto u = static_cast<std::size_t>(t);
    batch.observations.col(t) = obs[u];
    batch.actions.col(t) = acts[u];
    batch.log_probs[t] = logps[u];
    batch.features.row(t) = feats[u].transpose();
  }
  batch.final_observations.resize(policy.obs_dim(), static_cast<Eigen::Index>(finals.size()));
  for (std::size_t k = 0; k < finals.size(); ++k) batch.final_observations.col(static_cast<Eigen::Index>(k)) = finals[k];
  return batch;
}

struct ReturnMatrix {
  Mat per_traj_returns;  // |T| x N
  Vec rho;               // N
  std::optional<Vec> baseline_regret_rho;

  // The vector the risk measure acts on for the configured metric.
  const Vec& metric_rho(Metric m) const {
    if (m == Metric::BaselineRegret) {
      if (!baseline_regret_rho) throw UsageError("baseline-regret metric needs demonstrator returns");
      return *baseline_regret_rho;
    }
    return rho;
  }
};

inline ReturnMatrix estimate_returns(const TrajectoryBatch& batch, const RewardPosterior& posterior,
                                     const std::optional<Vec>& demonstrator_returns = std::nullopt) {
  if (batch.num_trajectories() == 0) throw UsageError("cannot estimate returns from an empty batch");
  if (batch.features.cols() != posterior.feature_dim())
    throw DataError("batch feature dimension does not match posterior");
  ReturnMatrix r;
  r.per_traj_returns = batch.feature_counts() * posterior.weight_matrix();
  r.rho = r.per_traj_returns.colwise().mean().transpose();
  if (demonstrator_returns) {
    if (demonstrator_returns->size() != r.rho.size()) throw DataError("demonstrator returns have the wrong length");
    r.baseline_regret_rho = r.rho - *demonstrator_returns;
  }
  return r;
}

// w_i . mu_E where mu_E is the mean demonstration feature count.
inline Vec estimate_demonstrator_returns(const PreferenceDataset& demos, const RewardPosterior& posterior) {
  if (demos.trajectories.empty()) throw UsageError("demonstrator returns need at least one demonstration");
  if (demos.feature_dim != posterior.feature_dim()) throw DataError("demonstrations and posterior disagree on k");
  Vec mu = Vec::Zero(demos.feature_dim);
  for (const auto& t : demos.trajectories) mu += feature_counts(t);
  mu /= static_cast<double>(demos.trajectories.size());
  return posterior.weight_matrix().transpose() * mu;
}

struct BroilCoefficients {
  std::vector<double> coef;  // c_i
  double sigma_star = std::numeric_limits<double>::quiet_NaN();
};

inline BroilCoefficients hypothesis_coefficients(const RewardPosterior& posterior, const ReturnMatrix& returns,
                                                 const OptimizerConfig& config) {
  const auto& risk = config.risk;
  risk.validate();
  const Vec& rho = returns.metric_rho(config.metric);
  const auto probs = posterior.probs();
  if (rho.size() != static_cast<Eigen::Index>(probs.size())) throw DataError("rho length does not match posterior");
  const std::vector<double> rho_v(rho.data(), rho.data() + rho.size());
  BroilCoefficients out;
  out.coef.resize(probs.size());
  if (risk.measure == RiskMeasure::CVaR) {
    out.sigma_star = solve_sigma(rho_v, probs, risk.alpha);
    const double tail = (1.0 - risk.lambda) / (1.0 - risk.alpha);
    for (std::size_t i = 0; i < probs.size(); ++i)
      out.coef[i] = probs[i] * (risk.lambda + tail * (out.sigma_star >= rho_v[i] ? 1.0 : 0.0));
  } else {
    const auto soft = erm_softmax_weights(rho_v, probs, risk.alpha);
    for (std::size_t i = 0; i < probs.size(); ++i) out.coef[i] = risk.lambda * probs[i] + (1.0 - risk.lambda) * soft[i];
  }
  return out;
}

// w_t = sum_i c_i Phi(t, i), accumulated in hypothesis order. phi is S x N.
inline Vec compute_weights(const Mat& phi, const std::vector<double>& coef) {
  if (phi.cols() != static_cast<Eigen::Index>(coef.size())) throw DataError("Phi columns do not match coefficients");
  Vec w = Vec::Zero(phi.rows());
  for (std::size_t i = 0; i < coef.size(); ++i) {
    const auto col = phi.col(static_cast<Eigen::Index>(i));
    for (Eigen::Index t = 0; t < phi.rows(); ++t) w[t] += coef[i] * col[t];
  }
  return w;
}

// Undiscounted reward-to-go of the per-step feature vectors, S x k.
inline Mat feature_reward_to_go(const TrajectoryBatch& batch) {
  Mat g(batch.features.rows(), batch.features.cols());
  for (std::size_t k = 0; k < batch.num_trajectories(); ++k) {
    Vec acc = Vec::Zero(batch.features.cols());
    for (Eigen::Index t = batch.starts[k + 1]; t-- > batch.starts[k];) {
      acc += batch.features.row(t).transpose();
      g.row(t) = acc.transpose();
    }
  }
  return g;
}

// Per-hypothesis undiscounted reward-to-go Phi, S x N.
inline Mat reward_to_go(const TrajectoryBatch& batch, const RewardPosterior& posterior) {
  return feature_reward_to_go(batch) * posterior.weight_matrix();
}

// Vanilla weights through linearity: sum_i c_i (w_i . G_t) = (sum_i c_i w_i) . G_t.
// The blended weight vector goes through the same accumulation as the
// posterior mean, so at lambda = 1 the weights coincide bit for bit with a
// run on the single mean-reward hypothesis.
inline Vec vanilla_weights(const TrajectoryBatch& batch, const RewardPosterior& posterior,
                           const std::vector<double>& coef) {
  const Vec v = combine_weights(posterior, coef);
  const Mat g = feature_reward_to_go(batch);
  Vec w(g.rows());
  for (Eigen::Index t = 0; t < g.rows(); ++t) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < v.size(); ++j) s += v[j] * g(t, j);
    w[t] = s;
  }
  return w;
}

// Discounted reward-to-go per hypothesis, S x N. `bootstrap` (|T| x N, may be
// empty) holds the value after each trajectory's last step.
inline Mat discounted_reward_to_go(const TrajectoryBatch& batch, const Mat& rewards, double gamma,
                                   const Mat& bootstrap = Mat()) {
  Mat out(rewards.rows(), rewards.cols());
  for (std::size_t k = 0; k < batch.num_trajectories(); ++k) {
    Vec acc = bootstrap.size() ? Vec(bootstrap.row(static_cast<Eigen::Index>(k)).transpose())
                               : Vec::Zero(rewards.cols());
    for (Eigen::Index t = batch.starts[k + 1]; t-- > batch.starts[k];) {
      acc = rewards.row(t).transpose() + gamma * acc;
      out.row(t) = acc.transpose();
    }
  }
  return out;
}

// Generalised advantage estimates per hypothesis (S x N) from rewards (S x N)
// and values (S x N). The value after a trajectory's last step comes from
// `bootstrap` and is zero when that is empty.
inline Mat gae_advantages(const TrajectoryBatch& batch, const Mat& rewards, const Mat& values, double gamma,
                          double lambda, const Mat& bootstrap = Mat()) {
  Mat adv(rewards.rows(), rewards.cols());
  for (std::size_t k = 0; k < batch.num_trajectories(); ++k) {
    Vec acc = Vec::Zero(rewards.cols());
    Vec next_value = bootstrap.size() ? Vec(bootstrap.row(static_cast<Eigen::Index>(k)).transpose())
                                      : Vec::Zero(rewards.cols());
    for (Eigen::Index t = batch.starts[k + 1]; t-- > batch.starts[k];) {
      const Vec delta = rewards.row(t).transpose() + gamma * next_value - values.row(t).transpose();
      acc = delta + gamma * lambda * acc;
      adv.row(t) = acc.transpose();
      next_value = values.row(t).transpose();
    }
  }
  return adv;
}

// Running standardisation of value targets, one mean/std pair per head.
struct TargetScaler {
  Vec mean;
  Vec stddev;

  bool ready() const { return mean.size() > 0; }
  void fit(const Mat& targets) {  // S x N
    mean = targets.colwise().mean().transpose();
    stddev.resize(targets.cols());
    for (Eigen::Index i = 0; i < targets.cols(); ++i) {
      const double sd = std::sqrt((targets.col(i).array() - mean[i]).square().mean());
      stddev[i] = sd > 1e-8 ? sd : 1.0;
    }
  }
  Mat to_standard(const Mat& raw) const {  // S x N -> N x S
    return ((raw.rowwise() - mean.transpose()).array().rowwise() / stddev.transpose().array()).matrix().transpose();
  }
  Mat from_standard(const Mat& standard) const {  // N x S -> S x N
    return ((standard.transpose().array().rowwise() * stddev.transpose().array()).rowwise() + mean.transpose().array())
        .matrix();
  }
};

// Values after each trajectory's last step (|T| x N): the critic's estimate
// for trajectories cut off at the horizon, zero for terminal ones.
inline Mat bootstrap_values(const TrajectoryBatch& batch, const ValueNet& value, const TargetScaler& scaler) {
  const auto n = static_cast<Eigen::Index>(batch.num_trajectories());
  Mat out = Mat::Zero(n, value.heads());
  if (batch.truncated.empty()) return out;
  const Mat v = scaler.from_standard(value.forward(batch.final_observations));
  for (Eigen::Index k = 0; k < n; ++k)
    if (batch.truncated[static_cast<std::size_t>(k)]) out.row(k) = v.row(k);
  return out;
}

// Zero mean, unit (population) standard deviation per column. Constant
// columns become zero.
inline Mat standardize_columns(Mat m) {
  for (Eigen::Index i = 0; i < m.cols(); ++i) {
    auto c = m.col(i);
    const double mean = c.mean();
    c.array() -= mean;
    const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(c.size()));
    if (sd > 1e-12 * std::max(1.0, std::abs(mean)))
      c /= sd;
    else
      c.setZero();
  }
  return m;
}

// Per-step factor 1 / (|T| T_tau) of the PPO surrogate.
inline Vec trajectory_step_scale(const TrajectoryBatch& batch) {
  Vec s(batch.total_steps());
  const double n = static_cast<double>(batch.num_trajectories());
  for (std::size_t k = 0; k < batch.num_trajectories(); ++k)
    s.segment(batch.starts[k], batch.length(k)).setConstant(1.0 / (n * static_cast<double>(batch.length(k))));
  return s;
}

struct UpdateDiagnostics {
  int policy_iters = 0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double value_loss = 0.0;
};

// (1/|T|) sum_tau sum_t grad log pi(a_t|s_t) w_t and one Adam ascent step.
inline Vec vanilla_gradient(const TrajectoryBatch& batch, const Vec& weights, const PolicyNet& policy) {
  if (weights.size() != batch.total_steps()) throw DataError("one weight per batch step is required");
  const Vec g = policy.weighted_log_prob_grad(batch.observations, batch.actions, weights) /
                static_cast<double>(batch.num_trajectories());
  if (!g.allFinite()) throw NumericalError("non-finite policy gradient; epoch aborted");
  return g;
}

inline UpdateDiagnostics vanilla_update(const TrajectoryBatch& batch, const Vec& weights, PolicyNet& policy,
                                        Adam& optimizer) {
  optimizer.ascend(policy.params(), vanilla_gradient(batch, weights, policy));
  return {1, 0.0, 0.0, 0.0};
}

struct ClippedSurrogate {
  double value = 0.0;
  Vec gradient;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// sum_t scale_t min(r_t w_t, clip(r_t, 1 - eps, 1 + eps) w_t) with
// r_t = pi(a_t|s_t) / pi_old(a_t|s_t), and its gradient. Steps where the
// clipped term is the active minimum contribute no gradient.
inline ClippedSurrogate clipped_surrogate(const TrajectoryBatch& batch, const Vec& weights, const Vec& step_scale,
                                          const PolicyNet& policy, double clip_ratio) {
  const auto eval = policy.evaluate(batch.observations, batch.actions);
  const Eigen::Index n = batch.total_steps();
  ClippedSurrogate out;
  Vec coeff(n);
  int clipped = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double ratio = std::exp(eval.log_probs[t] - batch.log_probs[t]);
    const double bounded = std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    const double w = weights[t];
    const bool active = w >= 0.0 ? ratio <= 1.0 + clip_ratio : ratio >= 1.0 - clip_ratio;
    out.value += step_scale[t] * std::min(ratio * w, bounded * w);
    coeff[t] = active ? step_scale[t] * w * ratio : 0.0;
    clipped += active ? 0 : 1;
    out.approx_kl += batch.log_probs[t] - eval.log_probs[t];
  }
  out.approx_kl /= static_cast<double>(n);
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  out.gradient = policy.weighted_log_prob_grad(eval, batch.actions, coeff);
  return out;
}

inline UpdateDiagnostics ppo_update(const TrajectoryBatch& batch, const Vec& weights, PolicyNet& policy,
                                    Adam& policy_opt, ValueNet& value, Adam& value_opt, const Mat& value_targets,
                                    const OptimizerConfig& config) {
  if (weights.size() != batch.total_steps()) throw DataError("one weight per batch step is required");
  UpdateDiagnostics d;
  const Vec scale = trajectory_step_scale(batch);
  for (int it = 0; it < config.policy_iters; ++it) {
    const auto s = clipped_surrogate(batch, weights, scale, policy, config.clip_ratio);
    d.approx_kl = s.approx_kl;
    d.clip_fraction = s.clip_fraction;
    if (s.approx_kl > config.target_kl) break;
    if (!s.gradient.allFinite()) throw NumericalError("non-finite policy gradient; epoch aborted");
    policy_opt.ascend(policy.params(), s.gradient);
    d.policy_iters = it + 1;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.total_steps());
  for (int it = 0; it < config.value_iters; ++it)
    value_opt.descend(value.params(), value.loss_grad(batch.observations, value_targets, inv_n));
  d.value_loss = value.loss(batch.observations, value_targets) * inv_n;
  return d;
}

struct BatchMetrics {
  double gray_steps = std::numeric_limits<double>::quiet_NaN();
  double trash = std::numeric_limits<double>::quiet_NaN();
  double abs_x_mean = std::numeric_limits<double>::quiet_NaN();
};

// Per-episode averages of the environment's metric features; |x| is averaged
// over all steps.
inline BatchMetrics batch_metrics(const Environment& env, const TrajectoryBatch& batch) {
  BatchMetrics m;
  const auto n = static_cast<double>(batch.num_trajectories());
  if (env.gray_feature() >= 0) m.gray_steps = batch.features.col(env.gray_feature()).sum() / n;
  if (env.trash_feature() >= 0) m.trash = batch.features.col(env.trash_feature()).sum() / n;
  if (env.position_feature() >= 0)
    m.abs_x_mean = batch.features.col(env.position_feature()).cwiseAbs().sum() / static_cast<double>(batch.total_steps());
  return m;
}

struct EpochLog {
  int epoch = 0;
  double expected_return = 0.0;
  double risk_value = 0.0;
  double sigma_star = std::numeric_limits<double>::quiet_NaN();
  Vec rho;
  BatchMetrics metrics;
  std::size_t episodes = 0;
  Eigen::Index steps = 0;
  UpdateDiagnostics update;
};

struct TrainResult {
  PolicyNet policy;
  ValueNet value;
  std::vector<EpochLog> log;
};

inline PolicyNet make_policy(const Environment& env, std::uint64_t seed) {
  PolicyNet p(static_cast<int>(env.observation_dim()), env.action_space());
  Rng rng(mix_seed(seed, 1));
  p.init(rng);
  return p;
}

// Posterior statistics of rho under the configured risk measure.
inline std::pair<double, double> posterior_summary(const Vec& rho, const RewardPosterior& posterior,
                                                   const RiskParams& risk) {
  const DiscreteDistribution d({rho.data(), rho.data() + rho.size()}, posterior.probs());
  return {d.mean(), risk_value(d, risk)};
}

inline TrainResult train(const OptimizerConfig& config, Environment& env, const RewardPosterior& posterior,
                         const std::optional<PreferenceDataset>& demos = std::nullopt) {
  config.validate();
  if (env.feature_dim() != posterior.feature_dim())
    throw DataError("environment has " + std::to_string(env.feature_dim()) + " features but the posterior has " +
                    std::to_string(posterior.feature_dim()));
  const bool regret = config.metric == Metric::BaselineRegret;
  if (regret != demos.has_value())
    throw UsageError(regret ? "baseline-regret metric requires demonstrations"
                            : "demonstrations are only used by the baseline-regret metric");
  std::optional<Vec> demo_returns;
  if (demos) demo_returns = estimate_demonstrator_returns(*demos, posterior);

  TrainResult result{make_policy(env, config.seed),
                     ValueNet(static_cast<int>(env.observation_dim()), static_cast<int>(posterior.size())),
                     {}};
  {
    Rng value_rng(mix_seed(config.seed, 2));
    result.value.init(value_rng);
  }
  Adam policy_opt(result.policy.params().size(), config.policy_lr);
  Adam value_opt(result.value.params().size(), config.value_lr);
  TargetScaler scaler;
  Rng rollout_rng(mix_seed(config.seed, 3));
  const Mat w_matrix = posterior.weight_matrix();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const TrajectoryBatch batch = collect_batch(env, result.policy, config.steps_per_epoch, rollout_rng);
    const ReturnMatrix returns = estimate_returns(batch, posterior, demo_returns);
    const BroilCoefficients coef = hypothesis_coefficients(posterior, returns, config);
    if (config.risk.measure == RiskMeasure::CVaR && !(coef.sigma_star >= returns.metric_rho(config.metric).minCoeff()))
      throw NumericalError("sigma* fell below every hypothesis return");

    EpochLog row;
    row.epoch = epoch;
    row.rho = returns.rho;
    std::tie(row.expected_return, row.risk_value) = posterior_summary(returns.rho, posterior, config.risk);
    row.sigma_star = coef.sigma_star;
    row.metrics = batch_metrics(env, batch);
    row.episodes = batch.num_trajectories();
    row.steps = batch.total_steps();

    if (config.algorithm == Algorithm::Vanilla) {
      const Vec weights = vanilla_weights(batch, posterior, coef.coef);
      row.update = vanilla_update(batch, weights, result.policy, policy_opt);
    } else {
      const Mat rewards = batch.features * w_matrix;  // S x N
      if (!scaler.ready()) scaler.fit(discounted_reward_to_go(batch, rewards, config.gamma));
      const Mat values = scaler.from_standard(result.value.forward(batch.observations));
      const Mat last = bootstrap_values(batch, result.value, scaler);
      const Mat targets = discounted_reward_to_go(batch, rewards, config.gamma, last);
      const Mat phi =
          standardize_columns(gae_advantages(batch, rewards, values, config.gamma, config.gae_lambda, last));
      const Vec weights = compute_weights(phi, coef.coef);
      scaler.fit(targets);
      row.update = ppo_update(batch, weights, result.policy, policy_opt, result.value, value_opt,
                              scaler.to_standard(targets), config);
    }
    result.log.push_back(std::move(row));
  }
  return result;
}

// ---- training log ------------------------------------------------------------

// Shortest text that parses back to the same double; NaN becomes empty.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string training_log_csv(const std::vector<EpochLog>& log, std::size_t hypotheses) {
  std::ostringstream out;
  out << "epoch,exp_return,risk_value,sigma_star";
  for (std::size_t i = 0; i < hypotheses; ++i) out << ",rho_" << i;
  out << ",gray_steps,trash,abs_x_mean,episodes,steps,policy_iters,approx_kl,clip_fraction,value_loss\n";
  for (const auto& r : log) {
    out << r.epoch << ',' << csv_number(r.expected_return) << ',' << csv_number(r.risk_value) << ','
        << csv_number(r.sigma_star);
    for (double v : r.rho) out << ',' << csv_number(v);
    out << ',' << csv_number(r.metrics.gray_steps) << ',' << csv_number(r.metrics.trash) << ','
        << csv_number(r.metrics.abs_x_mean) << ',' << r.episodes << ',' << r.steps << ',' << r.update.policy_iters
        << ',' << csv_number(r.update.approx_kl) << ',' << csv_number(r.update.clip_fraction) << ','
        << csv_number(r.update.value_loss) << '\n';
  }
  return out.str();
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log,
                               std::size_t hypotheses) {
  write_text_atomic(path, training_log_csv(log, hypotheses));
}

}  // namespace broil
