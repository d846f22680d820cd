#include <gtest/gtest.h>

#include <cmath>

#include "broil/broil_optimizer.hpp"
#include "support/gradient_check.hpp"
#include "support/random_batches.hpp"

using namespace broil;
using broil::testing::mean_reward_weights;
using broil::testing::random_batch;
using broil::testing::random_posterior;

namespace {

RewardPosterior cartpole_prior() {
  std::vector<RewardHypothesis> h;
  for (double b : {-1.0, -0.8, -0.6, -0.4, -0.2, 0.0, 0.2}) h.push_back({Vec::Constant(1, b), 1.0 / 7.0});
  return RewardPosterior(std::move(h));
}

OptimizerConfig cvar_config(double alpha, double lambda) {
  OptimizerConfig c;
  c.risk = {alpha, lambda, RiskMeasure::CVaR};
  return c;
}

ReturnMatrix returns_from_rho(const Vec& rho) {
  ReturnMatrix r;
  r.per_traj_returns = rho.transpose();
  r.rho = rho;
  return r;
}

TrajectoryBatch one_trajectory(const std::vector<std::vector<double>>& steps) {
  TrajectoryBatch b;
  b.features = make_feature_sequence(steps);
  b.starts = {0, b.features.rows()};
  return b;
}

}  // namespace

TEST(EstimateReturns, Examples) {
  const RewardPosterior post({{(Vec(2) << 1, -1).finished(), 1.0}});
  const auto r = estimate_returns(one_trajectory({{2, 1}, {0, 2}}), post);
  EXPECT_EQ(r.per_traj_returns(0, 0), -1.0);
  EXPECT_EQ(r.rho, Vec::Constant(1, -1.0));

  const auto zeros = estimate_returns(one_trajectory({{0, 0}, {0, 0}}), post);
  EXPECT_EQ(zeros.rho, Vec::Zero(1));

  TrajectoryBatch twice;
  twice.features = make_feature_sequence({{1, 3}, {1, 3}});
  twice.starts = {0, 1, 2};
  EXPECT_EQ(estimate_returns(twice, post).rho[0], -2.0);

  EXPECT_THROW(estimate_returns(TrajectoryBatch{}, post), UsageError);
}

TEST(EstimateReturns, RhoIsColumnMean) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_batch(rng, 9, 3, 2, {true, 2});
    const auto post = random_posterior(rng, 6, 3);
    const auto r = estimate_returns(b, post);
    for (Eigen::Index i = 0; i < r.rho.size(); ++i) EXPECT_NEAR(r.rho[i], r.per_traj_returns.col(i).mean(), 1e-12);
  }
}

TEST(DemonstratorReturns, Examples) {
  PreferenceDataset single;
  single.feature_dim = 2;
  single.trajectories = {make_feature_sequence({{1, 1}})};
  EXPECT_EQ(estimate_demonstrator_returns(single, RewardPosterior({{(Vec(2) << 2, 0).finished(), 1.0}}))[0], 2.0);

  PreferenceDataset two;
  two.feature_dim = 2;
  two.trajectories = {make_feature_sequence({{2, 0}}), make_feature_sequence({{0, 2}})};
  const RewardPosterior three({{(Vec(2) << 1, 0).finished(), 0.2}, {(Vec(2) << 0, 1).finished(), 0.3},
                               {(Vec(2) << 1, 1).finished(), 0.5}});
  EXPECT_EQ(estimate_demonstrator_returns(two, three), (Vec(3) << 1, 1, 2).finished());
}

TEST(ComputeWeights, WorkedExample) {
  const RewardPosterior post({{Vec::Ones(1), 0.5}, {Vec::Ones(1), 0.5}});
  const auto coef = hypothesis_coefficients(post, returns_from_rho((Vec(2) << 5, 1).finished()), cvar_config(0.6, 0.0));
  EXPECT_EQ(coef.sigma_star, 1.0);
  const Mat phi = (Mat(1, 2) << 2, -1).finished();
  EXPECT_DOUBLE_EQ(compute_weights(phi, coef.coef)[0], -1.25);
}

TEST(ComputeWeights, LambdaOneIsMeanRewardWeightExactly) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 9;
    const auto post = random_posterior(rng, n, 3);
    const auto batch = random_batch(rng, 6, 3, 2, {true, 2});
    const auto returns = estimate_returns(batch, post);
    const Mat phi = reward_to_go(batch, post);
    for (double alpha : {0.0, 0.5, 0.95, 0.999}) {
      const auto coef = hypothesis_coefficients(post, returns, cvar_config(alpha, 1.0));
      EXPECT_EQ(compute_weights(phi, coef.coef), mean_reward_weights(phi, post));
    }
    OptimizerConfig erm;
    erm.risk = {3.0, 1.0, RiskMeasure::ERM};
    EXPECT_EQ(compute_weights(phi, hypothesis_coefficients(post, returns, erm).coef), mean_reward_weights(phi, post));

    // The linear shortcut at lambda = 1 equals the reward-to-go of the mean reward.
    const RewardPosterior collapsed({{mean_hypothesis(post), 1.0}});
    const auto c1 = hypothesis_coefficients(post, returns, cvar_config(0.9, 1.0));
    const auto cc = hypothesis_coefficients(collapsed, estimate_returns(batch, collapsed), cvar_config(0.9, 1.0));
    EXPECT_EQ(vanilla_weights(batch, post, c1.coef), vanilla_weights(batch, collapsed, cc.coef));
  }
}

TEST(ComputeWeights, LinearShortcutMatchesPerHypothesisRewardToGo) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto post = random_posterior(rng, 5, 4);
    const auto batch = random_batch(rng, 8, 4, 2, {true, 2});
    const auto coef = hypothesis_coefficients(post, estimate_returns(batch, post), cvar_config(0.8, 0.3));
    const Vec direct = compute_weights(reward_to_go(batch, post), coef.coef);
    const Vec shortcut = vanilla_weights(batch, post, coef.coef);
    for (Eigen::Index t = 0; t < direct.size(); ++t)
      EXPECT_NEAR(shortcut[t], direct[t], 1e-10 * std::max(1.0, std::abs(direct[t])));
  }
}

TEST(ComputeWeights, ErmSmallAlphaApproachesMeanWeight) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto post = random_posterior(rng, 6, 2);
    const auto batch = random_batch(rng, 5, 2, 2, {true, 2});
    const auto returns = estimate_returns(batch, post);
    const Mat phi = reward_to_go(batch, post);
    const Vec mean = mean_reward_weights(phi, post);
    for (double lambda : {0.0, 0.3, 0.7}) {
      OptimizerConfig c;
      c.risk = {1e-9, lambda, RiskMeasure::ERM};
      const Vec w = compute_weights(phi, hypothesis_coefficients(post, returns, c).coef);
      EXPECT_LT((w - mean).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(ComputeWeights, IndicatorSelectsCVaRTail) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  for (int trial = 0; trial < 500; ++trial) {
    const auto post = random_posterior(rng, 2 + trial % 12, 2);
    const auto batch = random_batch(rng, 4, 2, 2, {true, 2});
    const auto r = estimate_returns(batch, post);
    const double alpha = u(rng);
    const auto c = hypothesis_coefficients(post, r, cvar_config(alpha, 0.0));
    double tail_mass = 0.0, below_mass = 0.0;
    Eigen::Index argmin = 0;
    r.rho.minCoeff(&argmin);
    EXPECT_GE(c.sigma_star, r.rho[argmin]);
    for (std::size_t i = 0; i < post.size(); ++i) {
      EXPECT_TRUE(std::isfinite(c.coef[i]));
      const double rho = r.rho[static_cast<Eigen::Index>(i)];
      if (c.sigma_star >= rho) tail_mass += post[i].prob;
      if (c.sigma_star > rho) below_mass += post[i].prob;
    }
    // sigma* is the atom where cumulative mass first reaches 1 - alpha.
    EXPECT_GE(tail_mass, 1.0 - alpha - 1e-12);
    EXPECT_LT(below_mass, 1.0 - alpha + 1e-12);
  }
}

TEST(ComputeWeights, BaselineRegretUsesShiftedReturns) {
  const RewardPosterior post({{Vec::Ones(1), 0.5}, {Vec::Ones(1), 0.5}});
  auto r = returns_from_rho((Vec(2) << 5, 1).finished());
  r.baseline_regret_rho = (Vec(2) << 0, 2).finished();
  auto c = cvar_config(0.6, 0.0);
  c.metric = Metric::BaselineRegret;
  const auto coef = hypothesis_coefficients(post, r, c);
  EXPECT_EQ(coef.sigma_star, 0.0);
  EXPECT_DOUBLE_EQ(coef.coef[0], 0.5 / 0.4);
  EXPECT_EQ(coef.coef[1], 0.0);
  EXPECT_THROW(hypothesis_coefficients(post, returns_from_rho(r.rho), c), UsageError);
}

TEST(Gae, TelescopesToRewardToGo) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto batch = random_batch(rng, 7, 3, 2, {true, 2});
    const auto post = random_posterior(rng, 4, 3);
    const Mat rewards = batch.features * post.weight_matrix();
    const Mat adv = gae_advantages(batch, rewards, Mat::Zero(rewards.rows(), rewards.cols()), 1.0, 1.0);
    EXPECT_LT((adv - reward_to_go(batch, post)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((discounted_reward_to_go(batch, rewards, 1.0) - reward_to_go(batch, post)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Gae, MatchesDirectDefinition) {
  TrajectoryBatch b;
  b.features = make_feature_sequence({{1}, {2}, {3}});
  b.starts = {0, 3};
  const Mat r = b.features;
  const Mat v = (Mat(3, 1) << 0.5, -1.0, 2.0).finished();
  const double g = 0.9, l = 0.8;
  const double d2 = 3 - 2.0, d1 = 2 + g * 2.0 + 1.0, d0 = 1 + g * -1.0 - 0.5;
  const Mat a = gae_advantages(b, r, v, g, l);
  EXPECT_NEAR(a(2, 0), d2, 1e-15);
  EXPECT_NEAR(a(1, 0), d1 + g * l * d2, 1e-14);
  EXPECT_NEAR(a(0, 0), d0 + g * l * (d1 + g * l * d2), 1e-14);
}

TEST(Gae, BootstrapRemovesConstantRewardAtTimeout) {
  // A constant reward with the exact infinite-horizon value has no advantage
  // once the cut-off trajectory is bootstrapped.
  TrajectoryBatch b;
  b.features = make_feature_sequence({{1}, {1}, {1}, {1}});
  b.starts = {0, 4};
  const double g = 0.9;
  const Mat v = Mat::Constant(4, 1, 1.0 / (1.0 - g));
  const Mat last = Mat::Constant(1, 1, 1.0 / (1.0 - g));
  EXPECT_LT(gae_advantages(b, b.features, v, g, 0.95, last).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(gae_advantages(b, b.features, v, g, 0.95).cwiseAbs().maxCoeff(), 1.0);
  const Mat rtg = discounted_reward_to_go(b, b.features, g, last);
  EXPECT_LT((rtg - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CollectBatch, FlagsHorizonCutoffs) {
  Pointmass pm;
  PolicyNet p(4, pm.action_space());
  Rng rng(3);
  p.init(rng);
  const auto batch = collect_batch(pm, p, 250, rng);
  ASSERT_EQ(batch.truncated.size(), batch.num_trajectories());
  EXPECT_EQ(batch.final_observations.cols(), static_cast<Eigen::Index>(batch.num_trajectories()));
  for (char t : batch.truncated) EXPECT_EQ(t, 1);

  CartPole cp;
  PolicyNet q(4, cp.action_space());
  q.init(rng);
  const auto falls = collect_batch(cp, q, 100, rng);
  for (std::size_t k = 0; k < falls.num_trajectories(); ++k)
    EXPECT_EQ(falls.truncated[k] != 0, falls.length(k) == 200);
}

TEST(VanillaUpdate, ZeroWeightsAndSingleStep) {
  Rng rng(7);
  auto batch = random_batch(rng, 3, 1, 4, {true, 2});
  PolicyNet p(4, {true, 2});
  p.init(rng);
  const Vec before = p.params();
  Adam opt(p.params().size(), 1e-2);
  vanilla_update(batch, Vec::Zero(batch.total_steps()), p, opt);
  EXPECT_EQ(p.params(), before);

  TrajectoryBatch single;
  single.observations = batch.observations.leftCols(1);
  single.actions = batch.actions.leftCols(1);
  single.log_probs = batch.log_probs.head(1);
  single.features = batch.features.topRows(1);
  single.starts = {0, 1};
  const Vec g = vanilla_gradient(single, Vec::Constant(1, 0.7), p);
  EXPECT_LT((g - 0.7 * p.log_prob_grad(single.observations.col(0), single.actions.col(0))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(VanillaUpdate, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  for (bool discrete : {true, false}) {
    const auto batch = random_batch(rng, 4, 2, 3, {discrete, 2});
    PolicyNet p(3, {discrete, 2});
    p.init(rng);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& x : p.params()) x += 0.1 * n(rng);
    Vec w(batch.total_steps());
    for (auto& x : w) x = n(rng);
    const auto surrogate = [&](const Vec& th) {
      PolicyNet q = p;
      q.params() = th;
      return q.log_prob_batch(batch.observations, batch.actions).dot(w) / static_cast<double>(batch.num_trajectories());
    };
    EXPECT_LT(broil::testing::max_relative_error(vanilla_gradient(batch, w, p),
                                                 broil::testing::central_differences(surrogate, p.params())),
              1e-4);
  }
}

TEST(PpoSurrogate, FirstStepEqualsScaledVanillaGradient) {
  Rng rng(9);
  auto batch = random_batch(rng, 5, 2, 3, {false, 2});
  PolicyNet p(3, {false, 2});
  p.init(rng);
  batch.log_probs = p.log_prob_batch(batch.observations, batch.actions);
  std::normal_distribution<double> n(0.0, 1.0);
  Vec w(batch.total_steps());
  for (auto& x : w) x = n(rng);
  const Vec scale = trajectory_step_scale(batch);
  const auto s = clipped_surrogate(batch, w, scale, p, 0.2);
  const Vec expected = p.weighted_log_prob_grad(batch.observations, batch.actions, scale.cwiseProduct(w));
  EXPECT_LT((s.gradient - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(s.approx_kl, 0.0);
  EXPECT_EQ(s.clip_fraction, 0.0);
  EXPECT_NEAR(scale.sum(), 1.0, 1e-12);
}

TEST(PpoSurrogate, ClippedStepsContributeNoGradient) {
  Rng rng(10);
  auto batch = random_batch(rng, 1, 1, 3, {false, 1});
  batch.observations = batch.observations.leftCols(1).eval();
  batch.actions = batch.actions.leftCols(1).eval();
  batch.features = batch.features.topRows(1).eval();
  batch.starts = {0, 1};
  PolicyNet p(3, {false, 1});
  p.init(rng);
  const double lp = p.log_prob(batch.observations.col(0), batch.actions.col(0));
  const Vec scale = Vec::Ones(1);

  batch.log_probs = Vec::Constant(1, lp - std::log(1.5));  // ratio 1.5 > 1.2
  EXPECT_EQ(clipped_surrogate(batch, Vec::Constant(1, 2.0), scale, p, 0.2).gradient.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(clipped_surrogate(batch, Vec::Constant(1, -2.0), scale, p, 0.2).gradient.cwiseAbs().maxCoeff(), 0.0);

  batch.log_probs = Vec::Constant(1, lp - std::log(0.5));  // ratio 0.5 < 0.8
  EXPECT_EQ(clipped_surrogate(batch, Vec::Constant(1, -2.0), scale, p, 0.2).gradient.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(clipped_surrogate(batch, Vec::Constant(1, 2.0), scale, p, 0.2).gradient.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_NEAR(clipped_surrogate(batch, Vec::Constant(1, -2.0), scale, p, 0.2).value, -1.6, 1e-12);
}

TEST(Train, ZeroEpochsReturnsInitialPolicy) {
  CartPole env;
  auto c = cvar_config(0.95, 0.5);
  c.algorithm = Algorithm::Vanilla;
  c.epochs = 0;
  c.seed = 3;
  const auto r = train(c, env, cartpole_prior());
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.policy.params(), make_policy(env, 3).params());
}

TEST(Train, LogsOneFiniteRowPerEpochAndIsDeterministic) {
  for (auto algo : {Algorithm::Vanilla, Algorithm::PpoClip}) {
    CartPole env;
    auto c = cvar_config(0.95, 0.5);
    c.algorithm = algo;
    c.epochs = 3;
    c.steps_per_epoch = 500;
    c.policy_iters = c.value_iters = 5;
    c.seed = 11;
    const auto a = train(c, env, cartpole_prior());
    const auto b = train(c, env, cartpole_prior());
    ASSERT_EQ(a.log.size(), 3u);
    EXPECT_EQ(a.policy.params(), b.policy.params());
    EXPECT_EQ(a.value.params(), b.value.params());
    for (const auto& row : a.log) {
      EXPECT_TRUE(std::isfinite(row.expected_return));
      EXPECT_TRUE(std::isfinite(row.risk_value));
      EXPECT_TRUE(std::isfinite(row.sigma_star));
      EXPECT_TRUE(row.rho.allFinite());
      EXPECT_LE(row.risk_value, row.expected_return + 1e-9);
      EXPECT_GE(row.steps, 500);
    }
    const auto csv = training_log_csv(a.log, 7);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  }
}

TEST(Train, LambdaOneMatchesCollapsedMeanRewardBitForBit) {
  CartPole env;
  auto c = cvar_config(0.95, 1.0);
  c.algorithm = Algorithm::Vanilla;
  c.policy_lr = 1e-2;
  c.epochs = 3;
  c.seed = 5;
  const auto prior = cartpole_prior();
  const auto full = train(c, env, prior);
  const auto collapsed = train(c, env, RewardPosterior({{mean_hypothesis(prior), 1.0}}));
  EXPECT_EQ(full.policy.params(), collapsed.policy.params());
  EXPECT_NE(full.policy.params(), make_policy(env, 5).params());
}

TEST(Train, ValidatesInputs) {
  CartPole env;
  auto c = cvar_config(0.95, 0.5);
  c.epochs = 1;
  EXPECT_THROW(train(c, env, RewardPosterior({{Vec::Ones(2), 1.0}})), DataError);
  c.metric = Metric::BaselineRegret;
  EXPECT_THROW(train(c, env, cartpole_prior()), UsageError);
  c.metric = Metric::ExpectedReturn;
  c.risk.alpha = 1.0;
  EXPECT_THROW(train(c, env, cartpole_prior()), ParameterError);
}

TEST(Train, BaselineRegretAndErmRun) {
  TrashBot env;
  const auto demos = scripted_demos(EnvId::TrashBot, DemoVariant::All, 0);
  const RewardPosterior post({{(Vec(3) << -1, 0, 1).finished(), 0.5}, {(Vec(3) << 0, 1, 0).finished(), 0.5}});
  OptimizerConfig c;
  c.risk = {0.9, 0.5, RiskMeasure::CVaR};
  c.metric = Metric::BaselineRegret;
  c.epochs = 2;
  c.steps_per_epoch = 300;
  c.policy_iters = c.value_iters = 3;
  EXPECT_EQ(train(c, env, post, demos).log.size(), 2u);
  c.metric = Metric::ExpectedReturn;
  c.risk = {0.5, 0.5, RiskMeasure::ERM};
  const auto r = train(c, env, post);
  EXPECT_TRUE(std::isnan(r.log.back().sigma_star));
}
