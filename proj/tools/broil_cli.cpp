// broil: train, sweep, infer reward posteriors, evaluate checkpoints and
// generate scripted demonstrations.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "broil/experiment_harness.hpp"

namespace {

using namespace broil;

struct CommonOptions {
  std::string config;
  std::string env;
  std::optional<double> alpha;
  std::optional<double> lambda;
  std::string risk;
  std::string metric;
  std::string algo;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App& cmd, CommonOptions& o) {
  cmd.add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd.add_option("--env", o.env, "environment")->check(CLI::IsMember({"cartpole", "pointmass", "trashbot"}));
  cmd.add_option("--alpha", o.alpha, "risk level");
  cmd.add_option("--lambda", o.lambda, "weight on expected return, in [0,1]");
  cmd.add_option("--risk", o.risk, "risk measure")->check(CLI::IsMember({"cvar", "erm"}));
  cmd.add_option("--metric", o.metric, "performance metric")
      ->check(CLI::IsMember({"expected-return", "baseline-regret"}));
  cmd.add_option("--algo", o.algo, "policy optimiser")->check(CLI::IsMember({"vanilla", "ppo"}));
  cmd.add_option("--epochs", o.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  cmd.add_option("--seed", o.seed, "random seed");
  cmd.add_option("--out", o.out, "output directory");
}

ExperimentConfig resolve(const CommonOptions& o) {
  if (o.config.empty() && o.env.empty()) throw ConfigError("give --config or --env");
  ExperimentConfig c = o.config.empty() ? ExperimentConfig::defaults(env_id_from_string(o.env))
                                        : load_experiment_config(o.config);
  if (!o.env.empty() && env_id_from_string(o.env) != c.env.id)
    throw ConfigError("--env " + o.env + " contradicts the config's environment " + to_string(c.env.id));
  if (o.alpha) c.alphas = {*o.alpha};
  if (o.lambda) c.lambdas = {*o.lambda};
  if (!o.risk.empty()) c.optimizer.risk.measure = risk_measure_from_string(o.risk);
  if (!o.metric.empty()) c.optimizer.metric = metric_from_string(o.metric);
  if (!o.algo.empty()) c.optimizer.algorithm = algorithm_from_string(o.algo);
  if (o.epochs) c.optimizer.epochs = *o.epochs;
  if (o.seed) {
    c.seeds = {*o.seed};
    c.posterior.mcmc.seed = *o.seed;
  }
  if (!o.out.empty()) c.output_dir = o.out;
  c.optimizer.risk.alpha = c.alphas.front();
  c.optimizer.risk.lambda = c.lambdas.front();
  c.validate();
  return c;
}

void print_rows(const SweepReport& r, bool ground_truth) {
  std::cout << frontier_header(ground_truth);
  for (const auto& row : r.rows) std::cout << frontier_line(row, ground_truth);
}

int cmd_train(const CommonOptions& o) {
  ExperimentConfig c = resolve(o);
  c.lambdas.resize(1);
  c.alphas.resize(1);
  c.seeds.resize(1);
  c.save_policies = true;
  const SweepReport r = run(c);
  print_rows(r, c.ground_truth.has_value());
  std::cerr << "checkpoint and training log in " << (fs::path(c.output_dir) / "runs").string() << '\n';
  return 0;
}

int cmd_sweep(const CommonOptions& o, std::optional<int> jobs) {
  ExperimentConfig c = resolve(o);
  if (jobs) c.jobs = *jobs;
  const SweepReport r = run(c);
  print_rows(r, c.ground_truth.has_value());
  std::cerr << "frontier: " << r.frontier_csv.string() << "\naggregate: " << r.aggregate_csv.string() << '\n';
  return 0;
}

int cmd_infer(const CommonOptions& o, const std::string& prefs, std::optional<double> beta,
              std::optional<int> steps) {
  CommonOptions base = o;
  if (base.config.empty() && base.env.empty()) base.env = "trashbot";
  ExperimentConfig c = resolve(base);
  c.posterior.kind = PosteriorKind::Preferences;
  if (!prefs.empty()) c.posterior.path = prefs;
  if (beta) c.posterior.mcmc.beta = *beta;
  if (steps) c.posterior.mcmc.steps = *steps;
  try {
    c.posterior.mcmc.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  const BuiltPosterior b = build_posterior(c.posterior, c.env);
  const fs::path out(c.output_dir);
  fs::create_directories(out);
  write_json_file(out / "posterior.json", posterior_to_json(b.posterior));
  write_json_file(out / "map.json", posterior_to_json(RewardPosterior({b.map}, b.posterior.feature_names())));
  const Vec mean = mean_hypothesis(b.posterior);
  std::cout << "hypotheses: " << b.posterior.size() << "\nacceptance_rate: " << b.acceptance_rate << "\nmean:";
  for (double w : mean) std::cout << ' ' << w;
  std::cout << "\nmap:";
  for (double w : b.map.weights) std::cout << ' ' << w;
  std::cout << "\nwrote " << (out / "posterior.json").string() << '\n';
  return 0;
}

int cmd_evaluate(const CommonOptions& o, const std::string& policy_path, std::optional<int> episodes) {
  ExperimentConfig c = resolve(o);
  if (episodes) c.evaluation_episodes = *episodes;
  c.validate();
  const BuiltPosterior b = build_posterior(c.posterior, c.env);
  PolicyNet policy = [&] {
    try {
      return load_policy(policy_path);
    } catch (const DataError& e) {
      throw ConfigError(policy_path + ": " + e.what());
    }
  }();
  const auto env = make_environment(c.env);
  RiskParams risk = c.optimizer.risk;
  EvaluationRow row = evaluate(policy, *env, b.posterior, c.evaluation_episodes, mix_seed(c.seeds.front(), 4), risk,
                               c.ground_truth);
  row.lambda = risk.lambda;
  row.alpha = risk.alpha;
  row.seed = c.seeds.front();
  const bool gt = c.ground_truth.has_value();
  const std::string csv = frontier_header(gt) + frontier_line(row, gt);
  std::cout << csv;
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_atomic(fs::path(o.out) / "evaluation.csv", csv);
  }
  return 0;
}

int cmd_make_demos(const CommonOptions& o) {
  CommonOptions base = o;
  if (base.config.empty() && base.env.empty()) base.env = "trashbot";
  const ExperimentConfig c = resolve(base);
  std::vector<Episode> episodes;
  const std::uint64_t seed = o.seed.value_or(c.posterior.demo_seed);
  const PreferenceDataset d = scripted_demos(c.env, DemoVariant::All, seed, &episodes);
  const fs::path out(c.output_dir);
  fs::create_directories(out);
  write_json_file(out / "preferences.json", preferences_to_json(d));
  write_trajectories_csv(out / "demos.csv", episodes, make_environment(c.env)->feature_names());
  for (std::size_t i = 0; i < d.trajectories.size(); ++i) {
    const Vec f = feature_counts(d.trajectories[i]);
    std::cout << "trajectory " << i << ':';
    for (double v : f) std::cout << ' ' << v;
    std::cout << '\n';
  }
  for (const auto& [a, b] : d.preferences) std::cout << "preference " << a << " > " << b << '\n';
  std::cout << "wrote " << (out / "preferences.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Batches are reallocated every epoch; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"Bayesian robust policy optimisation experiments"};
  app.require_subcommand(1);

  CommonOptions train_o, sweep_o, infer_o, eval_o, demos_o;
  auto* train = app.add_subcommand("train", "train one policy and evaluate it");
  add_common(*train, train_o);

  auto* sweep = app.add_subcommand("sweep", "run a lambda/alpha/seed sweep");
  add_common(*sweep, sweep_o);
  std::optional<int> jobs;
  sweep->add_option("--jobs", jobs, "cells run in parallel")->check(CLI::PositiveNumber);

  auto* infer = app.add_subcommand("infer-posterior", "sample a reward posterior from preferences");
  add_common(*infer, infer_o);
  std::string prefs;
  std::optional<double> beta;
  std::optional<int> steps;
  infer->add_option("--prefs", prefs, "preference dataset (default: scripted TrashBot demos)")
      ->check(CLI::ExistingFile);
  infer->add_option("--beta", beta, "preference inverse temperature");
  infer->add_option("--steps", steps, "MCMC steps");

  auto* eval = app.add_subcommand("evaluate", "evaluate a policy checkpoint under the posterior");
  add_common(*eval, eval_o);
  std::string policy_path;
  std::optional<int> episodes;
  eval->add_option("--policy", policy_path, "policy checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", episodes, "evaluation episodes")->check(CLI::PositiveNumber);

  auto* demos = app.add_subcommand("make-demos", "write the scripted TrashBot preference dataset");
  add_common(*demos, demos_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(train_o);
    if (*sweep) return cmd_sweep(sweep_o, jobs);
    if (*infer) return cmd_infer(infer_o, prefs, beta, steps);
    if (*eval) return cmd_evaluate(eval_o, policy_path, episodes);
    if (*demos) return cmd_make_demos(demos_o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
