#pragma once

// Experiment driver: config files, posterior construction, lambda/alpha
// sweeps, evaluation rollouts and frontier/aggregate CSV export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "broil/broil_optimizer.hpp"
#include "broil/environments.hpp"
#include "broil/errors.hpp"
#include "broil/json_io.hpp"
#include "broil/reward_posterior.hpp"

namespace broil {

namespace fs = std::filesystem;

// ---- posterior sources --------------------------------------------------------

enum class PosteriorKind { Inline, File, Preferences, CartPoleTable, PointmassTable };

inline std::string to_string(PosteriorKind k) {
  switch (k) {
    case PosteriorKind::Inline: return "inline";
    case PosteriorKind::File: return "file";
    case PosteriorKind::Preferences: return "preferences";
    case PosteriorKind::CartPoleTable: return "cartpole_table";
    case PosteriorKind::PointmassTable: return "pointmass_table";
  }
  return "?";
}

inline PosteriorKind posterior_kind_from_string(const std::string& s) {
  for (auto k : {PosteriorKind::Inline, PosteriorKind::File, PosteriorKind::Preferences, PosteriorKind::CartPoleTable,
                 PosteriorKind::PointmassTable})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown posterior kind '" + s + "'");
}

struct PosteriorSource {
  PosteriorKind kind = PosteriorKind::CartPoleTable;
  // Inline: the hypotheses themselves, in the posterior file format.
  Json hypotheses = Json::array();
  std::vector<std::string> feature_names;
  // File: a posterior document. Preferences: a preference dataset, or the
  // scripted TrashBot demonstrations when empty.
  std::string path;
  McmcSettings mcmc{};
  std::uint64_t demo_seed = 0;
  // Tables: cost parameter b per hypothesis and its probability.
  std::vector<double> b;
  std::vector<double> p;
  // Pointmass: the gray weight is gray_sign * b.
  double gray_sign = -1.0;
};

inline std::vector<double> cartpole_prior_b() { return {-1.0, -0.8, -0.6, -0.4, -0.2, 0.0, 0.2}; }
inline std::vector<double> pointmass_prior_b() { return {-500.0, -40.0, 0.0, 40.0, 50.0}; }
inline std::vector<double> pointmass_prior_p() { return {0.05, 0.05, 0.2, 0.3, 0.4}; }

// Probabilities must sum to one within 1e-6; the survivors are rescaled to
// sum to one exactly (to rounding).
inline std::vector<RewardHypothesis> normalized_hypotheses(std::vector<RewardHypothesis> hyps) {
  if (hyps.empty()) throw ConfigError("posterior needs at least one hypothesis");
  double total = 0.0;
  for (const auto& h : hyps) {
    if (!(h.prob >= 0.0)) throw ConfigError("hypothesis probabilities must be non-negative");
    total += h.prob;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw ConfigError("posterior probabilities sum to " + std::to_string(total) + ", not 1");
  for (auto& h : hyps) h.prob /= total;
  return hyps;
}

struct BuiltPosterior {
  RewardPosterior posterior;
  // Single most plausible reward: the chain's highest-likelihood sample for
  // preference sources, otherwise the most probable hypothesis.
  RewardHypothesis map;
  std::optional<PreferenceDataset> preferences;
  double acceptance_rate = std::numeric_limits<double>::quiet_NaN();
};

inline RewardHypothesis most_probable(const RewardPosterior& p) {
  const auto& h = p.hypotheses();
  const auto it = std::max_element(h.begin(), h.end(), [](const auto& a, const auto& b) { return a.prob < b.prob; });
  return {it->weights, 1.0};
}

inline PreferenceDataset load_preferences(const std::string& path, const EnvConfig& env, std::uint64_t demo_seed) {
  if (!path.empty()) {
    try {
      return preferences_from_json(read_json_file(path));
    } catch (const DataError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  if (env.id != EnvId::TrashBot) throw ConfigError("scripted demonstrations exist only for trashbot; give a path");
  return scripted_demos(env, DemoVariant::All, demo_seed);
}

inline BuiltPosterior build_posterior(const PosteriorSource& src, const EnvConfig& env) {
  const auto names = make_environment(env)->feature_names();
  auto finish = [&](std::vector<RewardHypothesis> hyps, std::vector<std::string> n) {
    RewardPosterior post(normalized_hypotheses(std::move(hyps)), n.empty() ? names : std::move(n));
    if (post.feature_dim() != static_cast<Eigen::Index>(names.size()))
      throw ConfigError("posterior has " + std::to_string(post.feature_dim()) + " features but " + to_string(env.id) +
                        " has " + std::to_string(names.size()));
    RewardHypothesis map = most_probable(post);
    return BuiltPosterior{std::move(post), std::move(map), std::nullopt};
  };
  auto table = [&](std::vector<double> b, std::vector<double> p) {
    if (p.empty()) p.assign(b.size(), 1.0 / static_cast<double>(b.size()));
    if (b.empty() || b.size() != p.size()) throw ConfigError("table needs matching, non-empty b and p lists");
    std::vector<RewardHypothesis> hyps;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const Vec w = env.id == EnvId::Pointmass ? Vec((Vec(2) << 1.0, src.gray_sign * b[i]).finished())
                                               : Vec::Constant(1, b[i]);
      hyps.push_back({w, p[i]});
    }
    return hyps;
  };

  try {
    switch (src.kind) {
      case PosteriorKind::Inline: {
        std::vector<RewardHypothesis> hyps;
        for (const auto& h : src.hypotheses) hyps.push_back({vec_from_json(h.at("weights")), h.at("prob").get<double>()});
        return finish(std::move(hyps), src.feature_names);
      }
      case PosteriorKind::File: {
        const Json doc = read_json_file(src.path);
        std::vector<RewardHypothesis> hyps;
        for (const auto& h : doc.at("hypotheses")) hyps.push_back({vec_from_json(h.at("weights")), h.at("prob").get<double>()});
        return finish(std::move(hyps), doc.value("feature_names", std::vector<std::string>{}));
      }
      case PosteriorKind::Preferences: {
        PreferenceDataset data = load_preferences(src.path, env, src.demo_seed);
        if (data.feature_dim != static_cast<Eigen::Index>(names.size()))
          throw ConfigError("preference features do not match " + to_string(env.id));
        const McmcChain chain = mcmc_sample(data, src.mcmc);
        BuiltPosterior out{thin_chain(chain, src.mcmc.burn_in, src.mcmc.downsample_to, names), map_hypothesis(chain),
                           std::move(data), chain.acceptance_rate};
        return out;
      }
      case PosteriorKind::CartPoleTable:
        if (env.id != EnvId::CartPole) throw ConfigError("cartpole_table needs the cartpole environment");
        return finish(table(src.b.empty() ? cartpole_prior_b() : src.b, src.p), {});
      case PosteriorKind::PointmassTable:
        if (env.id != EnvId::Pointmass) throw ConfigError("pointmass_table needs the pointmass environment");
        return finish(table(src.b.empty() ? pointmass_prior_b() : src.b,
                            src.b.empty() && src.p.empty() ? pointmass_prior_p() : src.p),
                      {});
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed posterior source: ") + e.what());
  } catch (const DataError& e) {
    throw ConfigError(std::string("invalid posterior: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("invalid posterior: ") + e.what());
  }
  throw ConfigError("unhandled posterior kind");
}

// ---- experiment config --------------------------------------------------------

// What the policy is trained against; evaluation always uses the full posterior.
enum class Baseline { Broil, MeanReward, MapReward };

inline std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::Broil: return "broil";
    case Baseline::MeanReward: return "mean";
    case Baseline::MapReward: return "map";
  }
  return "?";
}

inline Baseline baseline_from_string(const std::string& s) {
  if (s == "broil") return Baseline::Broil;
  if (s == "mean") return Baseline::MeanReward;
  if (s == "map") return Baseline::MapReward;
  throw ConfigError("unknown baseline '" + s + "' (expected broil, mean or map)");
}

struct ExperimentConfig {
  EnvConfig env;
  PosteriorSource posterior;
  OptimizerConfig optimizer;
  Baseline baseline = Baseline::Broil;
  std::vector<double> lambdas{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<double> alphas{0.95};
  std::vector<std::uint64_t> seeds{0};
  int evaluation_episodes = 100;
  // Demonstrations for the baseline-regret metric; scripted TrashBot demos
  // when empty.
  std::string demos;
  std::optional<Vec> ground_truth;
  std::string output_dir = "runs";
  bool save_policies = true;
  int jobs = 1;

  static ExperimentConfig defaults(EnvId id) {
    ExperimentConfig c;
    c.env = EnvConfig::defaults(id);
    switch (id) {
      case EnvId::CartPole:
        c.posterior.kind = PosteriorKind::CartPoleTable;
        c.optimizer.algorithm = Algorithm::Vanilla;
        c.optimizer.epochs = 100;
        c.optimizer.policy_lr = 1e-2;
        c.alphas = {0.95};
        break;
      case EnvId::Pointmass:
        c.posterior.kind = PosteriorKind::PointmassTable;
        c.optimizer.algorithm = Algorithm::PpoClip;
        c.optimizer.epochs = 50;
        c.optimizer.policy_lr = 3e-4;
        c.alphas = {0.96};
        break;
      case EnvId::TrashBot:
        c.posterior.kind = PosteriorKind::Preferences;
        c.optimizer.algorithm = Algorithm::PpoClip;
        c.optimizer.epochs = 50;
        c.optimizer.policy_lr = 3e-4;
        c.alphas = {0.95};
        break;
    }
    c.optimizer.risk.alpha = c.alphas.front();
    return c;
  }

  void validate() const {
    if (lambdas.empty() || alphas.empty() || seeds.empty()) throw ConfigError("sweep lists must be non-empty");
    try {
      env.validate();
      optimizer.validate();
      for (double l : lambdas)
        for (double a : alphas) RiskParams{a, l, optimizer.risk.measure}.validate();
      posterior.mcmc.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("sweep seeds must be distinct");
    if (evaluation_episodes < 1) throw ConfigError("evaluation_episodes must be positive");
    if (jobs < 1) throw ConfigError("jobs must be at least 1");
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
  }
};

inline Json experiment_config_to_json(const ExperimentConfig& c) {
  const auto& o = c.optimizer;
  const auto& m = c.posterior.mcmc;
  Json post = {{"kind", to_string(c.posterior.kind)},
               {"hypotheses", c.posterior.hypotheses},
               {"feature_names", c.posterior.feature_names},
               {"path", c.posterior.path},
               {"demo_seed", c.posterior.demo_seed},
               {"b", c.posterior.b},
               {"p", c.posterior.p},
               {"gray_sign", c.posterior.gray_sign},
               {"mcmc",
                {{"steps", m.steps},
                 {"proposal_step", m.proposal_step},
                 {"burn_in", m.burn_in},
                 {"downsample_to", m.downsample_to},
                 {"beta", m.beta},
                 {"seed", m.seed}}}};
  Json opt = {{"risk", to_string(o.risk.measure)},
              {"metric", to_string(o.metric)},
              {"algorithm", to_string(o.algorithm)},
              {"gamma", o.gamma},
              {"gae_lambda", o.gae_lambda},
              {"clip_ratio", o.clip_ratio},
              {"target_kl", o.target_kl},
              {"epochs", o.epochs},
              {"steps_per_epoch", o.steps_per_epoch},
              {"policy_lr", o.policy_lr},
              {"value_lr", o.value_lr},
              {"policy_iters", o.policy_iters},
              {"value_iters", o.value_iters}};
  Json j = {{"env", env_config_to_json(c.env)},
            {"posterior", post},
            {"optimizer", opt},
            {"baseline", to_string(c.baseline)},
            {"sweep", {{"lambdas", c.lambdas}, {"alphas", c.alphas}, {"seeds", c.seeds}}},
            {"evaluation_episodes", c.evaluation_episodes},
            {"demos", c.demos},
            {"output_dir", c.output_dir},
            {"save_policies", c.save_policies},
            {"jobs", c.jobs}};
  if (c.ground_truth) j["ground_truth"] = to_json_array(*c.ground_truth);
  return j;
}

// Keys left out take the per-environment defaults.
inline ExperimentConfig experiment_config_from_json(const Json& j) {
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    const Json& e = j.at("env");
    ExperimentConfig c = ExperimentConfig::defaults(env_id_from_string(e.at("id").get<std::string>()));
    c.env = env_config_from_json(e);

    if (j.contains("posterior")) {
      const Json& p = j["posterior"];
      auto& s = c.posterior;
      if (p.contains("kind")) s.kind = posterior_kind_from_string(p["kind"].get<std::string>());
      if (p.contains("hypotheses")) s.hypotheses = p["hypotheses"];
      s.feature_names = p.value("feature_names", s.feature_names);
      s.path = p.value("path", s.path);
      s.demo_seed = p.value("demo_seed", s.demo_seed);
      s.b = p.value("b", s.b);
      s.p = p.value("p", s.p);
      s.gray_sign = p.value("gray_sign", s.gray_sign);
      if (p.contains("mcmc")) {
        const Json& m = p["mcmc"];
        s.mcmc.steps = m.value("steps", s.mcmc.steps);
        s.mcmc.proposal_step = m.value("proposal_step", s.mcmc.proposal_step);
        s.mcmc.burn_in = m.value("burn_in", s.mcmc.burn_in);
        s.mcmc.downsample_to = m.value("downsample_to", s.mcmc.downsample_to);
        s.mcmc.beta = m.value("beta", s.mcmc.beta);
        s.mcmc.seed = m.value("seed", s.mcmc.seed);
      }
    }
    if (j.contains("optimizer")) {
      const Json& o = j["optimizer"];
      auto& t = c.optimizer;
      if (o.contains("risk")) t.risk.measure = risk_measure_from_string(o["risk"].get<std::string>());
      if (o.contains("metric")) t.metric = metric_from_string(o["metric"].get<std::string>());
      if (o.contains("algorithm")) t.algorithm = algorithm_from_string(o["algorithm"].get<std::string>());
      t.gamma = o.value("gamma", t.gamma);
      t.gae_lambda = o.value("gae_lambda", t.gae_lambda);
      t.clip_ratio = o.value("clip_ratio", t.clip_ratio);
      t.target_kl = o.value("target_kl", t.target_kl);
      t.epochs = o.value("epochs", t.epochs);
      t.steps_per_epoch = o.value("steps_per_epoch", t.steps_per_epoch);
      t.policy_lr = o.value("policy_lr", t.policy_lr);
      t.value_lr = o.value("value_lr", t.value_lr);
      t.policy_iters = o.value("policy_iters", t.policy_iters);
      t.value_iters = o.value("value_iters", t.value_iters);
    }
    if (j.contains("baseline")) c.baseline = baseline_from_string(j["baseline"].get<std::string>());
    if (j.contains("sweep")) {
      const Json& s = j["sweep"];
      c.lambdas = s.value("lambdas", c.lambdas);
      c.alphas = s.value("alphas", c.alphas);
      c.seeds = s.value("seeds", c.seeds);
    }
    c.evaluation_episodes = j.value("evaluation_episodes", c.evaluation_episodes);
    c.demos = j.value("demos", c.demos);
    if (j.contains("ground_truth")) c.ground_truth = vec_from_json(j["ground_truth"]);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.save_policies = j.value("save_policies", c.save_policies);
    c.jobs = j.value("jobs", c.jobs);
    if (!c.alphas.empty()) c.optimizer.risk.alpha = c.alphas.front();
    if (!c.lambdas.empty()) c.optimizer.risk.lambda = c.lambdas.front();
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  } catch (const DataError& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  return experiment_config_from_json(read_json_file(path));
}

// ---- evaluation ---------------------------------------------------------------

struct EvaluationRow {
  double lambda = 0.0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double exp_return = 0.0;
  double risk_value = 0.0;
  BatchMetrics metrics;
  double gt_return = std::numeric_limits<double>::quiet_NaN();
  Vec rho;
};

// Rolls out `episodes` episodes with stochastic action sampling and scores
// them under every hypothesis.
inline EvaluationRow evaluate(const PolicyNet& policy, Environment& env, const RewardPosterior& posterior,
                              int episodes, std::uint64_t seed, const RiskParams& risk,
                              const std::optional<Vec>& ground_truth = std::nullopt) {
  if (episodes < 1) throw ParameterError("evaluation needs at least one episode");
  if (env.feature_dim() != posterior.feature_dim()) throw DataError("environment and posterior disagree on k");
  if (ground_truth && ground_truth->size() != env.feature_dim())
    throw DataError("ground-truth weights do not match the feature dimension");
  Rng rng(seed);
  const Vec scale = env.observation_scale();
  Mat counts = Mat::Zero(episodes, env.feature_dim());
  double abs_x = 0.0;
  long steps = 0;
  const int xf = env.position_feature();
  for (int e = 0; e < episodes; ++e) {
    EnvState s = env.reset(rng());
    while (!s.done) {
      s = env.step(policy.sample(s.observation.cwiseQuotient(scale), rng).action);
      counts.row(e) += s.features.transpose();
      if (xf >= 0) abs_x += std::abs(s.features[xf]);
      ++steps;
    }
  }
  EvaluationRow row;
  row.rho = (counts * posterior.weight_matrix()).colwise().mean().transpose();
  std::tie(row.exp_return, row.risk_value) = posterior_summary(row.rho, posterior, risk);
  const double n = episodes;
  if (env.gray_feature() >= 0) row.metrics.gray_steps = counts.col(env.gray_feature()).sum() / n;
  if (env.trash_feature() >= 0) row.metrics.trash = counts.col(env.trash_feature()).sum() / n;
  if (xf >= 0) row.metrics.abs_x_mean = abs_x / static_cast<double>(steps);
  if (ground_truth) row.gt_return = (counts * *ground_truth).mean();
  return row;
}

// ---- CSV output ---------------------------------------------------------------

inline std::string frontier_header(bool ground_truth) {
  return std::string("lambda,alpha,seed,exp_return,risk_value,gray_steps,trash,|x|_mean") +
         (ground_truth ? ",gt_return" : "") + "\n";
}

inline std::string frontier_line(const EvaluationRow& r, bool ground_truth) {
  std::ostringstream out;
  out << csv_number(r.lambda) << ',' << csv_number(r.alpha) << ',' << r.seed << ',' << csv_number(r.exp_return) << ','
      << csv_number(r.risk_value) << ',' << csv_number(r.metrics.gray_steps) << ',' << csv_number(r.metrics.trash)
      << ',' << csv_number(r.metrics.abs_x_mean);
  if (ground_truth) out << ',' << csv_number(r.gt_return);
  out << '\n';
  return out.str();
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double stddev = std::numeric_limits<double>::quiet_NaN();
};

// Sample standard deviation; zero for a single value. NaN inputs give NaN.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty() || std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); })) return m;
  double sum = 0.0;
  for (double x : v) sum += x;
  m.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return m;
}

struct AggregateRow {
  double lambda = 0.0;
  double alpha = 0.0;
  std::size_t seeds = 0;
  MeanStd exp_return, risk_value, gray_steps, trash, abs_x_mean, gt_return;
};

// One row per (lambda, alpha) in first-appearance order.
inline std::vector<AggregateRow> aggregate(const std::vector<EvaluationRow>& rows) {
  std::vector<AggregateRow> out;
  std::vector<std::pair<double, double>> keys;
  for (const auto& r : rows)
    if (std::find(keys.begin(), keys.end(), std::pair{r.lambda, r.alpha}) == keys.end())
      keys.emplace_back(r.lambda, r.alpha);
  for (const auto& [l, a] : keys) {
    std::vector<double> e, rv, g, t, x, gt;
    for (const auto& r : rows) {
      if (r.lambda != l || r.alpha != a) continue;
      e.push_back(r.exp_return);
      rv.push_back(r.risk_value);
      g.push_back(r.metrics.gray_steps);
      t.push_back(r.metrics.trash);
      x.push_back(r.metrics.abs_x_mean);
      gt.push_back(r.gt_return);
    }
    out.push_back({l, a, e.size(), mean_std(e), mean_std(rv), mean_std(g), mean_std(t), mean_std(x), mean_std(gt)});
  }
  return out;
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows, bool ground_truth) {
  std::ostringstream out;
  out << "lambda,alpha,seeds";
  std::vector<std::string> cols{"exp_return", "risk_value", "gray_steps", "trash", "|x|_mean"};
  if (ground_truth) cols.emplace_back("gt_return");
  for (const auto& c : cols) out << ',' << c << "_mean," << c << "_std";
  out << '\n';
  for (const auto& r : rows) {
    out << csv_number(r.lambda) << ',' << csv_number(r.alpha) << ',' << r.seeds;
    std::vector<MeanStd> v{r.exp_return, r.risk_value, r.gray_steps, r.trash, r.abs_x_mean};
    if (ground_truth) v.push_back(r.gt_return);
    for (const auto& m : v) out << ',' << csv_number(m.mean) << ',' << csv_number(m.stddev);
    out << '\n';
  }
  return out.str();
}

// ---- sweeps -------------------------------------------------------------------

struct SweepCell {
  double lambda;
  double alpha;
  std::uint64_t seed;
};

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& c) {
  std::vector<SweepCell> cells;
  for (double l : c.lambdas)
    for (double a : c.alphas)
      for (auto s : c.seeds) cells.push_back({l, a, s});
  return cells;
}

inline std::string cell_name(const SweepCell& c) {
  return "lambda" + csv_number(c.lambda) + "_alpha" + csv_number(c.alpha) + "_seed" + std::to_string(c.seed);
}

struct SweepReport {
  std::vector<EvaluationRow> rows;
  std::vector<AggregateRow> aggregates;
  fs::path frontier_csv;
  fs::path aggregate_csv;
};

// Everything that can fail before training: output directory, posterior,
// demonstrations.
struct PreparedExperiment {
  ExperimentConfig config;
  BuiltPosterior posterior;
  std::optional<PreferenceDataset> demos;
};

inline PreparedExperiment prepare(const ExperimentConfig& config) {
  config.validate();
  const fs::path out(config.output_dir);
  std::error_code ec;
  fs::create_directories(out / "runs", ec);
  if (ec) throw ConfigError("cannot create output directory " + out.string() + ": " + ec.message());
  write_text_atomic(out / ".write_probe", "");
  fs::remove(out / ".write_probe", ec);

  PreparedExperiment p{config, build_posterior(config.posterior, config.env), std::nullopt};
  if (config.optimizer.metric == Metric::BaselineRegret) {
    if (!config.demos.empty() || config.env.id == EnvId::TrashBot)
      p.demos = load_preferences(config.demos, config.env, config.posterior.demo_seed);
    else if (p.posterior.preferences)
      p.demos = p.posterior.preferences;
    else
      throw ConfigError("baseline-regret needs demonstrations: set \"demos\"");
  }
  if (config.ground_truth && config.ground_truth->size() != p.posterior.posterior.feature_dim())
    throw ConfigError("ground_truth length does not match the feature dimension");
  return p;
}

inline RewardPosterior training_posterior(const PreparedExperiment& p) {
  const auto& post = p.posterior.posterior;
  switch (p.config.baseline) {
    case Baseline::Broil: return post;
    case Baseline::MeanReward: return RewardPosterior({{mean_hypothesis(post), 1.0}}, post.feature_names());
    case Baseline::MapReward: return RewardPosterior({p.posterior.map}, post.feature_names());
  }
  return post;
}

inline Json evaluation_row_to_json(const EvaluationRow& r) {
  auto num = [](double v) { return std::isnan(v) ? Json(nullptr) : Json(v); };
  return {{"lambda", r.lambda},
          {"alpha", r.alpha},
          {"seed", r.seed},
          {"exp_return", r.exp_return},
          {"risk_value", r.risk_value},
          {"gray_steps", num(r.metrics.gray_steps)},
          {"trash", num(r.metrics.trash)},
          {"abs_x_mean", num(r.metrics.abs_x_mean)},
          {"gt_return", num(r.gt_return)},
          {"rho", to_json_array(r.rho)}};
}

// Trains and evaluates one cell, writing its log, checkpoint and result.
inline EvaluationRow run_cell(const PreparedExperiment& p, const SweepCell& cell) {
  const auto& c = p.config;
  OptimizerConfig opt = c.optimizer;
  opt.risk.lambda = cell.lambda;
  opt.risk.alpha = cell.alpha;
  opt.seed = cell.seed;
  const RewardPosterior train_post = training_posterior(p);
  const auto env = make_environment(c.env);
  const auto demos = c.baseline == Baseline::Broil ? p.demos : std::nullopt;
  if (c.baseline != Baseline::Broil) opt.metric = Metric::ExpectedReturn;
  TrainResult trained = train(opt, *env, train_post, demos);

  EvaluationRow row = evaluate(trained.policy, *env, p.posterior.posterior, c.evaluation_episodes,
                               mix_seed(cell.seed, 4), opt.risk, c.ground_truth);
  row.lambda = cell.lambda;
  row.alpha = cell.alpha;
  row.seed = cell.seed;

  const fs::path dir = fs::path(c.output_dir) / "runs";
  const std::string name = cell_name(cell);
  write_training_log(dir / (name + "_train.csv"), trained.log, train_post.size());
  if (c.save_policies) save_policy(dir / (name + "_policy.json"), trained.policy);
  write_json_file(dir / (name + "_result.json"), evaluation_row_to_json(row));
  return row;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Runs every (lambda, alpha, seed) cell, `jobs` at a time, then merges the
// results in sweep order.
inline SweepReport run(const ExperimentConfig& config) {
  const PreparedExperiment p = prepare(config);
  const auto cells = sweep_cells(config);
  std::vector<std::optional<EvaluationRow>> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        results[i] = run_cell(p, cells[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = cells.size();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int n = std::min<int>(config.jobs, static_cast<int>(cells.size()));
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);

  SweepReport report;
  for (auto& r : results) report.rows.push_back(std::move(*r));
  report.aggregates = aggregate(report.rows);

  const bool gt = config.ground_truth.has_value();
  std::string frontier = frontier_header(gt);
  for (const auto& r : report.rows) frontier += frontier_line(r, gt);
  const fs::path out(config.output_dir);
  report.frontier_csv = out / "frontier.csv";
  report.aggregate_csv = out / "aggregate.csv";
  write_text_atomic(report.frontier_csv, frontier);
  write_text_atomic(report.aggregate_csv, aggregate_csv(report.aggregates, gt));
  write_json_file(out / "posterior.json", posterior_to_json(p.posterior.posterior));

  Json meta = {{"created_utc", utc_timestamp()},
               {"config", experiment_config_to_json(config)},
               {"cells", cells.size()}};
  if (!std::isnan(p.posterior.acceptance_rate)) meta["mcmc_acceptance_rate"] = p.posterior.acceptance_rate;
  write_json_file(out / "metadata.json", meta);
  return report;
}

}  // namespace broil
