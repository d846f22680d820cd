#pragma once

// Episodic benchmark environments whose reward is linear in per-step features:
// CartPole (reward linear in cart position), Pointmass navigation with gray
// regions of uncertain cost, and TrashBot.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "broil/errors.hpp"
#include "broil/json_io.hpp"
#include "broil/reward_posterior.hpp"
#include "broil/types.hpp"

namespace broil {

enum class EnvId { CartPole, Pointmass, TrashBot };

inline std::string to_string(EnvId id) {
  switch (id) {
    case EnvId::CartPole: return "cartpole";
    case EnvId::Pointmass: return "pointmass";
    case EnvId::TrashBot: return "trashbot";
  }
  return "?";
}

inline EnvId env_id_from_string(const std::string& s) {
  if (s == "cartpole") return EnvId::CartPole;
  if (s == "pointmass") return EnvId::Pointmass;
  if (s == "trashbot") return EnvId::TrashBot;
  throw ParameterError("unknown environment '" + s + "' (expected cartpole, pointmass or trashbot)");
}

using Point = std::array<double, 2>;

// Axis-aligned rectangle, closed on all sides.
struct Rect {
  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;

  bool contains(const Point& p) const { return p[0] >= x_min && p[0] <= x_max && p[1] >= y_min && p[1] <= y_max; }
  void validate() const {
    if (!(x_min < x_max && y_min < y_max)) throw ParameterError("rectangle must have min < max on both axes");
  }
};

struct EnvConfig {
  EnvId id = EnvId::CartPole;
  int horizon = 200;
  double drag = 0.2;
  double noise = 0.05;
  double dt = 1.0;
  Point start{0.0, 0.0};
  Point goal{0.0, 0.0};
  // Pointmass: cells of uncertain cost.
  std::vector<Rect> gray_regions;
  // TrashBot: everything outside the white rectangle is gray.
  Rect white_region{-0.5, 0.5, -0.5, 0.5};
  double pickup_radius = 0.05;

  void validate() const {
    if (horizon <= 0) throw ParameterError("horizon must be positive");
    if (!(drag >= 0.0 && drag <= 1.0)) throw ParameterError("drag must lie in [0,1]");
    if (!(noise >= 0.0)) throw ParameterError("noise must be non-negative");
    if (!(dt > 0.0)) throw ParameterError("dt must be positive");
    for (const auto& r : gray_regions) r.validate();
    white_region.validate();
    if (!(pickup_radius > 0.0)) throw ParameterError("pickup_radius must be positive");
  }

  static EnvConfig defaults(EnvId id) {
    EnvConfig c;
    c.id = id;
    switch (id) {
      case EnvId::CartPole:
        c.horizon = 200;
        break;
      case EnvId::Pointmass:
        c.horizon = 100;
        c.drag = 0.2;
        c.noise = 0.05;
        c.dt = 1.0;
        c.start = {-40.0, 0.0};
        c.goal = {0.0, 0.0};
        c.gray_regions = {{-28.0, -12.0, -6.0, 6.0}};
        break;
      case EnvId::TrashBot:
        c.horizon = 100;
        c.drag = 0.2;
        c.noise = 0.0;
        c.dt = 0.1;
        c.start = {0.0, 0.0};
        c.white_region = {-0.25, 0.25, -0.25, 0.25};
        c.pickup_radius = 0.05;
        break;
    }
    return c;
  }
};

struct ActionSpace {
  bool discrete = false;
  // Number of choices when discrete, otherwise the action dimension.
  int size = 0;
};

struct EnvState {
  Vec observation;
  Vec features;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvState reset(std::uint64_t seed) = 0;
  // Discrete actions are passed as a length-1 vector holding the index.
  virtual EnvState step(const Vec& action) = 0;

  virtual const EnvConfig& config() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual Eigen::Index observation_dim() const = 0;
  virtual std::vector<std::string> feature_names() const = 0;
  Eigen::Index feature_dim() const { return static_cast<Eigen::Index>(feature_names().size()); }

  // Per-component scale dividing observations before they reach the policy.
  virtual Vec observation_scale() const { return Vec::Ones(observation_dim()); }

  // Feature indices for the evaluation metrics, or -1 when not applicable.
  virtual int gray_feature() const { return -1; }
  virtual int trash_feature() const { return -1; }
  virtual int position_feature() const { return -1; }

  int steps_taken() const { return t_; }
  bool done() const { return done_; }
  // The episode ended at the horizon rather than in a terminal state.
  bool truncated() const { return truncated_; }

 protected:
  void begin_episode() {
    t_ = 0;
    done_ = false;
    truncated_ = false;
    started_ = true;
  }
  void check_can_step() const {
    if (!started_) throw UsageError("step called before reset");
    if (done_) throw UsageError("step called on a finished episode; call reset first");
  }
  void advance(bool terminal) {
    ++t_;
    done_ = terminal || t_ >= config().horizon;
    truncated_ = !terminal && done_;
  }

 private:
  int t_ = 0;
  bool done_ = false;
  bool truncated_ = false;
  bool started_ = false;
};

class CartPole final : public Environment {
 public:
  static constexpr double kGravity = 9.8;
  static constexpr double kCartMass = 1.0;
  static constexpr double kPoleMass = 0.1;
  static constexpr double kTotalMass = kCartMass + kPoleMass;
  static constexpr double kHalfLength = 0.5;
  static constexpr double kPoleMassLength = kPoleMass * kHalfLength;
  static constexpr double kForce = 10.0;
  static constexpr double kTau = 0.02;
  static constexpr double kThetaLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;
  static constexpr double kXLimit = 2.4;

  explicit CartPole(EnvConfig config = EnvConfig::defaults(EnvId::CartPole)) : config_(std::move(config)) {
    config_.validate();
  }

  EnvState reset(std::uint64_t seed) override {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (double& s : state_) s = u(rng);
    begin_episode();
    return {observation(), Vec::Zero(1), false};
  }

  EnvState step(const Vec& action) override {
    check_can_step();
    if (action.size() != 1 || (action[0] != 0.0 && action[0] != 1.0))
      throw UsageError("CartPole action must be 0 or 1");
    auto& [x, x_dot, theta, theta_dot] = state_;
    const double force = action[0] == 1.0 ? kForce : -kForce;
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double temp = (force + kPoleMassLength * theta_dot * theta_dot * sin_t) / kTotalMass;
    const double theta_acc =
        (kGravity * sin_t - cos_t * temp) / (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_t * cos_t / kTotalMass));
    const double x_acc = temp - kPoleMassLength * theta_acc * cos_t / kTotalMass;
    x += kTau * x_dot;
    x_dot += kTau * x_acc;
    theta += kTau * theta_dot;
    theta_dot += kTau * theta_acc;
    const bool fell = x < -kXLimit || x > kXLimit || theta < -kThetaLimit || theta > kThetaLimit;
    advance(fell);
    return {observation(), Vec::Constant(1, x), done()};
  }

  const EnvConfig& config() const override { return config_; }
  ActionSpace action_space() const override { return {true, 2}; }
  Eigen::Index observation_dim() const override { return 4; }
  std::vector<std::string> feature_names() const override { return {"x"}; }
  int position_feature() const override { return 0; }

  // Direct state access for tests.
  const std::array<double, 4>& state() const { return state_; }
  void set_state(const std::array<double, 4>& s) { state_ = s; }

 private:
  Vec observation() const { return Eigen::Map<const Vec>(state_.data(), 4); }

  EnvConfig config_;
  std::array<double, 4> state_{};
};

// Shared point-mass kinematics: position integrates the old velocity, then
// velocity decays by drag and receives the clamped force plus noise.
class PointBody {
 public:
  void reset(const Point& start) {
    pos_ = start;
    vel_ = {0.0, 0.0};
  }

  void step(const Vec& action, const EnvConfig& c, Rng& rng) {
    if (action.size() != 2) throw UsageError("point-mass action must be 2-D");
    std::normal_distribution<double> z(0.0, 1.0);
    for (int k = 0; k < 2; ++k) {
      const double a = std::clamp(action[k], -1.0, 1.0);
      pos_[k] += vel_[k] * c.dt;
      const double noise = c.noise > 0.0 ? c.noise * z(rng) : 0.0;
      vel_[k] = (1.0 - c.drag) * vel_[k] + a * c.dt + noise;
    }
  }

  const Point& position() const { return pos_; }
  const Point& velocity() const { return vel_; }
  void set(const Point& pos, const Point& vel) {
    pos_ = pos;
    vel_ = vel;
  }

 private:
  Point pos_{};
  Point vel_{};
};

class Pointmass final : public Environment {
 public:
  explicit Pointmass(EnvConfig config = EnvConfig::defaults(EnvId::Pointmass)) : config_(std::move(config)) {
    config_.validate();
  }

  EnvState reset(std::uint64_t seed) override {
    rng_.seed(seed);
    body_.reset(config_.start);
    begin_episode();
    return {observation(), Vec::Zero(2), false};
  }

  EnvState step(const Vec& action) override {
    check_can_step();
    body_.step(action, config_, rng_);
    advance(false);
    return {observation(), features_at(body_.position()), done()};
  }

  bool in_gray(const Point& p) const {
    return std::any_of(config_.gray_regions.begin(), config_.gray_regions.end(),
                       [&](const Rect& r) { return r.contains(p); });
  }

  // [-||p - g||^2, 1_gray]
  Vec features_at(const Point& p) const {
    const double dx = p[0] - config_.goal[0], dy = p[1] - config_.goal[1];
    return (Vec(2) << -(dx * dx + dy * dy), in_gray(p) ? 1.0 : 0.0).finished();
  }

  const EnvConfig& config() const override { return config_; }
  ActionSpace action_space() const override { return {false, 2}; }
  Eigen::Index observation_dim() const override { return 4; }
  std::vector<std::string> feature_names() const override { return {"neg_sq_dist", "gray"}; }
  int gray_feature() const override { return 1; }

  Vec observation_scale() const override {
    const double span = std::max({1.0, std::abs(config_.start[0] - config_.goal[0]),
                                  std::abs(config_.start[1] - config_.goal[1])});
    const double speed = std::max(1e-9, config_.dt / std::max(config_.drag, 1e-3));
    return (Vec(4) << span, span, speed, speed).finished();
  }

  const PointBody& body() const { return body_; }

 private:
  Vec observation() const {
    const auto& p = body_.position();
    const auto& v = body_.velocity();
    return (Vec(4) << p[0], p[1], v[0], v[1]).finished();
  }

  EnvConfig config_;
  PointBody body_;
  Rng rng_;
};

class TrashBot final : public Environment {
 public:
  enum Feature { kGray = 0, kWhite = 1, kTrash = 2 };

  explicit TrashBot(EnvConfig config = EnvConfig::defaults(EnvId::TrashBot)) : config_(std::move(config)) {
    config_.validate();
  }

  EnvState reset(std::uint64_t seed) override {
    rng_.seed(seed);
    body_.reset(config_.start);
    spawn_trash();
    begin_episode();
    return {observation(), Vec::Zero(3), false};
  }

  EnvState step(const Vec& action) override {
    check_can_step();
    body_.step(action, config_, rng_);
    const Point& p = body_.position();
    Vec phi = Vec::Zero(3);
    phi[in_white(p) ? kWhite : kGray] = 1.0;
    if (std::hypot(p[0] - trash_[0], p[1] - trash_[1]) <= config_.pickup_radius) {
      phi[kTrash] = 1.0;
      spawn_trash();
    }
    advance(false);
    return {observation(), phi, done()};
  }

  bool in_white(const Point& p) const { return config_.white_region.contains(p); }
  const Point& trash() const { return trash_; }
  const PointBody& body() const { return body_; }

  const EnvConfig& config() const override { return config_; }
  ActionSpace action_space() const override { return {false, 2}; }
  // [position, velocity, trash, trash - position]
  Eigen::Index observation_dim() const override { return 8; }
  std::vector<std::string> feature_names() const override { return {"gray", "white", "trash"}; }
  int gray_feature() const override { return kGray; }
  int trash_feature() const override { return kTrash; }

  Vec observation_scale() const override {
    const auto& w = config_.white_region;
    const double span = std::max(w.x_max - w.x_min, w.y_max - w.y_min) / 2.0;
    const double speed = config_.dt / std::max(config_.drag, 1e-3);
    Vec s(8);
    s << span, span, speed, speed, span, span, span, span;
    return s;
  }

 private:
  // Uniform over the white region, but never within reach of the robot.
  void spawn_trash() {
    const auto& w = config_.white_region;
    const Point& p = body_.position();
    std::uniform_real_distribution<double> ux(w.x_min, w.x_max), uy(w.y_min, w.y_max);
    for (int attempt = 0;; ++attempt) {
      if (attempt == 100000) throw ParameterError("white region leaves no room to place trash");
      trash_ = {ux(rng_), uy(rng_)};
      if (in_white(trash_) && std::hypot(trash_[0] - p[0], trash_[1] - p[1]) > config_.pickup_radius) return;
    }
  }

  Vec observation() const {
    const auto& p = body_.position();
    const auto& v = body_.velocity();
    Vec o(8);
    o << p[0], p[1], v[0], v[1], trash_[0], trash_[1], trash_[0] - p[0], trash_[1] - p[1];
    return o;
  }

  EnvConfig config_;
  PointBody body_;
  Point trash_{};
  Rng rng_;
};

inline std::unique_ptr<Environment> make_environment(const EnvConfig& config) {
  switch (config.id) {
    case EnvId::CartPole: return std::make_unique<CartPole>(config);
    case EnvId::Pointmass: return std::make_unique<Pointmass>(config);
    case EnvId::TrashBot: return std::make_unique<TrashBot>(config);
  }
  throw ParameterError("unknown environment id");
}

// ---- recorded episodes --------------------------------------------------------

struct Transition {
  Vec observation;  // before the action
  Vec action;
  Vec features;     // of the resulting step
};

using Episode = std::vector<Transition>;

inline FeatureSequence episode_features(const Episode& episode) {
  if (episode.empty()) throw DataError("episode has no steps");
  FeatureSequence f(static_cast<Eigen::Index>(episode.size()), episode.front().features.size());
  for (std::size_t t = 0; t < episode.size(); ++t) f.row(static_cast<Eigen::Index>(t)) = episode[t].features.transpose();
  return f;
}

// Runs one episode to completion with a state-feedback controller.
template <class Controller>
Episode run_episode(Environment& env, std::uint64_t seed, Controller&& controller) {
  Episode episode;
  EnvState s = env.reset(seed);
  while (!s.done) {
    Vec a = controller(env, s.observation);
    EnvState next = env.step(a);
    episode.push_back({std::move(s.observation), std::move(a), next.features});
    s = std::move(next);
  }
  return episode;
}

// Columns: episode, t, obs_*, act_*, feat_*.
inline std::string trajectories_to_csv(const std::vector<Episode>& episodes, const std::vector<std::string>& feature_names) {
  std::ostringstream out;
  out.precision(17);
  if (episodes.empty() || episodes.front().empty()) return "episode,t\n";
  const auto& first = episodes.front().front();
  out << "episode,t";
  for (Eigen::Index i = 0; i < first.observation.size(); ++i) out << ",obs_" << i;
  for (Eigen::Index i = 0; i < first.action.size(); ++i) out << ",act_" << i;
  for (const auto& n : feature_names) out << ",feat_" << n;
  out << '\n';
  for (std::size_t e = 0; e < episodes.size(); ++e)
    for (std::size_t t = 0; t < episodes[e].size(); ++t) {
      const auto& tr = episodes[e][t];
      out << e << ',' << t;
      for (double v : tr.observation) out << ',' << v;
      for (double v : tr.action) out << ',' << v;
      for (double v : tr.features) out << ',' << v;
      out << '\n';
    }
  return out.str();
}

inline void write_trajectories_csv(const std::filesystem::path& path, const std::vector<Episode>& episodes,
                                   const std::vector<std::string>& feature_names) {
  write_text_atomic(path, trajectories_to_csv(episodes, feature_names));
}

// ---- scripted TrashBot demonstrations ----------------------------------------

enum class DemoVariant { All, TrashVsIdle, WhiteVsGray, MoreTrashLessGray };

namespace detail {

// PD steering towards a target point.
inline Vec steer_to(const PointBody& body, const Point& target, double kp = 8.0, double kd = 4.0) {
  Vec a(2);
  for (int k = 0; k < 2; ++k)
    a[k] = std::clamp(kp * (target[k] - body.position()[k]) - kd * body.velocity()[k], -1.0, 1.0);
  return a;
}

inline Episode scripted_episode(TrashBot& env, std::uint64_t seed, const auto& target_of) {
  return run_episode(env, seed, [&](Environment&, const Vec&) {
    return steer_to(env.body(), target_of(env, env.steps_taken()));
  });
}

}  // namespace detail

// Three labelled pairs of scripted demonstrations:
//   trash collection over idling at the start,
//   loitering in the white region over loitering in the gray border,
//   collecting trash over collecting a little and then drifting into gray.
inline PreferenceDataset scripted_demos(const EnvConfig& config, DemoVariant variant, std::uint64_t seed,
                                        std::vector<Episode>* episodes_out = nullptr) {
  if (config.id != EnvId::TrashBot) throw ParameterError("scripted demos are only available for trashbot");
  TrashBot env(config);
  const auto& white = env.config().white_region;
  const double cx = 0.5 * (white.x_min + white.x_max), cy = 0.5 * (white.y_min + white.y_max);
  const double hx = 0.5 * (white.x_max - white.x_min), hy = 0.5 * (white.y_max - white.y_min);

  const auto chase = [](const TrashBot& e, int) { return e.trash(); };
  const auto idle = [&](const TrashBot&, int) { return env.config().start; };
  const auto loiter_white = [=](const TrashBot&, int t) {
    const double a = 2.0 * std::numbers::pi * t / 50.0;
    return Point{cx + 0.4 * hx * std::cos(a), cy + 0.4 * hy * std::sin(a)};
  };
  const auto loiter_gray = [=](const TrashBot&, int t) {
    const double a = 2.0 * std::numbers::pi * t / 50.0;
    return Point{white.x_max + 0.3 * hx + 0.1 * hx * std::cos(a), cy + 0.1 * hy * std::sin(a)};
  };
  const auto chase_then_gray = [=](const TrashBot& e, int t) {
    return t < 30 ? e.trash() : Point{white.x_max + 0.3 * hx, cy};
  };

  std::vector<Episode> episodes;
  std::vector<std::pair<std::size_t, std::size_t>> prefs;
  const auto add_pair = [&](const auto& preferred, const auto& rejected, std::uint64_t s) {
    episodes.push_back(detail::scripted_episode(env, s, preferred));
    episodes.push_back(detail::scripted_episode(env, s, rejected));
    prefs.emplace_back(episodes.size() - 2, episodes.size() - 1);
  };
  if (variant == DemoVariant::All || variant == DemoVariant::TrashVsIdle) add_pair(chase, idle, mix_seed(seed, 0));
  if (variant == DemoVariant::All || variant == DemoVariant::WhiteVsGray)
    add_pair(loiter_white, loiter_gray, mix_seed(seed, 1));
  if (variant == DemoVariant::All || variant == DemoVariant::MoreTrashLessGray)
    add_pair(chase, chase_then_gray, mix_seed(seed, 2));

  PreferenceDataset data;
  data.feature_dim = env.feature_dim();
  for (const auto& e : episodes) data.trajectories.push_back(episode_features(e));
  data.preferences = std::move(prefs);
  data.validate();
  if (episodes_out) *episodes_out = std::move(episodes);
  return data;
}

inline PreferenceDataset scripted_demos(EnvId id, DemoVariant variant, std::uint64_t seed,
                                        std::vector<Episode>* episodes_out = nullptr) {
  return scripted_demos(EnvConfig::defaults(id), variant, seed, episodes_out);
}

// ---- config serialisation ------------------------------------------------------

inline Json rect_to_json(const Rect& r) { return Json::array({r.x_min, r.x_max, r.y_min, r.y_max}); }

inline Rect rect_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) throw ConfigError("rectangle must be [x_min, x_max, y_min, y_max]");
  Rect r{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  r.validate();
  return r;
}

inline Json env_config_to_json(const EnvConfig& c) {
  Json gray = Json::array();
  for (const auto& r : c.gray_regions) gray.push_back(rect_to_json(r));
  return {{"id", to_string(c.id)},   {"horizon", c.horizon},       {"drag", c.drag},
          {"noise", c.noise},        {"dt", c.dt},                 {"start", c.start},
          {"goal", c.goal},          {"gray_regions", gray},       {"white_region", rect_to_json(c.white_region)},
          {"pickup_radius", c.pickup_radius}};
}

// Missing keys fall back to the defaults of the named environment.
inline EnvConfig env_config_from_json(const Json& j) {
  try {
    EnvConfig c = EnvConfig::defaults(env_id_from_string(j.at("id").get<std::string>()));
    if (j.contains("horizon")) c.horizon = j["horizon"].get<int>();
    if (j.contains("drag")) c.drag = j["drag"].get<double>();
    if (j.contains("noise")) c.noise = j["noise"].get<double>();
    if (j.contains("dt")) c.dt = j["dt"].get<double>();
    if (j.contains("start")) c.start = j["start"].get<Point>();
    if (j.contains("goal")) c.goal = j["goal"].get<Point>();
    if (j.contains("gray_regions")) {
      c.gray_regions.clear();
      for (const auto& r : j["gray_regions"]) c.gray_regions.push_back(rect_from_json(r));
    }
    if (j.contains("white_region")) c.white_region = rect_from_json(j["white_region"]);
    if (j.contains("pickup_radius")) c.pickup_radius = j["pickup_radius"].get<double>();
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid env config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("invalid env config: ") + e.what());
  }
}

}  // namespace broil
