#pragma once

// Two-hidden-layer tanh MLPs with hand-written reverse passes: a stochastic
// policy (categorical or diagonal Gaussian head) and a multi-head value
// function with one output per reward hypothesis.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "broil/environments.hpp"
#include "broil/errors.hpp"
#include "broil/json_io.hpp"
#include "broil/types.hpp"

namespace broil {

inline constexpr int kHiddenUnits = 64;
inline constexpr double kInitialLogStd = -0.5;

// Fully connected network. Parameters live in one flat vector laid out layer
// by layer as [W (out x in, column-major), b].
class Mlp {
 public:
  struct Cache {
    std::vector<Mat> activations;  // input, hidden layers, output; columns are samples
  };

  Mlp() = default;
  explicit Mlp(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw ParameterError("an MLP needs at least an input and an output layer");
    for (int s : sizes_)
      if (s <= 0) throw ParameterError("layer sizes must be positive");
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::size_t layers() const { return sizes_.size() - 1; }

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < layers(); ++l) n += static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1);
    return n;
  }

  // Orthogonal weights scaled by gain (hidden layers use hidden_gain, the
  // last layer output_gain), zero biases.
  void init(Eigen::Ref<Vec> theta, Rng& rng, double hidden_gain, double output_gain) const {
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t l = 0; l < layers(); ++l) {
      const int in = sizes_[l], out = sizes_[l + 1];
      const int big = std::max(in, out), small = std::min(in, out);
      Mat g(big, small);
      for (Eigen::Index j = 0; j < g.cols(); ++j)
        for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = n(rng);
      Eigen::HouseholderQR<Mat> qr(g);
      Mat q = qr.householderQ() * Mat::Identity(big, small);
      const Mat r = qr.matrixQR().topRows(small).template triangularView<Eigen::Upper>();
      for (int j = 0; j < small; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
      const double gain = l + 1 == layers() ? output_gain : hidden_gain;
      Mat w = out >= in ? Mat(q) : Mat(q.transpose());
      weight(theta, l) = gain * w;
      bias(theta, l).setZero();
    }
  }

  Mat forward(const Eigen::Ref<const Vec>& theta, const Mat& x, Cache* cache = nullptr) const {
    check(theta, x);
    Mat h = x;
    if (cache) {
      cache->activations.clear();
      cache->activations.push_back(h);
    }
    for (std::size_t l = 0; l < layers(); ++l) {
      Mat z = weight(theta, l) * h;
      z.colwise() += bias(theta, l);
      if (l + 1 < layers()) z = z.array().tanh().matrix();
      h = std::move(z);
      if (cache) cache->activations.push_back(h);
    }
    return h;
  }

  // Adds to grad the parameter gradient of sum_b <d_out[:, b], y[:, b]>.
  void backward(const Eigen::Ref<const Vec>& theta, const Cache& cache, Mat d_out, Eigen::Ref<Vec> grad) const {
    for (std::size_t l = layers(); l-- > 0;) {
      const Mat& in = cache.activations[l];
      weight(grad, l) += d_out * in.transpose();
      bias(grad, l) += d_out.rowwise().sum();
      if (l == 0) break;
      Mat d_in = weight(theta, l).transpose() * d_out;
      d_out = d_in.array() * (1.0 - in.array().square());
    }
  }

 private:
  Eigen::Index offset(std::size_t layer) const {
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1);
    return off;
  }
  Eigen::Map<const Mat> weight(const Eigen::Ref<const Vec>& theta, std::size_t l) const {
    return {theta.data() + offset(l), sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<Mat> weight(Eigen::Ref<Vec> theta, std::size_t l) const {
    return {theta.data() + offset(l), sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<const Vec> bias(const Eigen::Ref<const Vec>& theta, std::size_t l) const {
    return {theta.data() + offset(l) + static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]};
  }
  Eigen::Map<Vec> bias(Eigen::Ref<Vec> theta, std::size_t l) const {
    return {theta.data() + offset(l) + static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]};
  }
  void check(const Eigen::Ref<const Vec>& theta, const Mat& x) const {
    if (theta.size() < param_count()) throw DataError("parameter vector too short for network");
    if (x.rows() != input_dim())
      throw DataError("input dimension " + std::to_string(x.rows()) + " does not match network input " +
                      std::to_string(input_dim()));
  }

  std::vector<int> sizes_;
};

inline std::vector<int> hidden_architecture(int in, int out) { return {in, kHiddenUnits, kHiddenUnits, out}; }

struct SampledAction {
  Vec action;
  double log_prob = 0.0;
};

// Stochastic policy. theta = [MLP parameters, log_std (Gaussian only)].
class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(int obs_dim, ActionSpace space, std::vector<int> layer_sizes = {})
      : space_(space),
        net_(layer_sizes.empty() ? hidden_architecture(obs_dim, space.size) : std::move(layer_sizes)) {
    if (space_.size <= 0) throw ParameterError("action space must be non-empty");
    if (net_.input_dim() != obs_dim || net_.output_dim() != space_.size)
      throw ParameterError("policy layer sizes do not match observation/action dimensions");
    theta_ = Vec::Zero(net_.param_count() + (space_.discrete ? 0 : space_.size));
    if (!space_.discrete) log_std().setConstant(kInitialLogStd);
  }

  void init(Rng& rng) {
    net_.init(theta_.head(net_.param_count()), rng, 1.0, 0.01);
    if (!space_.discrete) log_std().setConstant(kInitialLogStd);
  }

  const ActionSpace& action_space() const { return space_; }
  const Mlp& mlp() const { return net_; }
  int obs_dim() const { return net_.input_dim(); }
  int action_dim() const { return space_.discrete ? 1 : space_.size; }
  const Vec& params() const { return theta_; }
  Vec& params() { return theta_; }
  void set_params(Vec theta) {
    if (theta.size() != theta_.size()) throw DataError("policy parameter vector has the wrong size");
    theta_ = std::move(theta);
  }

  Eigen::Map<Vec> log_std() { return {theta_.data() + net_.param_count(), space_.discrete ? 0 : space_.size}; }
  Eigen::Map<const Vec> log_std() const {
    return {theta_.data() + net_.param_count(), space_.discrete ? 0 : space_.size};
  }

  // Logits (categorical) or means (Gaussian), one column per observation.
  Mat head(const Mat& obs) const { return net_.forward(theta_.head(net_.param_count()), obs); }

  // Actions are stored one column per sample: a row of indices (categorical)
  // or the continuous action vectors.
  Vec log_prob_batch(const Mat& obs, const Mat& actions) const {
    const Mat y = head(obs);
    return log_prob_from_head(y, actions);
  }

  double log_prob(const Vec& obs, const Vec& action) const { return log_prob_batch(obs, action)[0]; }

  // Forward pass kept for a later reverse pass.
  struct BatchEval {
    Mlp::Cache cache;
    Vec log_probs;
  };

  BatchEval evaluate(const Mat& obs, const Mat& actions) const {
    BatchEval e;
    net_.forward(theta_.head(net_.param_count()), obs, &e.cache);
    e.log_probs = log_prob_from_head(e.cache.activations.back(), actions);
    return e;
  }

  // sum_b weights[b] * grad log pi(actions[:, b] | obs[:, b]).
  Vec weighted_log_prob_grad(const BatchEval& eval, const Mat& actions, const Vec& weights) const {
    const Mat& y = eval.cache.activations.back();
    if (weights.size() != y.cols()) throw DataError("one weight per sample is required");
    Mat dy(y.rows(), y.cols());
    Vec grad = Vec::Zero(theta_.size());
    if (space_.discrete) {
      for (Eigen::Index b = 0; b < y.cols(); ++b) {
        const Vec p = softmax(y.col(b));
        dy.col(b) = -weights[b] * p;
        dy(action_index(actions(0, b)), b) += weights[b];
      }
    } else {
      const Vec inv_var = (-2.0 * log_std().array()).exp();
      auto g_log_std = Eigen::Map<Vec>(grad.data() + net_.param_count(), space_.size);
      for (Eigen::Index b = 0; b < y.cols(); ++b) {
        const Vec diff = actions.col(b) - y.col(b);
        dy.col(b) = weights[b] * diff.cwiseProduct(inv_var);
        g_log_std.array() += weights[b] * (diff.array().square() * inv_var.array() - 1.0);
      }
    }
    net_.backward(theta_.head(net_.param_count()), eval.cache, std::move(dy), grad.head(net_.param_count()));
    return grad;
  }

  Vec weighted_log_prob_grad(const Mat& obs, const Mat& actions, const Vec& weights) const {
    return weighted_log_prob_grad(evaluate(obs, actions), actions, weights);
  }

  Vec log_prob_grad(const Vec& obs, const Vec& action) const {
    return weighted_log_prob_grad(obs, action, Vec::Ones(1));
  }

  SampledAction sample(const Vec& obs, Rng& rng) const {
    const Vec y = head(obs);
    if (!y.allFinite()) throw NumericalError("policy network produced a non-finite output");
    Vec action;
    if (space_.discrete) {
      const Vec p = softmax(y);
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      Eigen::Index k = 0;
      double cum = p[0];
      while (u >= cum && k + 1 < p.size()) cum += p[++k];
      action = Vec::Constant(1, static_cast<double>(k));
    } else {
      std::normal_distribution<double> n(0.0, 1.0);
      action.resize(space_.size);
      for (Eigen::Index k = 0; k < action.size(); ++k) action[k] = y[k] + std::exp(log_std()[k]) * n(rng);
    }
    return {action, log_prob_from_head(y, action)[0]};
  }

  // Most likely action: argmax logit or the Gaussian mean.
  Vec mode(const Vec& obs) const {
    const Vec y = head(obs);
    if (!space_.discrete) return y;
    Eigen::Index k = 0;
    y.maxCoeff(&k);
    return Vec::Constant(1, static_cast<double>(k));
  }

  double entropy(const Vec& obs) const {
    if (!space_.discrete)
      return log_std().sum() + 0.5 * space_.size * std::log(2.0 * std::numbers::pi * std::numbers::e);
    const Vec p = softmax(head(obs));
    double h = 0.0;
    for (double q : p)
      if (q > 0.0) h -= q * std::log(q);
    return h;
  }

  // log softmax(logits)[k]; log1p keeps near-deterministic policies accurate.
  static double log_softmax_at(const Eigen::Ref<const Vec>& logits, Eigen::Index k) {
    Eigen::Index top = 0;
    const double m = logits.maxCoeff(&top);
    double rest = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i)
      if (i != top) rest += std::exp(logits[i] - m);
    return logits[k] - m - std::log1p(rest);
  }

  static Vec softmax(const Eigen::Ref<const Vec>& logits) {
    const Vec e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
  }

 private:
  static Eigen::Index action_index(double a) { return static_cast<Eigen::Index>(a); }

  Vec log_prob_from_head(const Mat& y, const Mat& actions) const {
    if (actions.cols() != y.cols() || actions.rows() != action_dim())
      throw DataError("action batch does not match observation batch");
    Vec out(y.cols());
    if (space_.discrete) {
      for (Eigen::Index b = 0; b < y.cols(); ++b) {
        const double a = actions(0, b);
        if (a < 0 || a >= space_.size || a != std::floor(a)) throw DataError("categorical action out of range");
        out[b] = log_softmax_at(y.col(b), action_index(a));
      }
    } else {
      const auto ls = log_std();
      const double c = 0.5 * std::log(2.0 * std::numbers::pi);
      const Vec inv_std = (-ls.array()).exp();
      for (Eigen::Index b = 0; b < y.cols(); ++b) {
        const Vec z = (actions.col(b) - y.col(b)).cwiseProduct(inv_std);
        out[b] = -0.5 * z.squaredNorm() - ls.sum() - c * space_.size;
      }
    }
    return out;
  }

  ActionSpace space_{};
  Mlp net_;
  Vec theta_;
};

// Value function with one output head per reward hypothesis.
class ValueNet {
 public:
  ValueNet() = default;
  ValueNet(int obs_dim, int heads, std::vector<int> layer_sizes = {})
      : net_(layer_sizes.empty() ? hidden_architecture(obs_dim, heads) : std::move(layer_sizes)) {
    if (net_.input_dim() != obs_dim || net_.output_dim() != heads)
      throw ParameterError("value layer sizes do not match observation dimension and head count");
    theta_ = Vec::Zero(net_.param_count());
  }

  void init(Rng& rng) { net_.init(theta_, rng, 1.0, 1.0); }

  int heads() const { return net_.output_dim(); }
  const Mlp& mlp() const { return net_; }
  const Vec& params() const { return theta_; }
  Vec& params() { return theta_; }
  void set_params(Vec theta) {
    if (theta.size() != theta_.size()) throw DataError("value parameter vector has the wrong size");
    theta_ = std::move(theta);
  }

  // heads x batch
  Mat forward(const Mat& obs) const { return net_.forward(theta_, obs); }

  // Gradient of 1/2 sum_{b,i} sample_weight * (v_i(obs_b) - target_ib)^2.
  Vec loss_grad(const Mat& obs, const Mat& targets, double sample_weight = 1.0) const {
    Mlp::Cache cache;
    const Mat v = net_.forward(theta_, obs, &cache);
    if (targets.rows() != v.rows() || targets.cols() != v.cols()) throw DataError("value targets have the wrong shape");
    Vec grad = Vec::Zero(theta_.size());
    net_.backward(theta_, cache, sample_weight * (v - targets), grad);
    return grad;
  }

  double loss(const Mat& obs, const Mat& targets) const { return 0.5 * (forward(obs) - targets).squaredNorm(); }

 private:
  Mlp net_;
  Vec theta_;
};

// Adam descent on a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index size, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(Vec::Zero(size)), v_(Vec::Zero(size)) {
    if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
  }

  void descend(Vec& theta, const Vec& grad) {
    if (grad.size() != theta.size() || grad.size() != m_.size()) throw DataError("Adam: size mismatch");
    if (!grad.allFinite()) throw NumericalError("non-finite gradient; update aborted");
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    theta.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

  void ascend(Vec& theta, const Vec& grad) { descend(theta, -grad); }

  double learning_rate() const { return lr_; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  Vec m_, v_;
  long t_ = 0;
};

// ---- checkpoints -------------------------------------------------------------

inline Json policy_to_json(const PolicyNet& p) {
  return {{"kind", "policy"},
          {"discrete", p.action_space().discrete},
          {"action_size", p.action_space().size},
          {"layer_sizes", p.mlp().layer_sizes()},
          {"theta", to_json_array(p.params())}};
}

inline PolicyNet policy_from_json(const Json& j) {
  try {
    if (j.at("kind").get<std::string>() != "policy") throw DataError("checkpoint is not a policy");
    const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
    PolicyNet p(sizes.front(), {j.at("discrete").get<bool>(), j.at("action_size").get<int>()}, sizes);
    p.set_params(vec_from_json(j.at("theta")));
    return p;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed policy checkpoint: ") + e.what());
  }
}

inline Json value_to_json(const ValueNet& v) {
  return {{"kind", "value"}, {"layer_sizes", v.mlp().layer_sizes()}, {"theta", to_json_array(v.params())}};
}

inline ValueNet value_from_json(const Json& j) {
  try {
    if (j.at("kind").get<std::string>() != "value") throw DataError("checkpoint is not a value network");
    const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
    ValueNet v(sizes.front(), sizes.back(), sizes);
    v.set_params(vec_from_json(j.at("theta")));
    return v;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed value checkpoint: ") + e.what());
  }
}

inline void save_policy(const std::filesystem::path& path, const PolicyNet& p) { write_json_file(path, policy_to_json(p)); }
inline PolicyNet load_policy(const std::filesystem::path& path) { return policy_from_json(read_json_file(path)); }

}  // namespace broil
