#pragma once

// Learned coordinate selection: a position scorer over the masked model's
// hidden states, edit-distance rewards, rollouts and PPO training.

#include <cstddef>
#include <deque>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "seqgen/decoding.hpp"
#include "seqgen/models.hpp"
#include "seqgen/nn.hpp"
#include "seqgen/selection.hpp"

namespace seqgen {

/// Levenshtein distance with unit costs. <mask> is an ordinary symbol.
std::size_t edit_distance(const Sequence& a, const Sequence& b);

/// d_edit(before, ref) - d_edit(after, ref).
double step_reward(const Sequence& before, const Sequence& after, const Sequence& ref);

struct PolicyDims {
  std::size_t hidden_size = 64;  // d of the masked model
  std::size_t width = 128;
  std::size_t history = 0;       // k
  std::size_t max_steps = 64;    // rows of the step embedding
};

/// Snapshot of what the policy sees at one state.
struct PolicyInput {
  nn::Tensor2D hidden;                   // L x d
  std::vector<std::size_t> history_steps;  // 1-based steps of the last k selections
  nn::Tensor2D history_hidden;           // matching hidden vectors, one per row

  static PolicyInput from_state(SelectionState& state, std::size_t k);
};

/// f(h_i, hbar) = w2 . tanh(W1^T [h_i; hbar] + b1), with
/// hbar = mean over the history of (emb(step) + h). The output layer starts
/// at zero so an untrained policy is uniform.
class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(const PolicyDims& dims, Rng& rng);

  const PolicyDims& dims() const { return dims_; }
  Eigen::VectorXd summary(const PolicyInput& in) const;
  std::vector<double> logits(const PolicyInput& in) const;

  /// Adds d/dtheta of sum_i g_i * logit_i into the parameter gradients.
  void backward(const PolicyInput& in, const std::vector<double>& dlogits);
  /// Adds the step-embedding gradient for an upstream gradient on hbar.
  void backward_summary(const PolicyInput& in, const Eigen::VectorXd& dsummary);

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;

 private:
  PolicyDims dims_;
  nn::Parameter emb_, w1_, b1_, w2_;
};

/// V(s) = v . [mean_i h_i; hbar] + c.
class ValueNet {
 public:
  ValueNet() = default;
  explicit ValueNet(std::size_t hidden_size);

  double value(const PolicyInput& in, const Eigen::VectorXd& summary) const;
  /// Accumulates parameter gradients and returns d value / d summary.
  Eigen::VectorXd backward(const PolicyInput& in, const Eigen::VectorXd& summary, double dvalue);

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;

 private:
  nn::Parameter v_, c_;
};

/// Softmax of the policy logits over `eligible` (aligned with it).
std::vector<double> policy_distribution(const PolicyNet& policy, const PolicyInput& in,
                                        const std::vector<std::size_t>& eligible);

/// Plugs a trained policy into decoding. Positions are ranked by logit.
class PolicySelector : public LearnedSelector {
 public:
  PolicySelector(std::shared_ptr<const PolicyNet> net, std::string label)
      : net_(std::move(net)), label_(std::move(label)) {}
  std::vector<double> position_logits(SelectionState& state) const override;
  std::string describe() const override { return label_; }
  const PolicyNet& net() const { return *net_; }

 private:
  std::shared_ptr<const PolicyNet> net_;
  std::string label_;
};

struct Transition {
  std::uint64_t serial = 0;  // insertion number in the buffer
  PolicyInput input;
  std::vector<std::size_t> eligible;
  std::size_t action = 0;    // position
  double old_log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  double ret = 0.0;
  double advantage = 0.0;
};

struct Episode {
  Sequence source;
  Sequence reference;
  GenerationTrace trace;
  std::vector<Transition> steps;

  double total_reward() const;
};

/// One linear-time pass at the reference length: positions drawn from the
/// policy over unfilled positions (or its argmax when `greedy_actions`),
/// symbols greedy, rewards from step_reward.
Episode rollout(const PolicyNet& policy, const ValueNet& value, const MaskedConditionalModel& model,
                const Sequence& x, const Sequence& ref, Rng& rng, bool greedy_actions = false);

enum class AdvantageEstimator { monte_carlo, gae };

/// Fills ret and advantage. monte_carlo: G_t = sum gamma^k r_{t+k},
/// A_t = G_t - V_t. gae: A_t = sum (gamma*lambda)^k delta_{t+k}, G_t = A_t + V_t.
void compute_advantages(Episode& ep, double gamma, AdvantageEstimator est = AdvantageEstimator::monte_carlo,
                        double lambda = 0.95);

class FifoBuffer {
 public:
  explicit FifoBuffer(std::size_t capacity);
  void push(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }
  std::uint64_t next_serial() const { return next_serial_; }

 private:
  std::size_t capacity_;
  std::uint64_t next_serial_ = 0;
  std::deque<Transition> items_;
};

struct PpoConfig {
  double clip_epsilon = 0.2;
  double gamma = 0.9;
  std::size_t history = 0;
  std::size_t width = 128;
  std::size_t generation_batch = 16;
  std::size_t buffer_capacity = 1000;
  std::size_t update_batch = 128;
  std::size_t updates_per_round = 4;
  double value_weight = 0.5;
  AdvantageEstimator estimator = AdvantageEstimator::monte_carlo;
  double gae_lambda = 0.95;
  std::size_t iterations = 200;
  nn::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  void validate() const;
};

struct PpoLoss {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
};

/// Per-transition clipped surrogate min(rho*A, clip(rho, 1-eps, 1+eps)*A).
double clipped_surrogate(double rho, double advantage, double eps);

/// -mean clipped surrogate + value_weight * mean (V - G)^2 over `batch`.
/// Adds gradients into the networks' Parameter::grad when `accumulate`.
PpoLoss ppo_loss(const std::vector<const Transition*>& batch, PolicyNet& policy, ValueNet& value,
                 const PpoConfig& cfg, bool accumulate);

struct PpoIterationLog {
  std::size_t iteration = 0;
  double mean_reward = 0.0;
  double value_loss = 0.0;
  double policy_loss = 0.0;
  double clip_fraction = 0.0;
};

struct PolicyTrainReport {
  std::vector<PpoIterationLog> curve;
  std::size_t episodes = 0;
  /// Episodes whose undiscounted reward sum differed from
  /// d_edit(Y^1, ref) - d_edit(Y^{T+1}, ref).
  std::size_t telescoping_violations = 0;
  /// Episodes whose stored behavior log-probs differed from a recomputation
  /// right after the rollout.
  std::size_t on_policy_violations = 0;
};

struct TrainedPolicy {
  std::shared_ptr<PolicyNet> policy;
  std::shared_ptr<ValueNet> value;
};

/// Alternates rollout batches into the FIFO buffer with PPO updates on
/// batches sampled from it. `on_iteration` sees every log entry.
TrainedPolicy train_policy(const MaskedConditionalModel& model, const Corpus& corpus,
                           const PpoConfig& cfg, PolicyTrainReport* report = nullptr,
                           const std::function<void(const PpoIterationLog&)>& on_iteration = {});

/// CSV header and row for the training log.
std::string ppo_log_header();
std::string ppo_log_row(const PpoIterationLog& row);

/// Mean over pairs of the undiscounted episode reward of one linear-time
/// decode per pair at the reference length, L - d_edit(final, ref).
double mean_episode_reward(const MaskedConditionalModel& model, const Corpus& pairs,
                           const StrategyConfig& strategy, std::uint64_t seed, std::size_t workers = 1);

nn::Checkpoint policy_to_checkpoint(const TrainedPolicy& p);
TrainedPolicy policy_from_checkpoint(const nn::Checkpoint& ckpt);

/// Loader suitable for parse_strategy("policy:<path>").
std::shared_ptr<const LearnedSelector> load_policy_selector(const std::string& path);

}  // namespace seqgen
