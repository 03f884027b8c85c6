#include "seqgen/rl.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace seqgen {

std::size_t edit_distance(const Sequence& a, const Sequence& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double step_reward(const Sequence& before, const Sequence& after, const Sequence& ref) {
  return static_cast<double>(edit_distance(before, ref)) - static_cast<double>(edit_distance(after, ref));
}

// ---------------------------------------------------------------------------

PolicyInput PolicyInput::from_state(SelectionState& state, std::size_t k) {
  PolicyInput in;
  in.hidden = state.hidden();
  const auto& hist = state.history();
  const std::size_t n = std::min(k, hist.size());
  in.history_hidden.resize(static_cast<Eigen::Index>(n), in.hidden.cols());
  for (std::size_t j = 0; j < n; ++j) {
    const auto& e = hist[hist.size() - n + j];
    in.history_steps.push_back(e.step);
    in.history_hidden.row(static_cast<Eigen::Index>(j)) = e.hidden.transpose();
  }
  return in;
}

PolicyNet::PolicyNet(const PolicyDims& dims, Rng& rng)
    : dims_(dims),
      emb_("policy.emb", static_cast<Eigen::Index>(std::max<std::size_t>(dims.max_steps, 1)),
           static_cast<Eigen::Index>(dims.hidden_size)),
      w1_("policy.w1", static_cast<Eigen::Index>(2 * dims.hidden_size), static_cast<Eigen::Index>(dims.width)),
      b1_("policy.b1", 1, static_cast<Eigen::Index>(dims.width)),
      w2_("policy.w2", static_cast<Eigen::Index>(dims.width), 1) {
  if (dims.hidden_size == 0 || dims.width == 0) throw InvalidArgument("policy: sizes must be positive");
  for (Eigen::Index k = 0; k < emb_.value.size(); ++k) emb_.value.data()[k] = 0.1 * standard_normal(rng);
  const double s = 1.0 / std::sqrt(static_cast<double>(2 * dims.hidden_size));
  for (Eigen::Index k = 0; k < w1_.value.size(); ++k) w1_.value.data()[k] = s * standard_normal(rng);
}

Eigen::VectorXd PolicyNet::summary(const PolicyInput& in) const {
  Eigen::VectorXd hbar = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dims_.hidden_size));
  const std::size_t n = in.history_steps.size();
  if (n == 0) return hbar;
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = static_cast<Eigen::Index>(std::min(in.history_steps[j], dims_.max_steps) - 1);
    hbar += emb_.value.row(row).transpose() + in.history_hidden.row(static_cast<Eigen::Index>(j)).transpose();
  }
  return hbar / static_cast<double>(n);
}

namespace {

struct PolicyForward {
  Eigen::VectorXd hbar;
  nn::Tensor2D act;  // L x H, tanh outputs
  std::vector<double> logits;
};

}  // namespace

static PolicyForward policy_forward(const nn::Tensor2D& w1, const nn::Tensor2D& b1, const nn::Tensor2D& w2,
                                    const PolicyInput& in, const Eigen::VectorXd& hbar) {
  const Eigen::Index d = in.hidden.cols();
  if (w1.rows() != 2 * d) throw InvalidArgument("policy: hidden size mismatch");
  PolicyForward f;
  f.hbar = hbar;
  const Eigen::RowVectorXd shared = hbar.transpose() * w1.bottomRows(d) + b1;
  nn::Tensor2D z = in.hidden * w1.topRows(d);
  z.rowwise() += shared;
  f.act = z.array().tanh().matrix();
  const Eigen::VectorXd out = f.act * w2;
  f.logits.assign(out.data(), out.data() + out.size());
  return f;
}

std::vector<double> PolicyNet::logits(const PolicyInput& in) const {
  return policy_forward(w1_.value, b1_.value, w2_.value, in, summary(in)).logits;
}

void PolicyNet::backward(const PolicyInput& in, const std::vector<double>& dlogits) {
  const auto f = policy_forward(w1_.value, b1_.value, w2_.value, in, summary(in));
  const Eigen::Index L = in.hidden.rows(), d = in.hidden.cols();
  if (static_cast<Eigen::Index>(dlogits.size()) != L) throw InvalidArgument("policy: gradient size mismatch");
  const Eigen::Map<const Eigen::VectorXd> g(dlogits.data(), L);
  w2_.grad += f.act.transpose() * g;
  nn::Tensor2D dz = g * w2_.value.transpose();
  dz.array() *= 1.0 - f.act.array().square();
  const Eigen::RowVectorXd dz_sum = dz.colwise().sum();
  b1_.grad += dz_sum;
  w1_.grad.topRows(d) += in.hidden.transpose() * dz;
  w1_.grad.bottomRows(d) += f.hbar * dz_sum;
  if (!in.history_steps.empty()) backward_summary(in, w1_.value.bottomRows(d) * dz_sum.transpose());
}

void PolicyNet::backward_summary(const PolicyInput& in, const Eigen::VectorXd& dsummary) {
  const std::size_t n = in.history_steps.size();
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = static_cast<Eigen::Index>(std::min(in.history_steps[j], dims_.max_steps) - 1);
    emb_.grad.row(row) += dsummary.transpose() / static_cast<double>(n);
  }
}

std::vector<nn::Parameter*> PolicyNet::parameters() { return {&emb_, &w1_, &b1_, &w2_}; }
std::vector<const nn::Parameter*> PolicyNet::parameters() const { return {&emb_, &w1_, &b1_, &w2_}; }

ValueNet::ValueNet(std::size_t hidden_size)
    : v_("value.v", static_cast<Eigen::Index>(2 * hidden_size), 1), c_("value.c", 1, 1) {}

static Eigen::VectorXd value_features(const PolicyInput& in, const Eigen::VectorXd& summary) {
  Eigen::VectorXd u(2 * in.hidden.cols());
  u << in.hidden.colwise().mean().transpose(), summary;
  return u;
}

double ValueNet::value(const PolicyInput& in, const Eigen::VectorXd& summary) const {
  if (v_.value.rows() != 2 * in.hidden.cols()) throw InvalidArgument("value: hidden size mismatch");
  return v_.value.col(0).dot(value_features(in, summary)) + c_.value(0, 0);
}

Eigen::VectorXd ValueNet::backward(const PolicyInput& in, const Eigen::VectorXd& summary, double dvalue) {
  v_.grad.col(0) += dvalue * value_features(in, summary);
  c_.grad(0, 0) += dvalue;
  return dvalue * v_.value.col(0).tail(summary.size());
}

std::vector<nn::Parameter*> ValueNet::parameters() { return {&v_, &c_}; }
std::vector<const nn::Parameter*> ValueNet::parameters() const { return {&v_, &c_}; }

namespace {

std::vector<double> eligible_log_probs(const std::vector<double>& logits,
                                       const std::vector<std::size_t>& eligible) {
  if (eligible.empty()) throw InvalidArgument("policy: no eligible positions");
  std::vector<double> sub;
  sub.reserve(eligible.size());
  for (std::size_t i : eligible) sub.push_back(logits.at(i));
  return nn::log_softmax(sub);
}

}  // namespace

std::vector<double> policy_distribution(const PolicyNet& policy, const PolicyInput& in,
                                        const std::vector<std::size_t>& eligible) {
  auto lp = eligible_log_probs(policy.logits(in), eligible);
  for (double& v : lp) v = std::exp(v);
  return lp;
}

std::vector<double> PolicySelector::position_logits(SelectionState& state) const {
  return net_->logits(PolicyInput::from_state(state, net_->dims().history));
}

// ---------------------------------------------------------------------------

double Episode::total_reward() const {
  double s = 0.0;
  for (const auto& t : steps) s += t.reward;
  return s;
}

Episode rollout(const PolicyNet& policy, const ValueNet& value, const MaskedConditionalModel& model,
                const Sequence& x, const Sequence& ref, Rng& rng, bool greedy_actions) {
  const std::size_t L = ref.size();
  if (L == 0 || L > model.max_length()) throw InvalidLength("rollout: reference length out of range");
  const auto& vocab = model.vocab();
  Episode ep;
  ep.source = x;
  ep.reference = ref;
  ep.trace = start_trace(x, L, 0.0, vocab);
  SelectionState state(model, x, L);
  for (std::size_t t = 0; t < L; ++t) {
    Transition tr;
    tr.eligible = state.eligible(SelectionScope::without_replacement, 1);
    tr.input = PolicyInput::from_state(state, policy.dims().history);
    const Eigen::VectorXd hbar = policy.summary(tr.input);
    const auto logp = eligible_log_probs(policy.logits(tr.input), tr.eligible);
    std::size_t j = 0;
    if (greedy_actions) {
      for (std::size_t e = 1; e < logp.size(); ++e)
        if (logp[e] > logp[j]) j = e;
    } else {
      std::vector<double> w(logp.size());
      for (std::size_t e = 0; e < w.size(); ++e) w[e] = std::exp(logp[e]);
      j = sample_categorical(rng, w);
    }
    tr.action = tr.eligible[j];
    tr.old_log_prob = logp[j];
    tr.value = value.value(tr.input, hbar);

    const Row row = state.symbol_rows({tr.action})[0];
    const TokenId tok = greedy_symbol(row, vocab);
    const Sequence before = state.y();
    GenerationStep step;
    step.coords = CoordinateMask::from_positions(L, {tr.action});
    step.replacements[tr.action] = tok;
    step.coord_log_prob = greedy_actions ? 0.0 : logp[j];
    step.symbol_log_prob = std::log(row[tok]);
    state.advance(step.replacements);
    push_step(ep.trace, std::move(step));
    tr.reward = step_reward(before, state.y(), ref);
    ep.steps.push_back(std::move(tr));
  }
  return ep;
}

void compute_advantages(Episode& ep, double gamma, AdvantageEstimator est, double lambda) {
  const std::size_t n = ep.steps.size();
  if (est == AdvantageEstimator::monte_carlo) {
    double g = 0.0;
    for (std::size_t t = n; t-- > 0;) {
      g = ep.steps[t].reward + gamma * g;
      ep.steps[t].ret = g;
      ep.steps[t].advantage = g - ep.steps[t].value;
    }
    return;
  }
  double a = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double next_v = t + 1 < n ? ep.steps[t + 1].value : 0.0;
    const double delta = ep.steps[t].reward + gamma * next_v - ep.steps[t].value;
    a = delta + gamma * lambda * a;
    ep.steps[t].advantage = a;
    ep.steps[t].ret = a + ep.steps[t].value;
  }
}

FifoBuffer::FifoBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw InvalidArgument("buffer: capacity must be positive");
}

void FifoBuffer::push(Transition t) {
  t.serial = next_serial_++;
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(t));
}

void PpoConfig::validate() const {
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw InvalidArgument("ppo: clip epsilon must lie in (0, 1)");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("ppo: gamma must lie in [0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw InvalidArgument("ppo: lambda must lie in [0, 1]");
  if (width == 0 || generation_batch == 0 || buffer_capacity == 0 || update_batch == 0)
    throw InvalidArgument("ppo: sizes must be positive");
  if (!(value_weight >= 0.0)) throw InvalidArgument("ppo: value weight must be nonnegative");
  adam.validate();
}

double clipped_surrogate(double rho, double advantage, double eps) {
  const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps);
  return std::min(rho * advantage, clipped * advantage);
}

PpoLoss ppo_loss(const std::vector<const Transition*>& batch, PolicyNet& policy, ValueNet& value,
                 const PpoConfig& cfg, bool accumulate) {
  if (batch.empty()) throw InvalidArgument("ppo: empty batch");
  const double n = static_cast<double>(batch.size());
  const double eps = cfg.clip_epsilon;
  PpoLoss out;
  std::size_t clipped = 0;
  for (const Transition* tr : batch) {
    const Eigen::VectorXd hbar = policy.summary(tr->input);
    const auto logits = policy.logits(tr->input);
    const auto lp = eligible_log_probs(logits, tr->eligible);
    const auto it = std::find(tr->eligible.begin(), tr->eligible.end(), tr->action);
    if (it == tr->eligible.end()) throw InvalidArgument("ppo: action outside the eligible set");
    const std::size_t j = static_cast<std::size_t>(it - tr->eligible.begin());
    const double rho = std::exp(lp[j] - tr->old_log_prob);
    const double a = tr->advantage;
    out.policy_loss -= clipped_surrogate(rho, a, eps) / n;
    if (rho < 1.0 - eps || rho > 1.0 + eps) ++clipped;
    const double v = value.value(tr->input, hbar);
    out.value_loss += (v - tr->ret) * (v - tr->ret) / n;
    if (!accumulate) continue;

    const double unclipped_term = rho * a;
    const double clipped_term = std::clamp(rho, 1.0 - eps, 1.0 + eps) * a;
    if (unclipped_term <= clipped_term && a != 0.0) {
      const double coef = -a * rho / n;
      std::vector<double> dlogits(logits.size(), 0.0);
      for (std::size_t e = 0; e < tr->eligible.size(); ++e)
        dlogits[tr->eligible[e]] = coef * ((e == j ? 1.0 : 0.0) - std::exp(lp[e]));
      policy.backward(tr->input, dlogits);
    }
    const Eigen::VectorXd dsummary = value.backward(tr->input, hbar, 2.0 * cfg.value_weight * (v - tr->ret) / n);
    policy.backward_summary(tr->input, dsummary);
  }
  out.clip_fraction = static_cast<double>(clipped) / n;
  out.loss = out.policy_loss + cfg.value_weight * out.value_loss;
  return out;
}

// ---------------------------------------------------------------------------

TrainedPolicy train_policy(const MaskedConditionalModel& model, const Corpus& corpus,
                           const PpoConfig& cfg, PolicyTrainReport* report,
                           const std::function<void(const PpoIterationLog&)>& on_iteration) {
  cfg.validate();
  if (corpus.empty()) throw InvalidArgument("train_policy: empty corpus");
  if (!model.has_hidden()) throw InvalidArgument("train_policy: the model exposes no hidden states");
  Rng rng(cfg.seed);
  PolicyDims dims{model.hidden_size(), cfg.width, cfg.history, 2 * model.max_length()};
  TrainedPolicy tp{std::make_shared<PolicyNet>(dims, rng), std::make_shared<ValueNet>(model.hidden_size())};
  auto params = tp.policy->parameters();
  for (auto* p : tp.value->parameters()) params.push_back(p);
  FifoBuffer buffer(cfg.buffer_capacity);
  PolicyTrainReport local;
  PolicyTrainReport& rep = report ? *report : local;
  rep = {};
  std::size_t adam_step = 0;
  const TokenId mask = model.vocab().mask_id();

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::vector<std::size_t> picks(cfg.generation_batch);
    std::vector<std::uint64_t> seeds(cfg.generation_batch);
    for (std::size_t b = 0; b < cfg.generation_batch; ++b) {
      picks[b] = uniform_index(rng, corpus.size());
      seeds[b] = rng();
    }
    std::vector<Episode> episodes(cfg.generation_batch);
    parallel_for(cfg.generation_batch, cfg.workers, [&](std::size_t b) {
      Rng er(seeds[b]);
      const auto& pair = corpus[picks[b]];
      episodes[b] = rollout(*tp.policy, *tp.value, model, pair.source, pair.target, er);
      compute_advantages(episodes[b], cfg.gamma, cfg.estimator, cfg.gae_lambda);
    });

    PpoIterationLog log;
    log.iteration = it;
    for (auto& ep : episodes) {
      const Sequence start(std::vector<TokenId>(ep.reference.size(), mask));
      const double telescoped = static_cast<double>(edit_distance(start, ep.reference)) -
                                static_cast<double>(edit_distance(ep.trace.final_sequence(), ep.reference));
      if (ep.total_reward() != telescoped) ++rep.telescoping_violations;
      for (const auto& tr : ep.steps) {
        const auto lp = eligible_log_probs(tp.policy->logits(tr.input), tr.eligible);
        const auto j = static_cast<std::size_t>(
            std::find(tr.eligible.begin(), tr.eligible.end(), tr.action) - tr.eligible.begin());
        if (lp[j] != tr.old_log_prob) {
          ++rep.on_policy_violations;
          break;
        }
      }
      log.mean_reward += ep.total_reward() / static_cast<double>(episodes.size());
      ++rep.episodes;
      for (auto& tr : ep.steps) buffer.push(std::move(tr));
    }

    for (std::size_t u = 0; u < cfg.updates_per_round; ++u) {
      std::vector<const Transition*> batch;
      const std::size_t bs = std::min(cfg.update_batch, buffer.size());
      for (std::size_t k = 0; k < bs; ++k) batch.push_back(&buffer[uniform_index(rng, buffer.size())]);
      for (auto* p : params) p->zero_grad();
      const auto loss = ppo_loss(batch, *tp.policy, *tp.value, cfg, true);
      ++adam_step;
      for (auto* p : params) nn::adam_update(*p, cfg.adam, adam_step);
      const double w = 1.0 / static_cast<double>(cfg.updates_per_round);
      log.policy_loss += w * loss.policy_loss;
      log.value_loss += w * loss.value_loss;
      log.clip_fraction += w * loss.clip_fraction;
    }
    rep.curve.push_back(log);
    if (on_iteration) on_iteration(log);
  }
  return tp;
}

std::string ppo_log_header() { return "iteration,mean_reward,value_loss,policy_loss,clip_fraction"; }

std::string ppo_log_row(const PpoIterationLog& row) {
  std::ostringstream out;
  out.precision(17);
  out << row.iteration << ',' << row.mean_reward << ',' << row.value_loss << ',' << row.policy_loss << ','
      << row.clip_fraction;
  return out.str();
}

double mean_episode_reward(const MaskedConditionalModel& model, const Corpus& pairs,
                           const StrategyConfig& strategy, std::uint64_t seed, std::size_t workers) {
  if (pairs.empty()) throw InvalidArgument("mean_episode_reward: no pairs");
  std::vector<double> rewards(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    Rng rng(seed + 0x9E3779B97F4A7C15ULL * (i + 1));
    const auto& ref = pairs[i].target;
    DecodeConfig cfg;
    cfg.T = ref.size();
    const auto trace = generate(model, strategy, pairs[i].source, ref.size(), cfg, rng);
    rewards[i] = static_cast<double>(ref.size()) -
                 static_cast<double>(edit_distance(trace.final_sequence(), ref));
  });
  double s = 0.0;
  for (double r : rewards) s += r;
  return s / static_cast<double>(rewards.size());
}

nn::Checkpoint policy_to_checkpoint(const TrainedPolicy& p) {
  nn::Checkpoint ck;
  ck.kind = "policy";
  const auto& d = p.policy->dims();
  ck.meta["hidden_size"] = std::to_string(d.hidden_size);
  ck.meta["width"] = std::to_string(d.width);
  ck.meta["history"] = std::to_string(d.history);
  ck.meta["max_steps"] = std::to_string(d.max_steps);
  auto params = static_cast<const PolicyNet&>(*p.policy).parameters();
  for (auto* q : static_cast<const ValueNet&>(*p.value).parameters()) params.push_back(q);
  nn::export_parameters(params, ck);
  return ck;
}

TrainedPolicy policy_from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.kind != "policy") throw IoError("checkpoint kind '" + ck.kind + "' is not a policy");
  auto get = [&](const std::string& key) -> std::size_t {
    const auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw IoError("policy checkpoint lacks '" + key + "'");
    return static_cast<std::size_t>(std::stoull(it->second));
  };
  PolicyDims dims{get("hidden_size"), get("width"), get("history"), get("max_steps")};
  Rng rng(0);
  TrainedPolicy tp{std::make_shared<PolicyNet>(dims, rng), std::make_shared<ValueNet>(dims.hidden_size)};
  auto params = tp.policy->parameters();
  for (auto* q : tp.value->parameters()) params.push_back(q);
  nn::import_parameters(params, ck);
  return tp;
}

std::shared_ptr<const LearnedSelector> load_policy_selector(const std::string& path) {
  const auto tp = policy_from_checkpoint(nn::load_checkpoint_file(path));
  return std::make_shared<PolicySelector>(tp.policy, path);
}

}  // namespace seqgen
