#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "seqgen/rl.hpp"

using namespace seqgen;

namespace {

// Predicts a fixed reference with certainty; hidden rows encode position and
// whether the position is filled.
class PerfectModel : public MaskedConditionalModel {
 public:
  PerfectModel(Vocabulary v, Sequence ref) : v_(std::move(v)), ref_(std::move(ref)) {}
  const Vocabulary& vocab() const override { return v_; }
  std::size_t max_length() const override { return ref_.size(); }
  std::vector<Row> conditional(const Sequence&, const std::vector<std::size_t>& masked,
                               const Sequence&) const override {
    std::vector<Row> out;
    for (std::size_t i : masked) {
      Row r(v_.size(), 0.0);
      r[ref_[i]] = 1.0;
      out.push_back(r);
    }
    return out;
  }
  bool has_hidden() const override { return true; }
  std::size_t hidden_size() const override { return 4; }
  nn::Tensor2D hidden(const Sequence& y, const Sequence&) const override {
    nn::Tensor2D h(static_cast<Eigen::Index>(y.size()), 4);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double p = static_cast<double>(i);
      h.row(static_cast<Eigen::Index>(i)) << p / static_cast<double>(y.size()),
          y[i] == v_.mask_id() ? 0.0 : 1.0, std::sin(p), std::cos(p);
    }
    return h;
  }

 private:
  Vocabulary v_;
  Sequence ref_;
};

std::size_t edit_oracle(const Sequence& a, std::size_t i, const Sequence& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = edit_oracle(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  return std::min({sub, edit_oracle(a, i + 1, b, j) + 1, edit_oracle(a, i, b, j + 1) + 1});
}

Sequence random_seq(Rng& rng, std::size_t len, std::size_t alphabet) {
  std::vector<TokenId> ids(len);
  for (auto& t : ids) t = static_cast<TokenId>(2 + uniform_index(rng, alphabet));
  return Sequence(ids);
}

PolicyInput random_input(Rng& rng, std::size_t L, std::size_t d, std::size_t hist, std::size_t max_steps) {
  PolicyInput in;
  in.hidden.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < in.hidden.size(); ++k) in.hidden.data()[k] = standard_normal(rng);
  in.history_hidden.resize(static_cast<Eigen::Index>(hist), static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < in.history_hidden.size(); ++k) in.history_hidden.data()[k] = standard_normal(rng);
  for (std::size_t j = 0; j < hist; ++j) in.history_steps.push_back(1 + uniform_index(rng, max_steps));
  return in;
}

void randomize(std::vector<nn::Parameter*> params, Rng& rng, double scale) {
  for (auto* p : params)
    for (Eigen::Index k = 0; k < p->value.size(); ++k) p->value.data()[k] = scale * standard_normal(rng);
}

}  // namespace

TEST_CASE("edit distance") {
  const Sequence abc{2, 3, 4}, ac{2, 4};
  CHECK(edit_distance(abc, abc) == 0);
  CHECK(edit_distance(abc, ac) == 1);
  CHECK(edit_distance(ac, abc) == 1);
  CHECK(edit_distance(Sequence{1, 1, 1, 1}, Sequence{2, 3, 4, 5}) == 4);
  CHECK(edit_distance(Sequence{}, abc) == 3);
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_seq(rng, uniform_index(rng, 7), 3);
    const auto b = random_seq(rng, uniform_index(rng, 7), 3);
    CHECK(edit_distance(a, b) == edit_oracle(a, 0, b, 0));
  }
}

TEST_CASE("step rewards") {
  const TokenId m = 1;
  const Sequence ref{2, 3, 4};
  CHECK(step_reward(Sequence{m, m, m}, Sequence{m, 3, m}, ref) == 1.0);
  CHECK(step_reward(Sequence{2, 3, 4}, Sequence{2, 2, 4}, ref) == -1.0);
  CHECK(step_reward(Sequence{m, m, m}, Sequence{m, 2, m}, ref) == 0.0);
  const Sequence ref2{2, 2, 3};
  const Sequence before{2, 2, 3}, after{2, 3, 3};
  CHECK(step_reward(before, after, ref2) ==
        static_cast<double>(edit_oracle(before, 0, ref2, 0)) - static_cast<double>(edit_oracle(after, 0, ref2, 0)));
}

TEST_CASE("untrained policy is uniform") {
  Rng rng(3);
  PolicyNet net({5, 16, 2, 10}, rng);
  const auto in = random_input(rng, 6, 5, 2, 10);
  const auto p = policy_distribution(net, in, {0, 2, 3, 5});
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(policy_distribution(net, in, {4})[0] == 1.0);
  CHECK_THROWS_AS(policy_distribution(net, in, {}), InvalidArgument);
}

TEST_CASE("policy log-prob gradient matches finite differences") {
  Rng rng(5);
  for (std::size_t hist : {0u, 3u}) {
    PolicyNet net({5, 7, hist, 6}, rng);
    randomize(net.parameters(), rng, 0.5);
    const auto in = random_input(rng, 5, 5, hist, 6);
    const std::vector<std::size_t> elig{0, 1, 3, 4};
    const std::size_t action = 3;
    auto loss = [&] {
      const auto p = policy_distribution(net, in, elig);
      return std::log(p[2]);
    };
    auto analytic = [&] {
      const auto p = policy_distribution(net, in, elig);
      std::vector<double> g(5, 0.0);
      for (std::size_t e = 0; e < elig.size(); ++e) g[elig[e]] = (elig[e] == action ? 1.0 : 0.0) - p[e];
      net.backward(in, g);
    };
    auto params = net.parameters();
    const auto res = nn::gradient_check(params, loss, analytic, rng, 400, 1e-5);
    CHECK(res.max_rel_error < 1e-3);
    CHECK(res.coordinates_checked > 0);
  }
}

TEST_CASE("clipped surrogate arithmetic") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
  CHECK(clipped_surrogate(1.0, 0.7, 0.2) == 0.7);
  CHECK(clipped_surrogate(1.1, -2.0, 0.2) == doctest::Approx(-2.2));
}

TEST_CASE("PPO loss") {
  Rng rng(7);
  PolicyNet net({4, 6, 2, 8}, rng);
  randomize(net.parameters(), rng, 0.5);
  ValueNet val(4);
  randomize(val.parameters(), rng, 0.3);
  PpoConfig cfg;
  std::vector<Transition> trs(12);
  for (auto& tr : trs) {
    tr.input = random_input(rng, 5, 4, 2, 8);
    tr.eligible = {0, 2, 3, 4};
    tr.action = tr.eligible[uniform_index(rng, 4)];
    tr.advantage = standard_normal(rng);
    tr.ret = standard_normal(rng);
  }
  std::vector<const Transition*> batch;
  for (auto& tr : trs) batch.push_back(&tr);

  SUBCASE("on-policy ratio gives minus the mean advantage") {
    double mean_a = 0.0;
    for (auto& tr : trs) {
      const auto j = static_cast<std::size_t>(std::find(tr.eligible.begin(), tr.eligible.end(), tr.action) -
                                              tr.eligible.begin());
      tr.old_log_prob = nn::log_softmax([&] {
        std::vector<double> l;
        const auto lg = net.logits(tr.input);
        for (auto e : tr.eligible) l.push_back(lg[e]);
        return l;
      }())[j];
      mean_a += tr.advantage / static_cast<double>(trs.size());
    }
    const auto loss = ppo_loss(batch, net, val, cfg, false);
    CHECK(loss.policy_loss == doctest::Approx(-mean_a).epsilon(1e-12));
    CHECK(loss.clip_fraction == 0.0);
  }

  SUBCASE("gradients match finite differences away from the clip kinks") {
    for (auto& tr : trs) {
      const auto lg = net.logits(tr.input);
      std::vector<double> l;
      for (auto e : tr.eligible) l.push_back(lg[e]);
      const auto j = static_cast<std::size_t>(std::find(tr.eligible.begin(), tr.eligible.end(), tr.action) -
                                              tr.eligible.begin());
      const double offsets[] = {-0.5, -0.1, 0.05, 0.4};
      tr.old_log_prob = nn::log_softmax(l)[j] + offsets[uniform_index(rng, 4)];
    }
    auto params = net.parameters();
    for (auto* p : val.parameters()) params.push_back(p);
    auto loss = [&] { return ppo_loss(batch, net, val, cfg, false).loss; };
    auto analytic = [&] { ppo_loss(batch, net, val, cfg, true); };
    const auto res = nn::gradient_check(params, loss, analytic, rng, 400, 1e-6);
    CHECK(res.max_rel_error < 1e-3);
    CHECK(ppo_loss(batch, net, val, cfg, false).clip_fraction > 0.0);
  }
}

TEST_CASE("returns and advantages") {
  Episode ep;
  ep.steps.resize(3);
  for (auto& s : ep.steps) s.reward = 1.0;
  ep.steps[0].value = 0.5;
  compute_advantages(ep, 0.9);
  CHECK(ep.steps[0].ret == doctest::Approx(2.71));
  CHECK(ep.steps[1].ret == doctest::Approx(1.9));
  CHECK(ep.steps[2].ret == doctest::Approx(1.0));
  CHECK(ep.steps[0].advantage == doctest::Approx(2.21));

  compute_advantages(ep, 0.0);
  for (const auto& s : ep.steps) CHECK(s.ret == s.reward);

  for (auto& s : ep.steps) {
    s.reward = 0.0;
    s.value = 0.3;
  }
  compute_advantages(ep, 0.9);
  for (const auto& s : ep.steps) CHECK(s.advantage == -s.value);

  Rng rng(2);
  for (auto& s : ep.steps) {
    s.reward = standard_normal(rng);
    s.value = standard_normal(rng);
  }
  Episode g = ep;
  compute_advantages(ep, 0.8);
  compute_advantages(g, 0.8, AdvantageEstimator::gae, 1.0);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(g.steps[t].advantage == doctest::Approx(ep.steps[t].advantage).epsilon(1e-12));
    CHECK(g.steps[t].ret == doctest::Approx(ep.steps[t].ret).epsilon(1e-12));
  }
}

TEST_CASE("FIFO buffer evicts oldest first") {
  FifoBuffer buf(5);
  for (int i = 0; i < 12; ++i) {
    Transition t;
    t.reward = i;
    buf.push(t);
    CHECK(buf.size() <= 5);
  }
  CHECK(buf.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(buf[i].serial == 7 + i);
    CHECK(buf[i].reward == 7.0 + static_cast<double>(i));
  }
  CHECK_THROWS_AS(FifoBuffer(0), InvalidArgument);
}

TEST_CASE("rollouts") {
  const auto v = tabular_vocab(4);
  const Sequence ref{v.id("c3"), v.id("c1"), v.id("c1"), v.id("c0"), v.id("c2")};
  PerfectModel model(v, ref);
  Rng rng(11);
  PolicyNet net({4, 8, 2, 10}, rng);
  randomize(net.parameters(), rng, 0.7);
  ValueNet val(4);

  const auto ep = rollout(net, val, model, {}, ref, rng);
  CHECK(ep.steps.size() == 5);
  for (const auto& s : ep.steps) CHECK(s.reward == 1.0);
  CHECK(ep.total_reward() == 5.0);
  CHECK(ep.trace.final_sequence() == ref);
  CHECK(validate_trace(ep.trace).empty());
  std::vector<std::size_t> actions;
  for (const auto& s : ep.steps) actions.push_back(s.action);
  std::sort(actions.begin(), actions.end());
  CHECK(actions == std::vector<std::size_t>{0, 1, 2, 3, 4});

  CHECK(mean_episode_reward(model, {{Sequence{}, ref}}, make_preset("left2right"), 1) == 5.0);

  Rng a(4), b(4);
  const auto e1 = rollout(net, val, model, {}, ref, a);
  const auto e2 = rollout(net, val, model, {}, ref, b);
  CHECK(e1.trace == e2.trace);
  for (std::size_t t = 0; t < 5; ++t) CHECK(e1.steps[t].old_log_prob == e2.steps[t].old_log_prob);
}

TEST_CASE("telescoping identity on an imperfect model") {
  Rng rng(13);
  const auto tab = TabularJointModel::random(3, 5, rng);
  const auto& v = tab.vocab();
  PolicyNet net({4, 8, 0, 10}, rng);
  ValueNet val(4);
  randomize(net.parameters(), rng, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ref = random_seq(rng, 5, 3);
    PerfectModel hid(v, ref);
    // Symbols come from the tabular joint, hidden states from the stub.
    struct Mixed : MaskedConditionalModel {
      const TabularJointModel& t;
      const PerfectModel& h;
      Mixed(const TabularJointModel& t_, const PerfectModel& h_) : t(t_), h(h_) {}
      const Vocabulary& vocab() const override { return t.vocab(); }
      std::size_t max_length() const override { return 5; }
      std::vector<Row> conditional(const Sequence& y, const std::vector<std::size_t>& m,
                                   const Sequence& x) const override {
        return t.conditional(y, m, x);
      }
      bool has_hidden() const override { return true; }
      std::size_t hidden_size() const override { return 4; }
      nn::Tensor2D hidden(const Sequence& y, const Sequence& x) const override { return h.hidden(y, x); }
    } mixed(tab, hid);
    auto ep = rollout(net, val, mixed, {}, ref, rng);
    const Sequence start(std::vector<TokenId>(5, v.mask_id()));
    const double telescoped = static_cast<double>(edit_distance(start, ref)) -
                              static_cast<double>(edit_distance(ep.trace.final_sequence(), ref));
    CHECK(ep.total_reward() == telescoped);
    compute_advantages(ep, 1.0);
    CHECK(ep.steps[0].ret == 5.0 - static_cast<double>(edit_distance(ep.trace.final_sequence(), ref)));
  }
}

TEST_CASE("policy training plumbing") {
  const auto v = tabular_vocab(3);
  const Sequence ref{v.id("c0"), v.id("c2"), v.id("c1")};
  PerfectModel model(v, ref);
  Corpus corpus{{Sequence{}, ref}};
  PpoConfig cfg;
  cfg.iterations = 5;
  cfg.generation_batch = 4;
  cfg.update_batch = 8;
  cfg.width = 8;
  cfg.history = 2;

  SUBCASE("zero learning rate leaves parameters unchanged") {
    cfg.adam.lr = 0.0;
    PolicyTrainReport rep;
    const auto tp = train_policy(model, corpus, cfg, &rep);
    Rng rng(cfg.seed);
    PolicyNet fresh({4, 8, 2, 6}, rng);
    const auto a = static_cast<const PolicyNet&>(*tp.policy).parameters();
    const auto b = static_cast<const PolicyNet&>(fresh).parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
    CHECK(rep.curve.size() == 5);
    for (const auto& row : rep.curve) CHECK(row.mean_reward == 3.0);
    CHECK(rep.telescoping_violations == 0);
    CHECK(rep.on_policy_violations == 0);
  }

  SUBCASE("checkpoint round trip and strategy loading") {
    const auto tp = train_policy(model, corpus, cfg);
    const auto ck = policy_to_checkpoint(tp);
    const auto back = policy_from_checkpoint(ck);
    CHECK(policy_to_checkpoint(back) == ck);

    const auto path = (std::filesystem::temp_directory_path() / "seqgen_test_policy.ckpt").string();
    nn::save_checkpoint_file(path, ck);
    const auto strat = parse_strategy("policy:" + path, load_policy_selector);
    CHECK(strat.policy != nullptr);
    CHECK(strat.mode == SelectionMode::deterministic);
    Rng rng(1);
    DecodeConfig dc;
    const auto trace = generate(model, strat, {}, 3, dc, rng);
    CHECK(trace.final_sequence() == ref);
    std::filesystem::remove(path);
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(train_policy(model, {}, cfg), InvalidArgument);
    cfg.clip_epsilon = 1.5;
    CHECK_THROWS_AS(train_policy(model, corpus, cfg), InvalidArgument);
    const auto tab = TabularJointModel::uniform(2, 3);
    PpoConfig ok;
    CHECK_THROWS_AS(train_policy(tab, corpus, ok), InvalidArgument);
  }
}

TEST_CASE("training log rows") {
  CHECK(ppo_log_header() == "iteration,mean_reward,value_loss,policy_loss,clip_fraction");
  PpoIterationLog row{3, 1.5, 0.25, -0.125, 0.5};
  CHECK(ppo_log_row(row) == "3,1.5,0.25,-0.125,0.5");
}
