#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "seqgen/selection.hpp"

using namespace seqgen;

namespace {

// Returns the same row for a position regardless of context.
class FixedRows : public MaskedConditionalModel {
 public:
  FixedRows(Vocabulary v, std::vector<Row> rows) : v_(std::move(v)), rows_(std::move(rows)) {}
  const Vocabulary& vocab() const override { return v_; }
  std::size_t max_length() const override { return rows_.size(); }
  std::vector<Row> conditional(const Sequence&, const std::vector<std::size_t>& masked,
                               const Sequence&) const override {
    std::vector<Row> out;
    for (std::size_t i : masked) out.push_back(rows_.at(i));
    return out;
  }

 private:
  Vocabulary v_;
  std::vector<Row> rows_;
};

double marginal_mask_prob_oracle(const std::vector<Row>& rows, std::size_t i, TokenId mask) {
  return rows[i][mask];
}

}  // namespace

TEST_CASE("negative entropy feature") {
  CHECK(feature_negent({0.25, 0.25, 0.25, 0.25}) == doctest::Approx(-std::log(4.0)).epsilon(1e-14));
  CHECK(feature_negent({0.0, 1.0, 0.0, 0.0}) == 0.0);
  CHECK(feature_negent({0.5, 0.5, 0.0, 0.0}) == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("current-symbol surprisal feature") {
  CHECK(feature_logp({0.0, 1.0}, 1) == 0.0);
  CHECK(feature_logp({1.0 - std::exp(-1.0), std::exp(-1.0)}, 1) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(feature_logp({1.0, 0.0}, 1) == doctest::Approx(-std::log(kProbFloor)));
}

TEST_CASE("positional feature") {
  CHECK(feature_pos(3, 3, 1.0) == 0.0);
  CHECK(feature_pos(2, 5, 1e-6) == doctest::Approx(-std::log(3.0 + 1e-6)).epsilon(1e-14));
  CHECK(feature_pos(2, 5, 1e-6) == doctest::Approx(-1.0986).epsilon(1e-4));
  for (std::size_t t = 1; t <= 6; ++t)
    for (std::size_t i = 1; i <= 6; ++i)
      for (std::size_t j = 1; j <= 6; ++j) {
        const auto di = t > i ? t - i : i - t;
        const auto dj = t > j ? t - j : j - t;
        if (di < dj) CHECK(feature_pos(t, i, 1e-6) > feature_pos(t, j, 1e-6));
      }
}

TEST_CASE("surprisal on the all-mask state scores the mask token") {
  const auto v = tabular_vocab(3);
  const TokenId mk = v.mask_id();
  std::vector<Row> rows(3, Row(v.size(), 0.0));
  rows[0][mk] = 0.3;
  rows[0][v.id("c0")] = 0.7;
  rows[1][v.id("c1")] = 1.0;
  rows[2][mk] = 1.0 / 3.0;
  rows[2][v.id("c2")] = 2.0 / 3.0;
  FixedRows model(v, rows);
  SelectionState st(model, {}, 3);
  StrategyConfig cfg = make_preset("least2most");
  const auto f = compute_features(cfg, st, {0, 1, 2});
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(f.logp[i] == doctest::Approx(-std::log(std::max(marginal_mask_prob_oracle(rows, i, mk), kProbFloor))));

  Rng rng(5);
  const auto tab = TabularJointModel::random(2, 2, rng);
  SelectionState ts(tab, {}, 2);
  const auto tf = compute_features(cfg, ts, {0, 1});
  CHECK(tf.logp[0] == doctest::Approx(-std::log(kProbFloor)));
}

TEST_CASE("log-linear distribution") {
  StrategyConfig cfg = make_preset("uniform");
  FeatureVector f{std::vector<double>(5, 0.3), std::vector<double>(5, -2.0), std::vector<double>(5, 1.0)};
  const auto u = log_linear_distribution(f, cfg, {0, 1, 2, 3, 4});
  for (double p : u) CHECK(p == 0.2);

  cfg.tau = 0.37;
  cfg.alpha_negent = 2.0;
  cfg.alpha_logp = -1.0;
  cfg.alpha_pos = 0.5;
  for (double p : log_linear_distribution(f, cfg, {0, 1, 2, 3, 4})) CHECK(p == doctest::Approx(0.2));

  StrategyConfig pos_only;
  pos_only.alpha_pos = 1.0;
  pos_only.tau = 1.0;
  FeatureVector g{{0.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}};
  const auto p = log_linear_distribution(g, pos_only, {0, 1});
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
  CHECK(p[0] == doctest::Approx(0.731).epsilon(1e-3));
  CHECK(p[1] == doctest::Approx(0.269).epsilon(1e-3));

  CHECK_THROWS_AS(log_linear_distribution(g, pos_only, {}), InvalidArgument);
}

TEST_CASE("presets") {
  const auto l2r = make_preset("left2right");
  CHECK(l2r.alpha_negent == 0.0);
  CHECK(l2r.alpha_logp == 0.0);
  CHECK(l2r.alpha_pos == 1.0);
  CHECK(l2r.mode == SelectionMode::deterministic);

  const auto ef = make_preset("easy_first");
  CHECK(ef.alpha_negent == 1.0);
  CHECK(ef.alpha_logp == 1.0);
  CHECK(ef.alpha_pos == 0.0);

  const auto hf = make_preset("hard-first");
  CHECK(hf.alpha_negent == -ef.alpha_negent);
  CHECK(hf.alpha_logp == -ef.alpha_logp);
  CHECK(hf.alpha_pos == -ef.alpha_pos);

  const auto lm = make_preset("least2most");
  CHECK(lm.alpha_logp == 1.0);
  CHECK(lm.alpha_negent == 0.0);

  const auto un = make_preset("uniform");
  CHECK(std::isinf(un.tau));
  CHECK(un.mode == SelectionMode::stochastic);

  CHECK_THROWS_AS(make_preset("random_order"), InvalidArgument);
}

TEST_CASE("strategy spec strings") {
  const auto a = parse_strategy("preset:easy_first");
  CHECK(a.describe() == "preset:easy_first");
  const auto b = parse_strategy("loglinear:a_ne=0.5,a_lp=0.9,a_pos=0,tau=inf");
  CHECK(b.alpha_negent == 0.5);
  CHECK(b.alpha_logp == 0.9);
  CHECK(std::isinf(b.tau));
  const auto c = parse_strategy(b.describe());
  CHECK(c.alpha_negent == b.alpha_negent);
  CHECK(c.alpha_logp == b.alpha_logp);
  CHECK(c.mode == b.mode);
  const auto d = parse_strategy("preset:least2most,a_lp=0.9");
  CHECK(d.alpha_logp == 0.9);
  CHECK(d.describe().rfind("loglinear:", 0) == 0);
  CHECK(parse_strategy("loglinear:a_pos=1,mode=det,scope=all").scope == SelectionScope::all_positions);

  CHECK_THROWS_AS(parse_strategy("preset:nope"), InvalidArgument);
  CHECK_THROWS_AS(parse_strategy("loglinear:tau=0"), InvalidArgument);
  CHECK_THROWS_AS(parse_strategy("loglinear:eps=-1"), InvalidArgument);
  CHECK_THROWS_AS(parse_strategy("loglinear:bogus=1"), InvalidArgument);
  CHECK_THROWS_AS(parse_strategy("easy_first"), InvalidArgument);
  CHECK_THROWS_AS(parse_strategy("policy:/nonexistent"), InvalidArgument);
}

TEST_CASE("left2right fills positions in order") {
  const auto m = TabularJointModel::uniform(3, 6);
  SelectionState st(m, {}, 6);
  Rng rng(1);
  const auto cfg = make_preset("left2right");
  const auto c0 = m.vocab().id("c0");
  for (std::size_t t = 0; t < 6; ++t) {
    const auto sel = select_positions(cfg, st, 1, rng);
    REQUIRE(sel.positions.size() == 1);
    CHECK(sel.positions[0] == t);
    CHECK(sel.log_prob == 0.0);
    st.advance({{sel.positions[0], c0}});
  }
}

TEST_CASE("uniform selection frequencies and reproducibility") {
  const auto m = TabularJointModel::uniform(2, 4);
  const auto cfg = make_preset("uniform");
  std::vector<std::size_t> counts(4, 0);
  Rng rng(2024);
  const std::size_t trials = 10000;
  for (std::size_t k = 0; k < trials; ++k) {
    SelectionState st(m, {}, 4);
    const auto sel = select_positions(cfg, st, 1, rng);
    CHECK(sel.log_prob == doctest::Approx(std::log(0.25)));
    ++counts[sel.positions[0]];
  }
  for (auto c : counts) {
    const double freq = static_cast<double>(c) / trials;
    CHECK(freq >= 0.23);
    CHECK(freq <= 0.27);
  }

  Rng r1(9), r2(9);
  SelectionState s1(m, {}, 4), s2(m, {}, 4);
  const auto a = select_positions(cfg, s1, 3, r1);
  const auto b = select_positions(cfg, s2, 3, r2);
  CHECK(a.positions == b.positions);
  CHECK(a.log_prob == b.log_prob);
  CHECK(a.log_prob == doctest::Approx(std::log(1.0 / 4.0) + std::log(1.0 / 3.0) + std::log(1.0 / 2.0)));
}

TEST_CASE("least2most picks the least likely current symbol") {
  const auto v = tabular_vocab(2);
  const TokenId a = v.id("c0"), b = v.id("c1");
  std::vector<Row> rows(4, Row(v.size(), 0.0));
  for (std::size_t i = 0; i < 4; ++i) {
    rows[i][a] = 0.9;
    rows[i][b] = 0.1;
  }
  rows[2][a] = 0.01;
  rows[2][b] = 0.99;
  FixedRows model(v, rows);
  SelectionState st(model, {}, 4);
  st.advance({{0, a}, {1, a}, {2, a}, {3, a}});
  Rng rng(3);
  auto cfg = make_preset("least2most");
  cfg.scope = SelectionScope::all_positions;
  const auto sel = select_positions(cfg, st, 1, rng);
  CHECK(sel.positions == std::vector<std::size_t>{2});
}

TEST_CASE("deterministic selection is invariant to positive coefficient scaling") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = TabularJointModel::random(3, 4, rng);
    StrategyConfig cfg;
    cfg.mode = SelectionMode::deterministic;
    cfg.tau = 1.0;
    cfg.alpha_negent = standard_normal(rng);
    cfg.alpha_logp = standard_normal(rng);
    cfg.alpha_pos = standard_normal(rng);
    SelectionState st(m, {}, 4);
    st.advance({{uniform_index(rng, 4), m.vocab().content_ids()[uniform_index(rng, 3)]}});
    const auto base = select_positions(cfg, st, 2, rng).positions;
    for (double c : {0.25, 3.0, 40.0}) {
      StrategyConfig scaled = cfg;
      scaled.alpha_negent *= c;
      scaled.alpha_logp *= c;
      scaled.alpha_pos *= c;
      CHECK(select_positions(scaled, st, 2, rng).positions == base);
    }
  }
}

TEST_CASE("selection stays inside the eligible set") {
  Rng rng(11);
  const auto m = TabularJointModel::random(3, 5, rng);
  const auto cfg = parse_strategy("loglinear:a_ne=1,a_lp=0.5,a_pos=0.3,tau=0.7");
  for (int trial = 0; trial < 50; ++trial) {
    SelectionState st(m, {}, 5);
    std::set<std::size_t> seen;
    for (std::size_t t = 0; t < 5; ++t) {
      const auto elig = st.eligible(cfg.scope, 1);
      const auto sel = select_positions(cfg, st, 1, rng);
      CHECK(std::find(elig.begin(), elig.end(), sel.positions[0]) != elig.end());
      CHECK(seen.insert(sel.positions[0]).second);
      CHECK(sel.log_prob <= 0.0);
      st.advance({{sel.positions[0], m.vocab().content_ids()[0]}});
    }
  }
}

TEST_CASE("eligibility and refinement") {
  const auto m = TabularJointModel::uniform(2, 4);
  SelectionState st(m, {}, 4);
  const TokenId c = m.vocab().content_ids()[0];
  st.advance({{0, c}, {2, c}});
  CHECK(st.eligible(SelectionScope::without_replacement, 2) == std::vector<std::size_t>{1, 3});
  CHECK(st.eligible(SelectionScope::without_replacement, 3) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(st.eligible(SelectionScope::all_positions, 1) == std::vector<std::size_t>{0, 1, 2, 3});
  st.advance({{1, c}, {3, c}});
  CHECK(st.eligible(SelectionScope::without_replacement, 1).size() == 4);
  Rng rng(1);
  CHECK_THROWS_AS(select_positions(make_preset("uniform"), st, 5, rng), InvalidArgument);
  CHECK_THROWS_AS(select_positions(make_preset("uniform"), st, 0, rng), InvalidArgument);
}

TEST_CASE("symbol rows reuse the feature cache only when the query matches") {
  Rng rng(4);
  const auto m = TabularJointModel::random(3, 3, rng);
  SelectionState st(m, {}, 3);
  st.prefetch_rows({0, 1, 2});
  const auto cached = st.symbol_rows({0, 2});
  const auto direct = m.conditional(st.y(), {0, 2}, {});
  CHECK(cached == direct);
  st.advance({{1, m.vocab().content_ids()[2]}});
  st.prefetch_rows({0, 1, 2});
  CHECK(st.symbol_rows({1}) == m.conditional(st.y(), {1}, {}));
  CHECK(st.symbol_rows({0, 1}) == m.conditional(st.y(), {0, 1}, {}));
}
