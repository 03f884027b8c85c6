#include <doctest.h>

#include <sstream>

#include "seqgen/seqcore.hpp"

using namespace seqgen;

namespace {

Vocabulary abc() { return Vocabulary::with_specials({"a", "b", "c", "x", "y"}, false); }

GenerationStep make_step(std::size_t L, std::map<std::size_t, TokenId> repl, double c = -0.1,
                         double s = -0.2) {
  GenerationStep step;
  step.coords = CoordinateMask(L);
  for (const auto& [pos, tok] : repl) step.coords.set(pos);
  step.replacements = std::move(repl);
  step.coord_log_prob = c;
  step.symbol_log_prob = s;
  return step;
}

// Random valid trace: each step flags a random nonempty subset.
GenerationTrace random_trace(const Vocabulary& v, Rng& rng) {
  const std::size_t L = 1 + uniform_index(rng, 6);
  GenerationTrace trace = start_trace({}, L, -uniform01(rng), v);
  const std::size_t T = 1 + uniform_index(rng, 8);
  for (std::size_t t = 0; t < T; ++t) {
    std::map<std::size_t, TokenId> repl;
    for (std::size_t i = 0; i < L; ++i)
      if (uniform01(rng) < 0.4) repl[i] = v.content_ids()[uniform_index(rng, v.content_ids().size())];
    if (repl.empty()) repl[uniform_index(rng, L)] = v.content_ids()[0];
    push_step(trace, make_step(L, repl, -uniform01(rng), -uniform01(rng)));
  }
  return trace;
}

}  // namespace

TEST_CASE("vocabulary layout and invariants") {
  const auto v = Vocabulary::with_specials({"a", "b"}, true);
  CHECK(v.size() == 6);
  CHECK(v.pad_id() == 0);
  CHECK(v.mask_id() == 1);
  CHECK(v.sep_id() == 2u);
  CHECK(v.eos_id() == 3u);
  CHECK(v.content_ids() == std::vector<TokenId>{4, 5});
  CHECK(v.id("b") == 5);
  CHECK(Vocabulary::from_tokens(v.tokens()) == v);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}, 0, 1), InvalidArgument);
  CHECK_THROWS_AS(Vocabulary({"a", "b"}, 0, 0), InvalidArgument);
  CHECK_THROWS_AS(Vocabulary({"a", "b"}, 2, 0), InvalidArgument);
}

TEST_CASE("init_state") {
  const auto v = abc();
  auto [y, z] = init_state(3, v);
  CHECK(y == Sequence{v.mask_id(), v.mask_id(), v.mask_id()});
  CHECK(z.bits() == std::vector<std::uint8_t>{0, 0, 0});
  auto [y1, z1] = init_state(1, v);
  CHECK(y1 == Sequence{v.mask_id()});
  CHECK(z1.popcount() == 0);
  CHECK_THROWS_AS(init_state(0, v), InvalidLength);
}

TEST_CASE("apply_step examples") {
  const auto v = abc();
  const TokenId m = v.mask_id(), a = v.id("a"), b = v.id("b"), c = v.id("c");
  const Sequence y{m, m, m};
  CHECK(apply_step(y, make_step(3, {{1, b}})) == Sequence{m, b, m});
  CHECK(y == Sequence{m, m, m});
  CHECK(apply_step(Sequence{a, b, c}, make_step(3, {})) == Sequence{a, b, c});
  CHECK(apply_step(Sequence{a, b}, make_step(2, {{0, v.id("x")}, {1, v.id("y")}})) ==
        Sequence{v.id("x"), v.id("y")});

  GenerationStep bad = make_step(3, {{1, b}});
  bad.replacements[2] = a;
  CHECK_THROWS_AS(apply_step(y, bad), InconsistentStep);
  CHECK_THROWS_AS(apply_step(Sequence{a, b}, make_step(3, {{0, a}})), InconsistentStep);
}

TEST_CASE("trace_score additivity") {
  const auto v = abc();
  GenerationTrace t = start_trace({}, 2, -1.0, v);
  push_step(t, make_step(2, {{0, v.id("a")}}, -0.5, -2.0));
  const auto s = trace_score(t);
  CHECK(s.total == -3.5);
  CHECK(s.length_term == -1.0);
  CHECK(s.coord_term == -0.5);
  CHECK(s.symbol_term == -2.0);

  GenerationTrace empty = start_trace({}, 2, -0.7, v);
  CHECK(trace_score(empty).total == -0.7);
}

TEST_CASE("validate_trace reports every violation") {
  const auto v = abc();
  GenerationTrace t = start_trace({}, 3, 0.0, v);
  push_step(t, make_step(3, {{0, v.id("a")}}));
  push_step(t, make_step(3, {{1, v.id("b")}}));
  push_step(t, make_step(3, {{2, v.id("c")}}));
  CHECK(validate_trace(t).empty());

  GenerationTrace bad_start = t;
  bad_start.intermediates[0][1] = v.id("a");
  const auto viol = validate_trace(bad_start);
  REQUIRE(!viol.empty());
  CHECK(viol.front() == "initial sequence not empty");

  GenerationTrace bad = t;
  bad.steps[1].replacements[2] = v.id("x");
  bad.steps[0].symbol_log_prob = 0.5;
  const auto many = validate_trace(bad);
  CHECK(many.size() >= 2);
  bool found_unflagged = false;
  for (const auto& msg : many) found_unflagged |= msg.find("unflagged") != std::string::npos;
  CHECK(found_unflagged);
  CHECK_THROWS_AS(trace_score(bad), ValidationError);
}

TEST_CASE("replay reproduces intermediates; score ignores intermediates") {
  const auto v = abc();
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const auto trace = random_trace(v, rng);
    CHECK(replay_intermediates(trace) == trace.intermediates);
    CHECK(validate_trace(trace).empty());
    GenerationTrace rebuilt = trace;
    rebuilt.intermediates = replay_intermediates(trace);
    CHECK(trace_score(rebuilt).total == trace_score(trace).total);
  }
}

TEST_CASE("unflagged positions never change") {
  const auto v = abc();
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto trace = random_trace(v, rng);
    for (std::size_t t = 0; t < trace.steps.size(); ++t)
      for (std::size_t i = 0; i < trace.length; ++i)
        if (!trace.steps[t].coords.test(i))
          CHECK(trace.intermediates[t + 1][i] == trace.intermediates[t][i]);
  }
}

TEST_CASE("trace export round trip") {
  const auto v = abc();
  Rng rng(4);
  std::stringstream ss;
  std::vector<GenerationTrace> traces;
  for (int i = 0; i < 20; ++i) {
    traces.push_back(random_trace(v, rng));
    traces.back().input = Sequence{v.id("a"), v.id("c")};
    write_trace(ss, traces.back(), v, {"preset:left2right", "T=L"});
  }
  for (const auto& expected : traces) {
    auto got = read_trace(ss, v);
    REQUIRE(got.has_value());
    CHECK(got->first == expected);
    CHECK(got->second.strategy == "preset:left2right");
  }
  CHECK(!read_trace(ss, v).has_value());
}

TEST_CASE("parse and render") {
  const auto v = abc();
  const Sequence s = parse_sequence("a b  c", v);
  CHECK(s == Sequence{v.id("a"), v.id("b"), v.id("c")});
  CHECK(render(s, v) == "a b c");
  CHECK_THROWS(parse_sequence("a q", v));
}
