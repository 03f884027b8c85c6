#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "seqgen/harness.hpp"

using namespace seqgen;
using namespace seqgen::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& leaf) {
  const auto p = fs::temp_directory_path() / ("seqgen_harness_" + leaf);
  fs::remove_all(p);
  return p;
}

SyntheticTask small_task(TaskKind kind) {
  SyntheticTask t;
  t.kind = kind;
  t.vocab_size = 6;
  t.min_length = 3;
  t.max_length = 6;
  t.seed = 4;
  return t;
}

std::string metrics_without_time(const std::string& row) { return row.substr(0, row.rfind(',')); }

}  // namespace

TEST_CASE("task maps") {
  const auto copy = small_task(TaskKind::cipher_copy);
  const auto v = copy.vocab();
  const Sequence abc{v.id("w0"), v.id("w3"), v.id("w5")};
  CHECK(TaskMap::identity(copy).apply(abc) == abc);

  const auto rev = small_task(TaskKind::cipher_reverse);
  CHECK(TaskMap::identity(rev).apply(abc) == Sequence{v.id("w5"), v.id("w3"), v.id("w0")});

  const auto swap = small_task(TaskKind::local_swap);
  CHECK(TaskMap::identity(swap).apply(abc) == Sequence{v.id("w3"), v.id("w0"), v.id("w5")});

  const TaskMap cipher(copy);
  std::set<std::size_t> image(cipher.sigma().begin(), cipher.sigma().end());
  CHECK(image.size() == 6);
  const auto out = cipher.apply(abc);
  for (std::size_t i = 0; i < 3; ++i) CHECK(out[i] == v.content_ids()[cipher.sigma()[abc[i] - v.content_ids()[0]]]);

  const auto fert = small_task(TaskKind::cipher_fertility);
  const TaskMap fm(fert);
  std::size_t n_fertile = 0;
  for (std::size_t k = 0; k < 6; ++k) n_fertile += fm.fertile(k) ? 1 : 0;
  CHECK(n_fertile == 3);
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenId> ids(1 + uniform_index(rng, 6));
    std::size_t expect = 0;
    for (auto& t : ids) {
      t = v.content_ids()[uniform_index(rng, 6)];
      expect += fm.fertile(t - v.content_ids()[0]) ? 2 : 1;
    }
    const auto y = fm.apply(Sequence(ids));
    CHECK(y.size() == expect);
    CHECK(y[0] == v.content_ids()[fm.sigma()[ids[0] - v.content_ids()[0]]]);
  }
  CHECK(fert.max_target_length() == 12);
  CHECK_THROWS_AS(cipher.apply(Sequence{v.mask_id()}), InvalidArgument);
  CHECK(parse_task_kind(to_string(TaskKind::local_swap)) == TaskKind::local_swap);
  CHECK_THROWS_AS(parse_task_kind("nope"), InvalidArgument);
}

TEST_CASE("synthetic corpus") {
  const auto task = small_task(TaskKind::cipher_reverse);
  const auto s = synth_corpus(task, 400);
  CHECK(s.train.size() == 360);
  CHECK(s.valid.size() == 20);
  CHECK(s.test.size() == 20);
  std::set<Sequence> sources;
  const TaskMap map(task);
  for (const auto* part : {&s.train, &s.valid, &s.test})
    for (const auto& p : *part) {
      CHECK(sources.insert(p.source).second);
      CHECK(p.target == map.apply(p.source));
      CHECK(p.source.size() >= 3);
      CHECK(p.source.size() <= 6);
    }
  CHECK_THROWS_AS(synth_corpus(task, 99), InvalidArgument);
  auto tiny = task;
  tiny.vocab_size = 2;
  tiny.min_length = tiny.max_length = 2;
  CHECK_THROWS_AS(synth_corpus(tiny, 100), InvalidArgument);

  const auto a = scratch("corpus_a"), b = scratch("corpus_b");
  write_splits(a.string(), s, task.vocab());
  write_splits(b.string(), synth_corpus(task, 400), task.vocab());
  for (const char* f : {"train.tsv", "valid.tsv", "test.tsv", "vocab.txt"}) CHECK(slurp(a / f) == slurp(b / f));
  Vocabulary v;
  const auto back = read_splits(a.string(), &v);
  CHECK(v.tokens() == task.vocab().tokens());
  CHECK(back.train == s.train);
  CHECK(back.test == s.test);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("run configuration") {
  RunConfig c;
  c.merge_text("# comment\n\ntask = cipher_copy\nbeam=4\nlr=0.5\nstrategy=loglinear:a_ne=1,a_lp=1,tau=1\n");
  CHECK(c.task == "cipher_copy");
  CHECK(c.beam == 4);
  CHECK(c.lr == 0.5);
  CHECK(c.get("strategy") == "loglinear:a_ne=1,a_lp=1,tau=1");
  CHECK_THROWS_AS(c.merge_text("bogus=1\n"), InvalidArgument);
  CHECK_THROWS_AS(c.merge_text("beam=four\n"), InvalidArgument);
  CHECK_THROWS_AS(c.merge_text("beam=1\nbeam=2\n"), InvalidArgument);
  CHECK_THROWS_AS(c.merge_text("beam\n"), InvalidArgument);
  CHECK_THROWS_AS(c.set("unknown", "1"), InvalidArgument);

  c.set("beam", "2");
  CHECK(c.beam == 2);
  const auto dc = c.decode_config();
  CHECK(dc.beam_K == 2);
  CHECK(dc.beam_Kpp == 2);
  CHECK(dc.beam_Kp == 1);

  RunConfig again;
  again.merge_text(c.to_text());
  CHECK(again.to_text() == c.to_text());
  const std::string text = c.to_text();
  CHECK(RunConfig::keys().size() == static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));

  c.set("gamma", "1.5");
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  RunConfig d;
  d.out_dir = "/tmp/x";
  CHECK(d.lm_path() == "/tmp/x/lm.ckpt");
  CHECK_NOTHROW(d.validate());
  const auto p = scratch("config") / "run.cfg";
  d.write_file(p.string());
  RunConfig e;
  e.merge_file(p.string());
  CHECK(e.to_text() == d.to_text());
  fs::remove_all(p.parent_path());
}

TEST_CASE("batch decoding") {
  Rng rng(9);
  const std::size_t L = 4;
  const auto model = TabularJointModel::random(3, L, rng);
  Corpus pairs;
  for (int i = 0; i < 12; ++i) pairs.push_back({Sequence{}, model.decode_index(uniform_index(rng, 81), L)});
  const auto ldist = LengthDistribution::fit(pairs, L);
  DecodeConfig cfg;
  const auto run = run_decode(model, ldist, make_preset("left2right"), pairs, cfg, 3);
  REQUIRE(run.results.size() == 12);
  for (const auto& r : run.results) {
    const auto& t = r.candidates.at(r.chosen_index).trace;
    CHECK(t.steps.size() == L);
    for (const auto& s : t.steps) CHECK(s.coords.popcount() == 1);
    CHECK(validate_trace(t).empty());
  }
  CHECK(run.metrics.b == 1);
  CHECK(run.metrics.T == "L");
  CHECK(run.metrics.schedule == "linear_time");
  CHECK(run.metrics.mean_energy > 0.0);

  const auto serial = run_decode(model, ldist, make_preset("left2right"), pairs, cfg, 1);
  CHECK(metrics_without_time(metrics_row(serial.metrics)) == metrics_without_time(metrics_row(run.metrics)));
  const auto sampled_a = run_decode(model, ldist, make_preset("uniform"), pairs, cfg, 2);
  const auto sampled_b = run_decode(model, ldist, make_preset("uniform"), pairs, cfg, 1);
  CHECK(metrics_without_time(metrics_row(sampled_a.metrics)) == metrics_without_time(metrics_row(sampled_b.metrics)));

  MetricsRow row{"loglinear:a_ne=1,a_lp=1", 4, "L", "linear_time", 12.5, 0.25, 3.0, 0.5};
  CHECK(metrics_row(row) == "\"loglinear:a_ne=1,a_lp=1\",4,L,linear_time,12.5,0.25,3,0.5");
  CHECK(metrics_header() == "strategy,b,T,schedule,BLEU,exact_match,mean_energy,wall_time");
  DecodeConfig fixed;
  fixed.T = 7;
  CHECK(budget_label(fixed) == "7");
  fixed.T = 0;
  fixed.T_per_length = 2.0;
  CHECK(budget_label(fixed) == "2L");

  std::ostringstream report;
  write_decode_report(report, run, pairs, model.vocab());
  std::istringstream lines(report.str());
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("chosen_length") == L);
    CHECK(j.at("candidates").size() == 1);
    CHECK(j.at("strategy") == "preset:left2right");
    CHECK(j.contains("wall_time_ms"));
    CHECK(parse_sequence(j.at("chosen").get<std::string>(), model.vocab()) == run.results[n].chosen);
  }
  CHECK(n == 12);

  std::stringstream traces;
  write_decode_traces(traces, run, model.vocab(), "beam=1");
  for (const auto& r : run.results) {
    const auto back = read_trace(traces, model.vocab());
    REQUIRE(back.has_value());
    CHECK(back->first == r.candidates.at(r.chosen_index).trace);
    CHECK(back->second.config == "beam=1");
  }
  CHECK_FALSE(read_trace(traces, model.vocab()).has_value());
  CHECK_THROWS_AS(run_decode(model, ldist, make_preset("left2right"), {}, cfg), InvalidArgument);
}

TEST_CASE("oracle suite") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = run_oracle_suite();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(seconds < 60.0);
  REQUIRE(checks.size() == 5);
  for (const auto& c : checks) {
    INFO(c.name << " measured " << c.measured);
    CHECK(c.passed);
    CHECK(c.instances > 0);
  }
  std::ostringstream out;
  print_oracle_matrix(out, checks);
  CHECK(out.str().find("FAIL") == std::string::npos);

  OracleOptions mutant;
  mutant.mutate_beam = true;
  mutant.gibbs_models = 1;
  for (const auto& c : run_oracle_suite(mutant))
    if (c.name == "beam_vs_brute_force") CHECK_FALSE(c.passed);
}

TEST_CASE("stationary distribution of the single-site chain is the joint") {
  Rng rng(5);
  const auto m = TabularJointModel::random(3, 2, rng);
  const auto pi = gibbs_stationary(m, 2);
  const auto& joint = m.joint({}, 2);
  REQUIRE(pi.size() == joint.size());
  for (std::size_t s = 0; s < pi.size(); ++s) CHECK(pi[s] == doctest::Approx(joint[s]).epsilon(1e-9));
}
