// seqgen: command-line harness over the synthetic translation tasks.
//
// Every subcommand reads an optional --config file, then applies flags named
// after the configuration keys (--beam 4 or --length-candidates 4), and
// writes the resolved configuration as <command>.cfg into the output
// directory before doing any work.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "seqgen/harness.hpp"

using namespace seqgen;
using namespace seqgen::harness;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_file;
  std::map<std::string, std::string> flags;
  bool mutate = false;
  std::string report;
};

void add_config_flags(CLI::App* cmd, Options& opts) {
  cmd->add_option("--config", opts.config_file, "key=value configuration file")->check(CLI::ExistingFile);
  for (const auto& key : RunConfig::keys()) {
    std::string names = "--" + key;
    std::string dashed = key;
    for (char& c : dashed)
      if (c == '_') c = '-';
    if (dashed != key) names += ",--" + dashed;
    cmd->add_option(names, opts.flags[key], "overrides the '" + key + "' key");
  }
}

RunConfig resolve(const Options& opts, const std::string& command) {
  RunConfig cfg;
  if (!opts.config_file.empty()) cfg.merge_file(opts.config_file);
  for (const auto& [key, value] : opts.flags)
    if (!value.empty()) cfg.set(key, value);
  if (cfg.out_dir.empty()) cfg.out_dir = (fs::path(default_output_root()) / "default").string();
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  cfg.write_file((fs::path(cfg.out_dir) / (command + ".cfg")).string());
  return cfg;
}

fs::path out_path(const RunConfig& cfg, const std::string& leaf) { return fs::path(cfg.out_dir) / leaf; }

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(p, std::ios::out | mode);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw IoError(what + " not found: " + path);
}

// ---------------------------------------------------------------------------
// Loaded artifacts

struct Loaded {
  Vocabulary vocab;
  SplitCorpus splits;
  std::optional<ToyMaskedLM> lm;
  std::optional<ARModel> ar;
  LengthDistribution lengths;
};

Loaded load_data(const RunConfig& cfg) {
  Loaded l;
  require_file((fs::path(cfg.data_dir()) / "vocab.txt").string(), "corpus");
  l.splits = read_splits(cfg.data_dir(), &l.vocab);
  return l;
}

Loaded load_for_decoding(const RunConfig& cfg) {
  Loaded l = load_data(cfg);
  require_file(cfg.lm_path(), "masked LM checkpoint");
  require_file(cfg.length_path(), "length model");
  l.lm = ToyMaskedLM::from_checkpoint(nn::load_checkpoint_file(cfg.lm_path()));
  std::ifstream in(cfg.length_path());
  l.lengths = LengthDistribution::read(in);
  if (cfg.decode_config().rescoring == Rescorer::ar_model) {
    require_file(cfg.ar_path(), "autoregressive checkpoint");
    l.ar = ARModel::from_checkpoint(nn::load_checkpoint_file(cfg.ar_path()));
  }
  return l;
}

Corpus decode_split(const RunConfig& cfg, const Loaded& l) {
  const Corpus* src = nullptr;
  if (cfg.split == "test") src = &l.splits.test;
  else if (cfg.split == "valid") src = &l.splits.valid;
  else if (cfg.split == "train") src = &l.splits.train;
  else throw InvalidArgument("split must be train, valid or test, got '" + cfg.split + "'");
  Corpus pairs = *src;
  if (cfg.test_limit > 0 && pairs.size() > cfg.test_limit) pairs.resize(cfg.test_limit);
  return pairs;
}

StrategyConfig strategy_of(const std::string& spec) { return parse_strategy(spec, load_policy_selector); }

DecodeRun decode_with(const RunConfig& cfg, const Loaded& l, const std::string& spec, const Corpus& pairs,
                      const DecodeConfig& dc) {
  return run_decode(*l.lm, l.lengths, strategy_of(spec), pairs, dc, cfg.workers, l.ar ? &*l.ar : nullptr,
                    cfg.energy_kind_value());
}

void append_metrics(const RunConfig& cfg, const MetricsRow& row) {
  const auto p = out_path(cfg, "metrics.csv");
  const bool fresh = !fs::exists(p) || fs::file_size(p) == 0;
  auto out = open_out(p, std::ios::app);
  if (fresh) out << metrics_header() << '\n';
  out << metrics_row(row) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ';');)
    if (!part.empty()) parts.push_back(part);
  return parts;
}

std::string file_label(const std::string& spec) {
  std::string out;
  for (char c : spec) out += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ? c : '_';
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth_data(const RunConfig& cfg) {
  const auto task = cfg.synthetic_task();
  const auto splits = synth_corpus(task, cfg.n_pairs);
  write_splits(cfg.data_dir(), splits, task.vocab());
  std::cout << "wrote " << splits.train.size() << " train, " << splits.valid.size() << " valid, "
            << splits.test.size() << " test pairs to " << cfg.data_dir() << '\n';
  return 0;
}

template <class Train>
int train_model(const RunConfig& cfg, const std::string& log_name, Train train) {
  const auto l = load_data(cfg);
  auto tc = cfg.train_config();
  auto log = open_out(out_path(cfg, log_name));
  log << "step,loss\n";
  tc.on_log = [&](std::size_t step, double loss) {
    log << step << ',' << loss << '\n';
    std::clog << "step " << step << " loss " << loss << '\n';
  };
  TrainReport report;
  train(l, tc, report);
  std::cout << "loss " << report.initial_loss << " -> " << report.final_loss << '\n';
  return 0;
}

int cmd_train_lm(const RunConfig& cfg) {
  return train_model(cfg, "lm_train.csv", [&](const Loaded& l, const TrainConfig& tc, TrainReport& report) {
    const std::size_t max_len = cfg.synthetic_task().max_target_length();
    const auto lm = train_masked_lm(l.splits.train, l.vocab, max_len, cfg.encoder_dims(), tc, &report);
    nn::save_checkpoint_file(cfg.lm_path(), lm.to_checkpoint());
    auto out = open_out(cfg.length_path());
    LengthDistribution::fit(l.splits.train, max_len).write(out);
  });
}

int cmd_train_ar(const RunConfig& cfg) {
  return train_model(cfg, "ar_train.csv", [&](const Loaded& l, const TrainConfig& tc, TrainReport& report) {
    const auto ar = train_ar(l.splits.train, l.vocab, cfg.synthetic_task().max_target_length(),
                             cfg.encoder_dims(), tc, &report);
    nn::save_checkpoint_file(cfg.ar_path(), ar.to_checkpoint());
  });
}

int cmd_train_policy(const RunConfig& cfg) {
  const auto l = load_for_decoding(cfg);
  Corpus pairs = l.splits.train;
  if (pairs.size() > cfg.ppo_train_pairs) pairs.resize(cfg.ppo_train_pairs);
  auto log = open_out(out_path(cfg, "ppo_train.csv"));
  log << ppo_log_header() << '\n';
  PolicyTrainReport report;
  const auto trained = train_policy(*l.lm, pairs, cfg.ppo_config(), &report, [&](const PpoIterationLog& row) {
    log << ppo_log_row(row) << '\n';
    std::clog << "iteration " << row.iteration << " reward " << row.mean_reward << '\n';
  });
  nn::save_checkpoint_file(cfg.policy_path(), policy_to_checkpoint(trained));
  std::cout << report.episodes << " episodes, " << report.telescoping_violations << " telescoping violations, "
            << report.on_policy_violations << " on-policy violations\n";
  return report.telescoping_violations == 0 && report.on_policy_violations == 0 ? 0 : 1;
}

int cmd_decode(const RunConfig& cfg) {
  const auto l = load_for_decoding(cfg);
  const auto pairs = decode_split(cfg, l);
  const auto run = decode_with(cfg, l, cfg.strategy, pairs, cfg.decode_config());
  const std::string stem = "decode_" + file_label(cfg.strategy);
  {
    auto out = open_out(out_path(cfg, stem + ".jsonl"));
    write_decode_report(out, run, pairs, l.vocab);
  }
  {
    auto out = open_out(out_path(cfg, stem + ".trace"));
    write_decode_traces(out, run, l.vocab, cfg.to_text());
  }
  append_metrics(cfg, run.metrics);
  std::cout << metrics_header() << '\n' << metrics_row(run.metrics) << '\n';
  return 0;
}

int evaluate_report(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<Sequence> hyps, refs;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    hyps.push_back(parse_sequence(j.at("chosen").get<std::string>(), vocab));
    refs.push_back(parse_sequence(j.at("reference").get<std::string>(), vocab));
  }
  std::cout << "sentences " << hyps.size() << "\nBLEU " << bleu(hyps, refs) << "\nexact_match "
            << exact_match(hyps, refs) << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& report) {
  if (!report.empty()) return evaluate_report(report, load_data(cfg).vocab);
  const auto l = load_for_decoding(cfg);
  const auto pairs = decode_split(cfg, l);
  std::cout << metrics_header() << '\n';
  for (const auto& spec : split_list(cfg.strategies)) {
    const auto run = decode_with(cfg, l, spec, pairs, cfg.decode_config());
    append_metrics(cfg, run.metrics);
    std::cout << metrics_row(run.metrics) << '\n';
  }
  return 0;
}

int cmd_analyze_orders(const RunConfig& cfg) {
  const auto l = load_for_decoding(cfg);
  const auto pairs = decode_split(cfg, l);
  const auto run = decode_with(cfg, l, cfg.strategy, pairs, cfg.decode_config());
  std::vector<OrderVector> vectors;
  auto out = open_out(out_path(cfg, "orders_" + file_label(cfg.strategy) + ".csv"));
  out << "sentence,length";
  for (int j = 1; j <= 10; ++j) out << ",v" << j;
  out << '\n';
  for (std::size_t i = 0; i < run.results.size(); ++i) {
    const auto& r = run.results[i];
    vectors.push_back(order_vector(r.candidates.at(r.chosen_index).trace));
    out << i << ',' << r.chosen.size();
    for (double v : vectors.back()) out << ',' << v;
    out << '\n';
  }
  Rng rng(cfg.cluster_seed);
  const auto report = kmeans(vectors, cfg.clusters, rng);
  auto clusters = open_out(out_path(cfg, "clusters_" + file_label(cfg.strategy) + ".csv"));
  write_cluster_csv(clusters, report);
  write_cluster_csv(std::cout, report);
  return 0;
}

int cmd_analyze_energy(const RunConfig& cfg) {
  const auto l = load_for_decoding(cfg);
  const auto pairs = decode_split(cfg, l);
  auto specs = split_list(cfg.strategies);
  if (std::find(specs.begin(), specs.end(), cfg.baseline) == specs.end()) specs.push_back(cfg.baseline);
  std::map<std::string, std::vector<std::vector<double>>> curves;
  for (const auto& spec : specs) {
    const auto run = decode_with(cfg, l, spec, pairs, cfg.decode_config());
    auto& per_sentence = curves[spec];
    for (std::size_t i = 0; i < run.results.size(); ++i) {
      const auto& r = run.results[i];
      const auto& trace = r.candidates.at(r.chosen_index).trace;
      per_sentence.push_back(energy_curve(*l.lm, trace, cfg.energy_kind_value()));
    }
    append_metrics(cfg, run.metrics);
  }
  const auto gaps = energy_gap_curves(curves, cfg.baseline);
  auto out = open_out(out_path(cfg, "energy.csv"));
  write_energy_csv(out, gaps);
  write_energy_csv(std::cout, gaps);
  return 0;
}

int cmd_oracle_check(bool mutate) {
  OracleOptions opts;
  opts.mutate_beam = mutate;
  const auto checks = run_oracle_suite(opts);
  print_oracle_matrix(std::cout, checks);
  for (const auto& c : checks)
    if (!c.passed) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generation-order experiments for masked conditional sequence models"};
  app.require_subcommand(1);
  Options opts;

  struct Entry {
    const char* name;
    const char* help;
  };
  const std::vector<Entry> entries = {
      {"synth-data", "generate train/valid/test splits for a synthetic task"},
      {"train-lm", "train the masked translation model and the length model"},
      {"train-ar", "train the left-to-right rescoring model"},
      {"train-policy", "train a position-selection policy with PPO"},
      {"decode", "decode a split with one strategy; writes report, traces and a metrics row"},
      {"evaluate", "score a decode report, or decode with every strategy in 'strategies'"},
      {"analyze-orders", "order vectors and k-means clusters of decoded traces"},
      {"analyze-energy", "energy gap curves of each strategy against the baseline"},
  };
  std::map<std::string, CLI::App*> cmds;
  for (const auto& e : entries) {
    auto* cmd = app.add_subcommand(e.name, e.help);
    add_config_flags(cmd, opts);
    cmds[e.name] = cmd;
  }
  cmds["evaluate"]->add_option("--report", opts.report, "decode report (JSONL) to score instead of decoding");
  auto* oracle = app.add_subcommand("oracle-check", "run the tabular oracle suite");
  oracle->add_flag("--mutate", opts.mutate, "inject a beam-expansion fault; the beam check must then fail");

  CLI11_PARSE(app, argc, argv);

  try {
    if (oracle->parsed()) return cmd_oracle_check(opts.mutate);
    for (const auto& [name, cmd] : cmds) {
      if (!cmd->parsed()) continue;
      const auto cfg = resolve(opts, name);
      if (name == "synth-data") return cmd_synth_data(cfg);
      if (name == "train-lm") return cmd_train_lm(cfg);
      if (name == "train-ar") return cmd_train_ar(cfg);
      if (name == "train-policy") return cmd_train_policy(cfg);
      if (name == "decode") return cmd_decode(cfg);
      if (name == "evaluate") return cmd_evaluate(cfg, opts.report);
      if (name == "analyze-orders") return cmd_analyze_orders(cfg);
      if (name == "analyze-energy") return cmd_analyze_energy(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "seqgen: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
