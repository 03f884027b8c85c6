#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// run: synthetic translation tasks, flat run configuration, batch decoding
// with reports and metrics, and the tabular oracle suite.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "seqgen/decoding.hpp"
#include "seqgen/eval.hpp"
#include "seqgen/models.hpp"
#include "seqgen/rl.hpp"

namespace seqgen::harness {

/// cipher_fertility extends the cipher with a second output symbol after
/// every source symbol of a fixed "fertile" half of the alphabet, so the
/// target length depends on the source content and not only on its length.
enum class TaskKind { cipher_copy, cipher_reverse, local_swap, cipher_fertility };

TaskKind parse_task_kind(std::string_view s);
std::string to_string(TaskKind k);

struct SyntheticTask {
  TaskKind kind = TaskKind::cipher_reverse;
  std::size_t vocab_size = 32;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::uint64_t seed = 1;

  void validate() const;
  /// Specials plus content symbols "w0" .. "w{V-1}", shared by both sides.
  Vocabulary vocab() const;
  std::size_t max_target_length() const;
};

/// The deterministic source -> target function of a task.
class TaskMap {
 public:
  /// sigma, the fertile set and the second-symbol table drawn from the seed.
  explicit TaskMap(const SyntheticTask& task);
  /// Identity cipher; fertility (if any) keeps its seeded tables.
  static TaskMap identity(const SyntheticTask& task);

  Sequence apply(const Sequence& source) const;
  const std::vector<std::size_t>& sigma() const { return sigma_; }
  bool fertile(std::size_t content_index) const { return fertile_.at(content_index); }

 private:
  TaskMap() = default;
  SyntheticTask task_;
  Vocabulary vocab_;
  std::vector<std::size_t> sigma_;   // content index -> content index
  std::vector<std::size_t> second_;  // content index -> content index
  std::vector<bool> fertile_;
};

struct SplitCorpus {
  Corpus train, valid, test;
};

/// n distinct random sources mapped through the task; test and valid each
/// take n/20 pairs and train the rest. Throws for n < 100 or when the task
/// cannot produce n distinct sources.
SplitCorpus synth_corpus(const SyntheticTask& task, std::size_t n);

/// train.tsv, valid.tsv, test.tsv and vocab.txt inside `dir`.
void write_splits(const std::string& dir, const SplitCorpus& splits, const Vocabulary& vocab);
Vocabulary read_vocab_file(const std::string& path);
SplitCorpus read_splits(const std::string& dir, Vocabulary* vocab_out = nullptr);

/// Flat key=value configuration. Every key has a default; unknown keys,
/// malformed values and duplicate keys within one file are rejected.
struct RunConfig {
  // task
  std::string task = "cipher_reverse";
  std::size_t vocab_size = 32;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::size_t n_pairs = 20000;
  std::uint64_t data_seed = 1;
  // models
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t train_steps = 3000;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  std::uint64_t train_seed = 1;
  std::size_t log_every = 100;
  // decoding
  std::string strategy = "preset:easy_first";
  std::string schedule = "linear_time";
  std::size_t T = 0;
  double T_per_length = 1.0;
  std::string symbols = "greedy";
  std::size_t beam = 1;
  std::size_t beam_positions = 1;
  std::size_t length_candidates = 1;
  std::string rescoring = "pseudo_ll";
  std::uint64_t decode_seed = 1;
  std::size_t test_limit = 0;
  std::string split = "test";
  // policy training
  double clip_epsilon = 0.2;
  double gamma = 0.9;
  std::size_t history = 0;
  std::size_t policy_width = 128;
  std::size_t generation_batch = 16;
  std::size_t buffer_capacity = 1000;
  std::size_t update_batch = 128;
  std::size_t updates_per_round = 4;
  double value_weight = 0.5;
  std::string advantage = "monte_carlo";
  double gae_lambda = 0.95;
  std::size_t ppo_iterations = 200;
  double ppo_lr = 1e-3;
  std::uint64_t ppo_seed = 1;
  std::size_t ppo_train_pairs = 2000;
  // analysis
  std::size_t clusters = 5;
  std::uint64_t cluster_seed = 1;
  std::string energy_kind = "pseudo_ll";
  std::string baseline = "preset:uniform";
  std::string strategies = "preset:uniform;preset:left2right;preset:least2most;preset:easy_first";
  // plumbing
  std::string out_dir;
  std::size_t workers = 1;

  /// Every key in declaration order.
  static const std::vector<std::string>& keys();
  static bool has_key(std::string_view key);

  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  /// Applies "key=value" lines; blank lines and lines starting with '#' are
  /// skipped.
  void merge_text(std::string_view text, const std::string& origin = "<text>");
  void merge_file(const std::string& path);
  std::string to_text() const;
  void write_file(const std::string& path) const;

  SyntheticTask synthetic_task() const;
  EncoderDims encoder_dims() const;
  TrainConfig train_config() const;
  DecodeConfig decode_config() const;
  PpoConfig ppo_config() const;
  EnergyKind energy_kind_value() const;

  std::string data_dir() const;
  std::string lm_path() const;
  std::string ar_path() const;
  std::string policy_path() const;
  std::string length_path() const;

  void validate() const;
};

/// Output directory fallback when out_dir is unset: $SEQGEN_OUTPUT_ROOT, or
/// "runs" when the variable is empty.
std::string default_output_root();

struct MetricsRow {
  std::string strategy;
  std::size_t b = 1;
  std::string T;
  std::string schedule;
  double bleu = 0.0;
  double exact_match = 0.0;
  double mean_energy = 0.0;
  double wall_time = 0.0;  // seconds for the whole batch
};

std::string metrics_header();
std::string metrics_row(const MetricsRow& row);
/// "L", "2L", "0.5L" for length-proportional budgets, else the fixed count.
std::string budget_label(const DecodeConfig& cfg);

struct DecodeRun {
  std::vector<LengthDecodeResult> results;
  std::vector<double> wall_ms;
  std::vector<Sequence> references;
  std::string strategy;
  MetricsRow metrics;
};

/// Decodes every pair with the configured strategy, schedule, beam and
/// length candidates. Sentence i uses the seed mix of cfg.seed and i, so
/// results do not depend on `workers`.
DecodeRun run_decode(const MaskedConditionalModel& model, const LengthDistribution& ldist,
                     const StrategyConfig& strategy, const Corpus& pairs, const DecodeConfig& cfg,
                     std::size_t workers = 1, const ARModel* ar = nullptr,
                     EnergyKind energy_kind = EnergyKind::pseudo_ll);

/// One JSON object per sentence: source, reference, chosen, chosen_length,
/// candidates [{length, length_log_prob, score, text}], strategy, wall_time_ms.
void write_decode_report(std::ostream& out, const DecodeRun& run, const Corpus& pairs,
                         const Vocabulary& vocab);
void write_decode_traces(std::ostream& out, const DecodeRun& run, const Vocabulary& vocab,
                         const std::string& config_text);

struct OracleOptions {
  std::uint64_t seed = 1;
  bool mutate_beam = false;
  std::size_t chain_models = 50;
  std::size_t reduction_instances = 100;
  std::size_t degenerate_inputs = 100;
  std::size_t brute_force_instances = 50;
  std::size_t gibbs_models = 20;
  std::size_t gibbs_burn_in = 1000;
  std::size_t gibbs_steps = 50000;
};

struct OracleCheck {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::size_t instances = 0;
  double seconds = 0.0;
};

/// Chain rule, special-case reductions, degenerate beam, beam against
/// exhaustive search and Gibbs stationarity on random tabular joints.
std::vector<OracleCheck> run_oracle_suite(const OracleOptions& opts = {});
void print_oracle_matrix(std::ostream& out, const std::vector<OracleCheck>& checks);

/// Exact distribution over content^L reached by the single-site chain with
/// uniform coordinate choice, as the left unit eigenvector of its transition
/// matrix. States are indexed like TabularJointModel::joint.
std::vector<double> gibbs_stationary(const TabularJointModel& model, std::size_t length);

}  // namespace seqgen::harness
