#pragma once

// Generation procedures built on the step/trace primitives: the generic
// select-then-replace loop, its autoregressive / semi-autoregressive /
// parallel-refinement special cases, Gibbs sampling, length-conditioned beam
// search with an exhaustive reference, Monte Carlo decoding, and decoding
// over several candidate lengths.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "seqgen/models.hpp"
#include "seqgen/selection.hpp"

namespace seqgen {

enum class ScheduleMode { linear_time, constant_ceil, constant_anneal };
enum class SymbolChoice { greedy, sample };
enum class Rescorer { pseudo_ll, ar_model };

ScheduleMode parse_schedule(std::string_view s);
std::string to_string(ScheduleMode m);
Rescorer parse_rescorer(std::string_view s);
std::string to_string(Rescorer r);

struct DecodeConfig {
  ScheduleMode schedule = ScheduleMode::linear_time;
  /// Fixed iteration budget; 0 derives T = ceil(T_per_length * L).
  std::size_t T = 0;
  double T_per_length = 1.0;
  SymbolChoice symbols = SymbolChoice::greedy;
  std::size_t beam_K = 1;
  std::size_t beam_Kp = 1;
  std::size_t beam_Kpp = 1;
  std::size_t n_length_candidates = 1;
  Rescorer rescoring = Rescorer::pseudo_ll;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t resolve_T(std::size_t length) const;
  bool uses_beam() const { return beam_K > 1 || beam_Kp > 1 || beam_Kpp > 1; }
};

/// o_1..o_T.
///   linear_time: all ones (T >= L required so every position is filled).
///   constant_ceil: o_t = min(ceil(L/T), remaining - (T - t)) with
///     remaining = max(L, T) minus what earlier steps used, so every o_t >= 1
///     and the sum is exactly max(L, T).
///   constant_anneal: o_t = round-half-away(L + (1 - L)(t - 1)/(T - 1)),
///     T = 1 gives [L].
std::vector<std::size_t> schedule_tokens(ScheduleMode mode, std::size_t length, std::size_t T);

/// Highest-probability content symbol; ties go to the lowest id.
TokenId greedy_symbol(const Row& row, const Vocabulary& vocab);
/// Draws a content symbol proportionally to its probability.
TokenId sample_symbol(const Row& row, const Vocabulary& vocab, Rng& rng);

GenerationTrace generate(const MaskedConditionalModel& model, const StrategyConfig& strategy,
                         const Sequence& x, std::size_t length, const DecodeConfig& cfg, Rng& rng,
                         double length_log_prob = 0.0);

struct SpecialCase {
  enum class Kind { ar, semi_ar, nar_refine } kind = Kind::ar;
  /// Group size for semi_ar, step count for nar_refine.
  std::size_t param = 1;
};

GenerationTrace special_case_decode(const MaskedConditionalModel& model, const Sequence& x,
                                    std::size_t length, SpecialCase mode,
                                    double length_log_prob = 0.0);

/// Single-site Gibbs chain. The initial state is one parallel sample of every
/// position from the all-mask query; each step selects one coordinate with
/// `strategy` over all positions, masks it and resamples it. Returns the
/// state after every step.
std::vector<Sequence> gibbs_sample(const MaskedConditionalModel& model, const Sequence& x,
                                   std::size_t length, std::size_t n_steps,
                                   const StrategyConfig& strategy, Rng& rng);

struct ScoredTrace {
  GenerationTrace trace;
  double score = 0.0;
};

/// Length-conditioned beam search over single-position steps. Each
/// hypothesis expands to its K' best positions and each position to its K''
/// most probable symbols; the K best expansions by score survive, ties broken
/// by the lexicographic order of their (position, symbol) paths. Results are
/// sorted best first.
std::vector<ScoredTrace> beam_search(const MaskedConditionalModel& model,
                                     const StrategyConfig& strategy, const Sequence& x,
                                     std::size_t length, const DecodeConfig& cfg,
                                     double length_log_prob = 0.0,
                                     bool drop_top_symbol_for_testing = false);

/// Exhaustive maximization of the trace score over every eligible position
/// path and symbol choice with the deterministic-selection convention
/// (coordinate term 0). Refuses instances with |content|^T * L^T > 1e6.
ScoredTrace brute_force_optimistic(const MaskedConditionalModel& model, const Sequence& x,
                                   std::size_t length, std::size_t T,
                                   double length_log_prob = 0.0);

struct MonteCarloResult {
  Sequence best;
  double best_pll = 0.0;
  std::vector<double> sample_plls;
};

/// M traces with sampled coordinates (per `strategy`) and sampled symbols;
/// keeps the final sequence with the highest pseudo-log-likelihood.
MonteCarloResult monte_carlo_decode(const MaskedConditionalModel& model,
                                    const StrategyConfig& strategy, const Sequence& x,
                                    std::size_t length, std::size_t M, const DecodeConfig& cfg,
                                    Rng& rng);

/// generate() or beam_search() depending on the beam settings; returns the
/// best trace.
GenerationTrace decode_at_length(const MaskedConditionalModel& model, const StrategyConfig& strategy,
                                 const Sequence& x, std::size_t length, const DecodeConfig& cfg,
                                 Rng& rng, double length_log_prob = 0.0);

struct LengthCandidateReport {
  std::size_t length = 0;
  double length_log_prob = 0.0;
  double rescore = 0.0;
  Sequence sequence;
  GenerationTrace trace;
};

struct LengthDecodeResult {
  Sequence chosen;
  std::size_t chosen_index = 0;
  std::vector<LengthCandidateReport> candidates;
};

/// Decodes independently at each of the n most probable lengths and keeps
/// the candidate with the highest rescoring value; ties go to the more
/// probable length. `ar` is required when rescoring with the AR model.
LengthDecodeResult decode_with_length_candidates(const MaskedConditionalModel& model,
                                                 const LengthDistribution& ldist,
                                                 const StrategyConfig& strategy, const Sequence& x,
                                                 const DecodeConfig& cfg, Rng& rng,
                                                 const ARModel* ar = nullptr);

}  // namespace seqgen
