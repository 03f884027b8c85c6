#include "seqgen/decoding.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <cmath>
#include <iostream>
#include <numeric>

namespace seqgen {

ScheduleMode parse_schedule(std::string_view s) {
  if (s == "linear_time" || s == "linear") return ScheduleMode::linear_time;
  if (s == "constant_ceil" || s == "ceil") return ScheduleMode::constant_ceil;
  if (s == "constant_anneal" || s == "anneal") return ScheduleMode::constant_anneal;
  throw InvalidArgument("unknown schedule '" + std::string(s) + "'");
}

std::string to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::linear_time: return "linear_time";
    case ScheduleMode::constant_ceil: return "constant_ceil";
    case ScheduleMode::constant_anneal: return "constant_anneal";
  }
  return "?";
}

Rescorer parse_rescorer(std::string_view s) {
  if (s == "pseudo_ll" || s == "pll") return Rescorer::pseudo_ll;
  if (s == "ar_model" || s == "ar") return Rescorer::ar_model;
  throw InvalidArgument("unknown rescorer '" + std::string(s) + "'");
}

std::string to_string(Rescorer r) { return r == Rescorer::ar_model ? "ar_model" : "pseudo_ll"; }

void DecodeConfig::validate() const {
  if (beam_K == 0 || beam_Kp == 0 || beam_Kpp == 0)
    throw InvalidArgument("decode: beam sizes must be at least 1");
  if (n_length_candidates == 0) throw InvalidArgument("decode: need at least one length candidate");
  if (T == 0 && !(T_per_length > 0.0)) throw InvalidArgument("decode: T_per_length must be positive");
}

std::size_t DecodeConfig::resolve_T(std::size_t length) const {
  if (T > 0) return T;
  const double t = std::ceil(T_per_length * static_cast<double>(length) - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(t));
}

std::vector<std::size_t> schedule_tokens(ScheduleMode mode, std::size_t length, std::size_t T) {
  if (length == 0) throw InvalidLength("schedule: L must be at least 1");
  if (T == 0) throw InvalidArgument("schedule: T must be at least 1");
  std::vector<std::size_t> o(T, 1);
  switch (mode) {
    case ScheduleMode::linear_time:
      if (T < length) throw InvalidArgument("schedule: linear-time decoding needs T >= L");
      break;
    case ScheduleMode::constant_ceil: {
      const std::size_t per = (length + T - 1) / T;
      std::size_t remaining = std::max(length, T);
      for (std::size_t t = 1; t <= T; ++t) {
        const std::size_t reserve = T - t;
        o[t - 1] = std::max<std::size_t>(1, std::min(per, remaining - reserve));
        remaining -= o[t - 1];
      }
      break;
    }
    case ScheduleMode::constant_anneal: {
      if (T == 1) {
        o[0] = length;
        break;
      }
      const double L = static_cast<double>(length);
      for (std::size_t t = 1; t <= T; ++t) {
        const double v = L + (1.0 - L) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        o[t - 1] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(v)));
      }
      break;
    }
  }
  return o;
}

TokenId greedy_symbol(const Row& row, const Vocabulary& vocab) {
  const auto& content = vocab.content_ids();
  if (content.empty()) throw InvalidArgument("vocabulary has no content symbols");
  TokenId best = content[0];
  for (TokenId c : content)
    if (row[c] > row[best]) best = c;
  return best;
}

TokenId sample_symbol(const Row& row, const Vocabulary& vocab, Rng& rng) {
  const auto& content = vocab.content_ids();
  std::vector<double> w(content.size());
  for (std::size_t j = 0; j < content.size(); ++j) w[j] = row[content[j]];
  return content[sample_categorical(rng, w)];
}

GenerationTrace generate(const MaskedConditionalModel& model, const StrategyConfig& strategy,
                         const Sequence& x, std::size_t length, const DecodeConfig& cfg, Rng& rng,
                         double length_log_prob) {
  cfg.validate();
  strategy.validate();
  const auto& vocab = model.vocab();
  const auto schedule = schedule_tokens(cfg.schedule, length, cfg.resolve_T(length));
  SelectionState state(model, x, length);
  GenerationTrace trace = start_trace(x, length, length_log_prob, vocab);
  for (std::size_t o : schedule) {
    const Selection sel = select_positions(strategy, state, o, rng);
    std::vector<std::size_t> positions = sel.positions;
    std::sort(positions.begin(), positions.end());
    const auto rows = state.symbol_rows(positions);
    GenerationStep step;
    step.coords = CoordinateMask::from_positions(length, positions);
    step.coord_log_prob = sel.log_prob;
    for (std::size_t j = 0; j < positions.size(); ++j) {
      const TokenId tok = cfg.symbols == SymbolChoice::greedy ? greedy_symbol(rows[j], vocab)
                                                              : sample_symbol(rows[j], vocab, rng);
      step.replacements[positions[j]] = tok;
      step.symbol_log_prob += std::log(rows[j][tok]);
    }
    state.advance(step.replacements);
    push_step(trace, std::move(step));
  }
  return trace;
}

namespace {

GenerationTrace decode_groups(const MaskedConditionalModel& model, const Sequence& x,
                              std::size_t length, const std::vector<std::vector<std::size_t>>& groups,
                              double length_log_prob) {
  const auto& vocab = model.vocab();
  GenerationTrace trace = start_trace(x, length, length_log_prob, vocab);
  for (const auto& group : groups) {
    const Sequence& y = trace.intermediates.back();
    const auto rows = model.conditional(y, group, x);
    GenerationStep step;
    step.coords = CoordinateMask::from_positions(length, group);
    for (std::size_t j = 0; j < group.size(); ++j) {
      const TokenId tok = greedy_symbol(rows[j], vocab);
      step.replacements[group[j]] = tok;
      step.symbol_log_prob += std::log(rows[j][tok]);
    }
    push_step(trace, std::move(step));
  }
  return trace;
}

}  // namespace

GenerationTrace special_case_decode(const MaskedConditionalModel& model, const Sequence& x,
                                    std::size_t length, SpecialCase mode, double length_log_prob) {
  if (length == 0) throw InvalidLength("special_case_decode: L must be at least 1");
  std::vector<std::vector<std::size_t>> groups;
  switch (mode.kind) {
    case SpecialCase::Kind::ar:
      for (std::size_t i = 0; i < length; ++i) groups.push_back({i});
      break;
    case SpecialCase::Kind::semi_ar: {
      const std::size_t k = mode.param;
      if (k == 0) throw InvalidArgument("semi_ar: group size must be at least 1");
      for (std::size_t start = 0; start < length; start += k) {
        std::vector<std::size_t> g;
        for (std::size_t i = start; i < std::min(length, start + k); ++i) g.push_back(i);
        groups.push_back(std::move(g));
      }
      break;
    }
    case SpecialCase::Kind::nar_refine: {
      if (mode.param == 0) throw InvalidArgument("nar_refine: T must be at least 1");
      std::vector<std::size_t> all(length);
      std::iota(all.begin(), all.end(), 0);
      groups.assign(mode.param, all);
      break;
    }
  }
  return decode_groups(model, x, length, groups, length_log_prob);
}

std::vector<Sequence> gibbs_sample(const MaskedConditionalModel& model, const Sequence& x,
                                   std::size_t length, std::size_t n_steps,
                                   const StrategyConfig& strategy, Rng& rng) {
  if (n_steps == 0) throw InvalidArgument("gibbs_sample: n_steps must be at least 1");
  StrategyConfig strat = strategy;
  strat.scope = SelectionScope::all_positions;
  strat.validate();
  const auto& vocab = model.vocab();
  SelectionState state(model, x, length);
  std::vector<std::size_t> all(length);
  std::iota(all.begin(), all.end(), 0);
  const auto init_rows = model.conditional(state.y(), all, x);
  std::map<std::size_t, TokenId> init;
  for (std::size_t i = 0; i < length; ++i) init[i] = sample_symbol(init_rows[i], vocab, rng);
  state.advance(init);

  std::vector<Sequence> out;
  out.reserve(n_steps);
  for (std::size_t s = 0; s < n_steps; ++s) {
    const Selection sel = select_positions(strat, state, 1, rng);
    const std::size_t pos = sel.positions[0];
    const auto rows = state.symbol_rows({pos});
    state.advance({{pos, sample_symbol(rows[0], vocab, rng)}});
    out.push_back(state.y());
  }
  return out;
}

namespace {

struct Hypothesis {
  SelectionState state;
  GenerationTrace trace;
  double score = 0.0;
  std::vector<std::pair<std::size_t, TokenId>> path;
};

struct Expansion {
  std::size_t parent = 0;
  std::size_t position = 0;
  TokenId token = 0;
  double coord_log_prob = 0.0;
  double symbol_log_prob = 0.0;
  double score = 0.0;
};

std::vector<TokenId> ranked_symbols(const Row& row, const Vocabulary& vocab) {
  std::vector<TokenId> ids = vocab.content_ids();
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return row[a] > row[b]; });
  return ids;
}

}  // namespace

std::vector<ScoredTrace> beam_search(const MaskedConditionalModel& model,
                                     const StrategyConfig& strategy, const Sequence& x,
                                     std::size_t length, const DecodeConfig& cfg,
                                     double length_log_prob, bool drop_top_symbol_for_testing) {
  cfg.validate();
  strategy.validate();
  const auto& vocab = model.vocab();
  const auto schedule = schedule_tokens(cfg.schedule, length, cfg.resolve_T(length));
  if (std::any_of(schedule.begin(), schedule.end(), [](std::size_t o) { return o != 1; }))
    throw InvalidArgument("beam search supports single-position steps only");
  std::size_t kpp = cfg.beam_Kpp;
  if (kpp > vocab.content_ids().size()) {
    std::clog << "warning: beam K'' = " << kpp << " exceeds the " << vocab.content_ids().size()
              << " content symbols; clamping\n";
    kpp = vocab.content_ids().size();
  }

  std::vector<Hypothesis> beam;
  beam.push_back({SelectionState(model, x, length), start_trace(x, length, length_log_prob, vocab),
                  length_log_prob, {}});
  for (std::size_t t = 0; t < schedule.size(); ++t) {
    std::vector<Expansion> expansions;
    for (std::size_t h = 0; h < beam.size(); ++h) {
      Hypothesis& hyp = beam[h];
      const auto ranked = rank_positions(strategy, hyp.state, 1);
      const std::size_t kp = std::min(cfg.beam_Kp, ranked.size());
      for (std::size_t p = 0; p < kp; ++p) {
        const auto& choice = ranked[p];
        const Row row = hyp.state.symbol_rows({choice.position})[0];
        const auto symbols = ranked_symbols(row, vocab);
        const std::size_t offset = drop_top_symbol_for_testing ? 1 : 0;
        for (std::size_t s = offset; s < std::min(symbols.size(), kpp + offset); ++s) {
          Expansion e;
          e.parent = h;
          e.position = choice.position;
          e.token = symbols[s];
          e.coord_log_prob = choice.log_prob;
          e.symbol_log_prob = std::log(row[symbols[s]]);
          e.score = hyp.score;
          e.score += e.coord_log_prob;
          e.score += e.symbol_log_prob;
          expansions.push_back(e);
        }
      }
    }
    auto path_less = [&](const Expansion& a, const Expansion& b) {
      const auto& pa = beam[a.parent].path;
      const auto& pb = beam[b.parent].path;
      if (pa != pb) return pa < pb;
      return std::make_pair(a.position, a.token) < std::make_pair(b.position, b.token);
    };
    std::sort(expansions.begin(), expansions.end(), [&](const Expansion& a, const Expansion& b) {
      if (a.score != b.score) return a.score > b.score;
      return path_less(a, b);
    });
    if (expansions.size() > cfg.beam_K) expansions.resize(cfg.beam_K);

    std::vector<Hypothesis> next;
    next.reserve(expansions.size());
    for (const auto& e : expansions) {
      Hypothesis child = beam[e.parent];
      GenerationStep step;
      step.coords = CoordinateMask::from_positions(length, {e.position});
      step.replacements[e.position] = e.token;
      step.coord_log_prob = e.coord_log_prob;
      step.symbol_log_prob = e.symbol_log_prob;
      child.state.advance(step.replacements);
      push_step(child.trace, std::move(step));
      child.score = e.score;
      child.path.emplace_back(e.position, e.token);
      next.push_back(std::move(child));
    }
    beam = std::move(next);
  }
  std::vector<ScoredTrace> out;
  out.reserve(beam.size());
  for (auto& h : beam) out.push_back({std::move(h.trace), h.score});
  return out;
}

ScoredTrace brute_force_optimistic(const MaskedConditionalModel& model, const Sequence& x,
                                   std::size_t length, std::size_t T, double length_log_prob) {
  if (length == 0) throw InvalidLength("brute force: L must be at least 1");
  if (T < length) throw InvalidArgument("brute force: T must be at least L");
  const auto& vocab = model.vocab();
  const auto& content = vocab.content_ids();
  const double paths = std::pow(static_cast<double>(content.size()), static_cast<double>(T)) *
                       std::pow(static_cast<double>(length), static_cast<double>(T));
  if (paths > 1e6) throw InvalidArgument("brute force: instance too large to enumerate");

  struct Move {
    std::size_t position;
    TokenId token;
    double log_prob;
  };
  std::vector<Move> path, best_path;
  double best = -std::numeric_limits<double>::infinity();
  bool found = false;
  Sequence y(std::vector<TokenId>(length, vocab.mask_id()));
  std::vector<std::uint8_t> filled(length, 0);

  std::function<void(std::size_t, double)> dfs = [&](std::size_t depth, double score) {
    if (depth == T) {
      if (!found || score > best) {
        best = score;
        best_path = path;
        found = true;
      }
      return;
    }
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < length; ++i)
      if (!filled[i]) eligible.push_back(i);
    if (eligible.empty()) {
      eligible.resize(length);
      std::iota(eligible.begin(), eligible.end(), 0);
    }
    for (std::size_t pos : eligible) {
      const Row row = model.conditional(y, {pos}, x)[0];
      const TokenId saved = y[pos];
      const std::uint8_t saved_fill = filled[pos];
      for (TokenId tok : content) {
        double s = score;
        s += 0.0;
        const double lp = std::log(row[tok]);
        s += lp;
        y[pos] = tok;
        filled[pos] = 1;
        path.push_back({pos, tok, lp});
        dfs(depth + 1, s);
        path.pop_back();
      }
      y[pos] = saved;
      filled[pos] = saved_fill;
    }
  };
  dfs(0, length_log_prob);

  ScoredTrace result{start_trace(x, length, length_log_prob, vocab), best};
  for (const auto& m : best_path) {
    GenerationStep step;
    step.coords = CoordinateMask::from_positions(length, {m.position});
    step.replacements[m.position] = m.token;
    step.symbol_log_prob = m.log_prob;
    push_step(result.trace, std::move(step));
  }
  return result;
}

MonteCarloResult monte_carlo_decode(const MaskedConditionalModel& model,
                                    const StrategyConfig& strategy, const Sequence& x,
                                    std::size_t length, std::size_t M, const DecodeConfig& cfg,
                                    Rng& rng) {
  if (M == 0) throw InvalidArgument("monte_carlo_decode: M must be at least 1");
  DecodeConfig sampled = cfg;
  sampled.symbols = SymbolChoice::sample;
  MonteCarloResult res;
  for (std::size_t m = 0; m < M; ++m) {
    const auto trace = generate(model, strategy, x, length, sampled, rng);
    const double pll = pseudo_log_likelihood(model, trace.final_sequence(), x);
    res.sample_plls.push_back(pll);
    if (m == 0 || pll > res.best_pll) {
      res.best_pll = pll;
      res.best = trace.final_sequence();
    }
  }
  return res;
}

GenerationTrace decode_at_length(const MaskedConditionalModel& model, const StrategyConfig& strategy,
                                 const Sequence& x, std::size_t length, const DecodeConfig& cfg,
                                 Rng& rng, double length_log_prob) {
  if (cfg.uses_beam()) return beam_search(model, strategy, x, length, cfg, length_log_prob).front().trace;
  return generate(model, strategy, x, length, cfg, rng, length_log_prob);
}

LengthDecodeResult decode_with_length_candidates(const MaskedConditionalModel& model,
                                                 const LengthDistribution& ldist,
                                                 const StrategyConfig& strategy, const Sequence& x,
                                                 const DecodeConfig& cfg, Rng& rng, const ARModel* ar) {
  cfg.validate();
  if (cfg.rescoring == Rescorer::ar_model && !ar)
    throw InvalidArgument("length candidates: AR rescoring needs an AR model");
  LengthDecodeResult res;
  for (const auto& [len, p] : ldist.candidates(x.size(), cfg.n_length_candidates)) {
    if (len > model.max_length()) continue;
    LengthCandidateReport cand;
    cand.length = len;
    cand.length_log_prob = std::log(p);
    cand.trace = decode_at_length(model, strategy, x, len, cfg, rng, cand.length_log_prob);
    cand.sequence = cand.trace.final_sequence();
    cand.rescore = cfg.rescoring == Rescorer::ar_model ? ar->log_prob(cand.sequence, x)
                                                       : pseudo_log_likelihood(model, cand.sequence, x);
    res.candidates.push_back(std::move(cand));
  }
  if (res.candidates.empty()) throw InvalidLength("length candidates: no usable length");
  for (std::size_t i = 1; i < res.candidates.size(); ++i)
    if (res.candidates[i].rescore > res.candidates[res.chosen_index].rescore) res.chosen_index = i;
  res.chosen = res.candidates[res.chosen_index].sequence;
  return res;
}

}  // namespace seqgen
