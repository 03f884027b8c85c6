#include "seqgen/seqcore.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace seqgen {

Vocabulary::Vocabulary(std::vector<std::string> tokens, TokenId mask_id, TokenId pad_id,
                       std::optional<TokenId> sep_id, std::optional<TokenId> eos_id)
    : tokens_(std::move(tokens)),
      mask_id_(mask_id),
      pad_id_(pad_id),
      sep_id_(sep_id),
      eos_id_(eos_id) {
  const auto n = tokens_.size();
  if (mask_id_ >= n || pad_id_ >= n) throw InvalidArgument("vocabulary: special id out of range");
  if (mask_id_ == pad_id_) throw InvalidArgument("vocabulary: mask and pad must differ");
  if ((sep_id_ && *sep_id_ >= n) || (eos_id_ && *eos_id_ >= n))
    throw InvalidArgument("vocabulary: marker id out of range");
  for (TokenId i = 0; i < n; ++i) {
    if (!index_.emplace(tokens_[i], i).second)
      throw InvalidArgument("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
  for (TokenId i = 0; i < n; ++i)
    if (!is_special(i)) content_ids_.push_back(i);
}

Vocabulary Vocabulary::with_specials(const std::vector<std::string>& content,
                                     bool seq2seq_markers) {
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kMaskToken)};
  std::optional<TokenId> sep;
  std::optional<TokenId> eos;
  if (seq2seq_markers) {
    sep = static_cast<TokenId>(tokens.size());
    tokens.emplace_back(kSepToken);
    eos = static_cast<TokenId>(tokens.size());
    tokens.emplace_back(kEosToken);
  }
  tokens.insert(tokens.end(), content.begin(), content.end());
  return Vocabulary(std::move(tokens), 1, 0, sep, eos);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  auto find = [&](std::string_view t) -> std::optional<TokenId> {
    auto it = std::find(tokens.begin(), tokens.end(), t);
    if (it == tokens.end()) return std::nullopt;
    return static_cast<TokenId>(it - tokens.begin());
  };
  const auto mask = find(kMaskToken);
  const auto pad = find(kPadToken);
  if (!mask || !pad) throw InvalidArgument("vocabulary: token list lacks <mask> or <pad>");
  const auto sep = find(kSepToken);
  const auto eos = find(kEosToken);
  return Vocabulary(std::move(tokens), *mask, *pad, sep, eos);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw InvalidArgument("vocabulary: id out of range");
  return tokens_[id];
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw InvalidArgument("vocabulary: unknown token '" + std::string(token) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

bool Vocabulary::is_special(TokenId id) const {
  return id == mask_id_ || id == pad_id_ || (sep_id_ && id == *sep_id_) ||
         (eos_id_ && id == *eos_id_);
}

bool Vocabulary::operator==(const Vocabulary& other) const {
  return tokens_ == other.tokens_ && mask_id_ == other.mask_id_ && pad_id_ == other.pad_id_ &&
         sep_id_ == other.sep_id_ && eos_id_ == other.eos_id_;
}

bool Sequence::contains(TokenId id) const {
  return std::find(ids_.begin(), ids_.end(), id) != ids_.end();
}

void Sequence::check(const Vocabulary& vocab) const {
  for (TokenId id : ids_)
    if (id >= vocab.size()) throw InvalidArgument("sequence: token id outside vocabulary");
}

Sequence parse_sequence(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) ids.push_back(vocab.id(tok));
  return Sequence(std::move(ids));
}

std::string render(const Sequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(seq[i]);
  }
  return out;
}

CoordinateMask::CoordinateMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto b : bits_)
    if (b > 1) throw InvalidArgument("coordinate mask: bits must be 0 or 1");
}

CoordinateMask CoordinateMask::from_positions(std::size_t length,
                                              const std::vector<std::size_t>& positions) {
  CoordinateMask mask(length);
  for (auto p : positions) {
    if (p >= length) throw InvalidArgument("coordinate mask: position out of range");
    mask.set(p);
  }
  return mask;
}

std::size_t CoordinateMask::popcount() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<std::size_t> CoordinateMask::positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits_.size(); ++i)
    if (bits_[i]) out.push_back(i);
  return out;
}

std::pair<Sequence, CoordinateMask> init_state(std::size_t length, const Vocabulary& vocab) {
  if (length == 0) throw InvalidLength("init_state: length must be at least 1");
  return {Sequence(std::vector<TokenId>(length, vocab.mask_id())), CoordinateMask(length)};
}

Sequence apply_step(const Sequence& y, const GenerationStep& step) {
  if (step.coords.size() != y.size())
    throw InconsistentStep("apply_step: coordinate mask length differs from sequence length");
  for (const auto& [pos, tok] : step.replacements) {
    if (pos >= y.size() || !step.coords.test(pos))
      throw InconsistentStep("apply_step: replacement at unflagged position " + std::to_string(pos));
  }
  if (step.replacements.size() != step.coords.popcount())
    throw InconsistentStep("apply_step: flagged position without replacement");
  std::vector<TokenId> out = y.ids();
  for (const auto& [pos, tok] : step.replacements) out[pos] = tok;
  return Sequence(std::move(out));
}

GenerationTrace start_trace(const Sequence& input, std::size_t length, double length_log_prob,
                            const Vocabulary& vocab) {
  GenerationTrace trace;
  trace.input = input;
  trace.length = length;
  trace.length_log_prob = length_log_prob;
  trace.mask_id = vocab.mask_id();
  trace.intermediates.push_back(init_state(length, vocab).first);
  return trace;
}

void push_step(GenerationTrace& trace, GenerationStep step) {
  Sequence next = apply_step(trace.intermediates.back(), step);
  trace.steps.push_back(std::move(step));
  trace.intermediates.push_back(std::move(next));
}

std::vector<Sequence> replay_intermediates(const GenerationTrace& trace) {
  std::vector<Sequence> out;
  out.emplace_back(std::vector<TokenId>(trace.length, trace.mask_id));
  for (const auto& step : trace.steps) out.push_back(apply_step(out.back(), step));
  return out;
}

std::vector<std::string> validate_trace(const GenerationTrace& trace) {
  std::vector<std::string> violations;
  const std::size_t L = trace.length;
  if (L == 0) violations.emplace_back("length must be at least 1");
  if (trace.length_log_prob > 0.0) violations.emplace_back("length log-prob is positive");
  if (trace.intermediates.size() != trace.steps.size() + 1)
    violations.emplace_back("intermediate count " + std::to_string(trace.intermediates.size()) +
                            " does not equal steps + 1");
  if (!trace.intermediates.empty()) {
    const auto& first = trace.intermediates.front();
    bool empty_start = first.size() == L;
    for (TokenId id : first) empty_start = empty_start && id == trace.mask_id;
    if (!empty_start) violations.emplace_back("initial sequence not empty");
  }
  for (std::size_t i = 0; i < trace.intermediates.size(); ++i) {
    if (trace.intermediates[i].size() != L)
      violations.emplace_back("intermediate " + std::to_string(i + 1) + " has wrong length");
  }
  std::vector<std::uint8_t> touched(L, 0);
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& step = trace.steps[t];
    const std::string where = "step " + std::to_string(t + 1) + ": ";
    if (step.coords.size() != L) {
      violations.push_back(where + "coordinate mask has wrong length");
      continue;
    }
    if (step.coord_log_prob > 0.0) violations.push_back(where + "coordinate log-prob is positive");
    if (step.symbol_log_prob > 0.0) violations.push_back(where + "symbol log-prob is positive");
    for (const auto& [pos, tok] : step.replacements) {
      if (pos >= L || !step.coords.test(pos))
        violations.push_back(where + "replacement at unflagged position " + std::to_string(pos));
    }
    for (auto pos : step.coords.positions()) {
      if (!step.replacements.count(pos))
        violations.push_back(where + "flagged position " + std::to_string(pos) +
                             " has no replacement");
      touched[pos] = 1;
    }
    if (t + 1 < trace.intermediates.size() && trace.intermediates[t].size() == L &&
        trace.intermediates[t + 1].size() == L) {
      const auto& before = trace.intermediates[t];
      const auto& after = trace.intermediates[t + 1];
      for (std::size_t i = 0; i < L; ++i) {
        const auto it = step.replacements.find(i);
        const TokenId expected =
            (step.coords.test(i) && it != step.replacements.end()) ? it->second : before[i];
        if (after[i] != expected) {
          violations.push_back(where + "intermediate does not follow from step at position " +
                               std::to_string(i));
          break;
        }
      }
    }
  }
  const bool all_touched = std::all_of(touched.begin(), touched.end(), [](auto b) { return b; });
  if (all_touched && !trace.intermediates.empty() && trace.final_sequence().contains(trace.mask_id))
    violations.emplace_back("final sequence contains mask after every position was selected");
  return violations;
}

TraceScore trace_score(const GenerationTrace& trace) {
  const auto violations = validate_trace(trace);
  if (!violations.empty()) throw ValidationError("trace_score: " + violations.front());
  TraceScore score;
  score.length_term = trace.length_log_prob;
  score.total = trace.length_log_prob;
  for (const auto& step : trace.steps) {
    score.coord_term += step.coord_log_prob;
    score.symbol_term += step.symbol_log_prob;
    score.total += step.coord_log_prob;
    score.total += step.symbol_log_prob;
  }
  return score;
}

namespace {

using nlohmann::json;

std::vector<std::string> symbols_of(const Sequence& seq, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (TokenId id : seq) out.push_back(vocab.token(id));
  return out;
}

}  // namespace

void write_trace(std::ostream& out, const GenerationTrace& trace, const Vocabulary& vocab,
                 const TraceMeta& meta) {
  json header = {{"record", "header"},
                 {"input", symbols_of(trace.input, vocab)},
                 {"L", trace.length},
                 {"T", trace.steps.size()},
                 {"length_log_prob", trace.length_log_prob},
                 {"strategy", meta.strategy},
                 {"config", meta.config}};
  out << header.dump() << '\n';
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& step = trace.steps[t];
    const auto& before = trace.intermediates.at(t);
    std::vector<std::size_t> positions;
    std::vector<std::string> old_symbols;
    std::vector<std::string> new_symbols;
    for (const auto& [pos, tok] : step.replacements) {
      positions.push_back(pos);
      old_symbols.push_back(vocab.token(before[pos]));
      new_symbols.push_back(vocab.token(tok));
    }
    json rec = {{"record", "step"},
                {"t", t + 1},
                {"positions", positions},
                {"old_symbols", old_symbols},
                {"new_symbols", new_symbols},
                {"coord_log_prob", step.coord_log_prob},
                {"symbol_log_prob", step.symbol_log_prob}};
    out << rec.dump() << '\n';
  }
}

std::optional<std::pair<GenerationTrace, TraceMeta>> read_trace(std::istream& in,
                                                               const Vocabulary& vocab) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) break;
  }
  if (line.empty()) return std::nullopt;
  try {
    const json header = json::parse(line);
    if (header.at("record") != "header") throw IoError("read_trace: expected header record");
    std::vector<TokenId> input;
    for (const auto& s : header.at("input")) input.push_back(vocab.id(s.get<std::string>()));
    const auto L = header.at("L").get<std::size_t>();
    const auto T = header.at("T").get<std::size_t>();
    GenerationTrace trace =
        start_trace(Sequence(std::move(input)), L, header.at("length_log_prob").get<double>(), vocab);
    TraceMeta meta{header.at("strategy").get<std::string>(), header.at("config").get<std::string>()};
    for (std::size_t t = 0; t < T; ++t) {
      if (!std::getline(in, line)) throw IoError("read_trace: truncated trace");
      const json rec = json::parse(line);
      if (rec.at("record") != "step" || rec.at("t").get<std::size_t>() != t + 1)
        throw IoError("read_trace: out-of-order step record");
      GenerationStep step;
      step.coords = CoordinateMask(L);
      const auto positions = rec.at("positions").get<std::vector<std::size_t>>();
      const auto new_symbols = rec.at("new_symbols").get<std::vector<std::string>>();
      if (positions.size() != new_symbols.size()) throw IoError("read_trace: field length mismatch");
      for (std::size_t j = 0; j < positions.size(); ++j) {
        step.coords.set(positions[j]);
        step.replacements[positions[j]] = vocab.id(new_symbols[j]);
      }
      step.coord_log_prob = rec.at("coord_log_prob").get<double>();
      step.symbol_log_prob = rec.at("symbol_log_prob").get<double>();
      push_step(trace, std::move(step));
    }
    return std::make_pair(std::move(trace), std::move(meta));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("read_trace: malformed record: ") + e.what());
  }
}

}  // namespace seqgen
