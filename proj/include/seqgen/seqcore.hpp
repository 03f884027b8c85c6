#pragma once

// Sequence, coordinate and generation-trace types.
//
// A generation trace records a length-L sequence being built from the
// all-mask state: at every step a coordinate mask selects positions and the
// selected positions receive new symbols. Each step carries the log-prob of
// the coordinate choice and of the symbol choice, so a trace can be scored
// without consulting any model.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqgen/common.hpp"

namespace seqgen {

using TokenId = std::uint32_t;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kMaskToken = "<mask>";
inline constexpr std::string_view kSepToken = "<sep>";
inline constexpr std::string_view kEosToken = "<eos>";

class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, TokenId mask_id, TokenId pad_id,
             std::optional<TokenId> sep_id = std::nullopt,
             std::optional<TokenId> eos_id = std::nullopt);

  /// Specials first (<pad>, <mask>, then optionally <sep>, <eos>), followed by
  /// the content symbols in the given order.
  static Vocabulary with_specials(const std::vector<std::string>& content,
                                  bool seq2seq_markers);
  /// Rebuilds a vocabulary from its token list, locating specials by spelling.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId mask_id() const { return mask_id_; }
  TokenId pad_id() const { return pad_id_; }
  std::optional<TokenId> sep_id() const { return sep_id_; }
  std::optional<TokenId> eos_id() const { return eos_id_; }

  const std::string& token(TokenId id) const;
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  bool is_special(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// Non-special ids in ascending order.
  const std::vector<TokenId>& content_ids() const { return content_ids_; }

  bool operator==(const Vocabulary& other) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<TokenId> content_ids_;
  TokenId mask_id_ = 0;
  TokenId pad_id_ = 0;
  std::optional<TokenId> sep_id_;
  std::optional<TokenId> eos_id_;
};

class Sequence {
 public:
  Sequence() = default;
  explicit Sequence(std::vector<TokenId> ids) : ids_(std::move(ids)) {}
  Sequence(std::initializer_list<TokenId> ids) : ids_(ids) {}

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  TokenId operator[](std::size_t i) const { return ids_[i]; }
  TokenId& operator[](std::size_t i) { return ids_[i]; }
  const std::vector<TokenId>& ids() const { return ids_; }
  auto begin() const { return ids_.begin(); }
  auto end() const { return ids_.end(); }

  bool contains(TokenId id) const;
  /// Throws InvalidArgument when an id is outside the vocabulary.
  void check(const Vocabulary& vocab) const;

  auto operator<=>(const Sequence&) const = default;

 private:
  std::vector<TokenId> ids_;
};

Sequence parse_sequence(std::string_view text, const Vocabulary& vocab);
std::string render(const Sequence& seq, const Vocabulary& vocab);

class CoordinateMask {
 public:
  CoordinateMask() = default;
  explicit CoordinateMask(std::size_t length) : bits_(length, 0) {}
  explicit CoordinateMask(std::vector<std::uint8_t> bits);
  static CoordinateMask from_positions(std::size_t length,
                                       const std::vector<std::size_t>& positions);

  std::size_t size() const { return bits_.size(); }
  bool test(std::size_t i) const { return bits_.at(i) != 0; }
  void set(std::size_t i) { bits_.at(i) = 1; }
  std::size_t popcount() const;
  std::vector<std::size_t> positions() const;
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  bool operator==(const CoordinateMask&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// One factor of the generation process: coordinates Z^{t+1} and the new
/// symbols placed at the flagged positions.
struct GenerationStep {
  CoordinateMask coords;
  std::map<std::size_t, TokenId> replacements;
  double coord_log_prob = 0.0;
  double symbol_log_prob = 0.0;

  bool operator==(const GenerationStep&) const = default;
};

struct GenerationTrace {
  Sequence input;
  std::size_t length = 0;
  double length_log_prob = 0.0;
  TokenId mask_id = 0;
  std::vector<GenerationStep> steps;
  /// Y^1 .. Y^{T+1}; Y^1 is all mask.
  std::vector<Sequence> intermediates;

  const Sequence& final_sequence() const { return intermediates.back(); }
  bool operator==(const GenerationTrace&) const = default;
};

struct TraceScore {
  double length_term = 0.0;
  double coord_term = 0.0;
  double symbol_term = 0.0;
  double total = 0.0;
};

/// Y^1 = (<mask>, ..., <mask>) and Z^1 = (0, ..., 0). Throws InvalidLength
/// for L = 0.
std::pair<Sequence, CoordinateMask> init_state(std::size_t length, const Vocabulary& vocab);

/// y'_i = replacement_i where the coordinate bit is set, else y_i.
Sequence apply_step(const Sequence& y, const GenerationStep& step);

/// Starts a trace at the all-mask state; steps are appended with push_step.
GenerationTrace start_trace(const Sequence& input, std::size_t length, double length_log_prob,
                            const Vocabulary& vocab);
void push_step(GenerationTrace& trace, GenerationStep step);

/// Every invariant violation of the trace, in discovery order. Empty means ok.
std::vector<std::string> validate_trace(const GenerationTrace& trace);

/// log p(L|X) + sum_t (coord + symbol). Accumulates in step order as
/// ((total + coord_t) + symbol_t) so running beam scores match bit for bit.
TraceScore trace_score(const GenerationTrace& trace);

/// Rebuilds intermediates from the stored steps.
std::vector<Sequence> replay_intermediates(const GenerationTrace& trace);

// Trace export: line-delimited JSON. One header record followed by one record
// per step. Field names:
//   header: {"record":"header","input":[..],"L":n,"T":n,"length_log_prob":x,
//            "strategy":"..","config":".."}
//   step:   {"record":"step","t":n,"positions":[..],"old_symbols":[..],
//            "new_symbols":[..],"coord_log_prob":x,"symbol_log_prob":x}
// Symbols are written as vocabulary strings; t is 1-based; positions 0-based.
struct TraceMeta {
  std::string strategy;
  std::string config;
  bool operator==(const TraceMeta&) const = default;
};

void write_trace(std::ostream& out, const GenerationTrace& trace, const Vocabulary& vocab,
                 const TraceMeta& meta);
/// Reads the next trace; nullopt at end of stream.
std::optional<std::pair<GenerationTrace, TraceMeta>> read_trace(std::istream& in,
                                                               const Vocabulary& vocab);

}  // namespace seqgen
