#pragma once

// Coordinate selection: which positions are rewritten at the next step.
//
// Handcrafted strategies score each eligible position with a log-linear
// combination of three features and either take the top positions
// (deterministic) or sample from softmax(score / tau) without replacement
// (stochastic). Learned strategies plug in through LearnedSelector.

#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "seqgen/models.hpp"

namespace seqgen {

inline constexpr double kInfiniteTau = std::numeric_limits<double>::infinity();
inline constexpr double kDefaultPosEps = 1e-6;

enum class SelectionMode { stochastic, deterministic };

/// without_replacement: only never-filled positions are eligible while at
/// least o_t of them remain; afterwards every position is (refinement).
/// all_positions: every position is always eligible.
enum class SelectionScope { without_replacement, all_positions };

class SelectionState;

/// A trained position scorer. Logits are indexed by position; only eligible
/// entries are read.
class LearnedSelector {
 public:
  virtual ~LearnedSelector() = default;
  virtual std::vector<double> position_logits(SelectionState& state) const = 0;
  virtual std::string describe() const = 0;
};

struct StrategyConfig {
  std::string name = "uniform";
  double alpha_negent = 0.0;
  double alpha_logp = 0.0;
  double alpha_pos = 0.0;
  double tau = kInfiniteTau;
  double eps = kDefaultPosEps;
  SelectionMode mode = SelectionMode::stochastic;
  SelectionScope scope = SelectionScope::without_replacement;
  std::shared_ptr<const LearnedSelector> policy;

  void validate() const;
  bool uses_model_rows() const;
  /// Canonical spec string accepted by parse_strategy (policies print their
  /// own description).
  std::string describe() const;
};

/// uniform, left2right, least2most, easy_first, hard_first.
StrategyConfig make_preset(std::string_view name);

using PolicyLoader = std::function<std::shared_ptr<const LearnedSelector>(const std::string&)>;

/// "preset:<name>[,key=value...]", "loglinear:a_ne=..,a_lp=..,a_pos=..,tau=..[,eps=..][,mode=..]
/// [,scope=..]" or "policy:<checkpoint path>". tau accepts "inf"; mode is
/// "det" or "stoch"; scope is "fresh" or "all".
StrategyConfig parse_strategy(std::string_view spec, const PolicyLoader& loader = {});

struct HistoryEntry {
  std::size_t step = 0;  // 1-based step at which the position was selected
  std::size_t position = 0;
  Eigen::VectorXd hidden;
};

/// Y^t with its conditioning context plus caches that live until the next
/// replacement: feature rows p(y_i | Y with <mask> at i, X) and the model's
/// hidden states. History entries are appended on advance whenever hidden
/// states were computed for the current step.
class SelectionState {
 public:
  SelectionState(const MaskedConditionalModel& model, Sequence x, std::size_t length);

  const MaskedConditionalModel& model() const { return *model_; }
  const Sequence& y() const { return y_; }
  const Sequence& x() const { return x_; }
  std::size_t length() const { return y_.size(); }
  /// 1-based index of the step about to be taken.
  std::size_t step() const { return step_; }
  bool filled(std::size_t i) const { return filled_[i] != 0; }
  std::size_t n_filled() const;

  /// Positions eligible for a selection of `count` positions.
  std::vector<std::size_t> eligible(SelectionScope scope, std::size_t count) const;

  /// Fetches feature rows for `positions`: one batched query for positions
  /// currently holding <mask>, one query each for the others.
  void prefetch_rows(const std::vector<std::size_t>& positions);
  const Row& feature_row(std::size_t i);

  /// Rows for masking all of `positions` at once (a single query), reusing
  /// cached feature rows when the masked input is unchanged.
  std::vector<Row> symbol_rows(const std::vector<std::size_t>& positions);

  const nn::Tensor2D& hidden();
  bool has_hidden_cache() const { return hidden_.has_value(); }
  const std::vector<HistoryEntry>& history() const { return history_; }

  /// Writes the replacements, marks them filled, drops caches and moves to
  /// the next step.
  void advance(const std::map<std::size_t, TokenId>& replacements);

 private:
  const MaskedConditionalModel* model_;
  Sequence x_;
  Sequence y_;
  std::vector<std::uint8_t> filled_;
  std::size_t step_ = 1;
  std::vector<std::optional<Row>> rows_;
  std::optional<nn::Tensor2D> hidden_;
  std::vector<HistoryEntry> history_;
};

/// Per-position features; entries outside the positions they were computed
/// for are zero.
struct FeatureVector {
  std::vector<double> negent;
  std::vector<double> logp;
  std::vector<double> pos;
};

/// -H(row) in nats.
double feature_negent(const Row& row);
/// -log p(current symbol), with p floored at 1e-12.
double feature_logp(const Row& row, TokenId current);
/// -log(|t - i| + eps) with 1-based step t and position i.
double feature_pos(std::size_t t, std::size_t i, double eps);

FeatureVector compute_features(const StrategyConfig& cfg, SelectionState& state,
                               const std::vector<std::size_t>& positions);

/// alpha . phi for each listed position.
std::vector<double> log_linear_scores(const FeatureVector& f, const StrategyConfig& cfg,
                                      const std::vector<std::size_t>& positions);

/// Probabilities over `eligible` (aligned with it). tau = inf gives exactly
/// 1/|eligible|.
std::vector<double> log_linear_distribution(const FeatureVector& f, const StrategyConfig& cfg,
                                            const std::vector<std::size_t>& eligible);

struct PositionChoice {
  std::size_t position = 0;
  double log_prob = 0.0;  // coordinate log-prob contributed by this position
  double score = 0.0;     // ranking score (log-linear score or policy logit)
};

/// Eligible positions with their scores and selection probabilities, ranked
/// best first (ties to the lowest index). Deterministic strategies report a
/// log-prob of 0.
std::vector<PositionChoice> rank_positions(const StrategyConfig& strategy, SelectionState& state,
                                           std::size_t count);

struct Selection {
  std::vector<std::size_t> positions;  // in selection order
  double log_prob = 0.0;
};

/// Picks o_t positions. Deterministic: the top o_t by score. Stochastic:
/// o_t sequential draws without replacement, renormalizing each time; the
/// log-prob is the sum over draws.
Selection select_positions(const StrategyConfig& strategy, SelectionState& state, std::size_t count,
                           Rng& rng);

}  // namespace seqgen
