#include "seqgen/selection.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

namespace seqgen {

namespace {

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text, std::string_view key) {
  if (text == "inf" || text == "infinity") return kInfiniteTau;
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw InvalidArgument("strategy: bad number for " + std::string(key) + ": '" + std::string(text) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = s.find(sep, start);
    const auto stop = end == std::string_view::npos ? s.size() : end;
    if (stop > start) out.push_back(s.substr(start, stop - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

void apply_override(StrategyConfig& cfg, std::string_view item) {
  const auto eq = item.find('=');
  if (eq == std::string_view::npos) throw InvalidArgument("strategy: expected key=value, got '" + std::string(item) + "'");
  const auto key = item.substr(0, eq);
  const auto value = item.substr(eq + 1);
  if (key == "a_ne") {
    cfg.alpha_negent = parse_double(value, key);
  } else if (key == "a_lp") {
    cfg.alpha_logp = parse_double(value, key);
  } else if (key == "a_pos") {
    cfg.alpha_pos = parse_double(value, key);
  } else if (key == "tau") {
    cfg.tau = parse_double(value, key);
  } else if (key == "eps") {
    cfg.eps = parse_double(value, key);
  } else if (key == "mode") {
    if (value == "det") cfg.mode = SelectionMode::deterministic;
    else if (value == "stoch") cfg.mode = SelectionMode::stochastic;
    else throw InvalidArgument("strategy: mode must be det or stoch");
  } else if (key == "scope") {
    if (value == "fresh") cfg.scope = SelectionScope::without_replacement;
    else if (value == "all") cfg.scope = SelectionScope::all_positions;
    else throw InvalidArgument("strategy: scope must be fresh or all");
  } else {
    throw InvalidArgument("strategy: unknown key '" + std::string(key) + "'");
  }
}

bool same_params(const StrategyConfig& a, const StrategyConfig& b) {
  return a.alpha_negent == b.alpha_negent && a.alpha_logp == b.alpha_logp &&
         a.alpha_pos == b.alpha_pos && a.tau == b.tau && a.eps == b.eps && a.mode == b.mode &&
         a.scope == b.scope;
}

}  // namespace

void StrategyConfig::validate() const {
  if (!(tau > 0.0)) throw InvalidArgument("strategy: tau must be positive or inf");
  if (!(eps > 0.0)) throw InvalidArgument("strategy: eps must be positive");
  for (double a : {alpha_negent, alpha_logp, alpha_pos})
    if (!std::isfinite(a)) throw InvalidArgument("strategy: coefficients must be finite");
}

bool StrategyConfig::uses_model_rows() const {
  if (policy) return false;
  if (mode == SelectionMode::stochastic && std::isinf(tau)) return false;
  return alpha_negent != 0.0 || alpha_logp != 0.0;
}

std::string StrategyConfig::describe() const {
  if (policy) return "policy:" + policy->describe();
  static const char* presets[] = {"uniform", "left2right", "least2most", "easy_first", "hard_first"};
  for (const char* p : presets)
    if (name == p && same_params(*this, make_preset(p))) return std::string("preset:") + p;
  std::ostringstream out;
  out << "loglinear:a_ne=" << format_double(alpha_negent) << ",a_lp=" << format_double(alpha_logp)
      << ",a_pos=" << format_double(alpha_pos) << ",tau=" << format_double(tau)
      << ",eps=" << format_double(eps)
      << ",mode=" << (mode == SelectionMode::deterministic ? "det" : "stoch")
      << ",scope=" << (scope == SelectionScope::all_positions ? "all" : "fresh");
  return out.str();
}

StrategyConfig make_preset(std::string_view raw) {
  std::string name(raw);
  std::replace(name.begin(), name.end(), '-', '_');
  StrategyConfig cfg;
  cfg.name = name;
  if (name == "uniform") {
    cfg.tau = kInfiniteTau;
    cfg.mode = SelectionMode::stochastic;
    return cfg;
  }
  cfg.mode = SelectionMode::deterministic;
  cfg.tau = 1.0;
  if (name == "left2right") {
    cfg.alpha_pos = 1.0;
  } else if (name == "least2most") {
    cfg.alpha_logp = 1.0;
  } else if (name == "easy_first") {
    cfg.alpha_negent = 1.0;
    cfg.alpha_logp = 1.0;
  } else if (name == "hard_first") {
    cfg.alpha_negent = -1.0;
    cfg.alpha_logp = -1.0;
  } else {
    throw InvalidArgument("unknown preset strategy '" + std::string(raw) + "'");
  }
  return cfg;
}

StrategyConfig parse_strategy(std::string_view spec, const PolicyLoader& loader) {
  const auto colon = spec.find(':');
  if (colon == std::string_view::npos)
    throw InvalidArgument("strategy spec needs a kind prefix: '" + std::string(spec) + "'");
  const auto kind = spec.substr(0, colon);
  const auto rest = spec.substr(colon + 1);
  StrategyConfig cfg;
  if (kind == "preset") {
    const auto items = split(rest, ',');
    if (items.empty()) throw InvalidArgument("strategy: missing preset name");
    cfg = make_preset(items[0]);
    for (std::size_t i = 1; i < items.size(); ++i) apply_override(cfg, items[i]);
  } else if (kind == "loglinear") {
    cfg.name = "loglinear";
    cfg.tau = 1.0;
    for (auto item : split(rest, ',')) apply_override(cfg, item);
  } else if (kind == "policy") {
    if (!loader) throw InvalidArgument("strategy: no policy loader available");
    cfg.name = "policy";
    cfg.mode = SelectionMode::deterministic;
    cfg.policy = loader(std::string(rest));
    if (!cfg.policy) throw IoError("strategy: could not load policy '" + std::string(rest) + "'");
  } else {
    throw InvalidArgument("strategy: unknown kind '" + std::string(kind) + "'");
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

SelectionState::SelectionState(const MaskedConditionalModel& model, Sequence x, std::size_t length)
    : model_(&model),
      x_(std::move(x)),
      y_(init_state(length, model.vocab()).first),
      filled_(length, 0),
      rows_(length) {}

std::size_t SelectionState::n_filled() const {
  return static_cast<std::size_t>(std::count(filled_.begin(), filled_.end(), 1));
}

std::vector<std::size_t> SelectionState::eligible(SelectionScope scope, std::size_t count) const {
  std::vector<std::size_t> out;
  if (scope == SelectionScope::without_replacement) {
    for (std::size_t i = 0; i < filled_.size(); ++i)
      if (!filled_[i]) out.push_back(i);
    if (out.size() >= count && !out.empty()) return out;
    out.clear();
  }
  out.resize(filled_.size());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

void SelectionState::prefetch_rows(const std::vector<std::size_t>& positions) {
  const TokenId mask = model_->vocab().mask_id();
  std::vector<std::size_t> masked;
  for (std::size_t i : positions) {
    if (i >= y_.size()) throw InvalidArgument("selection: position out of range");
    if (rows_[i]) continue;
    if (y_[i] == mask) {
      masked.push_back(i);
    } else {
      rows_[i] = std::move(model_->conditional(y_, {i}, x_)[0]);
    }
  }
  if (!masked.empty()) {
    auto rows = model_->conditional(y_, masked, x_);
    for (std::size_t j = 0; j < masked.size(); ++j) rows_[masked[j]] = std::move(rows[j]);
  }
}

const Row& SelectionState::feature_row(std::size_t i) {
  if (i >= y_.size()) throw InvalidArgument("selection: position out of range");
  if (!rows_[i]) prefetch_rows({i});
  return *rows_[i];
}

std::vector<Row> SelectionState::symbol_rows(const std::vector<std::size_t>& positions) {
  const TokenId mask = model_->vocab().mask_id();
  bool reuse = !positions.empty();
  for (std::size_t i : positions) {
    if (i >= y_.size()) throw InvalidArgument("selection: position out of range");
    reuse = reuse && rows_[i].has_value() && (positions.size() == 1 || y_[i] == mask);
  }
  if (reuse) {
    std::vector<Row> out;
    out.reserve(positions.size());
    for (std::size_t i : positions) out.push_back(*rows_[i]);
    return out;
  }
  return model_->conditional(y_, positions, x_);
}

const nn::Tensor2D& SelectionState::hidden() {
  if (!hidden_) hidden_ = model_->hidden(y_, x_);
  return *hidden_;
}

void SelectionState::advance(const std::map<std::size_t, TokenId>& replacements) {
  for (const auto& [pos, tok] : replacements) {
    if (pos >= y_.size()) throw InvalidArgument("selection: replacement out of range");
    if (hidden_)
      history_.push_back({step_, pos, hidden_->row(static_cast<Eigen::Index>(pos)).transpose()});
  }
  for (const auto& [pos, tok] : replacements) {
    y_[pos] = tok;
    filled_[pos] = 1;
  }
  for (auto& r : rows_) r.reset();
  hidden_.reset();
  ++step_;
}

// ---------------------------------------------------------------------------

double feature_negent(const Row& row) {
  double s = 0.0;
  for (double p : row)
    if (p > 0.0) s += p * std::log(p);
  return s;
}

double feature_logp(const Row& row, TokenId current) { return -safe_log(row.at(current)); }

double feature_pos(std::size_t t, std::size_t i, double eps) {
  const double d = t > i ? static_cast<double>(t - i) : static_cast<double>(i - t);
  return -std::log(d + eps);
}

FeatureVector compute_features(const StrategyConfig& cfg, SelectionState& state,
                               const std::vector<std::size_t>& positions) {
  const std::size_t L = state.length();
  FeatureVector f{std::vector<double>(L, 0.0), std::vector<double>(L, 0.0), std::vector<double>(L, 0.0)};
  const bool need_rows = cfg.alpha_negent != 0.0 || cfg.alpha_logp != 0.0;
  if (need_rows) state.prefetch_rows(positions);
  for (std::size_t i : positions) {
    if (need_rows) {
      const Row& row = state.feature_row(i);
      f.negent[i] = feature_negent(row);
      f.logp[i] = feature_logp(row, state.y()[i]);
    }
    f.pos[i] = feature_pos(state.step(), i + 1, cfg.eps);
  }
  return f;
}

std::vector<double> log_linear_scores(const FeatureVector& f, const StrategyConfig& cfg,
                                      const std::vector<std::size_t>& positions) {
  std::vector<double> s;
  s.reserve(positions.size());
  for (std::size_t i : positions) {
    double v = 0.0;
    if (cfg.alpha_negent != 0.0) v += cfg.alpha_negent * f.negent.at(i);
    if (cfg.alpha_logp != 0.0) v += cfg.alpha_logp * f.logp.at(i);
    if (cfg.alpha_pos != 0.0) v += cfg.alpha_pos * f.pos.at(i);
    s.push_back(v);
  }
  return s;
}

std::vector<double> log_linear_distribution(const FeatureVector& f, const StrategyConfig& cfg,
                                            const std::vector<std::size_t>& eligible) {
  if (eligible.empty()) throw InvalidArgument("selection: no eligible positions");
  if (std::isinf(cfg.tau)) return std::vector<double>(eligible.size(), 1.0 / static_cast<double>(eligible.size()));
  return nn::softmax(log_linear_scores(f, cfg, eligible), cfg.tau);
}

std::vector<PositionChoice> rank_positions(const StrategyConfig& strategy, SelectionState& state,
                                           std::size_t count) {
  const auto eligible = state.eligible(strategy.scope, count);
  if (eligible.size() < count) throw InvalidArgument("selection: too few eligible positions");
  std::vector<double> scores;
  std::vector<double> probs;
  if (strategy.policy) {
    const auto logits = strategy.policy->position_logits(state);
    for (std::size_t i : eligible) scores.push_back(logits.at(i));
    probs = nn::softmax(scores);
  } else {
    const bool stochastic_uniform =
        strategy.mode == SelectionMode::stochastic && std::isinf(strategy.tau);
    if (stochastic_uniform) {
      scores.assign(eligible.size(), 0.0);
      probs.assign(eligible.size(), 1.0 / static_cast<double>(eligible.size()));
    } else {
      const auto f = compute_features(strategy, state, eligible);
      scores = log_linear_scores(f, strategy, eligible);
      if (strategy.mode == SelectionMode::stochastic) probs = nn::softmax(scores, strategy.tau);
    }
  }
  const bool deterministic = strategy.mode == SelectionMode::deterministic;
  std::vector<PositionChoice> out(eligible.size());
  for (std::size_t j = 0; j < eligible.size(); ++j)
    out[j] = {eligible[j], deterministic ? 0.0 : std::log(probs[j]), scores[j]};
  std::stable_sort(out.begin(), out.end(), [&](const PositionChoice& a, const PositionChoice& b) {
    return deterministic ? a.score > b.score : a.log_prob > b.log_prob;
  });
  return out;
}

Selection select_positions(const StrategyConfig& strategy, SelectionState& state, std::size_t count,
                           Rng& rng) {
  if (count == 0) throw InvalidArgument("selection: o_t must be at least 1");
  const auto ranked = rank_positions(strategy, state, count);
  Selection sel;
  if (strategy.mode == SelectionMode::deterministic) {
    for (std::size_t j = 0; j < count; ++j) sel.positions.push_back(ranked[j].position);
    return sel;
  }
  std::vector<PositionChoice> pool = ranked;
  std::sort(pool.begin(), pool.end(),
            [](const PositionChoice& a, const PositionChoice& b) { return a.position < b.position; });
  const bool uniform = !strategy.policy && std::isinf(strategy.tau);
  std::vector<double> weights(pool.size());
  for (std::size_t j = 0; j < pool.size(); ++j) weights[j] = uniform ? 1.0 : std::exp(pool[j].log_prob);
  for (std::size_t draw = 0; draw < count; ++draw) {
    const std::size_t j = sample_categorical(rng, weights);
    double remaining = 0.0;
    for (double w : weights) remaining += w;
    sel.log_prob += std::log(weights[j] / remaining);
    sel.positions.push_back(pool[j].position);
    weights[j] = 0.0;
  }
  return sel;
}

}  // namespace seqgen
