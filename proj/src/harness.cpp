#include "seqgen/harness.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace seqgen::harness {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeedMix = 0x9E3779B97F4A7C15ULL;

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, value);
  if (text.empty() || res.ec != std::errc{} || res.ptr != last)
    throw InvalidArgument("config: bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
  return value;
}

void permute(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic tasks

TaskKind parse_task_kind(std::string_view s) {
  if (s == "cipher_copy") return TaskKind::cipher_copy;
  if (s == "cipher_reverse") return TaskKind::cipher_reverse;
  if (s == "local_swap") return TaskKind::local_swap;
  if (s == "cipher_fertility") return TaskKind::cipher_fertility;
  throw InvalidArgument("unknown task '" + std::string(s) + "'");
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::cipher_copy: return "cipher_copy";
    case TaskKind::cipher_reverse: return "cipher_reverse";
    case TaskKind::local_swap: return "local_swap";
    case TaskKind::cipher_fertility: return "cipher_fertility";
  }
  return "?";
}

void SyntheticTask::validate() const {
  if (vocab_size < 2) throw InvalidArgument("task: vocab_size must be at least 2");
  if (min_length == 0 || min_length > max_length) throw InvalidArgument("task: need 1 <= min_length <= max_length");
}

Vocabulary SyntheticTask::vocab() const {
  std::vector<std::string> content;
  content.reserve(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) content.push_back("w" + std::to_string(i));
  return Vocabulary::with_specials(content, true);
}

std::size_t SyntheticTask::max_target_length() const {
  return kind == TaskKind::cipher_fertility ? 2 * max_length : max_length;
}

TaskMap::TaskMap(const SyntheticTask& task) : task_(task), vocab_(task.vocab()) {
  task.validate();
  Rng rng(task.seed);
  const std::size_t V = task.vocab_size;
  sigma_.resize(V);
  std::iota(sigma_.begin(), sigma_.end(), 0);
  permute(sigma_, rng);
  second_.resize(V);
  std::iota(second_.begin(), second_.end(), 0);
  permute(second_, rng);
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  permute(order, rng);
  fertile_.assign(V, false);
  for (std::size_t i = 0; i < V / 2; ++i) fertile_[order[i]] = true;
}

TaskMap TaskMap::identity(const SyntheticTask& task) {
  TaskMap m(task);
  std::iota(m.sigma_.begin(), m.sigma_.end(), 0);
  return m;
}

Sequence TaskMap::apply(const Sequence& source) const {
  const auto& content = vocab_.content_ids();
  const TokenId base = content.front();
  std::vector<TokenId> out;
  out.reserve(2 * source.size());
  for (TokenId t : source) {
    if (vocab_.is_special(t) || t < base || t - base >= sigma_.size())
      throw InvalidArgument("task: source contains a non-content symbol");
    const std::size_t k = t - base;
    out.push_back(content[sigma_[k]]);
    if (task_.kind == TaskKind::cipher_fertility && fertile_[k]) out.push_back(content[second_[k]]);
  }
  if (task_.kind == TaskKind::cipher_reverse) std::reverse(out.begin(), out.end());
  if (task_.kind == TaskKind::local_swap)
    for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  return Sequence(std::move(out));
}

SplitCorpus synth_corpus(const SyntheticTask& task, std::size_t n) {
  task.validate();
  if (n < 100) throw InvalidArgument("synth_corpus: need at least 100 pairs");
  const TaskMap map(task);
  const auto vocab = task.vocab();
  const auto& content = vocab.content_ids();
  Rng rng(task.seed * kSeedMix + 0x632BE59BD9B4E019ULL);
  std::set<Sequence> seen;
  Corpus all;
  all.reserve(n);
  const std::size_t max_attempts = 50 * n;
  for (std::size_t attempt = 0; all.size() < n; ++attempt) {
    if (attempt >= max_attempts) throw InvalidArgument("synth_corpus: task cannot produce that many distinct sources");
    const std::size_t len = task.min_length + uniform_index(rng, task.max_length - task.min_length + 1);
    std::vector<TokenId> ids(len);
    for (auto& t : ids) t = content[uniform_index(rng, content.size())];
    Sequence src(std::move(ids));
    if (!seen.insert(src).second) continue;
    all.push_back({src, map.apply(src)});
  }
  SplitCorpus out;
  const std::size_t held = n / 20;
  const std::size_t n_train = n - 2 * held;
  out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.valid.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                   all.begin() + static_cast<std::ptrdiff_t>(n_train + held));
  out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + held), all.end());
  return out;
}

void write_splits(const std::string& dir, const SplitCorpus& splits, const Vocabulary& vocab) {
  fs::create_directories(dir);
  std::ofstream v(fs::path(dir) / "vocab.txt", std::ios::binary);
  if (!v) throw IoError("cannot write " + (fs::path(dir) / "vocab.txt").string());
  for (const auto& t : vocab.tokens()) v << t << '\n';
  write_corpus_file((fs::path(dir) / "train.tsv").string(), splits.train, vocab);
  write_corpus_file((fs::path(dir) / "valid.tsv").string(), splits.valid, vocab);
  write_corpus_file((fs::path(dir) / "test.tsv").string(), splits.test, vocab);
}

Vocabulary read_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) tokens.push_back(line);
  return Vocabulary::from_tokens(std::move(tokens));
}

SplitCorpus read_splits(const std::string& dir, Vocabulary* vocab_out) {
  const auto vocab = read_vocab_file((fs::path(dir) / "vocab.txt").string());
  SplitCorpus s;
  s.train = read_corpus_file((fs::path(dir) / "train.tsv").string(), vocab);
  s.valid = read_corpus_file((fs::path(dir) / "valid.tsv").string(), vocab);
  s.test = read_corpus_file((fs::path(dir) / "test.tsv").string(), vocab);
  if (vocab_out) *vocab_out = vocab;
  return s;
}

// ---------------------------------------------------------------------------
// Run configuration

namespace {

struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
KeySpec number_key(std::string name, T RunConfig::*field) {
  return {name,
          [name, field](RunConfig& c, std::string_view v) { c.*field = parse_number<T>(name, v); },
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*field);
            else
              return std::to_string(c.*field);
          }};
}

KeySpec string_key(std::string name, std::string RunConfig::*field) {
  return {name, [field](RunConfig& c, std::string_view v) { c.*field = std::string(v); },
          [field](const RunConfig& c) { return c.*field; }};
}

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      string_key("task", &RunConfig::task),
      number_key("vocab_size", &RunConfig::vocab_size),
      number_key("min_length", &RunConfig::min_length),
      number_key("max_length", &RunConfig::max_length),
      number_key("n_pairs", &RunConfig::n_pairs),
      number_key("data_seed", &RunConfig::data_seed),
      number_key("d_model", &RunConfig::d_model),
      number_key("n_layers", &RunConfig::n_layers),
      number_key("d_ff", &RunConfig::d_ff),
      number_key("train_steps", &RunConfig::train_steps),
      number_key("batch_size", &RunConfig::batch_size),
      number_key("lr", &RunConfig::lr),
      number_key("train_seed", &RunConfig::train_seed),
      number_key("log_every", &RunConfig::log_every),
      string_key("strategy", &RunConfig::strategy),
      string_key("schedule", &RunConfig::schedule),
      number_key("T", &RunConfig::T),
      number_key("T_per_length", &RunConfig::T_per_length),
      string_key("symbols", &RunConfig::symbols),
      number_key("beam", &RunConfig::beam),
      number_key("beam_positions", &RunConfig::beam_positions),
      number_key("length_candidates", &RunConfig::length_candidates),
      string_key("rescoring", &RunConfig::rescoring),
      number_key("decode_seed", &RunConfig::decode_seed),
      number_key("test_limit", &RunConfig::test_limit),
      string_key("split", &RunConfig::split),
      number_key("clip_epsilon", &RunConfig::clip_epsilon),
      number_key("gamma", &RunConfig::gamma),
      number_key("history", &RunConfig::history),
      number_key("policy_width", &RunConfig::policy_width),
      number_key("generation_batch", &RunConfig::generation_batch),
      number_key("buffer_capacity", &RunConfig::buffer_capacity),
      number_key("update_batch", &RunConfig::update_batch),
      number_key("updates_per_round", &RunConfig::updates_per_round),
      number_key("value_weight", &RunConfig::value_weight),
      string_key("advantage", &RunConfig::advantage),
      number_key("gae_lambda", &RunConfig::gae_lambda),
      number_key("ppo_iterations", &RunConfig::ppo_iterations),
      number_key("ppo_lr", &RunConfig::ppo_lr),
      number_key("ppo_seed", &RunConfig::ppo_seed),
      number_key("ppo_train_pairs", &RunConfig::ppo_train_pairs),
      number_key("clusters", &RunConfig::clusters),
      number_key("cluster_seed", &RunConfig::cluster_seed),
      string_key("energy_kind", &RunConfig::energy_kind),
      string_key("baseline", &RunConfig::baseline),
      string_key("strategies", &RunConfig::strategies),
      string_key("out_dir", &RunConfig::out_dir),
      number_key("workers", &RunConfig::workers),
  };
  return table;
}

const KeySpec& find_key(std::string_view key) {
  for (const auto& k : key_table())
    if (k.name == key) return k;
  throw InvalidArgument("config: unknown key '" + std::string(key) + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(k.name);
    return out;
  }();
  return names;
}

bool RunConfig::has_key(std::string_view key) {
  const auto& k = keys();
  return std::find(k.begin(), k.end(), key) != k.end();
}

void RunConfig::set(std::string_view key, std::string_view value) { find_key(key).set(*this, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return find_key(key).get(*this); }

void RunConfig::merge_text(std::string_view text, const std::string& origin) {
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const auto raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw InvalidArgument(where + ": expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    if (!seen.insert(key).second) throw InvalidArgument(where + ": duplicate key '" + key + "'");
    try {
      set(key, line.substr(eq + 1));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(where + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path);
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : key_table()) out += k.name + "=" + k.get(*this) + "\n";
  return out;
}

void RunConfig::write_file(const std::string& path) const {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << to_text();
}

SyntheticTask RunConfig::synthetic_task() const {
  SyntheticTask t;
  t.kind = parse_task_kind(task);
  t.vocab_size = vocab_size;
  t.min_length = min_length;
  t.max_length = max_length;
  t.seed = data_seed;
  t.validate();
  return t;
}

EncoderDims RunConfig::encoder_dims() const { return EncoderDims{d_model, n_layers, d_ff}; }

TrainConfig RunConfig::train_config() const {
  TrainConfig c;
  c.steps = train_steps;
  c.batch_size = batch_size;
  c.adam.lr = lr;
  c.seed = train_seed;
  c.workers = workers;
  c.log_every = log_every;
  return c;
}

DecodeConfig RunConfig::decode_config() const {
  DecodeConfig c;
  c.schedule = parse_schedule(schedule);
  c.T = T;
  c.T_per_length = T_per_length;
  if (symbols == "greedy")
    c.symbols = SymbolChoice::greedy;
  else if (symbols == "sample")
    c.symbols = SymbolChoice::sample;
  else
    throw InvalidArgument("config: symbols must be greedy or sample");
  c.beam_K = beam;
  c.beam_Kp = beam_positions;
  c.beam_Kpp = beam;
  c.n_length_candidates = length_candidates;
  c.rescoring = parse_rescorer(rescoring);
  c.seed = decode_seed;
  c.validate();
  return c;
}

PpoConfig RunConfig::ppo_config() const {
  PpoConfig c;
  c.clip_epsilon = clip_epsilon;
  c.gamma = gamma;
  c.history = history;
  c.width = policy_width;
  c.generation_batch = generation_batch;
  c.buffer_capacity = buffer_capacity;
  c.update_batch = update_batch;
  c.updates_per_round = updates_per_round;
  c.value_weight = value_weight;
  if (advantage == "monte_carlo")
    c.estimator = AdvantageEstimator::monte_carlo;
  else if (advantage == "gae")
    c.estimator = AdvantageEstimator::gae;
  else
    throw InvalidArgument("config: advantage must be monte_carlo or gae");
  c.gae_lambda = gae_lambda;
  c.iterations = ppo_iterations;
  c.adam.lr = ppo_lr;
  c.seed = ppo_seed;
  c.workers = workers;
  c.validate();
  return c;
}

EnergyKind RunConfig::energy_kind_value() const {
  if (energy_kind == "pseudo_ll") return EnergyKind::pseudo_ll;
  if (energy_kind == "raw_logit") return EnergyKind::raw_logit;
  throw InvalidArgument("config: energy_kind must be pseudo_ll or raw_logit");
}

std::string default_output_root() {
  const char* env = std::getenv("SEQGEN_OUTPUT_ROOT");
  return env && *env ? std::string(env) : std::string("runs");
}

namespace {
std::string under_out(const RunConfig& c, const char* leaf) {
  return (fs::path(c.out_dir.empty() ? default_output_root() : c.out_dir) / leaf).string();
}
}  // namespace

std::string RunConfig::data_dir() const { return under_out(*this, "data"); }
std::string RunConfig::lm_path() const { return under_out(*this, "lm.ckpt"); }
std::string RunConfig::ar_path() const { return under_out(*this, "ar.ckpt"); }
std::string RunConfig::policy_path() const { return under_out(*this, "policy.ckpt"); }
std::string RunConfig::length_path() const { return under_out(*this, "lengths.txt"); }

void RunConfig::validate() const {
  synthetic_task();
  decode_config();
  ppo_config();
  energy_kind_value();
  if (split != "train" && split != "valid" && split != "test")
    throw InvalidArgument("config: split must be train, valid or test");
  if (d_model == 0 || n_layers == 0 || d_ff == 0) throw InvalidArgument("config: model dimensions must be positive");
  if (batch_size == 0) throw InvalidArgument("config: batch_size must be positive");
  if (clusters == 0) throw InvalidArgument("config: clusters must be positive");
  if (workers == 0) throw InvalidArgument("config: workers must be positive");
}

// ---------------------------------------------------------------------------
// Batch decoding

std::string metrics_header() { return "strategy,b,T,schedule,BLEU,exact_match,mean_energy,wall_time"; }

std::string metrics_row(const MetricsRow& r) {
  return csv_field(r.strategy) + ',' + std::to_string(r.b) + ',' + csv_field(r.T) + ',' + r.schedule + ',' +
         format_double(r.bleu) + ',' + format_double(r.exact_match) + ',' + format_double(r.mean_energy) + ',' +
         format_double(r.wall_time);
}

std::string budget_label(const DecodeConfig& cfg) {
  if (cfg.T > 0) return std::to_string(cfg.T);
  if (cfg.T_per_length == 1.0) return "L";
  return format_double(cfg.T_per_length) + "L";
}

DecodeRun run_decode(const MaskedConditionalModel& model, const LengthDistribution& ldist,
                     const StrategyConfig& strategy, const Corpus& pairs, const DecodeConfig& cfg,
                     std::size_t workers, const ARModel* ar, EnergyKind energy_kind) {
  cfg.validate();
  strategy.validate();
  if (pairs.empty()) throw InvalidArgument("run_decode: no sentences");
  DecodeRun run;
  run.strategy = strategy.describe();
  run.results.resize(pairs.size());
  run.wall_ms.resize(pairs.size());
  std::vector<double> energies(pairs.size());
  const auto start = std::chrono::steady_clock::now();
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(cfg.seed + kSeedMix * (i + 1));
    run.results[i] = decode_with_length_candidates(model, ldist, strategy, pairs[i].source, cfg, rng, ar);
    run.wall_ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    energies[i] = energy(model, run.results[i].chosen, pairs[i].source, energy_kind);
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::vector<Sequence> chosen;
  chosen.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    chosen.push_back(run.results[i].chosen);
    run.references.push_back(pairs[i].target);
  }
  auto& m = run.metrics;
  m.strategy = run.strategy;
  m.b = cfg.beam_K;
  m.T = budget_label(cfg);
  m.schedule = to_string(cfg.schedule);
  m.bleu = bleu(chosen, run.references);
  m.exact_match = exact_match(chosen, run.references);
  m.mean_energy = std::accumulate(energies.begin(), energies.end(), 0.0) / static_cast<double>(energies.size());
  m.wall_time = seconds;
  return run;
}

void write_decode_report(std::ostream& out, const DecodeRun& run, const Corpus& pairs, const Vocabulary& vocab) {
  using nlohmann::json;
  for (std::size_t i = 0; i < run.results.size(); ++i) {
    const auto& r = run.results[i];
    json cands = json::array();
    for (const auto& c : r.candidates)
      cands.push_back({{"length", c.length},
                       {"length_log_prob", c.length_log_prob},
                       {"score", c.rescore},
                       {"text", render(c.sequence, vocab)}});
    json rec = {{"source", render(pairs.at(i).source, vocab)},
                {"reference", render(pairs.at(i).target, vocab)},
                {"chosen", render(r.chosen, vocab)},
                {"chosen_length", r.chosen.size()},
                {"candidates", cands},
                {"strategy", run.strategy},
                {"wall_time_ms", run.wall_ms[i]}};
    out << rec.dump() << '\n';
  }
}

void write_decode_traces(std::ostream& out, const DecodeRun& run, const Vocabulary& vocab,
                         const std::string& config_text) {
  const TraceMeta meta{run.strategy, config_text};
  for (const auto& r : run.results) write_trace(out, r.candidates.at(r.chosen_index).trace, vocab, meta);
}

// ---------------------------------------------------------------------------
// Oracle suite

std::vector<double> gibbs_stationary(const TabularJointModel& model, std::size_t length) {
  const auto& content = model.vocab().content_ids();
  const std::size_t V = content.size();
  std::size_t n = 1;
  for (std::size_t i = 0; i < length; ++i) n *= V;
  std::vector<std::size_t> digit(model.vocab().size(), 0);
  for (std::size_t d = 0; d < V; ++d) digit[content[d]] = d;
  auto index_of = [&](const Sequence& y) {
    std::size_t idx = 0;
    for (TokenId t : y) idx = idx * V + digit[t];
    return idx;
  };
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t s = 0; s < n; ++s) {
    const Sequence y = model.decode_index(s, length);
    for (std::size_t i = 0; i < length; ++i) {
      const Row row = model.conditional(y, {i}, {})[0];
      for (std::size_t d = 0; d < V; ++d) {
        Sequence next = y;
        next[i] = content[d];
        P(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(index_of(next))) +=
            row[content[d]] / static_cast<double>(length);
      }
    }
  }
  Eigen::EigenSolver<Eigen::MatrixXd> es(P.transpose());
  Eigen::Index k = 0;
  (es.eigenvalues().array() - 1.0).abs().minCoeff(&k);
  Eigen::VectorXd pi = es.eigenvectors().col(k).real();
  pi /= pi.sum();
  return std::vector<double>(pi.data(), pi.data() + pi.size());
}

namespace {

double marginal_chain_rule(const TabularJointModel& m, std::size_t L, Sequence* out) {
  const auto& table = m.joint({}, L);
  const auto& content = m.vocab().content_ids();
  const std::size_t V = content.size();
  std::vector<std::size_t> prefix;
  double total = 0.0;
  for (std::size_t t = 0; t < L; ++t) {
    std::vector<double> mass(V, 0.0);
    for (std::size_t idx = 0; idx < table.size(); ++idx) {
      std::size_t r = idx;
      std::vector<std::size_t> d(L);
      for (std::size_t i = L; i-- > 0;) {
        d[i] = r % V;
        r /= V;
      }
      if (std::equal(prefix.begin(), prefix.end(), d.begin())) mass[d[t]] += table[idx];
    }
    const double z = std::accumulate(mass.begin(), mass.end(), 0.0);
    const auto best = static_cast<std::size_t>(std::max_element(mass.begin(), mass.end()) - mass.begin());
    total += std::log(mass[best] / z);
    prefix.push_back(best);
  }
  std::vector<TokenId> ids;
  for (std::size_t d : prefix) ids.push_back(content[d]);
  *out = Sequence(std::move(ids));
  return total;
}

DecodeConfig linear_config(std::size_t T) {
  DecodeConfig c;
  c.T = T;
  return c;
}

template <typename Fn>
OracleCheck timed(std::string name, double tolerance, Fn&& fn) {
  OracleCheck c;
  c.name = std::move(name);
  c.tolerance = tolerance;
  const auto t0 = std::chrono::steady_clock::now();
  fn(c);
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace

std::vector<OracleCheck> run_oracle_suite(const OracleOptions& opts) {
  std::vector<OracleCheck> checks;
  Rng rng(opts.seed);

  checks.push_back(timed("ar_chain_rule", 1e-12, [&](OracleCheck& c) {
    bool same_output = true;
    for (std::size_t k = 0; k < opts.chain_models; ++k) {
      const auto m = TabularJointModel::random(3, 3, rng);
      Rng unused(0);
      const auto g = generate(m, make_preset("left2right"), {}, 3, linear_config(3), unused);
      Sequence expected;
      const double lp = marginal_chain_rule(m, 3, &expected);
      const auto s = trace_score(g);
      c.measured = std::max(c.measured, std::abs((s.total - s.length_term) - lp));
      same_output = same_output && g.final_sequence() == expected &&
                    special_case_decode(m, {}, 3, {SpecialCase::Kind::ar, 1}).final_sequence() == expected;
      ++c.instances;
    }
    c.passed = same_output && c.measured <= c.tolerance;
  }));

  checks.push_back(timed("special_case_reductions", 0.0, [&](OracleCheck& c) {
    for (std::size_t k = 0; k < opts.reduction_instances; ++k) {
      const std::size_t L = 1 + k % 5;
      const auto m = TabularJointModel::random(3, L, rng);
      const double llp = -0.1 * static_cast<double>(k % 7);
      const auto ar = special_case_decode(m, {}, L, {SpecialCase::Kind::ar, 1}, llp);
      const auto semi1 = special_case_decode(m, {}, L, {SpecialCase::Kind::semi_ar, 1}, llp);
      const auto semiL = special_case_decode(m, {}, L, {SpecialCase::Kind::semi_ar, L}, llp);
      const auto nar = special_case_decode(m, {}, L, {SpecialCase::Kind::nar_refine, 1}, llp);
      if (!(semi1 == ar)) c.measured += 1.0;
      if (!(semiL == nar)) c.measured += 1.0;
      ++c.instances;
    }
    c.passed = c.measured == 0.0;
  }));

  checks.push_back(timed("beam_degenerate_greedy", 0.0, [&](OracleCheck& c) {
    const char* presets[] = {"left2right", "least2most", "easy_first", "hard_first"};
    for (std::size_t k = 0; k < opts.degenerate_inputs; ++k) {
      const std::size_t L = 2 + k % 4;
      const auto m = TabularJointModel::random(3, L, rng);
      const auto strat = make_preset(presets[k % 4]);
      Rng unused(0);
      const auto g = generate(m, strat, {}, L, linear_config(0), unused, -0.5);
      const auto b = beam_search(m, strat, {}, L, linear_config(0), -0.5, opts.mutate_beam);
      if (!(b.front().trace == g) || b.front().score != trace_score(g).total) c.measured += 1.0;
      ++c.instances;
    }
    c.passed = c.measured == 0.0;
  }));

  checks.push_back(timed("beam_vs_brute_force", 0.0, [&](OracleCheck& c) {
    bool same = true;
    for (std::size_t k = 0; k < opts.brute_force_instances; ++k) {
      const auto m = TabularJointModel::random(3, 3, rng);
      DecodeConfig cfg = linear_config(3);
      cfg.beam_K = 729;
      cfg.beam_Kp = 3;
      cfg.beam_Kpp = 3;
      const auto beam = beam_search(m, make_preset("easy_first"), {}, 3, cfg, -0.2, opts.mutate_beam);
      const auto brute = brute_force_optimistic(m, {}, 3, 3, -0.2);
      c.measured = std::max(c.measured, std::abs(beam.front().score - brute.score));
      same = same && beam.front().trace.final_sequence() == brute.trace.final_sequence();
      ++c.instances;
    }
    c.passed = same && c.measured <= c.tolerance;
  }));

  checks.push_back(timed("gibbs_stationarity", 0.02, [&](OracleCheck& c) {
    for (std::size_t k = 0; k < opts.gibbs_models; ++k) {
      const auto m = TabularJointModel::random(2, 2, rng, 1.0);
      const auto pi = gibbs_stationary(m, 2);
      Rng chain(rng());
      const auto samples =
          gibbs_sample(m, {}, 2, opts.gibbs_burn_in + opts.gibbs_steps, make_preset("uniform"), chain);
      const auto& content = m.vocab().content_ids();
      std::vector<double> freq(pi.size(), 0.0);
      for (std::size_t t = opts.gibbs_burn_in; t < samples.size(); ++t) {
        const std::size_t idx = (samples[t][0] == content[0] ? 0 : 2) + (samples[t][1] == content[0] ? 0 : 1);
        freq[idx] += 1.0;
      }
      double tv = 0.0;
      for (std::size_t s = 0; s < pi.size(); ++s) tv += std::abs(freq[s] / static_cast<double>(opts.gibbs_steps) - pi[s]);
      c.measured = std::max(c.measured, 0.5 * tv);
      ++c.instances;
    }
    c.passed = c.measured < c.tolerance;
  }));

  return checks;
}

void print_oracle_matrix(std::ostream& out, const std::vector<OracleCheck>& checks) {
  out << std::left << std::setw(26) << "check" << std::setw(11) << "instances" << std::setw(14) << "measured"
      << std::setw(12) << "tolerance" << std::setw(10) << "seconds" << "result\n";
  for (const auto& c : checks) {
    std::ostringstream measured, tol, secs;
    measured << std::setprecision(3) << c.measured;
    tol << std::setprecision(3) << c.tolerance;
    secs << std::fixed << std::setprecision(2) << c.seconds;
    out << std::left << std::setw(26) << c.name << std::setw(11) << c.instances << std::setw(14) << measured.str()
        << std::setw(12) << tol.str() << std::setw(10) << secs.str() << (c.passed ? "PASS" : "FAIL") << '\n';
  }
}

}  // namespace seqgen::harness
