#include "seqgen/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace seqgen {

nn::Tensor2D MaskedConditionalModel::hidden(const Sequence&, const Sequence&) const {
  throw InvalidArgument("model exposes no hidden states");
}

double pseudo_log_likelihood(const MaskedConditionalModel& model, const Sequence& y,
                             const Sequence& x) {
  const TokenId mask = model.vocab().mask_id();
  if (y.contains(mask)) throw InvalidArgument("pseudo_log_likelihood: sequence contains <mask>");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto rows = model.conditional(y, {i}, x);
    total += safe_log(rows[0][y[i]]);
  }
  return total;
}

std::vector<Row> MaskedConditionalModel::conditional_logits(const Sequence& y,
                                                           const std::vector<std::size_t>& masked,
                                                           const Sequence& x) const {
  auto rows = conditional(y, masked, x);
  for (auto& row : rows)
    for (double& v : row) v = safe_log(v);
  return rows;
}

// ---------------------------------------------------------------------------
// Tabular oracle

Vocabulary tabular_vocab(std::size_t n_content) {
  if (n_content == 0) throw InvalidArgument("tabular_vocab: need at least one symbol");
  std::vector<std::string> content;
  for (std::size_t i = 0; i < n_content; ++i) content.push_back("c" + std::to_string(i));
  return Vocabulary::with_specials(content, false);
}

TabularJointModel::TabularJointModel(Vocabulary vocab, std::size_t max_length)
    : vocab_(std::move(vocab)), max_length_(max_length) {
  digit_of_.assign(vocab_.size(), std::numeric_limits<std::size_t>::max());
  const auto& content = vocab_.content_ids();
  for (std::size_t d = 0; d < content.size(); ++d) digit_of_[content[d]] = d;
}

void TabularJointModel::set_joint(const Sequence& x, std::size_t length, std::vector<double> joint) {
  if (length == 0 || length > max_length_) throw InvalidLength("tabular: length out of range");
  const std::size_t n = vocab_.content_ids().size();
  std::size_t expected = 1;
  for (std::size_t i = 0; i < length; ++i) expected *= n;
  if (joint.size() != expected) throw InvalidArgument("tabular: joint has wrong size");
  double total = 0.0;
  for (double p : joint) {
    if (!(p >= 0.0)) throw InvalidArgument("tabular: negative or NaN entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("tabular: joint does not sum to 1");
  joints_[{x, length}] = std::move(joint);
}

void TabularJointModel::set_length_probs(const Sequence& x, std::map<std::size_t, double> probs) {
  length_probs_[x] = std::move(probs);
}

const std::vector<double>& TabularJointModel::joint(const Sequence& x, std::size_t length) const {
  auto it = joints_.find({x, length});
  if (it == joints_.end()) throw InvalidArgument("tabular: unsupported (input, length)");
  return it->second;
}

double TabularJointModel::length_log_prob(const Sequence& x, std::size_t length) const {
  auto it = length_probs_.find(x);
  if (it == length_probs_.end()) return 0.0;
  auto jt = it->second.find(length);
  if (jt == it->second.end() || jt->second <= 0.0) return -std::numeric_limits<double>::infinity();
  return std::log(jt->second);
}

Sequence TabularJointModel::decode_index(std::size_t index, std::size_t length) const {
  const auto& content = vocab_.content_ids();
  const std::size_t n = content.size();
  std::vector<TokenId> ids(length);
  for (std::size_t i = length; i-- > 0;) {
    ids[i] = content[index % n];
    index /= n;
  }
  return Sequence(std::move(ids));
}

double TabularJointModel::prob(const Sequence& y, const Sequence& x) const {
  const auto& table = joint(x, y.size());
  const std::size_t n = vocab_.content_ids().size();
  std::size_t index = 0;
  for (TokenId id : y) {
    const std::size_t d = digit_of_.at(id);
    if (d == std::numeric_limits<std::size_t>::max())
      throw InvalidArgument("tabular: prob of a sequence with special tokens");
    index = index * n + d;
  }
  return table[index];
}

std::vector<Row> TabularJointModel::conditional(const Sequence& y,
                                                const std::vector<std::size_t>& masked,
                                                const Sequence& x) const {
  const std::size_t L = y.size();
  const auto& table = joint(x, L);
  const auto& content = vocab_.content_ids();
  const std::size_t n = content.size();
  constexpr std::size_t kFree = std::numeric_limits<std::size_t>::max();

  std::vector<std::size_t> observed(L, kFree);
  for (std::size_t j = 0; j < L; ++j) {
    if (y[j] == vocab_.mask_id()) continue;
    const std::size_t d = digit_of_.at(y[j]);
    if (d == kFree) throw InvalidArgument("tabular: special token inside a target sequence");
    observed[j] = d;
  }
  for (std::size_t q : masked) {
    if (q >= L) throw InvalidArgument("tabular: masked position out of range");
    observed[q] = kFree;
  }

  std::vector<std::size_t> digits(L);
  std::vector<Row> rows;
  rows.reserve(masked.size());
  for (std::size_t q : masked) {
    Row row(vocab_.size(), 0.0);
    double total = 0.0;
    for (std::size_t idx = 0; idx < table.size(); ++idx) {
      std::size_t rest = idx;
      for (std::size_t j = L; j-- > 0;) {
        digits[j] = rest % n;
        rest /= n;
      }
      bool match = true;
      for (std::size_t j = 0; j < L && match; ++j)
        match = observed[j] == kFree || observed[j] == digits[j];
      if (!match) continue;
      row[content[digits[q]]] += table[idx];
      total += table[idx];
    }
    if (total > 0.0) {
      for (TokenId c : content) row[c] /= total;
    } else {
      for (TokenId c : content) row[c] = 1.0 / static_cast<double>(n);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

TabularJointModel TabularJointModel::random(std::size_t n_content, std::size_t length, Rng& rng,
                                            double spread) {
  TabularJointModel model(tabular_vocab(n_content), length);
  std::size_t size = 1;
  for (std::size_t i = 0; i < length; ++i) size *= n_content;
  std::vector<double> joint(size);
  double total = 0.0;
  for (double& p : joint) {
    p = std::exp(spread * standard_normal(rng));
    total += p;
  }
  for (double& p : joint) p /= total;
  // Renormalizing can leave the sum a few ulps away from 1; absorb it.
  const double sum = std::accumulate(joint.begin(), joint.end(), 0.0);
  joint.back() += 1.0 - sum;
  model.set_joint({}, length, std::move(joint));
  model.set_length_probs({}, {{length, 1.0}});
  return model;
}

TabularJointModel TabularJointModel::uniform(std::size_t n_content, std::size_t length) {
  TabularJointModel model(tabular_vocab(n_content), length);
  std::size_t size = 1;
  for (std::size_t i = 0; i < length; ++i) size *= n_content;
  model.set_joint({}, length, std::vector<double>(size, 1.0 / static_cast<double>(size)));
  model.set_length_probs({}, {{length, 1.0}});
  return model;
}

TabularJointModel TabularJointModel::point_mass(std::size_t n_content, const Sequence& support) {
  TabularJointModel model(tabular_vocab(n_content), support.size());
  std::size_t size = 1;
  for (std::size_t i = 0; i < support.size(); ++i) size *= n_content;
  std::vector<double> joint(size, 0.0);
  std::size_t index = 0;
  for (TokenId id : support) {
    const std::size_t d = model.digit_of_.at(id);
    if (d >= n_content) throw InvalidArgument("point_mass: support uses a special token");
    index = index * n_content + d;
  }
  joint[index] = 1.0;
  model.set_joint({}, support.size(), std::move(joint));
  model.set_length_probs({}, {{support.size(), 1.0}});
  return model;
}

Sequence tabular_exact_map(const TabularJointModel& model, const Sequence& x, std::size_t length) {
  const auto& table = model.joint(x, length);
  std::size_t best = 0;
  for (std::size_t i = 1; i < table.size(); ++i)
    if (table[i] > table[best]) best = i;
  return model.decode_index(best, length);
}

// ---------------------------------------------------------------------------
// Corpus and length model

void write_corpus(std::ostream& out, const Corpus& corpus, const Vocabulary& vocab) {
  for (const auto& pair : corpus)
    out << render(pair.source, vocab) << '\t' << render(pair.target, vocab) << '\n';
}

Corpus read_corpus(std::istream& in, const Vocabulary& vocab) {
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IoError("corpus line " + std::to_string(lineno) + ": missing tab separator");
    corpus.push_back({parse_sequence(std::string_view(line).substr(0, tab), vocab),
                      parse_sequence(std::string_view(line).substr(tab + 1), vocab)});
  }
  return corpus;
}

void write_corpus_file(const std::string& path, const Corpus& corpus, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_corpus(out, corpus, vocab);
}

Corpus read_corpus_file(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_corpus(in, vocab);
}

LengthDistribution LengthDistribution::fit(const Corpus& corpus, std::size_t max_length) {
  LengthDistribution ld(max_length);
  for (const auto& pair : corpus) ld.add_count(pair.source.size(), pair.target.size());
  return ld;
}

void LengthDistribution::add_count(std::size_t source_length, std::size_t target_length,
                                   std::size_t count) {
  if (target_length == 0 || target_length > max_length_)
    throw InvalidLength("length model: target length outside 1..max_length");
  counts_[source_length][target_length] += count;
}

double LengthDistribution::prob(std::size_t source_length, std::size_t target_length) const {
  if (target_length == 0 || target_length > max_length_) return 0.0;
  std::size_t total = 0;
  std::size_t hit = 0;
  if (auto it = counts_.find(source_length); it != counts_.end()) {
    for (const auto& [len, c] : it->second) total += c;
    if (auto jt = it->second.find(target_length); jt != it->second.end()) hit = jt->second;
  }
  return static_cast<double>(hit + 1) / static_cast<double>(total + max_length_);
}

std::vector<std::pair<std::size_t, double>> LengthDistribution::candidates(
    std::size_t source_length, std::size_t n) const {
  if (n == 0) throw InvalidArgument("length candidates: n must be at least 1");
  std::vector<std::pair<std::size_t, double>> all;
  for (std::size_t len = 1; len <= max_length_; ++len)
    all.emplace_back(len, prob(source_length, len));
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (all.size() > n) all.resize(n);
  return all;
}

void LengthDistribution::write(std::ostream& out) const {
  out << "# max_length " << max_length_ << '\n';
  for (const auto& [src, row] : counts_)
    for (const auto& [tgt, c] : row) out << src << ' ' << tgt << ' ' << c << '\n';
}

LengthDistribution LengthDistribution::read(std::istream& in) {
  LengthDistribution ld;
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> rows;
  std::size_t max_seen = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    if (line[0] == '#') {
      std::string hash, key;
      std::size_t value = 0;
      if (ss >> hash >> key >> value && key == "max_length") ld.max_length_ = value;
      continue;
    }
    std::size_t s = 0, t = 0, c = 0;
    if (!(ss >> s >> t >> c)) throw IoError("length model: malformed line '" + line + "'");
    rows.emplace_back(s, t, c);
    max_seen = std::max(max_seen, t);
  }
  if (ld.max_length_ == 0) ld.max_length_ = max_seen;
  for (const auto& [s, t, c] : rows) ld.add_count(s, t, c);
  return ld;
}

// ---------------------------------------------------------------------------
// Neural models

PairLayout layout_pair(const Sequence& x, const Sequence& y, TokenId sep) {
  PairLayout out;
  auto& in = out.input;
  const std::size_t n = x.size() + 1 + y.size();
  in.tokens.reserve(n);
  in.positions.reserve(n);
  in.segments.reserve(n);
  for (std::size_t i = 0; i < x.size(); ++i) {
    in.tokens.push_back(x[i]);
    in.positions.push_back(i);
    in.segments.push_back(0);
  }
  in.tokens.push_back(sep);
  in.positions.push_back(0);
  in.segments.push_back(1);
  out.target_offset = x.size() + 1;
  for (std::size_t j = 0; j < y.size(); ++j) {
    in.tokens.push_back(y[j]);
    in.positions.push_back(j + 1);
    in.segments.push_back(1);
  }
  return out;
}

namespace {

nn::EncoderConfig encoder_config(const Vocabulary& vocab, std::size_t max_length,
                                 std::size_t max_source_length, const EncoderDims& dims) {
  nn::EncoderConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = dims.d_model;
  cfg.n_layers = dims.n_layers;
  cfg.d_ff = dims.d_ff;
  cfg.max_positions = std::max(max_source_length, max_length + 1);
  cfg.n_segments = 2;
  return cfg;
}

TokenId require_sep(const Vocabulary& vocab) {
  if (!vocab.sep_id()) throw InvalidArgument("translation models need a <sep> token");
  return *vocab.sep_id();
}

Row softmax_row(const nn::Tensor2D& logits, Eigen::Index r) {
  return nn::softmax(std::span<const double>(logits.row(r).data(), static_cast<std::size_t>(logits.cols())));
}

void put_dims(nn::Checkpoint& ckpt, const nn::EncoderConfig& cfg, std::size_t max_length,
              std::size_t max_source_length) {
  ckpt.meta["d_model"] = std::to_string(cfg.d_model);
  ckpt.meta["n_layers"] = std::to_string(cfg.n_layers);
  ckpt.meta["d_ff"] = std::to_string(cfg.d_ff);
  ckpt.meta["max_length"] = std::to_string(max_length);
  ckpt.meta["max_source_length"] = std::to_string(max_source_length);
}

std::size_t meta_size(const nn::Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end()) throw IoError("checkpoint: missing meta key " + key);
  return static_cast<std::size_t>(std::stoull(it->second));
}

EncoderDims dims_of(const nn::Checkpoint& ckpt) {
  return {meta_size(ckpt, "d_model"), meta_size(ckpt, "n_layers"), meta_size(ckpt, "d_ff")};
}

std::size_t max_source_of(const Corpus& corpus) {
  std::size_t m = 1;
  for (const auto& p : corpus) m = std::max(m, p.source.size());
  return m;
}

struct PreparedExample {
  std::size_t index = 0;
  std::vector<std::size_t> masked;
  std::size_t count = 0;
};

// Shared minibatch loop. Examples are drawn on the calling thread, gradients
// are accumulated in a fixed number of chunks and summed in chunk order, so
// results do not depend on the worker count.
template <class Prepare, class ExampleLoss>
TrainReport run_training(std::vector<nn::Parameter*> params, std::size_t corpus_size,
                         const TrainConfig& cfg, Rng& rng, Prepare prepare, ExampleLoss loss_fn) {
  cfg.adam.validate();
  if (cfg.batch_size == 0) throw InvalidArgument("training: batch size must be positive");
  const std::size_t n_chunks = std::min<std::size_t>(cfg.batch_size, 8);
  std::vector<nn::GradSet> chunk_grads(n_chunks);
  for (auto& g : chunk_grads) g = nn::zero_grads(params);
  std::vector<double> chunk_loss(n_chunks);

  TrainReport report;
  double window = 0.0;
  std::size_t window_n = 0;
  std::vector<double> tail;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<PreparedExample> batch(cfg.batch_size);
    std::size_t total_count = 0;
    for (auto& ex : batch) {
      ex = prepare(uniform_index(rng, corpus_size), rng);
      total_count += ex.count;
    }
    const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(total_count, 1));
    parallel_for(n_chunks, cfg.workers, [&](std::size_t c) {
      for (auto& g : chunk_grads[c]) g.setZero();
      chunk_loss[c] = 0.0;
      const std::size_t lo = c * batch.size() / n_chunks;
      const std::size_t hi = (c + 1) * batch.size() / n_chunks;
      for (std::size_t b = lo; b < hi; ++b) chunk_loss[c] += loss_fn(batch[b], scale, &chunk_grads[c]);
    });
    double loss = 0.0;
    for (std::size_t c = 0; c < n_chunks; ++c) loss += chunk_loss[c];
    for (std::size_t p = 0; p < params.size(); ++p) {
      params[p]->grad = chunk_grads[0][p];
      for (std::size_t c = 1; c < n_chunks; ++c) params[p]->grad += chunk_grads[c][p];
      nn::adam_update(*params[p], cfg.adam, step);
    }
    if (!std::isfinite(loss)) throw NumericError("training: loss became non-finite");
    if (step == 1) report.initial_loss = loss;
    tail.push_back(loss);
    if (tail.size() > 10) tail.erase(tail.begin());
    window += loss;
    ++window_n;
    if ((cfg.log_every && step % cfg.log_every == 0) || step == cfg.steps) {
      const double mean = window / static_cast<double>(window_n);
      report.curve.emplace_back(step, mean);
      if (cfg.on_log) cfg.on_log(step, mean);
      window = 0.0;
      window_n = 0;
    }
  }
  if (!tail.empty())
    report.final_loss = std::accumulate(tail.begin(), tail.end(), 0.0) / static_cast<double>(tail.size());
  return report;
}

}  // namespace

ToyMaskedLM::ToyMaskedLM(Vocabulary vocab, std::size_t max_length, std::size_t max_source_length,
                         const EncoderDims& dims, Rng& rng)
    : vocab_(std::move(vocab)),
      max_length_(max_length),
      max_source_length_(max_source_length),
      encoder_(encoder_config(vocab_, max_length, max_source_length, dims), rng) {
  require_sep(vocab_);
}

nn::EncoderTape ToyMaskedLM::run(const Sequence& y, const std::vector<std::size_t>& masked,
                                 const Sequence& x, std::size_t* target_offset) const {
  if (y.empty() || y.size() > max_length_) throw InvalidLength("masked LM: target length out of range");
  if (x.size() > max_source_length_) throw InvalidLength("masked LM: source too long");
  Sequence ym = y;
  for (std::size_t q : masked) {
    if (q >= y.size()) throw InvalidArgument("masked LM: masked position out of range");
    ym[q] = vocab_.mask_id();
  }
  PairLayout lay = layout_pair(x, ym, *vocab_.sep_id());
  for (std::size_t q : masked) lay.input.output_rows.push_back(lay.target_offset + q);
  *target_offset = lay.target_offset;
  return encoder_.forward(lay.input);
}

std::vector<Row> ToyMaskedLM::query(const Sequence& y, const std::vector<std::size_t>& masked,
                                    const Sequence& x, nn::Tensor2D* hidden_out) const {
  std::size_t offset = 0;
  const nn::EncoderTape tape = run(y, masked, x, &offset);
  std::vector<Row> rows;
  rows.reserve(masked.size());
  for (Eigen::Index r = 0; r < tape.logits.rows(); ++r) rows.push_back(softmax_row(tape.logits, r));
  if (hidden_out)
    *hidden_out = tape.hidden.middleRows(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(y.size()));
  return rows;
}

std::vector<Row> ToyMaskedLM::conditional_logits(const Sequence& y, const std::vector<std::size_t>& masked,
                                                 const Sequence& x) const {
  std::size_t offset = 0;
  const nn::EncoderTape tape = run(y, masked, x, &offset);
  std::vector<Row> rows;
  for (Eigen::Index r = 0; r < tape.logits.rows(); ++r)
    rows.emplace_back(tape.logits.row(r).data(), tape.logits.row(r).data() + tape.logits.cols());
  return rows;
}

std::vector<Row> ToyMaskedLM::conditional(const Sequence& y, const std::vector<std::size_t>& masked,
                                          const Sequence& x) const {
  return query(y, masked, x, nullptr);
}

nn::Tensor2D ToyMaskedLM::hidden(const Sequence& y, const Sequence& x) const {
  nn::Tensor2D h;
  query(y, {}, x, &h);
  return h;
}

nn::Checkpoint ToyMaskedLM::to_checkpoint() const {
  nn::Checkpoint ckpt;
  ckpt.kind = "masked_lm";
  put_dims(ckpt, encoder_.config(), max_length_, max_source_length_);
  ckpt.meta["description"] = description;
  ckpt.vocab_tokens = vocab_.tokens();
  nn::export_parameters(encoder_.parameters(), ckpt);
  return ckpt;
}

ToyMaskedLM ToyMaskedLM::from_checkpoint(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "masked_lm") throw IoError("checkpoint is not a masked LM: " + ckpt.kind);
  Rng rng(0);
  ToyMaskedLM model(Vocabulary::from_tokens(ckpt.vocab_tokens), meta_size(ckpt, "max_length"),
                    meta_size(ckpt, "max_source_length"), dims_of(ckpt), rng);
  nn::import_parameters(model.encoder_.parameters(), ckpt);
  if (auto it = ckpt.meta.find("description"); it != ckpt.meta.end()) model.description = it->second;
  return model;
}

std::size_t sample_mask_count(std::size_t length, Rng& rng) {
  if (length == 0) throw InvalidLength("sample_mask_count: empty target");
  const double u = uniform01(rng);
  const auto k = static_cast<long>(std::lround(u * static_cast<double>(length)));
  return static_cast<std::size_t>(std::clamp<long>(k, 1, static_cast<long>(length)));
}

double masked_lm_example(const ToyMaskedLM& model, const ParallelPair& pair,
                         const std::vector<std::size_t>& masked, double scale, nn::GradSet* grads) {
  const auto& vocab = model.vocab();
  Sequence ym = pair.target;
  for (std::size_t q : masked) ym[q] = vocab.mask_id();
  PairLayout lay = layout_pair(pair.source, ym, *vocab.sep_id());
  for (std::size_t q : masked) lay.input.output_rows.push_back(lay.target_offset + q);
  const nn::EncoderTape tape = model.encoder().forward(lay.input);
  nn::Tensor2D d_logits(tape.logits.rows(), tape.logits.cols());
  double loss = 0.0;
  for (std::size_t j = 0; j < masked.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    const Row probs = softmax_row(tape.logits, r);
    const auto ce = nn::cross_entropy(probs, pair.target[masked[j]]);
    loss += ce.loss;
    for (std::size_t v = 0; v < ce.grad.size(); ++v)
      d_logits(r, static_cast<Eigen::Index>(v)) = scale * ce.grad[v];
  }
  if (grads) model.encoder().backward(lay.input, tape, d_logits, *grads);
  return scale * loss;
}

ToyMaskedLM train_masked_lm(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_length,
                            const EncoderDims& dims, const TrainConfig& cfg, TrainReport* report) {
  if (corpus.empty()) throw InvalidArgument("train_masked_lm: empty corpus");
  for (const auto& p : corpus)
    if (p.target.empty() || p.target.size() > max_length)
      throw InvalidLength("train_masked_lm: target length outside 1..max_length");
  Rng rng(cfg.seed);
  ToyMaskedLM model(vocab, max_length, max_source_of(corpus), dims, rng);
  auto prepare = [&](std::size_t index, Rng& r) {
    PreparedExample ex;
    ex.index = index;
    const std::size_t L = corpus[index].target.size();
    const std::size_t k = sample_mask_count(L, r);
    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 0; i < k; ++i) std::swap(perm[i], perm[i + uniform_index(r, L - i)]);
    ex.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(ex.masked.begin(), ex.masked.end());
    ex.count = k;
    return ex;
  };
  auto loss_fn = [&](const PreparedExample& ex, double scale, nn::GradSet* g) {
    return masked_lm_example(model, corpus[ex.index], ex.masked, scale, g);
  };
  TrainReport rep = run_training(model.encoder().parameters(), corpus.size(), cfg, rng, prepare, loss_fn);
  if (report) *report = std::move(rep);
  return model;
}

ARModel::ARModel(Vocabulary vocab, std::size_t max_length, std::size_t max_source_length,
                 const EncoderDims& dims, Rng& rng)
    : vocab_(std::move(vocab)),
      max_length_(max_length),
      max_source_length_(max_source_length),
      encoder_(encoder_config(vocab_, max_length, max_source_length, dims), rng) {
  require_sep(vocab_);
  if (!vocab_.eos_id()) throw InvalidArgument("AR model needs an <eos> token");
}

nn::EncoderInput ARModel::build(const Sequence& y, const Sequence& x, std::size_t prefix) const {
  if (y.size() > max_length_) throw InvalidLength("AR model: target longer than max_length");
  if (x.size() > max_source_length_) throw InvalidLength("AR model: source too long");
  const Sequence head(std::vector<TokenId>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(prefix)));
  PairLayout lay = layout_pair(x, head, *vocab_.sep_id());
  const std::size_t n = lay.input.tokens.size();
  const std::size_t ls = x.size();
  nn::AttentionMask mask{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t limit = i < ls ? ls : i + 1;
    for (std::size_t j = 0; j < limit; ++j) mask.allowed[i * n + j] = 1;
  }
  lay.input.mask = std::move(mask);
  return std::move(lay.input);
}

double ARModel::log_prob(const Sequence& y, const Sequence& x) const {
  nn::EncoderInput in = build(y, x, y.size());
  for (std::size_t j = 0; j <= y.size(); ++j) in.output_rows.push_back(x.size() + j);
  const auto tape = encoder_.forward(in);
  double total = 0.0;
  for (std::size_t j = 0; j <= y.size(); ++j) {
    const auto lp = nn::log_softmax(std::span<const double>(
        tape.logits.row(static_cast<Eigen::Index>(j)).data(), vocab_.size()));
    total += lp[j < y.size() ? y[j] : *vocab_.eos_id()];
  }
  return total;
}

double ARModel::sequential_log_prob(const Sequence& y, const Sequence& x) const {
  double total = 0.0;
  for (std::size_t j = 0; j <= y.size(); ++j) {
    nn::EncoderInput in = build(y, x, j);
    in.output_rows.push_back(x.size() + j);
    const auto tape = encoder_.forward(in);
    const auto lp = nn::log_softmax(std::span<const double>(tape.logits.row(0).data(), vocab_.size()));
    total += lp[j < y.size() ? y[j] : *vocab_.eos_id()];
  }
  return total;
}

double ARModel::example_loss(const ParallelPair& pair, double scale, nn::GradSet* grads) const {
  const auto& y = pair.target;
  nn::EncoderInput in = build(y, pair.source, y.size());
  for (std::size_t j = 0; j <= y.size(); ++j) in.output_rows.push_back(pair.source.size() + j);
  const auto tape = encoder_.forward(in);
  nn::Tensor2D d_logits(tape.logits.rows(), tape.logits.cols());
  double loss = 0.0;
  for (std::size_t j = 0; j <= y.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    const Row probs = softmax_row(tape.logits, r);
    const auto ce = nn::cross_entropy(probs, j < y.size() ? y[j] : *vocab_.eos_id());
    loss += ce.loss;
    for (std::size_t v = 0; v < ce.grad.size(); ++v)
      d_logits(r, static_cast<Eigen::Index>(v)) = scale * ce.grad[v];
  }
  if (grads) encoder_.backward(in, tape, d_logits, *grads);
  return scale * loss;
}

nn::Checkpoint ARModel::to_checkpoint() const {
  nn::Checkpoint ckpt;
  ckpt.kind = "ar_model";
  put_dims(ckpt, encoder_.config(), max_length_, max_source_length_);
  ckpt.vocab_tokens = vocab_.tokens();
  nn::export_parameters(encoder_.parameters(), ckpt);
  return ckpt;
}

ARModel ARModel::from_checkpoint(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "ar_model") throw IoError("checkpoint is not an AR model: " + ckpt.kind);
  Rng rng(0);
  ARModel model(Vocabulary::from_tokens(ckpt.vocab_tokens), meta_size(ckpt, "max_length"),
                meta_size(ckpt, "max_source_length"), dims_of(ckpt), rng);
  nn::import_parameters(model.encoder_.parameters(), ckpt);
  return model;
}

ARModel train_ar(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_length,
                 const EncoderDims& dims, const TrainConfig& cfg, TrainReport* report) {
  if (corpus.empty()) throw InvalidArgument("train_ar: empty corpus");
  Rng rng(cfg.seed);
  ARModel model(vocab, max_length, max_source_of(corpus), dims, rng);
  auto prepare = [&](std::size_t index, Rng&) {
    PreparedExample ex;
    ex.index = index;
    ex.count = corpus[index].target.size() + 1;
    return ex;
  };
  auto loss_fn = [&](const PreparedExample& ex, double scale, nn::GradSet* g) {
    return model.example_loss(corpus[ex.index], scale, g);
  };
  TrainReport rep = run_training(model.encoder().parameters(), corpus.size(), cfg, rng, prepare, loss_fn);
  if (report) *report = std::move(rep);
  return model;
}

}  // namespace seqgen
