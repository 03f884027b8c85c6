#pragma once

// Masked conditional models: an exact tabular joint used as a brute-force
// oracle, a small trainable masked translation model, an autoregressive
// rescorer, and the empirical target-length model.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "seqgen/common.hpp"
#include "seqgen/nn.hpp"
#include "seqgen/seqcore.hpp"

namespace seqgen {

using Row = std::vector<double>;

/// Provider of p(y_i | Y with <mask> at the queried positions, X).
class MaskedConditionalModel {
 public:
  virtual ~MaskedConditionalModel() = default;

  virtual const Vocabulary& vocab() const = 0;
  virtual std::size_t max_length() const = 0;
  virtual bool supports_exact() const { return false; }

  /// One full-vocabulary row per entry of `masked`, in the given order. Every
  /// position in `masked` is overwritten with <mask> before the query, and
  /// mask tokens already present in `y` stay masked. All rows come from a
  /// single query, so the masked positions are predicted independently.
  virtual std::vector<Row> conditional(const Sequence& y, const std::vector<std::size_t>& masked,
                                       const Sequence& x) const = 0;

  /// Unnormalized scores behind conditional(). The default returns the
  /// floored log-probabilities.
  virtual std::vector<Row> conditional_logits(const Sequence& y, const std::vector<std::size_t>& masked,
                                              const Sequence& x) const;

  /// Final-layer hidden states of the target positions (L x d) for `y` as
  /// given. Models without a hidden representation throw.
  virtual bool has_hidden() const { return false; }
  virtual std::size_t hidden_size() const { return 0; }
  virtual nn::Tensor2D hidden(const Sequence& y, const Sequence& x) const;
};

/// Sum over positions of log p(y_i | Y with <mask> at i, X). Throws
/// InvalidArgument when y contains the mask token.
double pseudo_log_likelihood(const MaskedConditionalModel& model, const Sequence& y,
                             const Sequence& x);

/// Explicit p(Y | X, L) over content symbols for every supported (X, L),
/// plus p(L | X). Rows marginalize every masked position, so the conditional
/// of a masked position does not depend on which other positions are queried.
class TabularJointModel : public MaskedConditionalModel {
 public:
  TabularJointModel(Vocabulary vocab, std::size_t max_length);

  /// `joint` is indexed by content-symbol digits with position 0 most
  /// significant; it must have |content|^L entries summing to 1.
  void set_joint(const Sequence& x, std::size_t length, std::vector<double> joint);
  void set_length_probs(const Sequence& x, std::map<std::size_t, double> probs);

  const std::vector<double>& joint(const Sequence& x, std::size_t length) const;
  double length_log_prob(const Sequence& x, std::size_t length) const;
  /// p(Y | X, L) for a mask-free Y.
  double prob(const Sequence& y, const Sequence& x) const;

  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t max_length() const override { return max_length_; }
  bool supports_exact() const override { return true; }
  std::vector<Row> conditional(const Sequence& y, const std::vector<std::size_t>& masked,
                               const Sequence& x) const override;

  /// Random joints: weights exp(spread * N(0,1)), normalized.
  static TabularJointModel random(std::size_t n_content, std::size_t length, Rng& rng,
                                  double spread = 1.5);
  static TabularJointModel uniform(std::size_t n_content, std::size_t length);
  static TabularJointModel point_mass(std::size_t n_content, const Sequence& support);

  /// Content symbol ids of the joint entry with index `index` at length L.
  Sequence decode_index(std::size_t index, std::size_t length) const;

 private:
  Vocabulary vocab_;
  std::size_t max_length_;
  std::vector<std::size_t> digit_of_;  // token id -> content digit, or npos
  std::map<std::pair<Sequence, std::size_t>, std::vector<double>> joints_;
  std::map<Sequence, std::map<std::size_t, double>> length_probs_;
};

/// Content vocabulary "c0", "c1", ... with <pad>/<mask> specials only.
Vocabulary tabular_vocab(std::size_t n_content);

/// Exhaustive argmax over content^L of p(Y|X,L); ties go to the
/// lexicographically smallest sequence of token ids.
Sequence tabular_exact_map(const TabularJointModel& model, const Sequence& x, std::size_t length);

struct ParallelPair {
  Sequence source;
  Sequence target;
  bool operator==(const ParallelPair&) const = default;
};
using Corpus = std::vector<ParallelPair>;

/// Tab-separated "source<TAB>target" lines with space-separated tokens.
void write_corpus(std::ostream& out, const Corpus& corpus, const Vocabulary& vocab);
Corpus read_corpus(std::istream& in, const Vocabulary& vocab);
void write_corpus_file(const std::string& path, const Corpus& corpus, const Vocabulary& vocab);
Corpus read_corpus_file(const std::string& path, const Vocabulary& vocab);

/// p(L | source length) from corpus counts with add-one smoothing over
/// target lengths 1..max_length.
class LengthDistribution {
 public:
  LengthDistribution() = default;
  explicit LengthDistribution(std::size_t max_length) : max_length_(max_length) {}

  static LengthDistribution fit(const Corpus& corpus, std::size_t max_length);

  void add_count(std::size_t source_length, std::size_t target_length, std::size_t count = 1);
  std::size_t max_length() const { return max_length_; }
  double prob(std::size_t source_length, std::size_t target_length) const;
  double log_prob(std::size_t source_length, std::size_t target_length) const {
    return std::log(prob(source_length, target_length));
  }

  /// The n most probable target lengths, descending; ties go to the shorter
  /// length. n larger than the support returns the whole support.
  std::vector<std::pair<std::size_t, double>> candidates(std::size_t source_length,
                                                         std::size_t n) const;

  /// Text table, one "source_len target_len count" line per nonzero count.
  void write(std::ostream& out) const;
  static LengthDistribution read(std::istream& in);

 private:
  std::size_t max_length_ = 0;
  std::map<std::size_t, std::map<std::size_t, std::size_t>> counts_;
};

struct EncoderDims {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  nn::AdamConfig adam{};
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  /// Every this many steps a loss value is appended to the report.
  std::size_t log_every = 50;
  std::function<void(std::size_t step, double loss)> on_log;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::pair<std::size_t, double>> curve;
};

/// Encoder over "source <sep> target". Source tokens use segment 0 and
/// positions 0..|X|-1; the target segment restarts at position 0 for <sep>
/// and numbers target tokens 1..L.
struct PairLayout {
  nn::EncoderInput input;
  std::size_t target_offset = 0;  // sequence row of target position 0
};
PairLayout layout_pair(const Sequence& x, const Sequence& y, TokenId sep);

/// Mask-predict translation model with a bidirectional encoder.
class ToyMaskedLM : public MaskedConditionalModel {
 public:
  ToyMaskedLM() = default;
  ToyMaskedLM(Vocabulary vocab, std::size_t max_length, std::size_t max_source_length,
              const EncoderDims& dims, Rng& rng);

  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t max_length() const override { return max_length_; }
  std::size_t max_source_length() const { return max_source_length_; }
  std::vector<Row> conditional(const Sequence& y, const std::vector<std::size_t>& masked,
                               const Sequence& x) const override;
  bool has_hidden() const override { return true; }
  std::size_t hidden_size() const override { return encoder_.config().d_model; }
  nn::Tensor2D hidden(const Sequence& y, const Sequence& x) const override;

  /// Rows for `masked` and, optionally, target hidden states in one pass.
  std::vector<Row> query(const Sequence& y, const std::vector<std::size_t>& masked,
                         const Sequence& x, nn::Tensor2D* hidden_out) const;
  std::vector<Row> conditional_logits(const Sequence& y, const std::vector<std::size_t>& masked,
                                      const Sequence& x) const override;

  nn::Encoder& encoder() { return encoder_; }
  const nn::Encoder& encoder() const { return encoder_; }
  std::string description;

  nn::Checkpoint to_checkpoint() const;
  static ToyMaskedLM from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  Vocabulary vocab_;
  std::size_t max_length_ = 0;
  std::size_t max_source_length_ = 0;
  nn::Encoder encoder_;

  nn::EncoderTape run(const Sequence& y, const std::vector<std::size_t>& masked, const Sequence& x,
                      std::size_t* target_offset) const;
};

/// Number of target tokens masked for one training example:
/// clamp(round(u * L), 1, L) with u ~ U[0, 1].
std::size_t sample_mask_count(std::size_t length, Rng& rng);

/// Masked-prediction loss of one example with the given masked positions;
/// accumulates d loss / d params into `grads` when non-null. The loss is the
/// sum of cross-entropies scaled by `scale`.
double masked_lm_example(const ToyMaskedLM& model, const ParallelPair& pair,
                         const std::vector<std::size_t>& masked, double scale,
                         nn::GradSet* grads);

ToyMaskedLM train_masked_lm(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_length,
                            const EncoderDims& dims, const TrainConfig& cfg,
                            TrainReport* report = nullptr);

/// Left-to-right translation model over "source <sep> y <eos>". The <sep> row
/// predicts y_0, row y_j predicts y_{j+1}, and the last target row predicts
/// <eos>. Source rows see the whole source; target rows see the source and
/// the target prefix up to themselves.
class ARModel {
 public:
  ARModel() = default;
  ARModel(Vocabulary vocab, std::size_t max_length, std::size_t max_source_length,
          const EncoderDims& dims, Rng& rng);

  const Vocabulary& vocab() const { return vocab_; }
  std::size_t max_length() const { return max_length_; }

  /// All L+1 factors from one masked forward pass.
  double log_prob(const Sequence& y, const Sequence& x) const;
  /// The same factors evaluated one prefix at a time.
  double sequential_log_prob(const Sequence& y, const Sequence& x) const;

  /// Teacher-forced loss (sum of L+1 cross-entropies times scale).
  double example_loss(const ParallelPair& pair, double scale, nn::GradSet* grads) const;

  nn::Encoder& encoder() { return encoder_; }
  const nn::Encoder& encoder() const { return encoder_; }

  nn::Checkpoint to_checkpoint() const;
  static ARModel from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  nn::EncoderInput build(const Sequence& y, const Sequence& x, std::size_t prefix) const;

  Vocabulary vocab_;
  std::size_t max_length_ = 0;
  std::size_t max_source_length_ = 0;
  nn::Encoder encoder_;
};

ARModel train_ar(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_length,
                 const EncoderDims& dims, const TrainConfig& cfg, TrainReport* report = nullptr);

}  // namespace seqgen
