#pragma once

// Minimal differentiable substrate for the toy models: dense layers,
// layer norm, single-head attention, a small pre-LN transformer encoder with
// explicit backward passes, Adam, and a finite-difference gradient checker.
// Everything runs in double precision.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "seqgen/common.hpp"

namespace seqgen::nn {

using Tensor2D = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Tensor2D value;
  Tensor2D grad;
  Tensor2D adam_m;
  Tensor2D adam_v;

  Parameter() = default;
  Parameter(std::string name, Eigen::Index rows, Eigen::Index cols);
  void zero_grad() { grad.setZero(); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;

  void validate() const;
};

/// Bias-corrected Adam on one parameter. `step` is 1-based. The gradient is
/// left untouched; callers zero it.
void adam_update(Parameter& p, const AdamConfig& cfg, std::size_t step);

/// Numerically stable softmax of logits / temperature. Throws NumericError on
/// non-finite input or non-positive temperature. An infinite temperature gives
/// the exact uniform distribution.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
std::vector<double> log_softmax(std::span<const double> logits);

struct CrossEntropy {
  double loss = 0.0;
  /// d loss / d logits, i.e. probs - one_hot(target).
  std::vector<double> grad;
};

/// probs[target] is floored at kProbFloor before the log.
CrossEntropy cross_entropy(std::span<const double> probs, std::size_t target);

/// Row-major n x m visibility; allowed(i, j) != 0 lets query i see key j.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask full(std::size_t n);
  static AttentionMask causal(std::size_t n);
  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * keys + j] != 0; }
};

/// softmax(Q K^T / sqrt(d)) V. `mask` may be null for full visibility.
/// When `probs_out` is given the attention weights are written there.
Tensor2D scaled_dot_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                              const AttentionMask* mask = nullptr, Tensor2D* probs_out = nullptr);

void scaled_dot_attention_backward(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                   const Tensor2D& probs, const Tensor2D& d_out, Tensor2D& d_q,
                                   Tensor2D& d_k, Tensor2D& d_v);

/// Gradient buffers aligned with a parameter list.
using GradSet = std::vector<Tensor2D>;
GradSet zero_grads(std::span<Parameter* const> params);
void add_into(GradSet& acc, const GradSet& g);

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
  std::size_t max_positions = 64;
  std::size_t n_segments = 2;
};

struct EncoderInput {
  std::vector<std::uint32_t> tokens;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> segments;
  AttentionMask mask;
  /// Sequence rows whose logits are produced.
  std::vector<std::size_t> output_rows;
};

struct LayerTape {
  Tensor2D x_in;
  Tensor2D ln1_xhat;
  Eigen::VectorXd ln1_rstd;
  Tensor2D ln1_out;
  Tensor2D q, k, v, probs, attn;
  Tensor2D x_mid;
  Tensor2D ln2_xhat;
  Eigen::VectorXd ln2_rstd;
  Tensor2D ln2_out;
  Tensor2D ff_pre;
  Tensor2D ff_act;
};

struct EncoderTape {
  std::vector<LayerTape> layers;
  Tensor2D x_final;  // residual stream before the final layer norm
  Tensor2D lnf_xhat;
  Eigen::VectorXd lnf_rstd;
  Tensor2D hidden;  // n x d, after the final layer norm
  Tensor2D logits;  // output_rows x vocab
};

/// Pre-LN transformer encoder: token + position + segment embeddings, then
/// n_layers of [x + Attn(LN(x)), x + FF(LN(x))] with GELU, a final layer norm
/// and an untied output projection.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }

  EncoderTape forward(const EncoderInput& input) const;
  /// Accumulates d loss / d params into `grads` (aligned with parameters()).
  void backward(const EncoderInput& input, const EncoderTape& tape, const Tensor2D& d_logits,
                GradSet& grads) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  struct Layer {
    Parameter ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  EncoderConfig cfg_;
  Parameter tok_emb_, pos_emb_, seg_emb_;
  std::vector<Layer> layers_;
  Parameter lnf_g_, lnf_b_, w_out_, b_out_;
};

/// Compares analytic gradients with central differences on a random subsample
/// of coordinates. `loss` evaluates the scalar loss at the current parameter
/// values; `analytic` must fill every Parameter::grad.
struct GradientCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates_checked = 0;
};

GradientCheckResult gradient_check(std::span<Parameter* const> params,
                                   const std::function<double()>& loss,
                                   const std::function<void()>& analytic, Rng& rng,
                                   std::size_t samples = 128, double h = 1e-4);

/// Versioned binary container: kind tag, string metadata, vocabulary tokens
/// and named tensors stored as raw little-endian doubles.
struct Checkpoint {
  std::string kind;
  std::map<std::string, std::string> meta;
  std::vector<std::string> vocab_tokens;
  std::vector<std::pair<std::string, Tensor2D>> tensors;

  bool operator==(const Checkpoint& other) const;
};

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint load_checkpoint(std::istream& in);
void save_checkpoint_file(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint_file(const std::string& path);

/// Copies parameter values into / out of a checkpoint, matching by name.
void export_parameters(std::span<const Parameter* const> params, Checkpoint& ckpt);
void import_parameters(std::span<Parameter* const> params, const Checkpoint& ckpt);

double gelu(double x);
double gelu_grad(double x);

}  // namespace seqgen::nn
