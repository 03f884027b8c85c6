#include "seqgen/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>

namespace seqgen::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian doubles");

Parameter::Parameter(std::string name_, Eigen::Index rows, Eigen::Index cols)
    : name(std::move(name_)),
      value(Tensor2D::Zero(rows, cols)),
      grad(Tensor2D::Zero(rows, cols)),
      adam_m(Tensor2D::Zero(rows, cols)),
      adam_v(Tensor2D::Zero(rows, cols)) {}

void AdamConfig::validate() const {
  if (!(lr >= 0.0)) throw InvalidArgument("adam: lr must be nonnegative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw InvalidArgument("adam: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw InvalidArgument("adam: eps must be positive");
}

void adam_update(Parameter& p, const AdamConfig& cfg, std::size_t step) {
  if (step == 0) throw InvalidArgument("adam_update: step is 1-based");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * p.grad;
  p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
  const auto m_hat = p.adam_m.array() / bc1;
  const auto v_hat = p.adam_v.array() / bc2;
  p.value.array() -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (logits.empty()) throw NumericError("softmax: empty input");
  if (!(temperature > 0.0)) throw NumericError("softmax: temperature must be positive");
  for (double z : logits)
    if (!std::isfinite(z)) throw NumericError("softmax: non-finite logit");
  std::vector<double> out(logits.size());
  if (std::isinf(temperature)) {
    std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(logits.size()));
    return out;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw NumericError("log_softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(mx)) throw NumericError("log_softmax: non-finite logit");
  double total = 0.0;
  for (double z : logits) total += std::exp(z - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

CrossEntropy cross_entropy(std::span<const double> probs, std::size_t target) {
  if (target >= probs.size()) throw InvalidArgument("cross_entropy: target out of range");
  CrossEntropy ce;
  ce.loss = -std::log(std::max(probs[target], kProbFloor));
  ce.grad.assign(probs.begin(), probs.end());
  ce.grad[target] -= 1.0;
  return ce;
}

AttentionMask AttentionMask::full(std::size_t n) {
  return AttentionMask{n, n, std::vector<std::uint8_t>(n * n, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  return m;
}

Tensor2D scaled_dot_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                              const AttentionMask* mask, Tensor2D* probs_out) {
  if (q.cols() != k.cols() || k.rows() != v.rows())
    throw InvalidArgument("attention: incompatible shapes");
  if (mask && (mask->queries != static_cast<std::size_t>(q.rows()) ||
               mask->keys != static_cast<std::size_t>(k.rows())))
    throw InvalidArgument("attention: mask shape mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor2D scores = (q * k.transpose()) * scale;
  const auto n = scores.rows();
  const auto m = scores.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j)
      if (!mask || (*mask)(i, j)) mx = std::max(mx, scores(i, j));
    if (!std::isfinite(mx)) throw NumericError("attention: query sees no keys");
    double total = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double e = (!mask || (*mask)(i, j)) ? std::exp(scores(i, j) - mx) : 0.0;
      scores(i, j) = e;
      total += e;
    }
    scores.row(i) /= total;
  }
  Tensor2D out = scores * v;
  if (probs_out) *probs_out = std::move(scores);
  return out;
}

void scaled_dot_attention_backward(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                   const Tensor2D& probs, const Tensor2D& d_out, Tensor2D& d_q,
                                   Tensor2D& d_k, Tensor2D& d_v) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  d_v = probs.transpose() * d_out;
  Tensor2D d_probs = d_out * v.transpose();
  Tensor2D d_scores(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double dot = probs.row(i).dot(d_probs.row(i));
    d_scores.row(i) = probs.row(i).array() * (d_probs.row(i).array() - dot);
  }
  d_q = (d_scores * k) * scale;
  d_k = (d_scores.transpose() * q) * scale;
}

GradSet zero_grads(std::span<Parameter* const> params) {
  GradSet g;
  g.reserve(params.size());
  for (const auto* p : params) g.push_back(Tensor2D::Zero(p->value.rows(), p->value.cols()));
  return g;
}

void add_into(GradSet& acc, const GradSet& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

namespace {

constexpr double kLayerNormEps = 1e-5;

void init_normal(Parameter& p, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = stddev * standard_normal(rng);
}

Tensor2D layer_norm(const Tensor2D& x, const Parameter& g, const Parameter& b, Tensor2D& xhat,
                    Eigen::VectorXd& rstd) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  xhat.resize(x.rows(), x.cols());
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mean).square().sum() / d;
    rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Tensor2D out = xhat.array().rowwise() * g.value.row(0).array();
  out.rowwise() += b.value.row(0);
  return out;
}

Tensor2D layer_norm_backward(const Tensor2D& dy, const Tensor2D& xhat, const Eigen::VectorXd& rstd,
                             const Parameter& g, Tensor2D& dg, Tensor2D& db) {
  const double d = static_cast<double>(dy.cols());
  dg.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  Tensor2D dxhat = dy.array().rowwise() * g.value.row(0).array();
  Tensor2D dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double s1 = dxhat.row(i).sum();
    const double s2 = dxhat.row(i).dot(xhat.row(i));
    dx.row(i) = (rstd(i) / d) * (d * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
  }
  return dx;
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.vocab_size == 0 || cfg.d_model == 0 || cfg.d_ff == 0)
    throw InvalidArgument("encoder: dimensions must be positive");
  const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto f = static_cast<Eigen::Index>(cfg.d_ff);
  tok_emb_ = Parameter("tok_emb", V, d);
  pos_emb_ = Parameter("pos_emb", static_cast<Eigen::Index>(cfg.max_positions), d);
  seg_emb_ = Parameter("seg_emb", static_cast<Eigen::Index>(cfg.n_segments), d);
  init_normal(tok_emb_, 0.1, rng);
  init_normal(pos_emb_, 0.1, rng);
  init_normal(seg_emb_, 0.1, rng);
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_f = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    Layer layer{Parameter(pre + "ln1_g", 1, d), Parameter(pre + "ln1_b", 1, d),
                Parameter(pre + "wq", d, d),    Parameter(pre + "wk", d, d),
                Parameter(pre + "wv", d, d),    Parameter(pre + "wo", d, d),
                Parameter(pre + "bo", 1, d),    Parameter(pre + "ln2_g", 1, d),
                Parameter(pre + "ln2_b", 1, d), Parameter(pre + "w1", d, f),
                Parameter(pre + "b1", 1, f),    Parameter(pre + "w2", f, d),
                Parameter(pre + "b2", 1, d)};
    layer.ln1_g.value.setOnes();
    layer.ln2_g.value.setOnes();
    init_normal(layer.wq, sd_d, rng);
    init_normal(layer.wk, sd_d, rng);
    init_normal(layer.wv, sd_d, rng);
    init_normal(layer.wo, 0.5 * sd_d, rng);
    init_normal(layer.w1, sd_d, rng);
    init_normal(layer.w2, 0.5 * sd_f, rng);
    layers_.push_back(std::move(layer));
  }
  lnf_g_ = Parameter("lnf_g", 1, d);
  lnf_b_ = Parameter("lnf_b", 1, d);
  lnf_g_.value.setOnes();
  w_out_ = Parameter("w_out", d, V);
  b_out_ = Parameter("b_out", 1, V);
  init_normal(w_out_, sd_d, rng);
}

std::vector<Parameter*> Encoder::parameters() {
  std::vector<Parameter*> out{&tok_emb_, &pos_emb_, &seg_emb_};
  for (auto& l : layers_) {
    for (Parameter* p : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.bo, &l.ln2_g,
                         &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2})
      out.push_back(p);
  }
  for (Parameter* p : {&lnf_g_, &lnf_b_, &w_out_, &b_out_}) out.push_back(p);
  return out;
}

std::vector<const Parameter*> Encoder::parameters() const {
  auto mut = const_cast<Encoder*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

EncoderTape Encoder::forward(const EncoderInput& in) const {
  const auto n = static_cast<Eigen::Index>(in.tokens.size());
  if (n == 0) throw InvalidArgument("encoder: empty input");
  if (in.positions.size() != in.tokens.size() || in.segments.size() != in.tokens.size())
    throw InvalidArgument("encoder: token/position/segment length mismatch");
  const auto d = static_cast<Eigen::Index>(cfg_.d_model);
  Tensor2D x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto tok = in.tokens[static_cast<std::size_t>(i)];
    const auto pos = in.positions[static_cast<std::size_t>(i)];
    const auto seg = in.segments[static_cast<std::size_t>(i)];
    if (tok >= cfg_.vocab_size || pos >= cfg_.max_positions || seg >= cfg_.n_segments)
      throw InvalidArgument("encoder: token, position or segment out of range");
    x.row(i) = tok_emb_.value.row(tok) + pos_emb_.value.row(static_cast<Eigen::Index>(pos)) +
               seg_emb_.value.row(static_cast<Eigen::Index>(seg));
  }
  const AttentionMask* mask = in.mask.allowed.empty() ? nullptr : &in.mask;

  EncoderTape tape;
  tape.layers.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& P = layers_[l];
    LayerTape& T = tape.layers[l];
    T.x_in = x;
    T.ln1_out = layer_norm(x, P.ln1_g, P.ln1_b, T.ln1_xhat, T.ln1_rstd);
    T.q = T.ln1_out * P.wq.value;
    T.k = T.ln1_out * P.wk.value;
    T.v = T.ln1_out * P.wv.value;
    T.attn = scaled_dot_attention(T.q, T.k, T.v, mask, &T.probs);
    T.x_mid = x + T.attn * P.wo.value;
    T.x_mid.rowwise() += P.bo.value.row(0);
    T.ln2_out = layer_norm(T.x_mid, P.ln2_g, P.ln2_b, T.ln2_xhat, T.ln2_rstd);
    T.ff_pre = T.ln2_out * P.w1.value;
    T.ff_pre.rowwise() += P.b1.value.row(0);
    T.ff_act = T.ff_pre.unaryExpr(&gelu);
    x = T.x_mid + T.ff_act * P.w2.value;
    x.rowwise() += P.b2.value.row(0);
  }
  tape.x_final = x;
  tape.hidden = layer_norm(x, lnf_g_, lnf_b_, tape.lnf_xhat, tape.lnf_rstd);
  tape.logits.resize(static_cast<Eigen::Index>(in.output_rows.size()),
                     static_cast<Eigen::Index>(cfg_.vocab_size));
  for (std::size_t j = 0; j < in.output_rows.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(in.output_rows[j]);
    if (r >= n) throw InvalidArgument("encoder: output row out of range");
    tape.logits.row(static_cast<Eigen::Index>(j)) = tape.hidden.row(r) * w_out_.value + b_out_.value;
  }
  return tape;
}

void Encoder::backward(const EncoderInput& in, const EncoderTape& tape, const Tensor2D& d_logits,
                       GradSet& grads) const {
  // grads follow parameters() order: tok, pos, seg, 13 per layer, lnf_g, lnf_b, w_out, b_out.
  std::size_t gi = 3 + 13 * layers_.size();
  Tensor2D& g_lnf_g = grads[gi];
  Tensor2D& g_lnf_b = grads[gi + 1];
  Tensor2D& g_w_out = grads[gi + 2];
  Tensor2D& g_b_out = grads[gi + 3];

  Tensor2D d_hidden = Tensor2D::Zero(tape.hidden.rows(), tape.hidden.cols());
  for (std::size_t j = 0; j < in.output_rows.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(in.output_rows[j]);
    const auto dl = d_logits.row(static_cast<Eigen::Index>(j));
    d_hidden.row(r) += dl * w_out_.value.transpose();
    g_w_out.noalias() += tape.hidden.row(r).transpose() * dl;
    g_b_out += dl;
  }
  Tensor2D dx = layer_norm_backward(d_hidden, tape.lnf_xhat, tape.lnf_rstd, lnf_g_, g_lnf_g, g_lnf_b);

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& P = layers_[li];
    const LayerTape& T = tape.layers[li];
    Tensor2D* g = &grads[3 + 13 * li];
    Tensor2D& g_ln1_g = g[0];
    Tensor2D& g_ln1_b = g[1];
    Tensor2D& g_wq = g[2];
    Tensor2D& g_wk = g[3];
    Tensor2D& g_wv = g[4];
    Tensor2D& g_wo = g[5];
    Tensor2D& g_bo = g[6];
    Tensor2D& g_ln2_g = g[7];
    Tensor2D& g_ln2_b = g[8];
    Tensor2D& g_w1 = g[9];
    Tensor2D& g_b1 = g[10];
    Tensor2D& g_w2 = g[11];
    Tensor2D& g_b2 = g[12];

    // Feed-forward branch.
    g_w2.noalias() += T.ff_act.transpose() * dx;
    g_b2 += dx.colwise().sum();
    Tensor2D d_ff_pre = (dx * P.w2.value.transpose()).array() * T.ff_pre.unaryExpr(&gelu_grad).array();
    g_w1.noalias() += T.ln2_out.transpose() * d_ff_pre;
    g_b1 += d_ff_pre.colwise().sum();
    Tensor2D d_ln2_out = d_ff_pre * P.w1.value.transpose();
    Tensor2D dx_mid = dx + layer_norm_backward(d_ln2_out, T.ln2_xhat, T.ln2_rstd, P.ln2_g, g_ln2_g, g_ln2_b);

    // Attention branch.
    g_wo.noalias() += T.attn.transpose() * dx_mid;
    g_bo += dx_mid.colwise().sum();
    Tensor2D d_attn = dx_mid * P.wo.value.transpose();
    Tensor2D dq, dk, dv;
    scaled_dot_attention_backward(T.q, T.k, T.v, T.probs, d_attn, dq, dk, dv);
    g_wq.noalias() += T.ln1_out.transpose() * dq;
    g_wk.noalias() += T.ln1_out.transpose() * dk;
    g_wv.noalias() += T.ln1_out.transpose() * dv;
    Tensor2D d_ln1_out =
        dq * P.wq.value.transpose() + dk * P.wk.value.transpose() + dv * P.wv.value.transpose();
    dx = dx_mid + layer_norm_backward(d_ln1_out, T.ln1_xhat, T.ln1_rstd, P.ln1_g, g_ln1_g, g_ln1_b);
  }

  for (std::size_t i = 0; i < in.tokens.size(); ++i) {
    const auto row = dx.row(static_cast<Eigen::Index>(i));
    grads[0].row(in.tokens[i]) += row;
    grads[1].row(static_cast<Eigen::Index>(in.positions[i])) += row;
    grads[2].row(static_cast<Eigen::Index>(in.segments[i])) += row;
  }
}

GradientCheckResult gradient_check(std::span<Parameter* const> params,
                                   const std::function<double()>& loss,
                                   const std::function<void()>& analytic, Rng& rng,
                                   std::size_t samples, double h) {
  for (auto* p : params) p->zero_grad();
  analytic();
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  std::size_t total = 0;
  for (auto* p : params) total += static_cast<std::size_t>(p->value.size());
  if (total == 0) return {};
  const std::size_t n = std::min(samples, total);
  if (n == total) {
    for (std::size_t pi = 0; pi < params.size(); ++pi)
      for (Eigen::Index k = 0; k < params[pi]->value.size(); ++k) coords.emplace_back(pi, k);
  } else {
    for (std::size_t s = 0; s < n; ++s) {
      std::size_t flat = uniform_index(rng, total);
      std::size_t pi = 0;
      while (flat >= static_cast<std::size_t>(params[pi]->value.size())) {
        flat -= static_cast<std::size_t>(params[pi]->value.size());
        ++pi;
      }
      coords.emplace_back(pi, static_cast<Eigen::Index>(flat));
    }
  }
  GradientCheckResult result;
  for (const auto& [pi, k] : coords) {
    Parameter& p = *params[pi];
    double& x = p.value.data()[k];
    const double saved = x;
    x = saved + h;
    const double up = loss();
    x = saved - h;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = p.grad.data()[k];
    const double denom = std::max(std::abs(a) + std::abs(numeric), 1e-6);
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
    ++result.coordinates_checked;
  }
  return result;
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (kind != other.kind || meta != other.meta || vocab_tokens != other.vocab_tokens ||
      tensors.size() != other.tensors.size())
    return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [na, ta] = tensors[i];
    const auto& [nb, tb] = other.tensors[i];
    if (na != nb || ta.rows() != tb.rows() || ta.cols() != tb.cols()) return false;
    if (std::memcmp(ta.data(), tb.data(), sizeof(double) * static_cast<std::size_t>(ta.size())) != 0)
      return false;
  }
  return true;
}

namespace {

constexpr char kMagic[8] = {'S', 'E', 'Q', 'G', 'E', 'N', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw IoError("checkpoint: truncated");
  return v;
}
std::string get_str(std::istream& in) {
  const auto n = get_u64(in);
  if (n > (1u << 26)) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("checkpoint: truncated");
  return s;
}

}  // namespace

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  put_str(out, ckpt.kind);
  put_u64(out, ckpt.meta.size());
  for (const auto& [k, v] : ckpt.meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put_u64(out, ckpt.vocab_tokens.size());
  for (const auto& t : ckpt.vocab_tokens) put_str(out, t);
  put_u64(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put_str(out, name);
    put_u64(out, static_cast<std::uint64_t>(t.rows()));
    put_u64(out, static_cast<std::uint64_t>(t.cols()));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.size())));
  }
  if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint load_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic");
  std::uint32_t version = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version)) || version != kVersion)
    throw IoError("checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.kind = get_str(in);
  const auto n_meta = get_u64(in);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    auto k = get_str(in);
    ckpt.meta[k] = get_str(in);
  }
  const auto n_vocab = get_u64(in);
  for (std::uint64_t i = 0; i < n_vocab; ++i) ckpt.vocab_tokens.push_back(get_str(in));
  const auto n_tensors = get_u64(in);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    auto name = get_str(in);
    const auto rows = get_u64(in);
    const auto cols = get_u64(in);
    if (rows * cols > (1u << 28)) throw IoError("checkpoint: implausible tensor size");
    Tensor2D t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (t.size() &&
        !in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.size()))))
      throw IoError("checkpoint: truncated tensor data");
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

void save_checkpoint_file(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  return load_checkpoint(in);
}

void export_parameters(std::span<const Parameter* const> params, Checkpoint& ckpt) {
  for (const auto* p : params) ckpt.tensors.emplace_back(p->name, p->value);
}

void import_parameters(std::span<Parameter* const> params, const Checkpoint& ckpt) {
  for (auto* p : params) {
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const auto& t) { return t.first == p->name; });
    if (it == ckpt.tensors.end()) throw IoError("checkpoint: missing tensor " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
      throw IoError("checkpoint: shape mismatch for " + p->name);
    p->value = it->second;
  }
}

}  // namespace seqgen::nn
