#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "seqgen/nn.hpp"

using namespace seqgen;
using namespace seqgen::nn;

namespace {

Tensor2D random_tensor(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Tensor2D t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = standard_normal(rng);
  return t;
}

// Direct double-loop reference for masked attention.
Tensor2D loop_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                        const AttentionMask* mask) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor2D out = Tensor2D::Zero(q.rows(), v.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<double> w(static_cast<std::size_t>(k.rows()), 0.0);
    double mx = -1e300;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      if (mask && !(*mask)(i, j)) continue;
      double s = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      w[j] = s * scale;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      w[j] = (mask && !(*mask)(i, j)) ? 0.0 : std::exp(w[j] - mx);
      z += w[j];
    }
    for (Eigen::Index j = 0; j < k.rows(); ++j)
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += w[j] / z * v(j, c);
  }
  return out;
}

EncoderInput toy_input(std::size_t vocab, std::size_t n, Rng& rng) {
  EncoderInput in;
  for (std::size_t i = 0; i < n; ++i) {
    in.tokens.push_back(static_cast<std::uint32_t>(uniform_index(rng, vocab)));
    in.positions.push_back(i);
    in.segments.push_back(i < n / 2 ? 0 : 1);
  }
  in.output_rows = {1, 3, n - 1};
  return in;
}

}  // namespace

TEST_CASE("softmax basic values") {
  auto p = softmax(std::vector<double>{0.0, 0.0});
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));
  p = softmax(std::vector<double>{std::log(3.0), 0.0});
  CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-14));
  p = softmax(std::vector<double>{1.0, 2.0, 3.0}, 1e9);
  for (double v : p) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-8));
  p = softmax(std::vector<double>{1.0, 2.0, 3.0}, std::numeric_limits<double>::infinity());
  for (double v : p) CHECK(v == 1.0 / 3.0);
}

TEST_CASE("softmax rejects bad input and sums to one") {
  CHECK_THROWS_AS(softmax(std::vector<double>{1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(softmax(std::vector<double>{1.0}, 0.0), NumericError);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(1 + uniform_index(rng, 40));
    for (double& v : z) v = 30.0 * standard_normal(rng);
    const auto p = softmax(z, 0.1 + uniform01(rng) * 5.0);
    double s = 0.0;
    for (double v : p) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax is permutation equivariant") {
  std::vector<double> z{0.3, -1.2, 2.5, 0.0};
  std::vector<double> zp{2.5, 0.3, 0.0, -1.2};
  const auto p = softmax(z);
  const auto pp = softmax(zp);
  CHECK(p[2] == pp[0]);
  CHECK(p[0] == pp[1]);
  CHECK(p[3] == pp[2]);
  CHECK(p[1] == pp[3]);
}

TEST_CASE("cross entropy values and floor") {
  auto ce = cross_entropy(std::vector<double>{0.5, 0.5}, 0);
  CHECK(ce.loss == doctest::Approx(std::numbers::ln2));
  ce = cross_entropy(std::vector<double>{0.0, 1.0}, 1);
  CHECK(ce.loss == 0.0);
  CHECK(ce.grad[0] == 0.0);
  CHECK(ce.grad[1] == 0.0);
  ce = cross_entropy(std::vector<double>{0.0, 1.0}, 0);
  CHECK(ce.loss == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(6);
    for (double& v : z) v = standard_normal(rng);
    const std::size_t target = uniform_index(rng, z.size());
    const auto ce = cross_entropy(softmax(z), target);
    for (std::size_t i = 0; i < z.size(); ++i) {
      auto up = z, down = z;
      up[i] += 1e-4;
      down[i] -= 1e-4;
      const double num =
          (cross_entropy(softmax(up), target).loss - cross_entropy(softmax(down), target).loss) / 2e-4;
      const double rel = std::abs(num - ce.grad[i]) / std::max(std::abs(num) + std::abs(ce.grad[i]), 1e-8);
      CHECK(rel < 1e-4);
    }
  }
}

TEST_CASE("attention trivial cases") {
  Tensor2D q(1, 2), k(1, 2), v(1, 3);
  q << 0.4, -1.0;
  k << 0.4, -1.0;
  v << 1.0, 2.0, 3.0;
  Tensor2D out = scaled_dot_attention(q, k, v);
  CHECK(out(0, 0) == doctest::Approx(1.0));
  CHECK(out(0, 2) == doctest::Approx(3.0));

  Tensor2D k2(2, 2), v2(2, 1);
  k2 << 1.0, 1.0, 1.0, 1.0;
  v2 << 2.0, 6.0;
  out = scaled_dot_attention(q, k2, v2);
  CHECK(out(0, 0) == doctest::Approx(4.0));

  Tensor2D bad(2, 3);
  CHECK_THROWS(scaled_dot_attention(q, bad, v2));
}

TEST_CASE("attention matches loop reference, full and causal") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto n = static_cast<Eigen::Index>(2 + uniform_index(rng, 7));
    Tensor2D q = random_tensor(n, 4, rng), k = random_tensor(n, 4, rng), v = random_tensor(n, 3, rng);
    const auto causal = AttentionMask::causal(static_cast<std::size_t>(n));
    CHECK((scaled_dot_attention(q, k, v) - loop_attention(q, k, v, nullptr)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((scaled_dot_attention(q, k, v, &causal) - loop_attention(q, k, v, &causal)).cwiseAbs().maxCoeff() <
          1e-10);
  }
}

TEST_CASE("adam update") {
  Parameter p("p", 1, 1);
  AdamConfig cfg;
  cfg.lr = 0.1;
  p.grad(0, 0) = 1.0;
  adam_update(p, cfg, 1);
  CHECK(p.value(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));

  Parameter a("a", 2, 2), b("b", 2, 2);
  a.grad.setConstant(0.3);
  b.grad.setConstant(0.3);
  adam_update(a, cfg, 1);
  adam_update(b, cfg, 1);
  CHECK(a.value == b.value);

  Parameter z("z", 3, 1);
  z.value << 1.0, 2.0, 3.0;
  const Tensor2D before = z.value;
  adam_update(z, cfg, 1);
  CHECK(z.value == before);
  CHECK_THROWS(adam_update(z, cfg, 0));
  AdamConfig bad;
  bad.beta2 = 1.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("gradient check: linear layer with cross entropy") {
  Rng rng(21);
  Parameter w("w", 5, 4), b("b", 1, 4);
  w.value = random_tensor(5, 4, rng);
  b.value = random_tensor(1, 4, rng);
  const Tensor2D x = random_tensor(3, 5, rng);
  const std::vector<std::size_t> targets{0, 3, 1};
  auto loss = [&] {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::RowVectorXd z = x.row(i) * w.value + b.value;
      total += cross_entropy(softmax(std::vector<double>(z.data(), z.data() + z.size())),
                             targets[static_cast<std::size_t>(i)]).loss;
    }
    return total;
  };
  auto analytic = [&] {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::RowVectorXd z = x.row(i) * w.value + b.value;
      const auto ce = cross_entropy(softmax(std::vector<double>(z.data(), z.data() + z.size())),
                                    targets[static_cast<std::size_t>(i)]);
      const Eigen::Map<const Eigen::RowVectorXd> g(ce.grad.data(), 4);
      w.grad += x.row(i).transpose() * g;
      b.grad += g;
    }
  };
  std::vector<Parameter*> params{&w, &b};
  const auto res = gradient_check(params, loss, analytic, rng, 128);
  CHECK(res.coordinates_checked == 24);
  CHECK(res.max_rel_error < 1e-5);

  auto corrupted = [&] {
    analytic();
    w.grad(2, 1) += 0.5;
  };
  CHECK(gradient_check(params, loss, corrupted, rng, 128).max_rel_error > 1e-1);
}

TEST_CASE("gradient check: encoder, bidirectional and prefix-causal") {
  Rng rng(8);
  EncoderConfig cfg;
  cfg.vocab_size = 9;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.d_ff = 24;
  cfg.max_positions = 12;
  Encoder enc(cfg, rng);
  for (bool causal : {false, true}) {
    EncoderInput in = toy_input(cfg.vocab_size, 8, rng);
    if (causal) in.mask = AttentionMask::causal(8);
    const std::vector<std::size_t> targets{2, 7, 4};
    auto loss = [&] {
      const auto tape = enc.forward(in);
      double total = 0.0;
      for (Eigen::Index r = 0; r < tape.logits.rows(); ++r) {
        const auto p = softmax(std::span<const double>(tape.logits.row(r).data(), cfg.vocab_size));
        total += cross_entropy(p, targets[static_cast<std::size_t>(r)]).loss;
      }
      return total;
    };
    auto params = enc.parameters();
    auto analytic = [&] {
      const auto tape = enc.forward(in);
      Tensor2D d(tape.logits.rows(), tape.logits.cols());
      for (Eigen::Index r = 0; r < tape.logits.rows(); ++r) {
        const auto p = softmax(std::span<const double>(tape.logits.row(r).data(), cfg.vocab_size));
        const auto ce = cross_entropy(p, targets[static_cast<std::size_t>(r)]);
        for (std::size_t v = 0; v < ce.grad.size(); ++v) d(r, static_cast<Eigen::Index>(v)) = ce.grad[v];
      }
      GradSet g = zero_grads(params);
      enc.backward(in, tape, d, g);
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad = g[i];
    };
    const auto res = gradient_check(params, loss, analytic, rng, 400);
    CHECK(res.coordinates_checked == 400);
    CHECK(res.max_rel_error < 1e-3);
  }
}

TEST_CASE("encoder forward is deterministic and rejects bad input") {
  Rng a(4), b(4);
  EncoderConfig cfg;
  cfg.vocab_size = 7;
  cfg.d_model = 8;
  cfg.d_ff = 8;
  cfg.max_positions = 10;
  Encoder e1(cfg, a), e2(cfg, b);
  Rng r(1);
  EncoderInput in = toy_input(7, 6, r);
  CHECK(e1.forward(in).logits == e2.forward(in).logits);
  in.tokens[0] = 99;
  CHECK_THROWS_AS(e1.forward(in), InvalidArgument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(2);
  EncoderConfig cfg;
  cfg.vocab_size = 5;
  cfg.d_model = 8;
  cfg.d_ff = 8;
  Encoder enc(cfg, rng);
  Checkpoint ckpt;
  ckpt.kind = "test";
  ckpt.meta["alpha"] = "1";
  ckpt.vocab_tokens = {"<pad>", "<mask>", "a"};
  export_parameters(enc.parameters(), ckpt);
  std::stringstream ss;
  save_checkpoint(ss, ckpt);
  const Checkpoint back = load_checkpoint(ss);
  CHECK(back == ckpt);

  Rng other(99);
  Encoder enc2(cfg, other);
  import_parameters(enc2.parameters(), back);
  Rng r(1);
  EncoderInput in = toy_input(5, 4, r);
  CHECK(enc2.forward(in).logits == enc.forward(in).logits);

  std::stringstream bad("not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);
}
