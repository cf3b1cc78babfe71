#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "fab/attention.hpp"
#include "fab/autodiff.hpp"
#include "fab/bias.hpp"

using namespace fab;

TEST_CASE("cffa_bias reproduces the hand-evaluated values") {
  ClassFrequencies f({0.7, 0.2, 0.1});
  BiasVector b = cffa_bias(f, 2.0);
  REQUIRE(b.values.size() == 3);
  CHECK(b.values[0] == Catch::Approx(-2.407946).margin(1e-6));
  CHECK(b.values[1] == Catch::Approx(-0.446287).margin(1e-6));
  CHECK(b.values[2] == Catch::Approx(-0.210721).margin(1e-6));
  CHECK(b.strategy == BiasStrategy::CFFA);
  CHECK_FALSE(b.learnable);
}

TEST_CASE("cffa_bias: uniform frequencies give equal biases") {
  ClassFrequencies f({0.25, 0.25, 0.25, 0.25});
  BiasVector b = cffa_bias(f, 3.7);
  for (double v : b.values) CHECK(v == Catch::Approx(b.values[0]));
}

TEST_CASE("cffa_bias is strictly order-reversing in frequency") {
  std::mt19937_64 rng(11);
  for (int iter = 0; iter < 50; ++iter) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> raw{u(rng), u(rng), u(rng), u(rng)};
    double s = raw[0] + raw[1] + raw[2] + raw[3];
    for (auto& x : raw) x /= s;
    double gamma = u(rng) * 4.0;
    BiasVector b = cffa_bias(ClassFrequencies(raw), gamma);
    for (std::size_t i = 0; i < raw.size(); ++i)
      for (std::size_t j = 0; j < raw.size(); ++j)
        if (raw[i] < raw[j]) CHECK(b.values[i] > b.values[j]);
  }
}

TEST_CASE("cffa_bias rejects out-of-range inputs") {
  CHECK_THROWS_AS(ClassFrequencies({1.0, 0.0}), std::domain_error);
  CHECK_THROWS_AS(ClassFrequencies({0.5, 0.4}), std::domain_error);
  ClassFrequencies ok({0.5, 0.5});
  CHECK_THROWS_AS(cffa_bias(ok, 0.0), std::domain_error);
}

TEST_CASE("hcfa_bias reproduces the hand-evaluated values") {
  BaselineDice d({0.8, 0.6, 0.6});
  BiasVector b = hcfa_bias(d, 2.0);
  CHECK(b.values[0] == Catch::Approx(-1.021651).margin(1e-6));
  CHECK(b.values[1] == Catch::Approx(-0.713350).margin(1e-6));
  CHECK(b.values[2] == Catch::Approx(-0.713350).margin(1e-6));
  CHECK(b.strategy == BiasStrategy::HCFA);
}

TEST_CASE("hcfa_bias: equal dice degenerates, lower dice gets larger bias") {
  BiasVector eq = hcfa_bias(BaselineDice({0.5, 0.5, 0.5}), 2.0);
  CHECK(eq.values[0] == Catch::Approx(eq.values[1]));
  CHECK(eq.values[1] == Catch::Approx(eq.values[2]));

  BiasVector ord = hcfa_bias(BaselineDice({0.9, 0.2, 0.6}), 1.3);
  CHECK(ord.values[1] > ord.values[2]);
  CHECK(ord.values[2] > ord.values[0]);

  CHECK_THROWS_AS(BaselineDice({0.0, 0.0}), std::domain_error);
  CHECK_THROWS_AS(hcfa_bias(BaselineDice({0.7}), 2.0), std::domain_error);
}

TEST_CASE("dfa_warm_start reproduces the hand-evaluated prior") {
  BiasVector b = dfa_warm_start(ClassFrequencies({0.9, 0.1}), 2.0, 0.8);
  CHECK(b.values[0] == Catch::Approx(-1.757780).margin(1e-6));
  CHECK(b.values[1] == Catch::Approx(+1.757780).margin(1e-6));
  CHECK(b.strategy == BiasStrategy::DFA);
  CHECK(b.learnable);
}

TEST_CASE("dfa_warm_start centring: zero mean, uniform gives zero vector") {
  BiasVector uniform = dfa_warm_start(ClassFrequencies({0.25, 0.25, 0.25, 0.25}),
                                      2.0, 0.8);
  for (double v : uniform.values) CHECK(std::abs(v) < 1e-12);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int iter = 0; iter < 30; ++iter) {
    std::vector<double> raw{u(rng), u(rng), u(rng), u(rng), u(rng)};
    double s = 0.0;
    for (double x : raw) s += x;
    for (auto& x : raw) x /= s;
    BiasVector b = dfa_warm_start(ClassFrequencies(raw), 1.0 + u(rng),
                                  0.1 + u(rng));
    double mean = 0.0;
    for (double v : b.values) mean += v;
    mean /= static_cast<double>(b.values.size());
    CHECK(std::abs(mean) < 1e-9);
    // minority class positive, majority negative
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < raw.size(); ++i) {
      if (raw[i] < raw[lo]) lo = i;
      if (raw[i] > raw[hi]) hi = i;
    }
    CHECK(b.values[lo] > 0.0);
    CHECK(b.values[hi] < 0.0);
  }
}

TEST_CASE("bias vector JSON round trip") {
  BiasVector b = dfa_warm_start(ClassFrequencies({0.6, 0.3, 0.1}), 2.0, 0.8);
  BiasVector back = BiasVector::from_json(b.to_json());
  CHECK(back.strategy == b.strategy);
  CHECK(back.learnable);
  CHECK(back.gamma == Catch::Approx(b.gamma));
  CHECK(back.beta == Catch::Approx(b.beta));
  REQUIRE(back.values.size() == b.values.size());
  for (std::size_t i = 0; i < b.values.size(); ++i)
    CHECK(back.values[i] == Catch::Approx(b.values[i]));
}

// ---------------------------------------------------------------------------
// Biased cross-attention
// ---------------------------------------------------------------------------

namespace {

AttentionProjections identity_proj(std::size_t d) {
  Tensor eye({d, d});
  for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  return {eye, eye, eye};
}

}  // namespace

TEST_CASE("zero logits and zero bias give uniform class weights") {
  const std::size_t d = 4, n = 5, c = 3;
  Tensor prompts({c, d});  // zeros -> Q = 0 -> logits 0
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor features({n, d});
  for (std::size_t i = 0; i < features.size(); ++i) features[i] = u(rng);

  AttentionOutput out = biased_cross_attention(prompts, features,
                                               BiasVector::none(c),
                                               identity_proj(d));
  for (std::size_t i = 0; i < out.weights.size(); ++i)
    CHECK(out.weights[i] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("zero logits with b = [ln 3, 0] weight classes 0.75 / 0.25") {
  const std::size_t d = 4, n = 6;
  Tensor prompts({2, d});
  Tensor features({n, d});
  for (std::size_t i = 0; i < features.size(); ++i)
    features[i] = 0.1 * static_cast<double>(i);
  BiasVector bias = BiasVector::none(2);
  bias.values = {std::log(3.0), 0.0};

  AttentionOutput out =
      biased_cross_attention(prompts, features, bias, identity_proj(d));
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(out.weights.at(0, i) == Catch::Approx(0.75).epsilon(1e-12));
    CHECK(out.weights.at(1, i) == Catch::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("attention weights column-normalise and bias shift is a no-op") {
  const std::size_t d = 6, n = 9, c = 4;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.2, 1.2);
  Tensor prompts({c, d}), features({n, d});
  for (std::size_t i = 0; i < prompts.size(); ++i) prompts[i] = u(rng);
  for (std::size_t i = 0; i < features.size(); ++i) features[i] = u(rng);
  AttentionProjections proj;
  proj.wq = Tensor({d, d});
  proj.wk = Tensor({d, d});
  proj.wv = Tensor({d, d});
  for (std::size_t i = 0; i < d * d; ++i) {
    proj.wq[i] = u(rng);
    proj.wk[i] = u(rng);
    proj.wv[i] = u(rng);
  }
  BiasVector bias = BiasVector::none(c);
  bias.values = {0.4, -0.3, 1.1, 0.0};

  AttentionOutput out = biased_cross_attention(prompts, features, bias, proj);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t cc = 0; cc < c; ++cc) s += out.weights.at(cc, i);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }

  BiasVector shifted = bias;
  for (auto& v : shifted.values) v += 5.5;
  AttentionOutput out2 =
      biased_cross_attention(prompts, features, shifted, proj);
  for (std::size_t i = 0; i < out.weights.size(); ++i)
    CHECK(std::abs(out.weights[i] - out2.weights[i]) < 1e-12);
  for (std::size_t i = 0; i < out.aggregated.size(); ++i)
    CHECK(std::abs(out.aggregated[i] - out2.aggregated[i]) < 1e-12);
}

TEST_CASE("attention rejects degenerate inputs") {
  Tensor prompts({1, 4});
  Tensor features({3, 4});
  CHECK_THROWS_AS(biased_cross_attention(prompts, features,
                                         BiasVector::none(1),
                                         identity_proj(4)),
                  std::invalid_argument);
  Tensor mismatched({3, 5});
  CHECK_THROWS_AS(biased_cross_attention(Tensor({2, 4}), mismatched,
                                         BiasVector::none(2),
                                         identity_proj(4)),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Self-gating diagnostic (diagonal vs exact bias gradient)
// ---------------------------------------------------------------------------

TEST_CASE("diagnostic coincides when the off-class upstream gradient is zero") {
  Tensor weights = Tensor::matrix(2, 1, {0.75, 0.25});
  Tensor upstream = Tensor::matrix(2, 1, {1.0, 0.0});
  auto d = self_gating_diagnostic(upstream, weights);
  CHECK(d.diag_grad[0] == Catch::Approx(0.1875).margin(1e-10));
  CHECK(d.exact_grad[0] == Catch::Approx(0.1875).margin(1e-10));
  CHECK(std::abs(d.gap[0]) < 1e-10);
}

TEST_CASE("diagnostic exposes the neglected cross-terms under uniform grads") {
  Tensor weights = Tensor::matrix(2, 1, {0.75, 0.25});
  Tensor upstream = Tensor::matrix(2, 1, {1.0, 1.0});
  auto d = self_gating_diagnostic(upstream, weights);
  CHECK(std::abs(d.exact_grad[0]) < 1e-10);
  CHECK(std::abs(d.exact_grad[1]) < 1e-10);
  CHECK(d.diag_grad[0] == Catch::Approx(0.1875).margin(1e-10));
}

TEST_CASE("self-gating factor peaks at one half") {
  Tensor weights = Tensor::matrix(2, 1, {0.5, 0.5});
  Tensor upstream = Tensor::matrix(2, 1, {1.0, 0.0});
  auto d = self_gating_diagnostic(upstream, weights);
  CHECK(d.diag_grad[0] == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("exact diagnostic equals tape backward through the bias") {
  const std::size_t d = 5, n = 7, c = 3;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor prompts({c, d}), features({n, d}), wq({d, d}), wk({d, d}), wv({d, d});
  for (auto* t : {&prompts, &features, &wq, &wk, &wv})
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = u(rng);
  Tensor upstream({c, n});
  for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] = u(rng);

  // Probe loss L = <upstream, weights>: dL/dweights == upstream.
  Tape tape;
  Variable bias = tape.leaf(Tensor::vector({0.2, -0.4, 0.1}), true);
  auto [weights, agg] = biased_cross_attention_graph(
      tape, tape.leaf(prompts), tape.leaf(features), bias, tape.leaf(wq),
      tape.leaf(wk), tape.leaf(wv));
  Variable loss = sum(mul(tape.leaf(upstream), weights));
  tape.backward(loss);

  auto diag = self_gating_diagnostic(upstream, weights.value());
  for (std::size_t cc = 0; cc < c; ++cc)
    CHECK(std::abs(diag.exact_grad[cc] - bias.grad()[cc]) < 1e-10);

  // Under a shift-invariant loss the exact gradient sums to zero.
  double total = 0.0;
  for (double g : diag.exact_grad) total += g;
  CHECK(std::abs(total) < 1e-10);
}

TEST_CASE("diagnostic rejects shape mismatch") {
  CHECK_THROWS_AS(
      self_gating_diagnostic(Tensor({2, 3}), Tensor({3, 2})),
      std::invalid_argument);
}
