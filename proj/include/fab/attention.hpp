#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "fab/autodiff.hpp"
#include "fab/bias.hpp"
#include "fab/tensor.hpp"

namespace fab {

// Class-softmax cross-attention weights plus per-class aggregated features.
// For every spatial position i, the weights column sums to 1.
struct AttentionOutput {
  Tensor weights;     // C x N
  Tensor aggregated;  // C x d
};

struct AttentionProjections {
  Tensor wq, wk, wv;  // d x d each
};

// Tape-level biased cross-attention, single head:
//   Q = prompts Wq, K = features Wk, V = features Wv
//   S[c,i] = <Q_c, K_i> / sqrt(d) + b_c
//   weights = softmax over the class axis, aggregated = weights V.
// Differentiable through every input, including the bias vector.
inline std::pair<Variable, Variable> biased_cross_attention_graph(
    Tape& tape, Variable prompts, Variable features, Variable bias,
    Variable wq, Variable wk, Variable wv) {
  const Tensor& pv = prompts.value();
  const Tensor& fv = features.value();
  if (pv.rank() != 2 || fv.rank() != 2 || pv.cols() != fv.cols()) {
    throw std::invalid_argument("biased_cross_attention: prompts " +
                                shape_str(pv.shape()) + " and features " +
                                shape_str(fv.shape()) +
                                " must share the feature dimension");
  }
  const std::size_t num_classes = pv.rows();
  if (num_classes < 2) {
    throw std::invalid_argument(
        "biased_cross_attention: class softmax needs at least 2 classes");
  }
  if (bias.value().size() != num_classes) {
    throw std::invalid_argument("biased_cross_attention: bias length " +
                                std::to_string(bias.value().size()) +
                                " != class count " +
                                std::to_string(num_classes));
  }
  Variable q = matmul(prompts, wq);
  Variable k = matmul(features, wk);
  Variable v = matmul(features, wv);
  double scale = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  Variable logits = mul_scalar(matmul(q, transpose(k)), scale);  // C x N
  Variable biased = broadcast_add(logits, bias, 0);
  Variable weights = softmax_axis(biased, 0);
  Variable aggregated = matmul(weights, v);
  return {weights, aggregated};
}

// Value-level wrapper implementing the spec contract.
inline AttentionOutput biased_cross_attention(
    const Tensor& prompts, const Tensor& features, const BiasVector& bias,
    const AttentionProjections& proj) {
  Tape tape;
  Variable p = tape.leaf(prompts);
  Variable f = tape.leaf(features);
  Variable b = tape.leaf(Tensor::vector(bias.values));
  Variable wq = tape.leaf(proj.wq);
  Variable wk = tape.leaf(proj.wk);
  Variable wv = tape.leaf(proj.wv);
  auto [w, agg] = biased_cross_attention_graph(tape, p, f, b, wq, wk, wv);
  return {w.value(), agg.value()};
}

struct SelfGatingDiagnostic {
  std::vector<double> diag_grad;   // sum_i dL/da * a(1-a), the diagonal form
  std::vector<double> exact_grad;  // full class-softmax Jacobian
  std::vector<double> gap;         // diag - exact
};

// Compares the diagonal self-gating bias gradient against the exact one.
// `upstream` is dL/dweights, `weights` the class-softmax attention weights,
// both C x N. The diagonal form drops the softmax cross-terms; the gap is
// their disagreement per class.
inline SelfGatingDiagnostic self_gating_diagnostic(const Tensor& upstream,
                                                   const Tensor& weights) {
  if (upstream.rank() != 2 || !upstream.same_shape(weights)) {
    throw std::invalid_argument("self_gating_diagnostic: shape mismatch " +
                                shape_str(upstream.shape()) + " vs " +
                                shape_str(weights.shape()));
  }
  const std::size_t num_classes = weights.rows();
  const std::size_t n = weights.cols();
  SelfGatingDiagnostic out;
  out.diag_grad.assign(num_classes, 0.0);
  out.exact_grad.assign(num_classes, 0.0);
  out.gap.assign(num_classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mixed = 0.0;  // sum_c' a[c',i] * g[c',i]
    for (std::size_t c = 0; c < num_classes; ++c)
      mixed += weights.at(c, i) * upstream.at(c, i);
    for (std::size_t c = 0; c < num_classes; ++c) {
      double a = weights.at(c, i);
      double g = upstream.at(c, i);
      out.diag_grad[c] += g * a * (1.0 - a);
      out.exact_grad[c] += a * (g - mixed);
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    out.gap[c] = out.diag_grad[c] - out.exact_grad[c];
  return out;
}

}  // namespace fab
