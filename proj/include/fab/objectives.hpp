#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fab/autodiff.hpp"
#include "fab/bias.hpp"
#include "fab/tensor.hpp"

namespace fab {

constexpr double kProbClamp = 1e-7;  // probabilities clamped before logs

struct LossWeights {
  double alpha = 0.25;        // Dice/focal mix
  double mu = 0.0625;         // IoU regression weight
  double lambda = 1e-4;       // bias l2 weight
  double focal_gamma = 2.0;
  double dice_epsilon = 1.0;
};

struct PerClassTerms {
  double dice = 0.0;
  double focal = 0.0;
  double mse_iou = 0.0;
};

struct LossBreakdown {
  double total = 0.0;
  double dice_term = 0.0;   // sum over classes, unweighted
  double focal_term = 0.0;
  double iou_term = 0.0;
  double reg_term = 0.0;    // ||delta||^2, zero unless DFA
  std::vector<PerClassTerms> per_class;
};

namespace detail {

inline void require_mask_shapes(const Tensor& pred, const Tensor& target,
                                const char* op) {
  if (pred.rank() != 2 || !pred.same_shape(target)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  }
}

inline void require_binary(const Tensor& t, const char* op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != 0.0 && t[i] != 1.0) {
      throw std::invalid_argument(std::string(op) +
                                  ": target entry not in {0,1}");
    }
  }
}

inline Tensor row_of(const Tensor& m, std::size_t r) {
  Tensor out({m.cols()});
  for (std::size_t j = 0; j < m.cols(); ++j) out[j] = m.at(r, j);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Metrics on binary masks
// ---------------------------------------------------------------------------

inline Tensor binarize(const Tensor& probs, double threshold = 0.5) {
  Tensor out(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i)
    out[i] = probs[i] > threshold ? 1.0 : 0.0;
  return out;
}

// Dice = 2|A^B| / (|A|+|B|); both-empty pairs score 1.
inline std::vector<double> dice_metric(const Tensor& pred,
                                       const Tensor& target) {
  detail::require_mask_shapes(pred, target, "dice_metric");
  std::vector<double> out(pred.rows());
  for (std::size_t c = 0; c < pred.rows(); ++c) {
    double inter = 0.0, a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < pred.cols(); ++i) {
      double p = pred.at(c, i), y = target.at(c, i);
      inter += p * y;
      a += p;
      b += y;
    }
    out[c] = (a + b == 0.0) ? 1.0 : 2.0 * inter / (a + b);
  }
  return out;
}

// IoU = |A^B| / |AvB|; both-empty pairs score 1.
inline std::vector<double> iou_metric(const Tensor& pred,
                                      const Tensor& target) {
  detail::require_mask_shapes(pred, target, "iou_metric");
  std::vector<double> out(pred.rows());
  for (std::size_t c = 0; c < pred.rows(); ++c) {
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < pred.cols(); ++i) {
      double p = pred.at(c, i), y = target.at(c, i);
      inter += p * y;
      uni += p + y - p * y;
    }
    out[c] = (uni == 0.0) ? 1.0 : inter / uni;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable per-class loss graphs
// ---------------------------------------------------------------------------

// Soft Dice with smoothing: 1 - (2 sum(p y) + eps) / (sum p + sum y + eps).
inline std::vector<Variable> dice_loss_graph(Tape& tape, Variable pred,
                                             const Tensor& target,
                                             double epsilon) {
  detail::require_mask_shapes(pred.value(), target, "dice_loss");
  std::vector<Variable> terms;
  for (std::size_t c = 0; c < target.rows(); ++c) {
    Variable p = select_row(pred, c);
    Variable y = tape.leaf(detail::row_of(target, c));
    double ysum = 0.0;
    for (std::size_t j = 0; j < target.cols(); ++j) ysum += target.at(c, j);
    Variable numer = add_scalar(mul_scalar(sum(mul(p, y)), 2.0), epsilon);
    Variable denom = add_scalar(sum(p), ysum + epsilon);
    terms.push_back(add_scalar(neg(div(numer, denom)), 1.0));
  }
  return terms;
}

// Mean over pixels of -(1 - p_t)^gamma * log(p_t), p_t = p when y = 1 and
// 1 - p otherwise. Probabilities are clamped before the log.
inline std::vector<Variable> focal_loss_graph(Tape& tape, Variable pred,
                                              const Tensor& target,
                                              double focal_gamma) {
  detail::require_mask_shapes(pred.value(), target, "focal_loss");
  std::vector<Variable> terms;
  for (std::size_t c = 0; c < target.rows(); ++c) {
    Variable p = clamp(select_row(pred, c), kProbClamp, 1.0 - kProbClamp);
    Tensor yrow = detail::row_of(target, c);
    Tensor not_yrow({yrow.size()});
    for (std::size_t j = 0; j < yrow.size(); ++j) not_yrow[j] = 1.0 - yrow[j];
    Variable y = tape.leaf(std::move(yrow));
    Variable not_y = tape.leaf(std::move(not_yrow));
    Variable p_t = add(mul(p, y), mul(add_scalar(neg(p), 1.0), not_y));
    Variable mod = vpow(add_scalar(neg(p_t), 1.0), focal_gamma);
    terms.push_back(mean(neg(mul(mod, vlog(p_t)))));
  }
  return terms;
}

// Focal loss evaluated from mask logits: with z = x for positives and -x
// for negatives, p_t = sigmoid(z) and the per-pixel term is
// sigmoid(-z)^gamma * softplus(-z). Same value as the probability form but
// the gradient survives sigmoid saturation, so confident-wrong pixels keep
// a restoring force.
inline std::vector<Variable> focal_loss_logits_graph(Tape& tape,
                                                     Variable logits,
                                                     const Tensor& target,
                                                     double focal_gamma) {
  detail::require_mask_shapes(logits.value(), target, "focal_loss");
  std::vector<Variable> terms;
  for (std::size_t c = 0; c < target.rows(); ++c) {
    Variable x = select_row(logits, c);
    Tensor sign({target.cols()});
    for (std::size_t j = 0; j < target.cols(); ++j)
      sign[j] = target.at(c, j) == 1.0 ? -1.0 : 1.0;  // -z
    Variable neg_z = mul(x, tape.leaf(std::move(sign)));
    Variable term = mul(vpow(sigmoid(neg_z), focal_gamma), softplus(neg_z));
    terms.push_back(mean(term));
  }
  return terms;
}

// (iou_pred_c - IoU(binarize(pred_c), target_c))^2. The IoU target is a
// constant: no gradient flows through the binarized prediction.
inline std::vector<Variable> mse_iou_loss_graph(Tape& tape, Variable iou_pred,
                                                const Tensor& pred_probs,
                                                const Tensor& target,
                                                double threshold = 0.5) {
  detail::require_mask_shapes(pred_probs, target, "mse_iou_loss");
  const std::size_t c_count = target.rows();
  if (iou_pred.value().size() != c_count) {
    throw std::invalid_argument("mse_iou_loss: iou_pred length " +
                                std::to_string(iou_pred.value().size()) +
                                " != class count " + std::to_string(c_count));
  }
  std::vector<double> true_iou = iou_metric(binarize(pred_probs, threshold),
                                            target);
  std::vector<Variable> terms;
  for (std::size_t c = 0; c < c_count; ++c) {
    Variable ip = select_row(iou_pred, c);  // iou_pred is C x 1
    Variable diff = add_scalar(ip, -true_iou[c]);
    terms.push_back(sum(mul(diff, diff)));
  }
  return terms;
}

// Composite objective from mask logits:
//   sum_c [(1-alpha) dice_c + alpha focal_c + mu mse_c] + lambda ||delta||^2
// Dice and IoU terms see sigmoid(logits); the focal term is evaluated in
// logit space. The regulariser is present only for a learnable (DFA) bias.
inline Variable composite_loss_graph(Tape& tape, Variable mask_logits,
                                     Variable iou_pred, const Tensor& target,
                                     const LossWeights& w, Variable bias,
                                     BiasStrategy strategy,
                                     LossBreakdown* breakdown = nullptr) {
  Variable mask_probs = sigmoid(mask_logits);
  auto dice = dice_loss_graph(tape, mask_probs, target, w.dice_epsilon);
  auto focal = focal_loss_logits_graph(tape, mask_logits, target,
                                       w.focal_gamma);
  auto mse = mse_iou_loss_graph(tape, iou_pred, mask_probs.value(), target);

  Variable total;
  for (std::size_t c = 0; c < dice.size(); ++c) {
    Variable term = add(add(mul_scalar(dice[c], 1.0 - w.alpha),
                            mul_scalar(focal[c], w.alpha)),
                        mul_scalar(mse[c], w.mu));
    total = c == 0 ? term : add(total, term);
  }
  double reg_value = 0.0;
  if (strategy == BiasStrategy::DFA) {
    Variable reg = sum(mul(bias, bias));
    reg_value = reg.scalar();
    total = add(total, mul_scalar(reg, w.lambda));
  }

  if (breakdown) {
    breakdown->per_class.clear();
    breakdown->dice_term = breakdown->focal_term = breakdown->iou_term = 0.0;
    for (std::size_t c = 0; c < dice.size(); ++c) {
      PerClassTerms t{dice[c].scalar(), focal[c].scalar(), mse[c].scalar()};
      breakdown->dice_term += t.dice;
      breakdown->focal_term += t.focal;
      breakdown->iou_term += t.mse_iou;
      breakdown->per_class.push_back(t);
    }
    breakdown->reg_term = reg_value;
    breakdown->total = total.scalar();
  }
  return total;
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

inline std::vector<double> dice_loss(const Tensor& pred, const Tensor& target,
                                     double epsilon) {
  detail::require_binary(target, "dice_loss");
  Tape tape;
  auto terms = dice_loss_graph(tape, tape.leaf(pred), target, epsilon);
  std::vector<double> out;
  for (auto& t : terms) out.push_back(t.scalar());
  return out;
}

inline std::vector<double> focal_loss(const Tensor& pred, const Tensor& target,
                                      double focal_gamma) {
  detail::require_binary(target, "focal_loss");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] <= 0.0 || pred[i] >= 1.0) {
      throw std::domain_error("focal_loss: prediction at or beyond {0,1}; "
                              "clamp upstream");
    }
  }
  Tape tape;
  auto terms = focal_loss_graph(tape, tape.leaf(pred), target, focal_gamma);
  std::vector<double> out;
  for (auto& t : terms) out.push_back(t.scalar());
  return out;
}

inline std::vector<double> mse_iou_loss(const std::vector<double>& iou_pred,
                                        const Tensor& pred_probs,
                                        const Tensor& target,
                                        double threshold = 0.5) {
  Tape tape;
  Tensor col({iou_pred.size(), 1}, std::vector<double>(iou_pred));
  auto terms = mse_iou_loss_graph(tape, tape.leaf(col), pred_probs, target,
                                  threshold);
  std::vector<double> out;
  for (auto& t : terms) out.push_back(t.scalar());
  return out;
}

}  // namespace fab
