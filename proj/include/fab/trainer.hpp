#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fab/bias.hpp"
#include "fab/decoder.hpp"
#include "fab/objectives.hpp"
#include "fab/synthgen.hpp"

namespace fab {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double base_lr = 1e-4;   // eta
  double bias_lr = 1e-2;   // eta_b, 100x the base rate by default
  double lr_min = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights loss;
  BiasStrategy strategy = BiasStrategy::None;
  bool cold_start = false;  // DFA only: delta(0) = 0 instead of warm start
  std::uint64_t seed = 0;
  double gamma = 2.0;
  double beta = 0.8;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"base_lr", base_lr},
            {"bias_lr", bias_lr},
            {"lr_min", lr_min},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"alpha", loss.alpha},
            {"mu", loss.mu},
            {"lambda", loss.lambda},
            {"focal_gamma", loss.focal_gamma},
            {"dice_epsilon", loss.dice_epsilon},
            {"strategy", to_string(strategy)},
            {"cold_start", cold_start},
            {"seed", seed},
            {"gamma", gamma},
            {"beta", beta}};
  }
};

struct Metrics {
  std::vector<double> dice;
  std::vector<double> iou;

  double mean_dice() const {
    return dice.empty() ? 0.0
                        : std::accumulate(dice.begin(), dice.end(), 0.0) /
                              static_cast<double>(dice.size());
  }
  double mean_iou() const {
    return iou.empty() ? 0.0
                       : std::accumulate(iou.begin(), iou.end(), 0.0) /
                             static_cast<double>(iou.size());
  }
};

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  Metrics train;
  Metrics val;
  LossBreakdown loss;           // averaged over the epoch's batches
  std::vector<double> delta;    // empty unless the bias is learnable
};

struct StageRecord {
  std::string name;  // "single", "stage1", "stage2"
  std::vector<EpochRow> rows;
  Metrics best_val;
  Metrics final_test;
  double wall_clock_seconds = 0.0;
};

struct RunRecord {
  TrainConfig config;
  std::vector<StageRecord> stages;
  std::vector<double> bias_values;  // fixed bias (cffa/hcfa) or final delta

  const StageRecord& final_stage() const { return stages.back(); }
  double wall_clock_seconds() const {
    double s = 0.0;
    for (const auto& st : stages) s += st.wall_clock_seconds;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct GradSet {
  std::vector<Tensor> tensors;  // aligned with DecoderParams::tensors
  Tensor bias;

  static GradSet zeros_like(const DecoderParams& p) {
    GradSet g;
    g.tensors.reserve(p.tensors.size());
    for (const auto& nt : p.tensors)
      g.tensors.push_back(Tensor::zeros(nt.tensor.shape()));
    g.bias = Tensor::zeros({p.bias.values.size()});
    return g;
  }
};

struct OptimState {
  std::vector<Tensor> m, v;  // aligned with DecoderParams::tensors
  Tensor bias_m, bias_v;
  std::size_t step = 0;

  static OptimState zeros_like(const DecoderParams& p) {
    OptimState s;
    for (const auto& nt : p.tensors) {
      s.m.push_back(Tensor::zeros(nt.tensor.shape()));
      s.v.push_back(Tensor::zeros(nt.tensor.shape()));
    }
    s.bias_m = Tensor::zeros({p.bias.values.size()});
    s.bias_v = Tensor::zeros({p.bias.values.size()});
    return s;
  }
};

struct GroupLearningRates {
  double base = 1e-4;
  double bias = 1e-2;
};

namespace detail {

inline void adam_update(Tensor& param, const Tensor& grad, Tensor& m,
                        Tensor& v, double lr, double b1, double b2, double eps,
                        double bc1, double bc2, const std::string& name) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    if (!std::isfinite(g)) {
      throw std::runtime_error("adam_step: non-finite gradient in '" + name +
                               "'");
    }
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    double mhat = m[i] / bc1;
    double vhat = v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

inline void adam_update_vec(std::vector<double>& param, const Tensor& grad,
                            Tensor& m, Tensor& v, double lr, double b1,
                            double b2, double eps, double bc1, double bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    if (!std::isfinite(g)) {
      throw std::runtime_error("adam_step: non-finite gradient in 'delta'");
    }
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    param[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
  }
}

}  // namespace detail

// Bias-corrected Adam with two parameter groups: everything at lr.base, the
// learnable attention bias at lr.bias. Decoupled weight decay is zero; the
// only delta regulariser is the explicit l2 loss term.
inline void adam_step(DecoderParams& params, const GradSet& grads,
                      OptimState& state, const TrainConfig& cfg,
                      const GroupLearningRates& lr) {
  ++state.step;
  double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    detail::adam_update(params.tensors[i].tensor, grads.tensors[i], state.m[i],
                        state.v[i], lr.base, cfg.adam_beta1, cfg.adam_beta2,
                        cfg.adam_eps, bc1, bc2, params.tensors[i].name);
  }
  if (params.bias.learnable) {
    detail::adam_update_vec(params.bias.values, grads.bias, state.bias_m,
                            state.bias_v, lr.bias, cfg.adam_beta1,
                            cfg.adam_beta2, cfg.adam_eps, bc1, bc2);
  }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0,
                        double lr_min) {
  if (step > total_steps) {
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) +
                                " beyond total " + std::to_string(total_steps));
  }
  constexpr double pi = 3.14159265358979323846;
  double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(pi * t));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Masks binarized at 0.5; per-class Dice/IoU averaged over samples.
inline Metrics evaluate(const DecoderParams& params,
                        const std::vector<Sample>& samples) {
  Metrics m;
  if (samples.empty()) return m;
  const std::size_t c_count = params.config.num_classes;
  m.dice.assign(c_count, 0.0);
  m.iou.assign(c_count, 0.0);
  for (const auto& s : samples) {
    DecoderOutput out = decoder_forward(params, s.features);
    Tensor hard = binarize(out.mask_probs);
    auto d = dice_metric(hard, s.labels);
    auto i = iou_metric(hard, s.labels);
    for (std::size_t c = 0; c < c_count; ++c) {
      m.dice[c] += d[c];
      m.iou[c] += i[c];
    }
  }
  for (auto& x : m.dice) x /= static_cast<double>(samples.size());
  for (auto& x : m.iou) x /= static_cast<double>(samples.size());
  return m;
}

// Observer for attention-gradient diagnostics; called once per epoch on the
// first sample of the first batch, per layer, with dL/dweights and weights.
struct TrainHooks {
  std::function<void(std::size_t epoch, std::size_t layer,
                     const Tensor& upstream, const Tensor& weights)>
      on_attention_grad;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

inline BiasVector build_bias(const TrainConfig& cfg,
                             const DatasetSplit& dataset,
                             const std::optional<BaselineDice>& hcfa_base) {
  const std::size_t c_count = dataset.specs.size();
  switch (cfg.strategy) {
    case BiasStrategy::None:
      return BiasVector::none(c_count);
    case BiasStrategy::CFFA:
      return cffa_bias(dataset.empirical(), cfg.gamma);
    case BiasStrategy::HCFA:
      if (!hcfa_base) {
        throw std::invalid_argument(
            "HCFA needs baseline per-class dice; run the two-stage protocol");
      }
      return hcfa_bias(*hcfa_base, cfg.gamma);
    case BiasStrategy::DFA:
      return cfg.cold_start
                 ? dfa_cold_start(c_count, cfg.gamma, cfg.beta)
                 : dfa_warm_start(dataset.empirical(), cfg.gamma, cfg.beta);
  }
  throw std::logic_error("unknown strategy");
}

}  // namespace detail

// One optimisation run. Deterministic given (dataset, configs): parameter
// init and shuffling both derive from cfg.seed. Returns the best-val-Dice
// parameters and the per-epoch record; wall clock covers the training loop
// only.
inline std::pair<DecoderParams, StageRecord> train_stage(
    const DatasetSplit& dataset, DecoderConfig dcfg, const TrainConfig& cfg,
    const BiasVector& bias, const std::string& stage_name,
    const TrainHooks* hooks = nullptr) {
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  dcfg.seed = cfg.seed;
  DecoderParams params = init_params(dcfg, bias);
  OptimState opt = OptimState::zeros_like(params);

  const std::size_t n_train = dataset.train.size();
  const std::size_t batches =
      (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;

  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  StageRecord record;
  record.name = stage_name;
  DecoderParams best_params = params;
  double best_val = -1.0;
  std::size_t step = 0;

  auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::size_t c_count = dcfg.num_classes;

    Metrics train_metrics;
    train_metrics.dice.assign(c_count, 0.0);
    train_metrics.iou.assign(c_count, 0.0);
    LossBreakdown epoch_loss;
    epoch_loss.per_class.assign(c_count, {});
    double lr_used = cfg.base_lr;
    bool first_sample_of_epoch = true;

    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, n_train);
      const double inv_batch = 1.0 / static_cast<double>(hi - lo);

      GradSet grads = GradSet::zeros_like(params);
      LossBreakdown batch_loss;
      batch_loss.per_class.assign(c_count, {});

      for (std::size_t s = lo; s < hi; ++s) {
        const Sample& sample = dataset.train[order[s]];
        Tape tape;
        DecoderVars vars = lift_params(tape, params, true);
        DecoderGraph g = decoder_forward_graph(tape, params, vars,
                                               sample.features);
        LossBreakdown bd;
        Variable loss = composite_loss_graph(tape, g.mask_logits, g.iou_pred,
                                             sample.labels, cfg.loss,
                                             vars.bias, params.bias.strategy,
                                             &bd);
        if (!std::isfinite(bd.total)) {
          throw std::runtime_error(
              "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
              std::to_string(b));
        }
        tape.backward(loss);

        if (hooks && hooks->on_attention_grad && first_sample_of_epoch) {
          for (std::size_t l = 0; l < g.attention.size(); ++l) {
            const Variable& alpha = g.attention[l].head_weights[0];
            hooks->on_attention_grad(epoch, l, alpha.grad(), alpha.value());
          }
        }
        first_sample_of_epoch = false;

        for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
          const Tensor& gt = vars.tensors[i].grad();
          for (std::size_t k = 0; k < gt.size(); ++k)
            grads.tensors[i][k] += inv_batch * gt[k];
        }
        if (params.bias.learnable) {
          const Tensor& gb = vars.bias.grad();
          for (std::size_t k = 0; k < gb.size(); ++k)
            grads.bias[k] += inv_batch * gb[k];
        }

        batch_loss.total += inv_batch * bd.total;
        batch_loss.dice_term += inv_batch * bd.dice_term;
        batch_loss.focal_term += inv_batch * bd.focal_term;
        batch_loss.iou_term += inv_batch * bd.iou_term;
        batch_loss.reg_term += inv_batch * bd.reg_term;
        for (std::size_t c = 0; c < c_count; ++c) {
          batch_loss.per_class[c].dice += inv_batch * bd.per_class[c].dice;
          batch_loss.per_class[c].focal += inv_batch * bd.per_class[c].focal;
          batch_loss.per_class[c].mse_iou +=
              inv_batch * bd.per_class[c].mse_iou;
        }

        // Running train metrics from the same forward pass.
        Tensor hard = binarize(g.mask_probs.value());
        auto d = dice_metric(hard, sample.labels);
        auto i = iou_metric(hard, sample.labels);
        for (std::size_t c = 0; c < c_count; ++c) {
          train_metrics.dice[c] += d[c] / static_cast<double>(n_train);
          train_metrics.iou[c] += i[c] / static_cast<double>(n_train);
        }
      }

      lr_used = cosine_lr(step, total_steps, cfg.base_lr, cfg.lr_min);
      GroupLearningRates lr{lr_used,
                            lr_used * (cfg.bias_lr / cfg.base_lr)};
      adam_step(params, grads, opt, cfg, lr);
      ++step;

      const double inv_b = 1.0 / static_cast<double>(batches);
      epoch_loss.total += inv_b * batch_loss.total;
      epoch_loss.dice_term += inv_b * batch_loss.dice_term;
      epoch_loss.focal_term += inv_b * batch_loss.focal_term;
      epoch_loss.iou_term += inv_b * batch_loss.iou_term;
      epoch_loss.reg_term += inv_b * batch_loss.reg_term;
      for (std::size_t c = 0; c < c_count; ++c) {
        epoch_loss.per_class[c].dice += inv_b * batch_loss.per_class[c].dice;
        epoch_loss.per_class[c].focal += inv_b * batch_loss.per_class[c].focal;
        epoch_loss.per_class[c].mse_iou +=
            inv_b * batch_loss.per_class[c].mse_iou;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr_used;
    row.train = train_metrics;
    row.val = evaluate(params, dataset.val);
    row.loss = epoch_loss;
    if (params.bias.learnable) row.delta = params.bias.values;
    double mv = row.val.mean_dice();
    if (mv > best_val) {
      best_val = mv;
      best_params = params;
    }
    record.rows.push_back(std::move(row));
  }
  auto t1 = std::chrono::steady_clock::now();
  record.wall_clock_seconds =
      std::chrono::duration<double>(t1 - t0).count();
  record.best_val = evaluate(best_params, dataset.val);
  record.final_test = evaluate(best_params, dataset.test);
  return {std::move(best_params), std::move(record)};
}

inline std::pair<DecoderParams, RunRecord> train_run(
    const DatasetSplit& dataset, const DecoderConfig& dcfg,
    const TrainConfig& cfg,
    const std::optional<BaselineDice>& hcfa_base = std::nullopt,
    const TrainHooks* hooks = nullptr) {
  BiasVector bias = detail::build_bias(cfg, dataset, hcfa_base);
  auto [params, stage] = train_stage(dataset, dcfg, cfg, bias, "single", hooks);
  RunRecord record;
  record.config = cfg;
  record.stages.push_back(std::move(stage));
  record.bias_values = params.bias.values;
  return {std::move(params), std::move(record)};
}

// Stage 1 trains the focal baseline (strategy None); its best-checkpoint
// per-class val Dice feeds the HCFA bias; stage 2 retrains from fresh
// initialisation with that fixed bias. Wall clock is the sum of stages.
inline std::pair<DecoderParams, RunRecord> hcfa_two_stage(
    const DatasetSplit& dataset, const DecoderConfig& dcfg,
    const TrainConfig& cfg) {
  TrainConfig stage1_cfg = cfg;
  stage1_cfg.strategy = BiasStrategy::None;
  BiasVector none = BiasVector::none(dataset.specs.size());
  auto [params1, stage1] =
      train_stage(dataset, dcfg, stage1_cfg, none, "stage1");

  double dice_sum = std::accumulate(stage1.best_val.dice.begin(),
                                    stage1.best_val.dice.end(), 0.0);
  if (dice_sum <= 0.0) {
    throw std::runtime_error(
        "hcfa_two_stage: stage-1 validation dice is all zero");
  }
  BaselineDice base(stage1.best_val.dice);
  BiasVector bias = hcfa_bias(base, cfg.gamma);

  TrainConfig stage2_cfg = cfg;
  stage2_cfg.strategy = BiasStrategy::HCFA;
  auto [params2, stage2] =
      train_stage(dataset, dcfg, stage2_cfg, bias, "stage2");

  RunRecord record;
  record.config = cfg;
  record.stages.push_back(std::move(stage1));
  record.stages.push_back(std::move(stage2));
  record.bias_values = params2.bias.values;
  return {std::move(params2), std::move(record)};
}

// ---------------------------------------------------------------------------
// RunRecord persistence: CSV of per-epoch rows plus a JSON summary.
// ---------------------------------------------------------------------------

inline nlohmann::json metrics_to_json(const Metrics& m) {
  return {{"dice", m.dice},
          {"iou", m.iou},
          {"mean_dice", m.mean_dice()},
          {"mean_iou", m.mean_iou()}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.dice = j.at("dice").get<std::vector<double>>();
  m.iou = j.at("iou").get<std::vector<double>>();
  return m;
}

inline nlohmann::json run_summary_json(const RunRecord& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : r.stages) {
    stages.push_back({{"name", st.name},
                      {"epochs", st.rows.size()},
                      {"wall_clock_seconds", st.wall_clock_seconds},
                      {"best_val", metrics_to_json(st.best_val)},
                      {"final_test", metrics_to_json(st.final_test)}});
  }
  return {{"config", r.config.to_json()},
          {"final_metrics",
           {{"val", metrics_to_json(r.final_stage().best_val)},
            {"test", metrics_to_json(r.final_stage().final_test)}}},
          {"delta_final", r.bias_values},
          {"wall_clock_seconds", r.wall_clock_seconds()},
          {"stages", stages}};
}

inline void write_run_csv(const std::string& path, const StageRecord& st) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::size_t c_count =
      st.rows.empty() ? 0 : st.rows.front().val.dice.size();
  out << "epoch,lr";
  for (std::size_t c = 0; c < c_count; ++c) out << ",train_dice_" << c;
  for (std::size_t c = 0; c < c_count; ++c) out << ",val_dice_" << c;
  for (std::size_t c = 0; c < c_count; ++c) out << ",train_iou_" << c;
  for (std::size_t c = 0; c < c_count; ++c) out << ",val_iou_" << c;
  out << ",loss_total,loss_dice,loss_focal,loss_iou,loss_reg";
  for (std::size_t c = 0; c < c_count; ++c) out << ",delta_" << c;
  out << '\n';
  out.precision(10);
  for (const auto& row : st.rows) {
    out << row.epoch << ',' << row.lr;
    for (double x : row.train.dice) out << ',' << x;
    for (double x : row.val.dice) out << ',' << x;
    for (double x : row.train.iou) out << ',' << x;
    for (double x : row.val.iou) out << ',' << x;
    out << ',' << row.loss.total << ',' << row.loss.dice_term << ','
        << row.loss.focal_term << ',' << row.loss.iou_term << ','
        << row.loss.reg_term;
    if (row.delta.empty()) {
      for (std::size_t c = 0; c < c_count; ++c) out << ",";
    } else {
      for (double x : row.delta) out << ',' << x;
    }
    out << '\n';
  }
}

}  // namespace fab
