#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fab/attention.hpp"
#include "fab/autodiff.hpp"
#include "fab/bias.hpp"
#include "fab/tensor.hpp"

namespace fab {

struct DecoderConfig {
  std::size_t num_classes = 4;
  std::size_t feature_dim = 32;  // d
  std::size_t input_dim = 8;     // D_in
  std::size_t num_layers = 2;    // cross-attention blocks
  std::size_t num_heads = 2;
  std::size_t iou_hidden = 16;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return feature_dim / num_heads; }
  std::size_t ffn_hidden() const { return 2 * feature_dim; }

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("config: need >= 2 classes");
    if (num_layers < 1) throw std::invalid_argument("config: need >= 1 layer");
    if (num_heads < 1 || feature_dim % num_heads != 0) {
      throw std::invalid_argument("config: feature_dim " +
                                  std::to_string(feature_dim) +
                                  " not divisible by num_heads " +
                                  std::to_string(num_heads));
    }
  }

  nlohmann::json to_json() const {
    return {{"num_classes", num_classes}, {"feature_dim", feature_dim},
            {"input_dim", input_dim},     {"num_layers", num_layers},
            {"num_heads", num_heads},     {"iou_hidden", iou_hidden},
            {"seed", seed}};
  }

  static DecoderConfig from_json(const nlohmann::json& j) {
    DecoderConfig c;
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.iou_hidden = j.at("iou_hidden").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered parameter layout shared by init, checkpoint IO and the optimizer.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>>
param_layout(const DecoderConfig& cfg) {
  const std::size_t c = cfg.num_classes, d = cfg.feature_dim;
  const std::size_t dh = cfg.head_dim(), fh = cfg.ffn_hidden();
  std::vector<std::pair<std::string, std::vector<std::size_t>>> layout;
  layout.push_back({"prompts", {c, d}});
  layout.push_back({"in.w", {cfg.input_dim, d}});
  layout.push_back({"in.b", {d}});
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      std::string s = std::to_string(h);
      layout.push_back({p + "q" + s, {d, dh}});
      layout.push_back({p + "k" + s, {d, dh}});
      layout.push_back({p + "v" + s, {d, dh}});
      layout.push_back({p + "o" + s, {dh, d}});
    }
    layout.push_back({p + "ffn.w1", {d, fh}});
    layout.push_back({p + "ffn.b1", {fh}});
    layout.push_back({p + "ffn.w2", {fh, d}});
    layout.push_back({p + "ffn.b2", {d}});
  }
  layout.push_back({"mask.w", {d, d}});
  layout.push_back({"iou.w1", {d, cfg.iou_hidden}});
  layout.push_back({"iou.b1", {cfg.iou_hidden}});
  layout.push_back({"iou.w2", {cfg.iou_hidden, 1}});
  layout.push_back({"iou.b2", {1}});
  return layout;
}

// Prompt tokens, projections, head weights and the attention bias. Owned by
// one training run; clone freely for read-only evaluation.
struct DecoderParams {
  DecoderConfig config;
  std::vector<NamedTensor> tensors;
  BiasVector bias;

  const Tensor& find(const std::string& name) const {
    for (const auto& nt : tensors)
      if (nt.name == name) return nt.tensor;
    throw std::invalid_argument("no parameter named '" + name + "'");
  }
  Tensor& find(const std::string& name) {
    for (auto& nt : tensors)
      if (nt.name == name) return nt.tensor;
    throw std::invalid_argument("no parameter named '" + name + "'");
  }
};

// Deterministic given config.seed. Weight matrices are normal with variance
// 1/fan_in; rank-1 tensors start at zero; prompts use the same scheme with
// fan_in = d.
inline DecoderParams init_params(const DecoderConfig& cfg,
                                 BiasVector bias = {}) {
  cfg.validate();
  if (bias.values.empty()) bias = BiasVector::none(cfg.num_classes);
  if (bias.values.size() != cfg.num_classes) {
    throw std::invalid_argument("init_params: bias length " +
                                std::to_string(bias.values.size()) +
                                " != num_classes " +
                                std::to_string(cfg.num_classes));
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DecoderParams p;
  p.config = cfg;
  p.bias = std::move(bias);
  for (const auto& [name, shape] : param_layout(cfg)) {
    Tensor t(shape);
    if (shape.size() == 2) {
      double fan_in = name == "prompts" ? static_cast<double>(cfg.feature_dim)
                                        : static_cast<double>(shape[0]);
      double std_dev = 1.0 / std::sqrt(fan_in);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = std_dev * normal(rng);
    }
    p.tensors.push_back({name, std::move(t)});
  }
  return p;
}

struct ParameterCount {
  std::size_t total = 0;
  std::size_t bias_params = 0;
};

inline ParameterCount count_parameters(const DecoderParams& p) {
  ParameterCount c;
  for (const auto& nt : p.tensors) c.total += nt.tensor.size();
  if (p.bias.strategy == BiasStrategy::DFA) {
    c.bias_params = p.bias.values.size();
    c.total += c.bias_params;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// Parameter leaves lifted onto a tape, aligned with DecoderParams::tensors.
struct DecoderVars {
  std::vector<Variable> tensors;
  Variable bias;  // requires grad iff the bias is learnable and train == true
};

inline DecoderVars lift_params(Tape& tape, const DecoderParams& p,
                               bool train) {
  DecoderVars v;
  v.tensors.reserve(p.tensors.size());
  for (const auto& nt : p.tensors)
    v.tensors.push_back(tape.leaf(nt.tensor, train));
  v.bias = tape.leaf(Tensor::vector(p.bias.values),
                     train && p.bias.learnable);
  return v;
}

struct LayerAttention {
  std::vector<Variable> head_weights;  // per head, C x N
  Variable mean_weights;               // average over heads, C x N
  Variable attended;                   // C x d, post output projection
};

// Tape-level forward: graph stays live for backward and diagnostics.
struct DecoderGraph {
  Variable mask_logits;  // C x N
  Variable mask_probs;   // C x N
  Variable iou_pred;     // C x 1
  std::vector<LayerAttention> attention;
};

namespace detail {

struct VarLookup {
  const DecoderParams& params;
  const DecoderVars& vars;
  Variable operator()(const std::string& name) const {
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
      if (params.tensors[i].name == name) return vars.tensors[i];
    throw std::invalid_argument("no parameter named '" + name + "'");
  }
};

}  // namespace detail

inline DecoderGraph decoder_forward_graph(Tape& tape, const DecoderParams& p,
                                          const DecoderVars& vars,
                                          const Tensor& features_raw) {
  const DecoderConfig& cfg = p.config;
  if (features_raw.rank() != 2 || features_raw.cols() != cfg.input_dim) {
    throw std::invalid_argument("decoder_forward: features " +
                                shape_str(features_raw.shape()) +
                                " incompatible with input_dim " +
                                std::to_string(cfg.input_dim));
  }
  detail::VarLookup w{p, vars};
  Variable x = tape.leaf(features_raw, false);

  // H = project(features_raw)
  Variable h = broadcast_add(matmul(x, w("in.w")), w("in.b"), 1);  // N x d

  DecoderGraph g;
  Variable prompts = w("prompts");
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    LayerAttention rec;
    Variable attn_out;
    Variable weight_sum;
    for (std::size_t hidx = 0; hidx < cfg.num_heads; ++hidx) {
      std::string s = std::to_string(hidx);
      auto [alpha, agg] = biased_cross_attention_graph(
          tape, prompts, h, vars.bias, w(pre + "q" + s), w(pre + "k" + s),
          w(pre + "v" + s));
      Variable head_out = matmul(agg, w(pre + "o" + s));
      attn_out = hidx == 0 ? head_out : add(attn_out, head_out);
      weight_sum = hidx == 0 ? alpha : add(weight_sum, alpha);
      rec.head_weights.push_back(alpha);
    }
    rec.mean_weights =
        mul_scalar(weight_sum, 1.0 / static_cast<double>(cfg.num_heads));
    rec.attended = attn_out;
    g.attention.push_back(rec);

    prompts = add(prompts, attn_out);  // residual
    Variable f1 = vtanh(
        broadcast_add(matmul(prompts, w(pre + "ffn.w1")), w(pre + "ffn.b1"), 1));
    Variable f2 =
        broadcast_add(matmul(f1, w(pre + "ffn.w2")), w(pre + "ffn.b2"), 1);
    prompts = add(prompts, f2);  // residual
  }

  // Mask head: dot products of updated prompts with projected pixels.
  Variable hm = matmul(h, w("mask.w"));  // N x d
  double scale = 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim));
  g.mask_logits = mul_scalar(matmul(prompts, transpose(hm)), scale);  // C x N
  g.mask_probs = sigmoid(g.mask_logits);

  // IoU head: two-layer perceptron on the updated prompt.
  Variable t1 = vtanh(
      broadcast_add(matmul(prompts, w("iou.w1")), w("iou.b1"), 1));
  Variable iou_logit = broadcast_add(matmul(t1, w("iou.w2")), w("iou.b2"), 1);
  g.iou_pred = sigmoid(iou_logit);  // C x 1
  return g;
}

// Value-level forward per the module contract.
struct DecoderOutput {
  Tensor mask_probs;                      // C x N in (0,1)
  std::vector<double> iou_pred;           // C, in (0,1)
  std::vector<AttentionOutput> attention; // per layer, head-averaged weights
};

inline DecoderOutput decoder_forward(const DecoderParams& p,
                                     const Tensor& features_raw) {
  Tape tape;
  DecoderVars vars = lift_params(tape, p, false);
  DecoderGraph g = decoder_forward_graph(tape, p, vars, features_raw);
  DecoderOutput out;
  out.mask_probs = g.mask_probs.value();
  out.iou_pred = g.iou_pred.value().vec();
  for (const auto& layer : g.attention)
    out.attention.push_back({layer.mean_weights.value(),
                             layer.attended.value()});
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json checkpoint_to_json(const DecoderParams& p,
                                         std::size_t epoch,
                                         std::uint64_t rng_state_seed) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& nt : p.tensors) params[nt.name] = nt.tensor.vec();
  return {{"config", p.config.to_json()},
          {"params", params},
          {"bias", p.bias.to_json()},
          {"epoch", epoch},
          {"rng_state_seed", rng_state_seed}};
}

inline DecoderParams checkpoint_from_json(const nlohmann::json& j) {
  DecoderConfig cfg = DecoderConfig::from_json(j.at("config"));
  cfg.validate();
  DecoderParams p;
  p.config = cfg;
  p.bias = BiasVector::from_json(j.at("bias"));
  const auto& params = j.at("params");
  for (const auto& [name, shape] : param_layout(cfg)) {
    auto data = params.at(name).get<std::vector<double>>();
    p.tensors.push_back({name, Tensor(shape, std::move(data))});
  }
  return p;
}

}  // namespace fab
