#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace fab {

// Normalised training-set class frequencies, each strictly inside (0,1),
// summing to 1 within 1e-6.
struct ClassFrequencies {
  std::vector<double> f;

  explicit ClassFrequencies(std::vector<double> freqs) : f(std::move(freqs)) {
    double s = 0.0;
    for (double x : f) {
      if (!(x > 0.0 && x < 1.0)) {
        throw std::domain_error("class frequency " + std::to_string(x) +
                                " outside (0,1)");
      }
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::domain_error("class frequencies sum to " + std::to_string(s) +
                              ", expected 1");
    }
  }

  std::size_t num_classes() const { return f.size(); }
};

// Per-class validation Dice of a pre-trained baseline; at least one entry
// must be strictly positive.
struct BaselineDice {
  std::vector<double> dice;

  explicit BaselineDice(std::vector<double> d) : dice(std::move(d)) {
    double s = 0.0;
    for (double x : dice) {
      if (x < 0.0 || x > 1.0) {
        throw std::domain_error("baseline dice " + std::to_string(x) +
                                " outside [0,1]");
      }
      s += x;
    }
    if (s <= 0.0) {
      throw std::domain_error("baseline dice all zero");
    }
  }
};

enum class BiasStrategy { None, CFFA, HCFA, DFA };

inline const char* to_string(BiasStrategy s) {
  switch (s) {
    case BiasStrategy::None: return "none";
    case BiasStrategy::CFFA: return "cffa";
    case BiasStrategy::HCFA: return "hcfa";
    case BiasStrategy::DFA: return "dfa";
  }
  return "?";
}

inline BiasStrategy bias_strategy_from_string(const std::string& s) {
  if (s == "none") return BiasStrategy::None;
  if (s == "cffa") return BiasStrategy::CFFA;
  if (s == "hcfa") return BiasStrategy::HCFA;
  if (s == "dfa") return BiasStrategy::DFA;
  throw std::invalid_argument("unknown bias strategy '" + s + "'");
}

// Per-class attention bias b with its strategy. Learnable iff DFA; the
// trainer is the single writer of `values` in that case.
struct BiasVector {
  BiasStrategy strategy = BiasStrategy::None;
  std::vector<double> values;
  bool learnable = false;
  double gamma = 2.0;
  double beta = 0.8;

  static BiasVector none(std::size_t num_classes) {
    BiasVector b;
    b.strategy = BiasStrategy::None;
    b.values.assign(num_classes, 0.0);
    return b;
  }

  nlohmann::json to_json() const {
    return {{"strategy", to_string(strategy)},
            {"gamma", gamma},
            {"beta", beta},
            {"values", values}};
  }

  static BiasVector from_json(const nlohmann::json& j) {
    BiasVector b;
    b.strategy = bias_strategy_from_string(j.at("strategy").get<std::string>());
    b.gamma = j.at("gamma").get<double>();
    b.beta = j.at("beta").get<double>();
    b.values = j.at("values").get<std::vector<double>>();
    b.learnable = b.strategy == BiasStrategy::DFA;
    return b;
  }
};

// Static frequency-derived bias: b_c = gamma * log(1 - f_c).
inline BiasVector cffa_bias(const ClassFrequencies& freqs, double gamma) {
  if (gamma <= 0.0) throw std::domain_error("cffa_bias: gamma must be > 0");
  BiasVector b;
  b.strategy = BiasStrategy::CFFA;
  b.gamma = gamma;
  b.values.reserve(freqs.f.size());
  for (double f : freqs.f) b.values.push_back(gamma * std::log(1.0 - f));
  return b;
}

// Static hardness-derived bias: p_c = dice_c / sum(dice), b_c = gamma *
// log(1 - p_c). Requires at least two classes so no p_c reaches 1.
inline BiasVector hcfa_bias(const BaselineDice& base, double gamma) {
  if (gamma <= 0.0) throw std::domain_error("hcfa_bias: gamma must be > 0");
  double total = std::accumulate(base.dice.begin(), base.dice.end(), 0.0);
  BiasVector b;
  b.strategy = BiasStrategy::HCFA;
  b.gamma = gamma;
  b.values.reserve(base.dice.size());
  for (double d : base.dice) {
    double p = d / total;
    if (p >= 1.0) {
      throw std::domain_error("hcfa_bias: difficulty proxy reached 1 "
                              "(single-class input)");
    }
    b.values.push_back(gamma * std::log(1.0 - p));
  }
  return b;
}

// Learnable bias initialised from the centred log-frequency prior:
// log pi_c = gamma * log(1 - f_c), delta_c = beta * (log pi_c - mean).
// Mean(delta) is zero up to rounding.
inline BiasVector dfa_warm_start(const ClassFrequencies& freqs, double gamma,
                                 double beta) {
  if (gamma <= 0.0 || beta <= 0.0) {
    throw std::domain_error("dfa_warm_start: gamma and beta must be > 0");
  }
  std::vector<double> log_pi;
  log_pi.reserve(freqs.f.size());
  double m = 0.0;
  for (double f : freqs.f) {
    double lp = gamma * std::log(1.0 - f);
    log_pi.push_back(lp);
    m += lp;
  }
  m /= static_cast<double>(log_pi.size());
  BiasVector b;
  b.strategy = BiasStrategy::DFA;
  b.learnable = true;
  b.gamma = gamma;
  b.beta = beta;
  b.values.reserve(log_pi.size());
  for (double lp : log_pi) b.values.push_back(beta * (lp - m));
  return b;
}

// Cold-start DFA: delta = 0, still learnable. Reproduces the warm/cold
// ablation's baseline arm.
inline BiasVector dfa_cold_start(std::size_t num_classes, double gamma,
                                 double beta) {
  BiasVector b;
  b.strategy = BiasStrategy::DFA;
  b.learnable = true;
  b.gamma = gamma;
  b.beta = beta;
  b.values.assign(num_classes, 0.0);
  return b;
}

}  // namespace fab
