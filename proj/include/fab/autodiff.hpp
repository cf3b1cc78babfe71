#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fab/tensor.hpp"

namespace fab {

class Tape;

// Handle into a Tape node. Cheap to copy; valid until the tape is cleared.
struct Variable {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  double scalar() const;
};

// Define-by-run tape: records primitive ops in execution order, backward
// walks them once in reverse. One tape per forward pass, single-threaded.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, std::size_t)>;

  Variable leaf(Tensor value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  Tensor& grad_mut(std::size_t id) { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  void reset_grads() {
    for (auto& n : nodes_) {
      std::fill(n.grad.vec().begin(), n.grad.vec().end(), 0.0);
      n.touched = false;
    }
  }

  // Reverse sweep from a scalar loss. Every requires_grad leaf reachable
  // from the loss receives its exact gradient; unreachable nodes keep
  // zero grad.
  void backward(Variable loss) {
    if (loss.tape != this) {
      throw std::invalid_argument("backward: variable from another tape");
    }
    const Tensor& lv = nodes_[loss.id].value;
    if (lv.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(lv.shape()));
    }
    nodes_[loss.id].grad[0] = 1.0;
    nodes_[loss.id].touched = true;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.touched && n.backward) n.backward(*this, i);
    }
  }

  // --- recording helpers used by the op constructors below ---

  Variable push(Tensor value, bool needs_grad, std::vector<std::size_t> parents,
                BackFn fn) {
    Node n;
    n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.parents = std::move(parents);
    n.backward = needs_grad ? std::move(fn) : nullptr;
    nodes_.push_back(std::move(n));
    return Variable{this, nodes_.size() - 1};
  }

  void accumulate(std::size_t id, std::size_t k, double g) {
    Node& n = nodes_[id];
    n.grad[k] += g;
    n.touched = true;
  }

  void touch(std::size_t id) { nodes_[id].touched = true; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool touched = false;
    std::vector<std::size_t> parents;
    BackFn backward;
  };

  std::vector<Node> nodes_;
};

inline const Tensor& Variable::value() const { return tape->value(id); }
inline const Tensor& Variable::grad() const { return tape->grad(id); }
inline bool Variable::requires_grad() const { return tape->needs_grad(id); }
inline double Variable::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) {
    throw std::invalid_argument("scalar() on tensor " + shape_str(v.shape()));
  }
  return v[0];
}

namespace detail {

inline void require_same_tape(const Variable& a, const Variable& b,
                              const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) +
                                ": operands on different tapes");
  }
}

inline void require_same_shape(const Variable& a, const Variable& b,
                               const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.value().shape()) + " vs " +
                                shape_str(b.value().shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

inline Variable add(Variable a, Variable b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  bool ng = a.requires_grad() || b.requires_grad();
  return t.push(std::move(out), ng, {a.id, b.id},
                [a = a.id, b = b.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    t.accumulate(a, i, g[i]);
                    t.accumulate(b, i, g[i]);
                  }
                });
}

inline Variable sub(Variable a, Variable b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  bool ng = a.requires_grad() || b.requires_grad();
  return t.push(std::move(out), ng, {a.id, b.id},
                [a = a.id, b = b.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    t.accumulate(a, i, g[i]);
                    t.accumulate(b, i, -g[i]);
                  }
                });
}

inline Variable mul(Variable a, Variable b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  bool ng = a.requires_grad() || b.requires_grad();
  return t.push(std::move(out), ng, {a.id, b.id},
                [a = a.id, b = b.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& av = t.value(a);
                  const Tensor& bv = t.value(b);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    t.accumulate(a, i, g[i] * bv[i]);
                    t.accumulate(b, i, g[i] * av[i]);
                  }
                });
}

inline Variable div(Variable a, Variable b, bool checked = true) {
  detail::require_same_tape(a, b, "div");
  detail::require_same_shape(a, b, "div");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (checked && bv[i] == 0.0) {
      throw std::domain_error("div: zero denominator at index " +
                              std::to_string(i));
    }
    out[i] = av[i] / bv[i];
  }
  bool ng = a.requires_grad() || b.requires_grad();
  return t.push(std::move(out), ng, {a.id, b.id},
                [a = a.id, b = b.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& av = t.value(a);
                  const Tensor& bv = t.value(b);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    t.accumulate(a, i, g[i] / bv[i]);
                    t.accumulate(b, i, -g[i] * av[i] / (bv[i] * bv[i]));
                  }
                });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

inline Variable neg(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = -xv[i];
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, -g[i]);
                });
}

inline Variable vexp(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& y = t.value(self);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] * y[i]);
                });
}

inline Variable vlog(Variable x, bool checked = true) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (checked && xv[i] <= 0.0) {
      throw std::domain_error("log: non-positive operand " +
                              std::to_string(xv[i]));
    }
    out[i] = std::log(xv[i]);
  }
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& xv = t.value(x);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] / xv[i]);
                });
}

// x^p for a fixed real exponent. Negative bases are rejected unless the
// exponent is integral.
inline Variable vpow(Variable x, double p, bool checked = true) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  bool integral = p == std::floor(p);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (checked && xv[i] < 0.0 && !integral) {
      throw std::domain_error("pow: negative base with non-integer exponent");
    }
    out[i] = std::pow(xv[i], p);
  }
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id, p](Tape& t, std::size_t self) {
                  if (p == 0.0) {  // constant 1; avoid 0 * pow(0,-1)
                    t.touch(x);
                    return;
                  }
                  const Tensor& g = t.grad(self);
                  const Tensor& xv = t.value(x);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] * p * std::pow(xv[i], p - 1.0));
                });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Variable sigmoid(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = stable_sigmoid(xv[i]);
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& y = t.value(self);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] * y[i] * (1.0 - y[i]));
                });
}

// log(1 + e^x), computed as max(x,0) + log1p(e^-|x|); gradient sigmoid(x).
inline Variable softplus(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = std::max(xv[i], 0.0) + std::log1p(std::exp(-std::abs(xv[i])));
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& xv = t.value(x);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] * stable_sigmoid(xv[i]));
                });
}

inline Variable vtanh(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& y = t.value(self);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] * (1.0 - y[i] * y[i]));
                });
}

// Pass-through gradient strictly inside [lo, hi], zero where clamped.
inline Variable clamp(Variable x, double lo, double hi) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = std::min(hi, std::max(lo, xv[i]));
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id, lo, hi](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& xv = t.value(x);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (xv[i] > lo && xv[i] < hi) t.accumulate(x, i, g[i]);
                    else t.touch(x);
                  }
                });
}

inline Variable add_scalar(Variable x, double c) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + c;
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i]);
                });
}

inline Variable mul_scalar(Variable x, double c) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id, c](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    t.accumulate(x, i, g[i] * c);
                });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Variable sum(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return t.push(Tensor::scalar(s), x.requires_grad(), {x.id},
                [x = x.id](Tape& t, std::size_t self) {
                  double g = t.grad(self)[0];
                  const Tensor& xv = t.value(x);
                  for (std::size_t i = 0; i < xv.size(); ++i)
                    t.accumulate(x, i, g);
                });
}

inline Variable mean(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  double n = static_cast<double>(xv.size());
  return t.push(Tensor::scalar(s / n), x.requires_grad(), {x.id},
                [x = x.id, n](Tape& t, std::size_t self) {
                  double g = t.grad(self)[0] / n;
                  const Tensor& xv = t.value(x);
                  for (std::size_t i = 0; i < xv.size(); ++i)
                    t.accumulate(x, i, g);
                });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Variable matmul(Variable a, Variable b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(av.shape()) + " vs " +
                                shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), p = bv.cols();
  Tensor out({m, p});
  const double* A = av.data();
  const double* B = bv.data();
  double* C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double aik = A[i * k + kk];
      if (aik == 0.0) continue;
      const double* Brow = B + kk * p;
      double* Crow = C + i * p;
      for (std::size_t j = 0; j < p; ++j) Crow[j] += aik * Brow[j];
    }
  }
  bool ng = a.requires_grad() || b.requires_grad();
  return a.tape->push(
      std::move(out), ng, {a.id, b.id},
      [a = a.id, b = b.id, m, k, p](Tape& t, std::size_t self) {
        const double* G = t.grad(self).data();
        const double* A = t.value(a).data();
        const double* B = t.value(b).data();
        Tensor& ga = t.grad_mut(a);
        Tensor& gb = t.grad_mut(b);
        // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            double s = 0.0;
            const double* Grow = G + i * p;
            const double* Brow = B + kk * p;
            for (std::size_t j = 0; j < p; ++j) s += Grow[j] * Brow[j];
            ga[i * k + kk] += s;
          }
        }
        // dB = A^T * G
        for (std::size_t i = 0; i < m; ++i) {
          const double* Grow = G + i * p;
          for (std::size_t kk = 0; kk < k; ++kk) {
            double aik = A[i * k + kk];
            if (aik == 0.0) continue;
            double* gbrow = gb.data() + kk * p;
            for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * Grow[j];
          }
        }
        t.touch(a);
        t.touch(b);
      });
}

inline Variable transpose(Variable x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() != 2) {
    throw std::invalid_argument("transpose: rank-2 required, got " +
                                shape_str(xv.shape()));
  }
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id, r, c](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  Tensor& gx = t.grad_mut(x);
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                      gx.at(i, j) += g.at(j, i);
                  t.touch(x);
                });
}

// Adds v[r] to every entry of row r (axis 0) or v[c] to every entry of
// column c (axis 1). The only broadcast the decoder math needs.
inline Variable broadcast_add(Variable m, Variable v, int axis) {
  detail::require_same_tape(m, v, "broadcast_add");
  const Tensor& mv = m.value();
  const Tensor& vv = v.value();
  if (mv.rank() != 2 || vv.rank() != 1) {
    throw std::invalid_argument("broadcast_add: need matrix and vector, got " +
                                shape_str(mv.shape()) + " and " +
                                shape_str(vv.shape()));
  }
  if (axis != 0 && axis != 1) {
    throw std::invalid_argument("broadcast_add: axis must be 0 or 1");
  }
  const std::size_t r = mv.rows(), c = mv.cols();
  const std::size_t expect = axis == 0 ? r : c;
  if (vv.size() != expect) {
    throw std::invalid_argument(
        "broadcast_add: vector length " + std::to_string(vv.size()) +
        " incompatible with matrix " + shape_str(mv.shape()) + " on axis " +
        std::to_string(axis));
  }
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.at(i, j) = mv.at(i, j) + (axis == 0 ? vv[i] : vv[j]);
  bool ng = m.requires_grad() || v.requires_grad();
  return m.tape->push(
      std::move(out), ng, {m.id, v.id},
      [m = m.id, v = v.id, r, c, axis](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gm = t.grad_mut(m);
        Tensor& gv = t.grad_mut(v);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            double gij = g.at(i, j);
            gm.at(i, j) += gij;
            gv[axis == 0 ? i : j] += gij;
          }
        }
        t.touch(m);
        t.touch(v);
      });
}

// Row r of a matrix as a vector; backward scatters into that row.
inline Variable select_row(Variable m, std::size_t r) {
  Tape& t = *m.tape;
  const Tensor& mv = m.value();
  if (mv.rank() != 2 || r >= mv.rows()) {
    throw std::invalid_argument("select_row: row " + std::to_string(r) +
                                " out of range for " + shape_str(mv.shape()));
  }
  const std::size_t c = mv.cols();
  Tensor out({c});
  for (std::size_t j = 0; j < c; ++j) out[j] = mv.at(r, j);
  return t.push(std::move(out), m.requires_grad(), {m.id},
                [m = m.id, r, c](Tape& t, std::size_t self) {
                  const Tensor& g = t.grad(self);
                  Tensor& gm = t.grad_mut(m);
                  for (std::size_t j = 0; j < c; ++j) gm.at(r, j) += g[j];
                  t.touch(m);
                });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Softmax normalised over `axis`: outputs along that axis are positive and
// sum to 1. Stabilised by per-slice max subtraction. Backward uses the full
// softmax Jacobian: dX = y * (g - <g, y>) per slice.
inline Variable softmax_axis(Variable x, int axis) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (axis < 0 || static_cast<std::size_t>(axis) >= xv.rank()) {
    throw std::invalid_argument("softmax_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(xv.shape()));
  }
  if (xv.rank() > 2) {
    throw std::invalid_argument("softmax_axis: rank-1 or rank-2 only");
  }

  // Slice layout: `n` entries per slice with stride `stride`, `slices` total.
  std::size_t n, stride, slices, slice_step;
  if (xv.rank() == 1) {
    n = xv.size(); stride = 1; slices = 1; slice_step = 0;
  } else if (axis == 0) {
    n = xv.rows(); stride = xv.cols(); slices = xv.cols(); slice_step = 1;
  } else {
    n = xv.cols(); stride = 1; slices = xv.rows(); slice_step = xv.cols();
  }

  Tensor out(xv.shape());
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t base = s * slice_step;
    double mx = xv[base];
    for (std::size_t i = 1; i < n; ++i)
      mx = std::max(mx, xv[base + i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double e = std::exp(xv[base + i * stride] - mx);
      out[base + i * stride] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < n; ++i) out[base + i * stride] /= denom;
  }
  return t.push(std::move(out), x.requires_grad(), {x.id},
                [x = x.id, n, stride, slices, slice_step](Tape& t,
                                                          std::size_t self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& y = t.value(self);
                  Tensor& gx = t.grad_mut(x);
                  for (std::size_t s = 0; s < slices; ++s) {
                    const std::size_t base = s * slice_step;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                      std::size_t k = base + i * stride;
                      dot += g[k] * y[k];
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                      std::size_t k = base + i * stride;
                      gx[k] += y[k] * (g[k] - dot);
                    }
                  }
                  t.touch(x);
                });
}

// Operator sugar for readable forward code.
inline Variable operator+(Variable a, Variable b) { return add(a, b); }
inline Variable operator-(Variable a, Variable b) { return sub(a, b); }
inline Variable operator*(Variable a, Variable b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

// f builds a scalar loss on the given tape from leaves lifted from `params`.
using ScalarFn =
    std::function<Variable(Tape&, const std::vector<Variable>&)>;

namespace detail {

inline double eval_plain(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Variable> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p, false));
  Variable out = f(tape, vars);
  double v = out.scalar();
  if (!std::isfinite(v)) {
    throw std::runtime_error("finite_diff_check: non-finite evaluation");
  }
  return v;
}

}  // namespace detail

// Max over all coordinates of |analytic - central| / (|analytic| + |central|
// + 1e-12), central differences (f(p+h) - f(p-h)) / 2h.
inline double finite_diff_check(const ScalarFn& f, std::vector<Tensor> params,
                                double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be > 0");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Variable> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(p, true));
    Variable loss = f(tape, vars);
    if (!std::isfinite(loss.scalar())) {
      throw std::runtime_error("finite_diff_check: non-finite evaluation");
    }
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      const double saved = params[p][k];
      params[p][k] = saved + h;
      double fp = detail::eval_plain(f, params);
      params[p][k] = saved - h;
      double fm = detail::eval_plain(f, params);
      params[p][k] = saved;
      double central = (fp - fm) / (2.0 * h);
      double a = analytic[p][k];
      double rel = std::abs(a - central) /
                   (std::abs(a) + std::abs(central) + 1e-12);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace fab
