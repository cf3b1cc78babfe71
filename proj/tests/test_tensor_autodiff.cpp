#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "fab/autodiff.hpp"
#include "fab/tensor.hpp"

using namespace fab;

TEST_CASE("tensor construction validates shape and data") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), std::invalid_argument);
  // unchecked path admits non-finite payloads
  CHECK_NOTHROW(Tensor({1}, {std::nan("")}, false));
}

TEST_CASE("matmul identity and hand-computed product") {
  Tape tape;
  Variable m = tape.leaf(Tensor::matrix(2, 2, {3.0, -1.0, 2.5, 7.0}));
  Variable eye = tape.leaf(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  Variable prod = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(prod.value()[i] == Catch::Approx(m.value()[i]));

  Variable a = tape.leaf(Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0}));
  Variable b = tape.leaf(Tensor::matrix(2, 1, {5.0, 6.0}));
  Variable c = matmul(a, b);
  CHECK(c.value()[0] == Catch::Approx(17.0));
  CHECK(c.value()[1] == Catch::Approx(39.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions, naming both shapes") {
  Tape tape;
  Variable a = tape.leaf(Tensor({2, 3}));
  Variable b = tape.leaf(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected dimension error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul backward matches dA = G B^T and dB = A^T G") {
  Tape tape;
  Variable a = tape.leaf(Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0}), true);
  Variable b = tape.leaf(Tensor::matrix(2, 2, {-1.0, 0.5, 2.0, 1.5}), true);
  Variable loss = sum(matmul(a, b));
  tape.backward(loss);
  // G is all ones; dA[i][k] = sum_j B[k][j], dB[k][j] = sum_i A[i][k]
  CHECK(a.grad()[0] == Catch::Approx(-0.5));
  CHECK(a.grad()[1] == Catch::Approx(3.5));
  CHECK(b.grad()[0] == Catch::Approx(4.0));
  CHECK(b.grad()[3] == Catch::Approx(6.0));
}

TEST_CASE("softmax on [0,0] and [ln 3, 0]") {
  Tape tape;
  Variable flat = softmax_axis(tape.leaf(Tensor::vector({0.0, 0.0})), 0);
  CHECK(flat.value()[0] == Catch::Approx(0.5));
  CHECK(flat.value()[1] == Catch::Approx(0.5));

  Variable skew =
      softmax_axis(tape.leaf(Tensor::vector({std::log(3.0), 0.0})), 0);
  CHECK(skew.value()[0] == Catch::Approx(0.75).epsilon(1e-12));
  CHECK(skew.value()[1] == Catch::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax axis normalisation and shift invariance") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  Tensor x({3, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = u(rng);

  Tape tape;
  Variable cols = softmax_axis(tape.leaf(x), 0);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += cols.value().at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  Variable rows = softmax_axis(tape.leaf(x), 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += rows.value().at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  Tensor shifted = x;
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 3; ++i) shifted.at(i, j) += 17.25;
  Variable cols2 = softmax_axis(tape.leaf(shifted), 0);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::abs(cols2.value()[i] - cols.value()[i]) < 1e-12);

  CHECK_THROWS_AS(softmax_axis(tape.leaf(x), 2), std::invalid_argument);
}

TEST_CASE("elementwise basics: sigmoid, sum, broadcast") {
  Tape tape;
  Variable s = sigmoid(tape.leaf(Tensor::vector({0.0})));
  CHECK(s.value()[0] == Catch::Approx(0.5));

  Variable v = tape.leaf(Tensor::vector({1.0, 2.0, 3.0}), true);
  Variable total = sum(v);
  CHECK(total.value()[0] == Catch::Approx(6.0));
  tape.backward(total);
  for (std::size_t i = 0; i < 3; ++i) CHECK(v.grad()[i] == Catch::Approx(1.0));

  Tape t2;
  Variable m = t2.leaf(Tensor::matrix(2, 3, {0, 0, 0, 0, 0, 0}));
  Variable b = t2.leaf(Tensor::vector({1.5, -2.0}));
  Variable out = broadcast_add(m, b, 0);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(out.value().at(0, j) == Catch::Approx(1.5));
    CHECK(out.value().at(1, j) == Catch::Approx(-2.0));
  }
  Variable bad = t2.leaf(Tensor::vector({1.0, 2.0, 3.0, 4.0}));
  CHECK_THROWS_AS(broadcast_add(m, bad, 0), std::invalid_argument);
}

TEST_CASE("log and div reject invalid operands in checked mode") {
  Tape tape;
  CHECK_THROWS_AS(vlog(tape.leaf(Tensor::vector({0.0}))), std::domain_error);
  CHECK_THROWS_AS(vlog(tape.leaf(Tensor::vector({-1.0}))), std::domain_error);
  Variable num = tape.leaf(Tensor::vector({1.0}));
  Variable den = tape.leaf(Tensor::vector({0.0}));
  CHECK_THROWS_AS(div(num, den), std::domain_error);
}

TEST_CASE("backward: square, softmax normalisation constant, bias shift") {
  {
    Tape tape;
    Variable x = tape.leaf(Tensor::vector({3.0}), true);
    Variable loss = mul(x, x);
    tape.backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(6.0));
  }
  {
    // sum(softmax(v)) == 1 identically, so grad is exactly zero.
    Tape tape;
    Variable v = tape.leaf(Tensor::vector({0.3, -1.2, 2.1}), true);
    Variable loss = sum(softmax_axis(v, 0));
    tape.backward(loss);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(std::abs(v.grad()[i]) < 1e-15);
  }
  {
    // <w, softmax(v + b)> with w = [1,1] is shift invariant in b.
    Tape tape;
    Variable v = tape.leaf(Tensor::vector({0.5, -0.5}));
    Variable b = tape.leaf(Tensor::vector({0.7, 0.1}), true);
    Variable w = tape.leaf(Tensor::vector({1.0, 1.0}));
    Variable loss = sum(mul(w, softmax_axis(add(v, b), 0)));
    tape.backward(loss);
    for (std::size_t i = 0; i < 2; ++i)
      CHECK(std::abs(b.grad()[i]) < 1e-15);
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  Variable v = tape.leaf(Tensor::vector({1.0, 2.0}), true);
  CHECK_THROWS_AS(tape.backward(add(v, v)), std::invalid_argument);
}

TEST_CASE("loss independent of a variable leaves its grad exactly zero") {
  Tape tape;
  Variable used = tape.leaf(Tensor::vector({1.0}), true);
  Variable unused = tape.leaf(Tensor::vector({5.0, 6.0}), true);
  Variable loss = mul(used, used);
  tape.backward(loss);
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("finite_diff_check on square and linear functions") {
  auto square = [](Tape&, const std::vector<Variable>& p) {
    return mul(p[0], p[0]);
  };
  double err = finite_diff_check(square, {Tensor::vector({3.0})}, 1e-5);
  CHECK(err <= 1e-6);

  auto linear = [](Tape&, const std::vector<Variable>& p) {
    return sum(mul_scalar(p[0], 2.5));
  };
  double lerr =
      finite_diff_check(linear, {Tensor::vector({1.0, -2.0, 0.5})}, 1e-3);
  CHECK(lerr <= 1e-9);
}

// ---------------------------------------------------------------------------
// Property test: random graphs over all primitives, analytic vs central
// differences.
// ---------------------------------------------------------------------------

namespace {

struct Instr {
  int op;
  std::size_t a, b;
  double aux;
};

// Replays a recorded random program over the parameter leaves. The pool
// holds intermediate variables; instructions index into it.
Variable replay(Tape& tape, const std::vector<Variable>& params,
                const std::vector<Instr>& program) {
  std::vector<Variable> pool(params);
  for (const auto& in : program) {
    Variable x = pool[in.a % pool.size()];
    Variable y = pool[in.b % pool.size()];
    Variable out;
    switch (in.op) {
      case 0: out = add(x, x.value().same_shape(y.value()) ? y : x); break;
      case 1:
        // sub(x, x) has an identically zero gradient, which turns the
        // relative-error check into pure finite-difference noise
        out = x.value().same_shape(y.value()) && x.id != y.id
                  ? sub(x, y)
                  : sub(x, mul_scalar(x, 0.5));
        break;
      case 2: out = mul(x, x.value().same_shape(y.value()) ? y : x); break;
      case 3: out = div(x, add_scalar(sigmoid(x.value().same_shape(y.value()) ? y : x), 0.5)); break;
      case 4: out = neg(x); break;
      case 5: out = vexp(mul_scalar(vtanh(x), 1.5)); break;
      case 6: out = vlog(add_scalar(sigmoid(x), 0.1)); break;
      case 7: out = vpow(add_scalar(sigmoid(x), 0.2), in.aux); break;
      case 8: out = sigmoid(x); break;
      case 9: out = vtanh(x); break;
      case 10: out = add_scalar(x, in.aux); break;
      case 11: out = mul_scalar(x, in.aux); break;
      case 12:
        if (x.value().rank() == 2) out = softmax_axis(x, static_cast<int>(in.b % 2));
        else out = softmax_axis(x, 0);
        break;
      case 13:
        if (x.value().rank() == 2) out = transpose(x);
        else out = vtanh(x);
        break;
      case 14:
        if (x.value().rank() == 2 && y.value().rank() == 2 &&
            x.value().cols() == y.value().rows()) {
          out = matmul(x, y);
        } else if (x.value().rank() == 2 && y.value().rank() == 2 &&
                   x.value().cols() == y.value().cols()) {
          out = matmul(x, transpose(y));
        } else {
          out = vtanh(x);
        }
        break;
      case 15:
        if (x.value().rank() == 2 && y.value().rank() == 1 &&
            y.value().size() == x.value().rows()) {
          out = broadcast_add(x, y, 0);
        } else if (x.value().rank() == 2 && y.value().rank() == 1 &&
                   y.value().size() == x.value().cols()) {
          out = broadcast_add(x, y, 1);
        } else {
          out = vtanh(x);
        }
        break;
      case 16:
        if (x.value().rank() == 2)
          out = select_row(x, in.b % x.value().rows());
        else
          out = vtanh(x);
        break;
      default: out = vtanh(x); break;
    }
    pool.push_back(out);
  }
  // Reduce everything produced so every op contributes to the loss.
  // Distinct term weights keep symmetric subgraphs (x and neg(x), say)
  // from cancelling to an identically zero gradient.
  Variable loss;
  bool first = true;
  for (std::size_t i = params.size(); i < pool.size(); ++i) {
    double weight = 1.0 + 0.37 * static_cast<double>(i - params.size());
    Variable term = mul_scalar(mean(vtanh(pool[i])), weight);
    loss = first ? term : add(loss, term);
    first = false;
  }
  if (first) loss = mean(pool[0]);
  return loss;
}

}  // namespace

TEST_CASE("property: backward matches central differences on random graphs") {
  std::mt19937_64 rng(20240809);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::uniform_int_distribution<int> opd(0, 16);
  std::uniform_int_distribution<std::size_t> idx(0, 63);
  std::uniform_real_distribution<double> auxd(0.5, 2.5);

  double worst = 0.0;
  for (int iter = 0; iter < 110; ++iter) {
    std::vector<Tensor> params;
    params.push_back(Tensor({2, 3}));
    params.push_back(Tensor({2, 3}));
    params.push_back(Tensor({3}));
    params.push_back(Tensor({2}));
    for (auto& p : params)
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = u(rng);

    std::vector<Instr> program;
    int len = 4 + static_cast<int>(idx(rng) % 8);
    for (int k = 0; k < len; ++k)
      program.push_back({opd(rng), idx(rng), idx(rng), auxd(rng)});

    auto f = [&program](Tape& tape, const std::vector<Variable>& p) {
      return replay(tape, p, program);
    };
    double err = finite_diff_check(f, params, 1e-6);
    worst = std::max(worst, err);
    CHECK(err <= 1e-4);
  }
  INFO("worst relative error over random graphs: " << worst);
}

TEST_CASE("select_row extracts a row and scatters its gradient") {
  Tape tape;
  Variable m = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}), true);
  Variable r = select_row(m, 1);
  CHECK(r.value()[0] == Catch::Approx(4.0));
  CHECK(r.value()[2] == Catch::Approx(6.0));
  tape.backward(sum(mul_scalar(r, 2.0)));
  CHECK(m.grad().at(0, 0) == 0.0);
  CHECK(m.grad().at(1, 0) == Catch::Approx(2.0));
  CHECK(m.grad().at(1, 2) == Catch::Approx(2.0));
}
