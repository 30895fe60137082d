// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <edora/rng.hpp>
#include <edora/tape.hpp>
#include <edora/tensor.hpp>

using edora::Index;
using edora::Rng;
using edora::Tape;
using edora::Tensor;

namespace {

Tensor random_tensor(Index rows, Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor::Flat d(rows * cols);
  for (Index i = 0; i < d.size(); ++i) d[i] = rng.uniform(lo, hi);
  return Tensor::from_flat({rows, cols}, std::move(d));
}

// Brute-force triple-loop product, kept deliberately independent of Eigen.
Tensor::Mat matmul_reference(const Tensor& a, const Tensor& b) {
  Tensor::Mat out = Tensor::Mat::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j)
      for (Index l = 0; l < a.cols(); ++l) out(i, j) += a(i, l) * b(l, j);
  return out;
}

}  // namespace

TEST_CASE("tensor shape and data stay consistent") {
  Tensor t = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.numel() == 6);
  CHECK(t(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor::from_flat({2, 2}, Tensor::Flat::Zero(3)), edora::DimensionError);

  Tensor s = Tensor::scalar(4.5);
  CHECK(s.is_scalar());
  CHECK(s.value() == 4.5);
}

TEST_CASE("matmul identity case") {
  Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor r = edora::matmul(eye, m);
  CHECK(r.matrix() == m.matrix());
}

TEST_CASE("matmul 3-4-5 self inner product") {
  Tensor v = Tensor::from_rows({{3}, {4}});
  Tensor r = edora::matmul(edora::transpose(v), v);
  CHECK(r.value() == 25.0);
}

TEST_CASE("matmul matches triple-loop reference") {
  Rng rng(11);
  Tensor a = random_tensor(3, 4, rng);
  Tensor b = random_tensor(4, 2, rng);
  Tensor r = edora::matmul(a, b);
  CHECK(((r.matrix() - matmul_reference(a, b)).cwiseAbs().maxCoeff()) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros(2, 3);
  Tensor b = Tensor::zeros(2, 3);
  try {
    edora::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const edora::DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("column_norm hand cases and oracle") {
  Tensor a = Tensor::from_rows({{3, 0}, {4, 1}});
  Tensor n = edora::column_norm(a);
  CHECK(n(0, 0) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(n(0, 1) == doctest::Approx(1.0).epsilon(1e-15));

  Tensor eye = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  Tensor ne = edora::column_norm(eye);
  for (Index j = 0; j < 3; ++j) CHECK(ne(0, j) == 1.0);

  Rng rng(7);
  Tensor r = random_tensor(5, 3, rng);
  Tensor nr = edora::column_norm(r);
  for (Index j = 0; j < 3; ++j) {
    double acc = 0;
    for (Index i = 0; i < 5; ++i) acc += r(i, j) * r(i, j);
    CHECK(std::abs(nr(0, j) - std::sqrt(acc)) < 1e-12);
  }
}

TEST_CASE("split_cols basics and errors") {
  Tensor a = Tensor::from_rows({{1, 2, 3, 4}});
  auto one = edora::split_cols(a, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].matrix() == a.matrix());

  auto two = edora::split_cols(a, 2);
  REQUIRE(two.size() == 2);
  CHECK(two[0](0, 0) == 1.0);
  CHECK(two[0](0, 1) == 2.0);
  CHECK(two[1](0, 0) == 3.0);
  CHECK(two[1](0, 1) == 4.0);

  try {
    edora::split_cols(a, 3);
    FAIL("expected IndivisibleError");
  } catch (const edora::IndivisibleError& e) {
    CHECK(e.extent == 4);
    CHECK(e.parts == 3);
  }
}

TEST_CASE("concat_cols mirrors split_cols") {
  Tensor p0 = Tensor::from_rows({{1, 2}});
  Tensor p1 = Tensor::from_rows({{3, 4}});
  Tensor joined = edora::concat_cols<double>({p0, p1});
  CHECK(joined.cols() == 4);
  CHECK(joined(0, 2) == 3.0);

  Tensor single = edora::concat_cols<double>({p0});
  CHECK(single.matrix() == p0.matrix());

  Tensor bad = Tensor::zeros(2, 2);
  CHECK_THROWS_AS(edora::concat_cols<double>({p0, bad}), edora::DimensionError);
}

TEST_CASE("concat_cols of split_cols round-trips bit-exactly") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const Index rows = 1 + static_cast<Index>(rng.uniform_index(6));
    const Index parts = 1 + static_cast<Index>(rng.uniform_index(4));
    const Index cols = parts * (1 + static_cast<Index>(rng.uniform_index(5)));
    Tensor a = random_tensor(rows, cols, rng);
    Tensor back = edora::concat_cols(edora::split_cols(a, parts));
    CHECK((back.matrix().array() == a.matrix().array()).all());
  }
}

TEST_CASE("backward on linear loss reproduces the hand formula") {
  // loss = sum(W x) with x fixed: dW = ones * x^T.
  Rng rng(3);
  Tensor w_val = random_tensor(3, 4, rng);
  Tensor x = random_tensor(4, 2, rng);
  Tape tape;
  Tensor w = tape.watch(w_val);
  Tensor loss = edora::sum(edora::matmul(w, x));
  edora::backward(tape, loss);
  Tensor dw = tape.grad(w);
  Tensor::Mat expected = Tensor::Mat::Ones(3, 2) * x.matrix().transpose();
  CHECK(((dw.matrix() - expected).cwiseAbs().maxCoeff()) < 1e-12);
}

TEST_CASE("backward on squared Frobenius norm yields 2W") {
  Rng rng(4);
  Tensor w_val = random_tensor(4, 4, rng);
  Tape tape;
  Tensor w = tape.watch(w_val);
  Tensor loss = edora::sum(edora::hadamard(w, w));
  edora::backward(tape, loss);
  Tensor dw = tape.grad(w);
  CHECK(((dw.matrix() - 2.0 * w_val.matrix()).cwiseAbs().maxCoeff()) < 1e-12);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape tape;
  Tensor w = tape.watch(Tensor::zeros(2, 2));
  Tensor y = edora::scale(w, 2.0);
  CHECK_THROWS_AS(edora::backward(tape, y), edora::ContractError);
}

TEST_CASE("gradient accumulation sums both paths") {
  Tape tape;
  Tensor x = tape.watch(Tensor::from_rows({{1.5}}));
  Tensor y = edora::sum(edora::add(x, x));
  edora::backward(tape, y);
  CHECK(tape.grad(x).value() == 2.0);
}

TEST_CASE("three-layer composition matches finite differences") {
  Rng rng(5);
  Tensor a = random_tensor(3, 3, rng);
  Tensor b = random_tensor(3, 3, rng);
  Tensor x0 = random_tensor(3, 2, rng);
  auto f = [&](const Tensor& w) {
    Tensor h1 = edora::elu(edora::matmul(w, x0));
    Tensor h2 = edora::gelu(edora::matmul(a, h1));
    Tensor h3 = edora::matmul(b, h2);
    return edora::sum(edora::hadamard(h3, h3));
  };
  CHECK(edora::finite_diff_check(f, random_tensor(3, 3, rng), 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check hand cases") {
  // f = x^2 at x = 3.
  auto square = [](const Tensor& x) { return edora::sum(edora::hadamard(x, x)); };
  CHECK(edora::finite_diff_check(square, Tensor::scalar(3.0), 1e-5) < 1e-9);

  // Column-norm sum at a random 4x4: the norm gradient is the DoRA acid test.
  Rng rng(6);
  auto norm_sum = [](const Tensor& x) { return edora::sum(edora::column_norm(x)); };
  CHECK(edora::finite_diff_check(norm_sum, random_tensor(4, 4, rng), 1e-5) < 1e-6);

  // Constant f: both gradients vanish, guarded error is exactly zero.
  auto constant = [](const Tensor& x) { return edora::scale(edora::sum(x), 0.0); };
  CHECK(edora::finite_diff_check(constant, random_tensor(2, 2, rng), 1e-5) == 0.0);
}

TEST_CASE("every primitive matches finite differences on small random inputs") {
  Rng rng(17);
  const double kTol = 1e-6;
  Tensor other = random_tensor(4, 4, rng);
  Tensor rowvec4 = random_tensor(1, 4, rng, 0.5, 1.5);

  auto check = [&](auto&& f, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
    Tensor at = random_tensor(rows, cols, rng, lo, hi);
    CHECK(edora::finite_diff_check(f, at, 1e-5) < kTol);
  };

  check([&](const Tensor& x) { return edora::sum(edora::matmul(x, other)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::matmul(other, x)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::transpose(x)); }, 3, 5);
  check([&](const Tensor& x) { return edora::sum(edora::add(x, other)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::sub(other, x)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::hadamard(x, other)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::scale(x, -2.5)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::add_bias_rows(other, x)); }, 1, 4);
  check([&](const Tensor& x) { return edora::sum(edora::add_bias_rows(x, rowvec4)); }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::scale_rows(x, rowvec4), other));
  }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::scale_rows(other, x), other));
  }, 1, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::scale_cols(x, rowvec4), other));
  }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::scale_cols(other, x), other));
  }, 1, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::div_cols(x, rowvec4), other));
  }, 4, 4);
  // Divisors are column norms in practice, so probe the positive branch.
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::div_cols(other, x), other));
  }, 1, 4, 0.5, 1.5);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::column_norm(x), rowvec4));
  }, 4, 4);
  check([&](const Tensor& x) {
    auto parts = edora::split_cols(x, 2);
    return edora::sum(edora::hadamard(parts[0], parts[1]));
  }, 4, 4);
  check([&](const Tensor& x) {
    auto parts = edora::split_rows(x, 2);
    return edora::sum(edora::hadamard(parts[0], parts[1]));
  }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::concat_cols<double>({x, x}),
                                      edora::concat_cols<double>({other, other})));
  }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::concat_rows<double>({x, x}),
                                      edora::concat_rows<double>({other, other})));
  }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::elu(x)); }, 4, 4);
  check([&](const Tensor& x) { return edora::sum(edora::gelu(x)); }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::softmax_rows(x), other));
  }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(
        edora::layer_norm_cols(x, rowvec4, rowvec4), other));
  }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(
        edora::layer_norm_cols(other, x, rowvec4), other));
  }, 1, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(
        edora::layer_norm_cols(other, rowvec4, x), other));
  }, 1, 4);
  check([&](const Tensor& x) { return edora::cross_entropy(x, {0, 2, 1, 3}); }, 4, 4);
  check([&](const Tensor& x) {
    return edora::sum(edora::avgpool_cols(edora::hadamard(x, x), 3, 2));
  }, 3, 9);
  check([&](const Tensor& x) {
    return edora::sum(edora::channel_collapse(x, Tensor::from_rows({{0.5, -1.0}, {2.0, 0.3}}), 2));
  }, 2, 8);
  check([&](const Tensor& x) {
    return edora::sum(edora::channel_collapse(other, x, 2));
  }, 4, 2);
  check([&](const Tensor& x) {
    return edora::sum(edora::hadamard(edora::reshape(x, {1, 16}),
                                      edora::reshape(other, {1, 16})));
  }, 4, 4);
}

TEST_CASE("float instantiation runs the same machinery") {
  using TensorF = edora::TensorT<float>;
  edora::TapeT<float> tape;
  TensorF w = tape.watch(TensorF::from_rows({{1.f, 2.f}, {3.f, 4.f}}));
  TensorF x = TensorF::from_rows({{1.f}, {1.f}});
  TensorF loss = edora::sum(edora::matmul(w, x));
  edora::backward(tape, loss);
  TensorF g = tape.grad(w);
  CHECK(g(0, 0) == 1.f);
  CHECK(g(1, 1) == 1.f);
}

TEST_CASE("operations on finite inputs keep outputs finite") {
  Rng rng(31);
  Tensor a = random_tensor(4, 4, rng, -50.0, 50.0);
  CHECK(edora::softmax_rows(a).all_finite());
  CHECK(edora::column_norm(a).all_finite());
  Tensor zeros = Tensor::zeros(3, 3);
  CHECK(edora::div_cols(zeros, edora::column_norm(zeros)).all_finite());
}

TEST_CASE("mixing two tapes is rejected") {
  Tape t1, t2;
  Tensor a = t1.watch(Tensor::zeros(2, 2));
  Tensor b = t2.watch(Tensor::zeros(2, 2));
  CHECK_THROWS_AS(edora::add(a, b), edora::ContractError);
}
