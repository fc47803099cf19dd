#include "oracles.hpp"
#include "setor/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace setor;

namespace {

// Every differentiable op composed into one scalar, checked entrywise by FD.
double op_check(const std::function<Tensor(const Tensor&, const Tensor&)>& op, Index ar, Index ac, Index br,
                Index bc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor a = Tensor::parameter(oracle::random_matrix(ar, ac, rng));
  Tensor b = Tensor::parameter(oracle::random_matrix(br, bc, rng));
  // A fixed random readout keeps the scalar sensitive to every output entry.
  Matrix probe;
  auto build = [&] {
    Tensor y = op(a, b);
    if (probe.size() == 0) probe = oracle::random_matrix(y.rows(), y.cols(), rng);
    return sum(mul(y, Tensor::constant(probe)));
  };
  Tensor params[] = {a, b};
  return grad_check(build, params, 1e-6);
}

}  // namespace

TEST_CASE("grad_check on x^2 at 3") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor params[] = {x};
  const double err = grad_check([&] { return mul(x, x); }, params, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("grad_check on a graph that ignores its parameter is zero") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor params[] = {x};
  const double err = grad_check([&] { return Tensor::scalar(2.0); }, params, 1e-5);
  CHECK(err == 0.0);
}

TEST_CASE("elementwise and matrix ops match finite differences") {
  using T = const Tensor&;
  CHECK(op_check([](T a, T b) { return matmul(a, b); }, 3, 4, 4, 2, 1) < 1e-7);
  CHECK(op_check([](T a, T b) { return add(a, b); }, 3, 4, 1, 4, 2) < 1e-7);
  CHECK(op_check([](T a, T b) { return sub(a, b); }, 3, 4, 3, 1, 3) < 1e-7);
  CHECK(op_check([](T a, T b) { return mul(a, b); }, 3, 4, 1, 1, 4) < 1e-7);
  CHECK(op_check([](T a, T) { return affine(a, 2.5, -1.0); }, 2, 3, 1, 1, 5) < 1e-7);
  CHECK(op_check([](T a, T) { return transpose(a); }, 2, 3, 1, 1, 6) < 1e-7);
  CHECK(op_check([](T a, T) { return tanh(a); }, 2, 3, 1, 1, 7) < 1e-7);
  CHECK(op_check([](T a, T) { return sigmoid(a); }, 2, 3, 1, 1, 8) < 1e-7);
  CHECK(op_check([](T a, T) { return exp(a); }, 2, 3, 1, 1, 9) < 1e-7);
  CHECK(op_check([](T a, T) { return log(affine(mul(a, a), 1.0, 0.5)); }, 2, 3, 1, 1, 10) < 1e-7);
  CHECK(op_check([](T a, T) { return relu(a); }, 2, 3, 1, 1, 11) < 1e-7);
  CHECK(op_check([](T a, T) { return softmax_rows(a); }, 3, 5, 1, 1, 12) < 1e-7);
  CHECK(op_check([](T a, T b) { return layer_norm(a, b, b); }, 3, 5, 1, 5, 13) < 1e-7);
  CHECK(op_check([](T a, T) { return row_sums(a); }, 3, 5, 1, 1, 14) < 1e-7);
  CHECK(op_check([](T a, T) { return mean(a); }, 3, 5, 1, 1, 15) < 1e-7);
  CHECK(op_check(
            [](T a, T b) {
              const Tensor parts[] = {a, b};
              return concat_cols(parts);
            },
            3, 2, 3, 4, 16) < 1e-7);
  CHECK(op_check(
            [](T a, T b) {
              const Tensor parts[] = {a, b};
              return concat_rows(parts);
            },
            2, 3, 4, 3, 17) < 1e-7);
  CHECK(op_check([](T a, T) { return slice_cols(a, 1, 2); }, 3, 5, 1, 1, 18) < 1e-7);
  CHECK(op_check([](T a, T) { return slice_rows(a, 1, 2); }, 4, 3, 1, 1, 19) < 1e-7);
  CHECK(op_check(
            [](T a, T) {
              const int ids[] = {2, 0, 2};
              return gather_rows(a, ids);
            },
            4, 3, 1, 1, 20) < 1e-7);
}

TEST_CASE("masked softmax gives exact zeros and renormalizes") {
  Matrix x(2, 3);
  x << 1, 2, 3, -1, 0, 5;
  Mask allowed(2, 3);
  allowed << true, false, true, false, true, false;
  const Matrix p = softmax_rows(Tensor::constant(x), allowed).value();
  CHECK(p(0, 1) == 0.0);
  CHECK(p(0, 0) + p(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p(0, 2) / p(0, 0) == doctest::Approx(std::exp(2.0)));
  CHECK(p(1, 1) == 1.0);
  Mask none = Mask::Constant(1, 3, false);
  CHECK_THROWS(softmax_rows(Tensor::constant(Matrix::Zero(1, 3)), none));
}

TEST_CASE("masked softmax gradient never reaches disallowed entries") {
  std::mt19937_64 rng(3);
  Tensor a = Tensor::parameter(oracle::random_matrix(2, 4, rng));
  Mask allowed = Mask::Constant(2, 4, true);
  allowed(0, 3) = false;
  allowed(1, 0) = false;
  a.zero_grad();
  backward(sum(mul(softmax_rows(a, allowed), Tensor::constant(oracle::random_matrix(2, 4, rng)))));
  CHECK(a.grad()(0, 3) == 0.0);
  CHECK(a.grad()(1, 0) == 0.0);
}

TEST_CASE("layer norm matches the scalar oracle") {
  std::mt19937_64 rng(4);
  const Matrix x = oracle::random_matrix(4, 6, rng, 3.0);
  const Matrix g = oracle::random_matrix(1, 6, rng);
  const Matrix b = oracle::random_matrix(1, 6, rng);
  const Matrix got = layer_norm(Tensor::constant(x), Tensor::constant(g), Tensor::constant(b)).value();
  CHECK(oracle::max_abs_diff(got, oracle::layer_norm(x, g, b)) < 1e-12);
}

TEST_CASE("shape and domain errors") {
  Tensor a = Tensor::constant(Matrix::Ones(2, 3));
  Tensor b = Tensor::constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, Tensor::constant(Matrix::Ones(3, 3))), ShapeError);
  CHECK_THROWS_AS(log(Tensor::constant(Matrix::Zero(1, 1))), DomainError);
  const int ids[] = {5};
  CHECK_THROWS(gather_rows(a, ids));
}

TEST_CASE("gradients accumulate across backward calls") {
  Tensor x = Tensor::scalar(2.0, true);
  x.zero_grad();
  backward(mul(x, x));
  backward(mul(x, x));
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("dropout is identity in eval and scales kept entries in training") {
  std::mt19937_64 rng(5);
  Tensor x = Tensor::constant(Matrix::Ones(50, 40));
  CHECK(Dropout(0.5, false, &rng)(x).value() == x.value());
  const Matrix y = Dropout(0.25, true, &rng)(x).value();
  int kept = 0;
  for (Index i = 0; i < y.size(); ++i) {
    const double v = y.data()[i];
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15));
    kept += v != 0.0;
  }
  CHECK(kept / 2000.0 == doctest::Approx(0.75).epsilon(0.05));
}
