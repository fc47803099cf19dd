#include "oracles.hpp"
#include "setor/parameters.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace setor;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "setor_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("adadelta leaves parameters alone under a zero gradient") {
  std::mt19937_64 rng(1);
  Tensor p = Tensor::parameter(oracle::random_matrix(3, 2, rng));
  const Matrix before = p.value();
  p.zero_grad();
  AdadeltaState state;
  Tensor params[] = {p};
  for (int i = 0; i < 5; ++i) adadelta_step(params, state);
  CHECK(p.value() == before);
}

TEST_CASE("adadelta on a scalar follows the hand recurrence") {
  const double g = 0.7;
  const double rho = 0.95;
  const double eps = 1e-6;
  Tensor p = Tensor::scalar(1.0, true);
  p.mutable_grad() = Matrix::Constant(1, 1, g);
  AdadeltaState state;
  Tensor params[] = {p};
  double eg = 0, ex = 0, x = 1.0, prev_mag = 0;
  for (int i = 0; i < 200; ++i) {
    eg = rho * eg + (1 - rho) * g * g;
    const double dx = -std::sqrt(ex + eps) / std::sqrt(eg + eps) * g;
    ex = rho * ex + (1 - rho) * dx * dx;
    const double before = p.item();
    adadelta_step(params, state);
    x += dx;
    const double step = p.item() - before;
    CHECK(step < 0);  // opposite sign to g
    CHECK(p.item() == doctest::Approx(x).epsilon(1e-14));
    if (i > 0) CHECK(std::abs(step) >= prev_mag);  // magnitude climbs toward its fixed point
    prev_mag = std::abs(step);
  }
}

TEST_CASE("adadelta with rho 0 uses only the previous update") {
  const double eps = 1e-12;
  Tensor p = Tensor::scalar(0.0, true);
  AdadeltaState state;
  state.rho = 0.0;
  state.eps = eps;
  Tensor params[] = {p};
  const double grads[] = {2.0, -0.5, 3.0};
  double prev_update = 0.0;
  for (double g : grads) {
    p.mutable_grad() = Matrix::Constant(1, 1, g);
    const double before = p.item();
    adadelta_step(params, state);
    const double expect = -std::sqrt(prev_update * prev_update + eps) / std::sqrt(g * g + eps) * g;
    CHECK(p.item() - before == doctest::Approx(expect).epsilon(1e-12));
    prev_update = expect;
  }
}

TEST_CASE("adadelta requires gradients") {
  Tensor p = Tensor::scalar(0.0, true);
  AdadeltaState state;
  Tensor params[] = {p};
  CHECK_THROWS(adadelta_step(params, state));
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(2);
  ParameterStore a;
  a.uniform("x", 3, 4, 1.0, rng);
  a.add("y", Matrix::Constant(1, 2, 1.0 / 3.0));
  a.at("y").mutable_value()(0, 1) = -0.0;
  const auto path = scratch("round.ckpt");
  save_checkpoint(a, path);

  ParameterStore b;
  b.zeros("x", 3, 4);
  b.zeros("y", 1, 2);
  load_checkpoint(b, path);
  CHECK(b.at("x").value() == a.at("x").value());
  CHECK(b.at("y").value() == a.at("y").value());
  CHECK(std::signbit(b.at("y").value()(0, 1)));

  const auto raw = read_checkpoint(path);
  CHECK(raw.size() == 2);
  CHECK(raw.at("x") == a.at("x").value());
}

TEST_CASE("checkpoint load rejects mismatched stores") {
  ParameterStore a;
  a.zeros("x", 2, 2);
  const auto path = scratch("mismatch.ckpt");
  save_checkpoint(a, path);

  ParameterStore wrong_shape;
  wrong_shape.zeros("x", 2, 3);
  CHECK_THROWS(load_checkpoint(wrong_shape, path));

  ParameterStore wrong_name;
  wrong_name.zeros("z", 2, 2);
  CHECK_THROWS(load_checkpoint(wrong_name, path));

  ParameterStore extra;
  extra.zeros("x", 2, 2);
  extra.zeros("w", 1, 1);
  CHECK_THROWS(load_checkpoint(extra, path));

  std::ofstream(scratch("garbage.ckpt")) << "not a checkpoint\n";
  CHECK_THROWS(read_checkpoint(scratch("garbage.ckpt")));
}

TEST_CASE("store snapshot and restore") {
  std::mt19937_64 rng(3);
  ParameterStore s;
  s.uniform("a", 2, 2, 1.0, rng);
  s.uniform("b.c", 1, 3, 1.0, rng);
  const auto snap = s.snapshot();
  s.at("a").mutable_value().setZero();
  s.restore(snap);
  CHECK(s.at("a").value() == snap[0]);
  CHECK(s.group("b.").size() == 1);
  CHECK_THROWS(s.add("a", Matrix::Zero(1, 1)));
}
