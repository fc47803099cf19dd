#include "oracles.hpp"
#include "setor/journey.hpp"

#include <doctest.h>

#include <cmath>

using namespace setor;

namespace {

void jitter(ParameterStore& store, std::mt19937_64& rng, double scale = 0.5) {
  for (auto& t : store.tensors()) t.mutable_value() = oracle::random_matrix(t.rows(), t.cols(), rng, scale);
}

oracle::JourneyLayer to_oracle(const JourneyLayer& l) {
  oracle::JourneyLayer o;
  o.attention = {l.attention.query.value(), l.attention.key.value(), l.attention.value.value(),
                 l.attention.output.value(), l.attention.heads};
  o.ff_in = l.ff_in.value();
  o.ff_in_bias = l.ff_in_bias.value();
  o.ff_out = l.ff_out.value();
  o.ff_out_bias = l.ff_out_bias.value();
  o.norm1_gain = l.attention_norm.gain.value();
  o.norm1_bias = l.attention_norm.bias.value();
  o.norm2_gain = l.ff_norm.gain.value();
  o.norm2_bias = l.ff_norm.bias.value();
  return o;
}

Matrix random_labels(Index rows, Index cols, std::mt19937_64& rng) {
  Matrix y = Matrix::Zero(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    y(r, static_cast<Index>(rng() % cols)) = 1;
    for (Index c = 0; c < cols; ++c) {
      if (rng() % 4 == 0) y(r, c) = 1;
    }
  }
  return y;
}

std::vector<JourneyLayer> make_layers(ParameterStore& store, int n, Index d, std::mt19937_64& rng) {
  std::vector<JourneyLayer> layers;
  for (int l = 0; l < n; ++l) layers.push_back(JourneyLayer::create(store, "j" + std::to_string(l), d, 2, 8, rng));
  jitter(store, rng);
  return layers;
}

}  // namespace

TEST_CASE("one journey layer matches the scalar oracle") {
  std::mt19937_64 rng(51);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    ParameterStore store;
    const auto layers = make_layers(store, 1, 4, rng);
    const Index T = 1 + trial % 4;
    const Matrix x = oracle::random_matrix(T, 4, rng);
    const Matrix got =
        j_transformer(Tensor::constant(x), std::vector<bool>(T, true), layers, AttentionScale::kModelDim).value();
    worst = std::max(worst, oracle::max_abs_diff(got, oracle::journey_layer(x, to_oracle(layers[0]))));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("a single step depends only on itself") {
  std::mt19937_64 rng(52);
  ParameterStore store;
  const auto layers = make_layers(store, 2, 4, rng);
  const Matrix x = oracle::random_matrix(1, 4, rng);
  const Matrix a = j_transformer(Tensor::constant(x), {true}, layers, AttentionScale::kModelDim).value();
  const Matrix b = j_transformer(Tensor::constant(x.replicate(3, 1)), {true, true, true}, layers,
                                 AttentionScale::kModelDim).value();
  CHECK(oracle::max_abs_diff(a, b.row(0)) < 1e-15);
}

TEST_CASE("causality: later inputs have exactly zero gradient and no effect") {
  std::mt19937_64 rng(53);
  ParameterStore store;
  const auto layers = make_layers(store, 2, 4, rng);
  const Index T = 5;
  Tensor x = Tensor::parameter(oracle::random_matrix(T, 4, rng));
  const std::vector<bool> valid(T, true);
  const Tensor y = j_transformer(x, valid, layers, AttentionScale::kModelDim);
  for (Index t = 0; t < T; ++t) {
    x.zero_grad();
    store.zero_grad();
    backward(sum(mul(slice_rows(y, t, 1), Tensor::constant(oracle::random_matrix(1, 4, rng)))));
    for (Index later = t + 1; later < T; ++later) CHECK(x.grad().row(later).isZero(0.0));
  }
  Matrix moved = x.value();
  moved.row(3) += oracle::random_matrix(1, 4, rng, 10.0);
  moved.row(4).setConstant(-3.0);
  const Matrix z = j_transformer(Tensor::constant(moved), valid, layers, AttentionScale::kModelDim).value();
  CHECK(oracle::max_abs_diff(z.topRows(3), y.value().topRows(3)) <= 1e-12);
}

TEST_CASE("padded steps do not change valid outputs") {
  std::mt19937_64 rng(54);
  ParameterStore store;
  const auto layers = make_layers(store, 2, 4, rng);
  const Matrix x = oracle::random_matrix(3, 4, rng);
  Matrix padded = Matrix::Zero(6, 4);
  padded.topRows(3) = x;
  padded.bottomRows(3) = oracle::random_matrix(3, 4, rng, 5.0);
  const Matrix a = j_transformer(Tensor::constant(x), {true, true, true}, layers, AttentionScale::kModelDim).value();
  const Matrix b = j_transformer(Tensor::constant(padded), {true, true, true, false, false, false}, layers,
                                 AttentionScale::kModelDim).value();
  CHECK(oracle::max_abs_diff(a, b.topRows(3)) < 1e-14);
}

TEST_CASE("journey transformer gradients") {
  std::mt19937_64 rng(55);
  ParameterStore store;
  const auto layers = make_layers(store, 2, 4, rng);
  Tensor x = Tensor::parameter(oracle::random_matrix(3, 4, rng));
  const Matrix probe = oracle::random_matrix(3, 4, rng);
  std::vector<Tensor> params = store.tensors();
  params.push_back(x);
  auto build = [&] {
    return sum(mul(j_transformer(x, {true, true, true}, layers, AttentionScale::kModelDim), Tensor::constant(probe)));
  };
  CHECK(grad_check(build, params, 1e-6) < 1e-7);
}

TEST_CASE("prediction head") {
  std::mt19937_64 rng(56);
  ParameterStore store;
  auto head = PredictionHead::create(store, "h", 4, 5, rng);
  Tensor x = Tensor::constant(oracle::random_matrix(2, 4, rng));
  head.weight.mutable_value().setZero();
  head.bias.mutable_value().setZero();
  CHECK(predict_next(x, head, HeadActivation::kSoftmax).probs.value().isApproxToConstant(0.2, 1e-15));

  jitter(store, rng);
  const auto p = predict_next(x, head, HeadActivation::kSoftmax);
  const Matrix logits = oracle::matmul(x.value(), head.weight.value()) + head.bias.value().replicate(2, 1);
  CHECK(oracle::max_abs_diff(p.logits.value(), logits) < 1e-14);
  for (Index r = 0; r < 2; ++r) {
    const auto want = oracle::softmax({logits(r, 0), logits(r, 1), logits(r, 2), logits(r, 3), logits(r, 4)},
                                      std::vector<bool>(5, true));
    for (Index c = 0; c < 5; ++c) CHECK(p.probs.value()(r, c) == doctest::Approx(want[c]).epsilon(1e-14));
  }
  const Matrix s = predict_next(x, head, HeadActivation::kSigmoid).probs.value();
  CHECK(s(1, 2) == doctest::Approx(1.0 / (1.0 + std::exp(-logits(1, 2)))));

  ParameterStore two;
  auto pair = PredictionHead::create(two, "h", 4, 2, rng);
  pair.weight.mutable_value().setZero();
  const Matrix half = predict_next(x, pair, HeadActivation::kSoftmax).probs.value();
  CHECK(half(0, 0) == 0.5);
  CHECK(half(0, 1) == 0.5);
}

TEST_CASE("sequence loss closed forms") {
  Matrix p(1, 2), y(1, 2);
  p << 0.5, 0.5;
  y << 1, 0;
  CHECK(sequence_loss(Tensor::constant(p), y, {true}).item() == doctest::Approx(1.3862943611198906).epsilon(1e-15));
  Matrix q(1, 3), z(1, 3);
  q << 1.0, 0.0, 1.0;
  z << 1, 0, 1;
  CHECK(sequence_loss(Tensor::constant(q), z, {true}).item() < 1e-9);
  CHECK(std::isfinite(sequence_loss(Tensor::constant(q), Matrix::Ones(1, 3) - z, {true}).item()));
}

TEST_CASE("sequence loss matches the scalar double loop") {
  std::mt19937_64 rng(57);
  for (int trial = 0; trial < 100; ++trial) {
    const Index T = 2 + trial % 3;
    Matrix probs = oracle::random_matrix(T, 3, rng).array().abs();
    probs = (probs.array() + 1e-3).matrix();
    for (Index r = 0; r < T; ++r) probs.row(r) /= probs.row(r).sum();
    const Matrix y = random_labels(T, 3, rng);
    std::vector<bool> valid(T, true);
    if (T > 2) valid.back() = false;
    const double got = sequence_loss(Tensor::constant(probs), y, valid).item();
    CHECK(got == doctest::Approx(oracle::sequence_loss(probs, y, valid)).epsilon(1e-12));
  }
}

TEST_CASE("masked steps get exactly zero gradient") {
  std::mt19937_64 rng(58);
  Tensor logits = Tensor::parameter(oracle::random_matrix(3, 4, rng));
  const Matrix y = random_labels(3, 4, rng);
  logits.zero_grad();
  backward(sequence_loss(softmax_rows(logits), y, {true, true, false}));
  CHECK(logits.grad().row(2).isZero(0.0));
  CHECK_FALSE(logits.grad().row(1).isZero(0.0));
}

TEST_CASE("accuracy at k by hand") {
  Matrix logits(1, 6), y(1, 6);
  logits << 6, 5, 4, 3, 2, 1;
  y << 1, 1, 0, 0, 0, 0;
  CHECK(accuracy_at_k(logits, y, 2) == 1.0);
  y << 1, 0, 0, 0, 0, 1;
  CHECK(accuracy_at_k(logits, y, 5) == 0.5);
  // Ties go to the lower id.
  Matrix flat = Matrix::Zero(1, 3), pos(1, 3);
  pos << 0, 0, 1;
  CHECK(accuracy_at_k(flat, pos, 2) == 0.0);
  CHECK(rank_categories(RowVector::Zero(3)) == std::vector<int>{0, 1, 2});
  CHECK_THROWS(accuracy_at_k(flat, Matrix::Zero(1, 3), 1));
  CHECK_THROWS(accuracy_at_k(flat, pos, 0));
}

TEST_CASE("accuracy at k equals the exhaustive sort oracle") {
  std::mt19937_64 rng(59);
  const Index C = 12;
  Matrix logits = oracle::random_matrix(1000, C, rng);
  // Coarse values force plenty of ties.
  for (Index r = 0; r < 500; ++r) logits.row(r) = (logits.row(r) * 3).array().round();
  const Matrix y = random_labels(1000, C, rng);
  double previous = 0;
  for (int k = 1; k <= C; ++k) {
    const double got = accuracy_at_k(logits, y, k);
    CHECK(got == doctest::Approx(oracle::accuracy_at_k(logits, y, k)).epsilon(1e-14));
    CHECK(got >= previous);
    previous = got;
  }
  CHECK(accuracy_at_k(logits, y, static_cast<int>(C)) == 1.0);
  CHECK(accuracy_at_k(logits, y, 100) == 1.0);
}

TEST_CASE("best constant accuracy equals exhaustive subset search") {
  std::mt19937_64 rng(60);
  const Index C = 7;
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix y = random_labels(40, C, rng);
    for (int k = 1; k <= 4; ++k) {
      double best = 0;
      for (unsigned mask = 0; mask < (1u << C); ++mask) {
        if (__builtin_popcount(mask) != k) continue;
        Matrix scores = Matrix::Zero(40, C);
        for (Index c = 0; c < C; ++c) scores.col(c).setConstant((mask >> c) & 1u ? 1.0 : 0.0);
        best = std::max(best, oracle::accuracy_at_k(scores, y, k));
      }
      CHECK(best_constant_accuracy(y, k) == doctest::Approx(best).epsilon(1e-12));
    }
  }
}
