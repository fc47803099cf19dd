#include "oracles.hpp"
#include "setor/attention.hpp"
#include "setor/visit_encoder.hpp"

#include <doctest.h>

using namespace setor;

namespace {

// Every parameter redrawn so that biases and gains are not at their init values.
void jitter(ParameterStore& store, std::mt19937_64& rng, double scale = 0.5) {
  for (auto& t : store.tensors()) t.mutable_value() = oracle::random_matrix(t.rows(), t.cols(), rng, scale);
}

oracle::Mha to_oracle(const MultiHeadParams& p) {
  return {p.query.value(), p.key.value(), p.value.value(), p.output.value(), p.heads};
}

oracle::Encoder to_oracle(const EncoderParams& p) {
  return {to_oracle(p.code_attention), to_oracle(p.node_attention), p.code_mix.value(), p.node_mix.value(),
          p.mix_bias.value(),          p.norm.gain.value(),         p.norm.bias.value()};
}

std::vector<std::vector<bool>> to_rows(const Mask& m) {
  std::vector<std::vector<bool>> out(m.rows(), std::vector<bool>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  }
  return out;
}

}  // namespace

TEST_CASE("multi-head attention matches the scalar oracle") {
  std::mt19937_64 rng(21);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int heads = 1 + trial % 2;
    const Index d = 4;
    const Index nq = 1 + trial % 4;
    const Index nk = 1 + (trial / 4) % 4;
    ParameterStore store;
    const auto p = MultiHeadParams::create(store, "mha", d, heads, rng);
    jitter(store, rng);
    const Matrix q = oracle::random_matrix(nq, d, rng);
    const Matrix kv = oracle::random_matrix(nk, d, rng);
    std::vector<bool> valid(nk, true);
    if (nk > 1) valid[rng() % nk] = false;
    const Mask allowed = key_padding_mask(valid, nq);
    const auto scale = trial % 3 == 0 ? AttentionScale::kKeyDim : AttentionScale::kModelDim;
    const auto got = multi_head_attention(Tensor::constant(q), Tensor::constant(kv), Tensor::constant(kv), allowed, p,
                                          scale);
    const Matrix want = oracle::multi_head_attention(q, kv, kv, to_oracle(p), to_rows(allowed),
                                                     scale == AttentionScale::kModelDim);
    worst = std::max(worst, oracle::max_abs_diff(got.out.value(), want));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("attention over a single code has weight one") {
  std::mt19937_64 rng(22);
  ParameterStore store;
  const auto p = MultiHeadParams::create(store, "mha", 4, 2, rng);
  jitter(store, rng, 3.0);
  Tensor x = Tensor::constant(oracle::random_matrix(1, 4, rng));
  const auto r = multi_head_attention(x, x, x, key_padding_mask({true}, 1), p, AttentionScale::kModelDim);
  for (const auto& w : r.weights) CHECK(w(0, 0) == 1.0);
}

TEST_CASE("identical codes give identical attention rows") {
  std::mt19937_64 rng(23);
  ParameterStore store;
  const auto p = MultiHeadParams::create(store, "mha", 4, 2, rng);
  Matrix x = oracle::random_matrix(3, 4, rng);
  x.row(2) = x.row(0);
  Tensor t = Tensor::constant(x);
  const auto r = multi_head_attention(t, t, t, key_padding_mask({true, true, true}, 3), p, AttentionScale::kModelDim);
  CHECK(r.out.value().row(0) == r.out.value().row(2));
  for (const auto& w : r.weights) CHECK(w.row(0) == w.row(2));
}

TEST_CASE("causal mask shape") {
  const Mask m = causal_mask({true, false, true});
  CHECK(m(0, 0));
  CHECK_FALSE(m(0, 1));
  CHECK_FALSE(m(2, 1));
  CHECK(m(2, 0));
  CHECK(m(2, 2));
  CHECK_FALSE(m(1, 2));
}

TEST_CASE("encode_visit matches the scalar oracle") {
  std::mt19937_64 rng(24);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + trial % 4;
    const Index d = 4;
    ParameterStore store;
    const auto p = EncoderParams::create(store, "enc", d, 2, 3, rng);
    jitter(store, rng);
    const Matrix M = oracle::random_matrix(n, d, rng);
    const Matrix G = oracle::random_matrix(n, d, rng);
    const bool with_nodes = trial % 5 != 0;
    VisitInput input{Tensor::constant(M), with_nodes ? Tensor::constant(G) : Tensor{}, std::vector<bool>(n, true)};
    const Matrix got = encode_visit(input, p, AttentionScale::kModelDim).value();
    worst = std::max(worst, oracle::max_abs_diff(got, oracle::encode_visit(M, G, to_oracle(p), with_nodes)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("zero integration weights with a negative bias leave LN(V_M + V_G)") {
  std::mt19937_64 rng(25);
  ParameterStore store;
  auto p = EncoderParams::create(store, "enc", 4, 2, 3, rng);
  p.code_mix.mutable_value().setZero();
  p.node_mix.mutable_value().setZero();
  p.mix_bias.mutable_value().setConstant(-0.5);
  const Matrix M = oracle::random_matrix(3, 4, rng);
  const Matrix G = oracle::random_matrix(3, 4, rng);
  VisitInput input{Tensor::constant(M), Tensor::constant(G), {true, true, true}};
  const Matrix got = encode_visit(input, p, AttentionScale::kModelDim).value();
  const auto all = key_padding_mask({true, true, true}, 3);
  const Matrix vm = multi_head_attention(input.code_rows, input.code_rows, input.code_rows, all, p.code_attention,
                                         AttentionScale::kModelDim).out.value();
  const Matrix vg = multi_head_attention(input.node_rows, input.node_rows, input.node_rows, all, p.node_attention,
                                         AttentionScale::kModelDim).out.value();
  const Matrix want = oracle::layer_norm(vm + vg, p.norm.gain.value(), p.norm.bias.value());
  CHECK(oracle::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("without node rows the node attention is never touched") {
  std::mt19937_64 rng(26);
  ParameterStore store;
  const auto p = EncoderParams::create(store, "enc", 4, 2, 3, rng);
  VisitInput input{Tensor::constant(oracle::random_matrix(3, 4, rng)), {}, {true, true, true}};
  store.zero_grad();
  backward(sum(encode_visit(input, p, AttentionScale::kModelDim)));
  for (const auto& t : store.group("enc.node_attention.")) CHECK(t.grad().isZero(0.0));
  CHECK(p.node_mix.grad().isZero(0.0));
  CHECK_FALSE(p.code_mix.grad().isZero(0.0));
}

TEST_CASE("padded code rows do not influence valid outputs") {
  std::mt19937_64 rng(27);
  ParameterStore store;
  const auto p = EncoderParams::create(store, "enc", 4, 2, 3, rng);
  jitter(store, rng);
  Matrix M = oracle::random_matrix(4, 4, rng);
  Matrix G = oracle::random_matrix(4, 4, rng);
  const std::vector<bool> valid{true, true, false, true};
  auto run = [&] {
    VisitInput input{Tensor::constant(M), Tensor::constant(G), valid};
    return attention_pool(encode_visit(input, p, AttentionScale::kModelDim), valid, p.pool);
  };
  const auto a = run();
  M.row(2).setConstant(100.0);
  G.row(2).setConstant(-7.0);
  const auto b = run();
  CHECK(a.alpha(0, 2) == 0.0);
  CHECK(oracle::max_abs_diff(a.pooled.value(), b.pooled.value()) < 1e-12);
}

TEST_CASE("attention pooling matches the scalar oracle") {
  std::mt19937_64 rng(28);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + trial % 5;
    ParameterStore store;
    const auto p = PoolParams::create(store, "pool", 4, 3, rng);
    jitter(store, rng);
    const Matrix V = oracle::random_matrix(n, 4, rng);
    const auto got = attention_pool(Tensor::constant(V), std::vector<bool>(n, true), p);
    const Matrix want =
        oracle::attention_pool(V, p.hidden.value(), p.hidden_bias.value(), p.score.value(), p.score_bias.value()(0, 0));
    worst = std::max(worst, oracle::max_abs_diff(got.pooled.value(), want));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("pooling a single row or identical rows returns that row") {
  std::mt19937_64 rng(29);
  ParameterStore store;
  const auto p = PoolParams::create(store, "pool", 4, 3, rng);
  const Matrix one = oracle::random_matrix(1, 4, rng);
  CHECK(attention_pool(Tensor::constant(one), {true}, p).pooled.value() == one);
  const Matrix same = one.replicate(3, 1);
  CHECK(oracle::max_abs_diff(attention_pool(Tensor::constant(same), {true, true, true}, p).pooled.value(), one) <
        1e-15);
  CHECK_THROWS(attention_pool(Tensor::constant(same), {false, false, false}, p));
}

TEST_CASE("encoder and pooling gradients") {
  std::mt19937_64 rng(30);
  ParameterStore store;
  const auto p = EncoderParams::create(store, "enc", 4, 2, 3, rng);
  jitter(store, rng);
  Tensor M = Tensor::parameter(oracle::random_matrix(3, 4, rng));
  Tensor G = Tensor::parameter(oracle::random_matrix(3, 4, rng));
  const Matrix probe = oracle::random_matrix(1, 4, rng);
  auto build = [&] {
    VisitInput input{M, G, {true, true, true}};
    return sum(mul(attention_pool(encode_visit(input, p, AttentionScale::kModelDim), input.valid, p.pool).pooled,
                   Tensor::constant(probe)));
  };
  std::vector<Tensor> params = store.tensors();
  params.push_back(M);
  params.push_back(G);
  CHECK(grad_check(build, params, 1e-6) < 1e-7);
}
