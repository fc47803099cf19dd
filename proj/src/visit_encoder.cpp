#include "setor/visit_encoder.hpp"

#include <algorithm>

namespace setor {

PoolParams PoolParams::create(ParameterStore& store, const std::string& prefix, Index d, Index p,
                              std::mt19937_64& rng) {
  PoolParams out;
  out.hidden = store.uniform(prefix + ".hidden", d, p, glorot_bound(d, p), rng);
  out.hidden_bias = store.zeros(prefix + ".hidden_bias", 1, p);
  out.score = store.uniform(prefix + ".score", p, 1, glorot_bound(p, 1), rng);
  out.score_bias = store.zeros(prefix + ".score_bias", 1, 1);
  return out;
}

EncoderParams EncoderParams::create(ParameterStore& store, const std::string& prefix, Index d, int heads,
                                    Index pool_hidden, std::mt19937_64& rng) {
  EncoderParams out;
  out.code_attention = MultiHeadParams::create(store, prefix + ".code_attention", d, heads, rng);
  out.node_attention = MultiHeadParams::create(store, prefix + ".node_attention", d, heads, rng);
  out.code_mix = store.uniform(prefix + ".code_mix", d, d, glorot_bound(d, d), rng);
  out.node_mix = store.uniform(prefix + ".node_mix", d, d, glorot_bound(d, d), rng);
  out.mix_bias = store.zeros(prefix + ".mix_bias", 1, d);
  out.norm = LayerNormParams::create(store, prefix + ".norm", d);
  out.pool = PoolParams::create(store, prefix + ".pool", d, pool_hidden, rng);
  return out;
}

Tensor encode_visit(const VisitInput& visit, const EncoderParams& params, AttentionScale scale,
                    const Dropout& dropout) {
  const Index n = visit.code_rows.rows();
  if (static_cast<Index>(visit.valid.size()) != n) {
    throw ShapeError("encode_visit", "valid flags do not match " + std::to_string(n) + " code rows");
  }
  const Mask allowed = key_padding_mask(visit.valid, n);
  const auto& codes = visit.code_rows;
  Tensor v_code = multi_head_attention(codes, codes, codes, allowed, params.code_attention, scale, dropout).out;
  if (!visit.node_rows.defined()) {
    Tensor hidden = relu(add(matmul(v_code, params.code_mix), params.mix_bias));
    return params.norm(add(hidden, v_code));
  }
  if (visit.node_rows.rows() != n) throw ShapeError("encode_visit", "code and node rows are not aligned");
  const auto& nodes = visit.node_rows;
  Tensor v_node = multi_head_attention(nodes, nodes, nodes, allowed, params.node_attention, scale, dropout).out;
  Tensor hidden =
      relu(add(add(matmul(v_code, params.code_mix), matmul(v_node, params.node_mix)), params.mix_bias));
  return params.norm(add(add(hidden, v_code), v_node));
}

PoolResult attention_pool(const Tensor& rows, const std::vector<bool>& valid, const PoolParams& params) {
  const Index n = rows.rows();
  if (static_cast<Index>(valid.size()) != n) throw ShapeError("attention_pool", "valid flags do not match rows");
  if (std::none_of(valid.begin(), valid.end(), [](bool b) { return b; })) {
    throw ShapeError("attention_pool", "every row is masked");
  }
  Tensor hidden = relu(add(matmul(rows, params.hidden), params.hidden_bias));
  Tensor scores = add(matmul(hidden, params.score), params.score_bias);  // n x 1
  Mask allowed(1, n);
  for (Index i = 0; i < n; ++i) allowed(0, i) = valid[i];
  Tensor alpha = softmax_rows(transpose(scores), allowed);
  return {matmul(alpha, rows), alpha.value()};
}

}  // namespace setor
