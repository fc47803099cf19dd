#pragma once

#include "setor/attention.hpp"

#include <vector>

namespace setor {

struct PoolParams {
  Tensor hidden;       // d x p
  Tensor hidden_bias;  // 1 x p
  Tensor score;        // p x 1
  Tensor score_bias;   // 1 x 1

  static PoolParams create(ParameterStore& store, const std::string& prefix, Index d, Index p,
                           std::mt19937_64& rng);
};

/// Dual self-attention over the code-embedding and ontology-embedding views
/// of one visit, fused by a ReLU integration layer.
struct EncoderParams {
  MultiHeadParams code_attention;
  MultiHeadParams node_attention;
  Tensor code_mix;  // d x d
  Tensor node_mix;  // d x d
  Tensor mix_bias;  // 1 x d
  LayerNormParams norm;
  PoolParams pool;

  static EncoderParams create(ParameterStore& store, const std::string& prefix, Index d, int heads,
                              Index pool_hidden, std::mt19937_64& rng);
};

/// One visit: rows are code positions; `valid[i]` is false for padding.
struct VisitInput {
  Tensor code_rows;  // n x d, rows of M
  Tensor node_rows;  // n x d, rows of G; undefined when the ontology is ablated
  std::vector<bool> valid;
};

/// O = LayerNorm(ReLU(V_M W_M + V_G W_G + b) + V_M + V_G). With no node rows
/// every V_G term is dropped.
Tensor encode_visit(const VisitInput& visit, const EncoderParams& params, AttentionScale scale,
                    const Dropout& dropout = {});

struct PoolResult {
  Tensor pooled;  // 1 x d
  Matrix alpha;   // 1 x n, zero on padding
};

/// v = sum_i alpha_i V_i with alpha = softmax over valid rows of
/// relu(V_i W1 + b1) w + b.
PoolResult attention_pool(const Tensor& rows, const std::vector<bool>& valid, const PoolParams& params);

}  // namespace setor
