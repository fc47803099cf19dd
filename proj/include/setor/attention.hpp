#pragma once

#include "setor/parameters.hpp"
#include "setor/tensor.hpp"

#include <string>

namespace setor {

/// Divisor under the attention logits: sqrt(d) or sqrt(d / heads).
enum class AttentionScale { kModelDim, kKeyDim };

/// One multi-head attention block. Each projection is d x d; head i reads
/// columns [i*d_k, (i+1)*d_k), which is the same as a per-head d x d_k matrix.
struct MultiHeadParams {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor output;
  int heads = 1;

  Index model_dim() const { return query.rows(); }
  Index key_dim() const { return query.rows() / heads; }

  static MultiHeadParams create(ParameterStore& store, const std::string& prefix, Index d, int heads,
                                std::mt19937_64& rng);
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams create(ParameterStore& store, const std::string& prefix, Index d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct AttentionResult {
  Tensor out;                  // n_q x d
  std::vector<Matrix> weights;  // one n_q x n_k matrix per head
};

/// Concat_i(softmax(Q Wq_i (K Wk_i)^T / s) V Wv_i) Wo. Disallowed (query, key)
/// pairs get zero weight; a query row with no allowed key is an error.
AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask& allowed,
                                     const MultiHeadParams& params, AttentionScale scale,
                                     const Dropout& dropout = {});

/// allowed(i, j) = key_valid[j]
Mask key_padding_mask(const std::vector<bool>& key_valid, Index queries);

/// allowed(i, j) = j <= i && valid[j]
Mask causal_mask(const std::vector<bool>& valid);

/// Xavier-style uniform bound for a fan_in x fan_out weight.
double glorot_bound(Index fan_in, Index fan_out);

}  // namespace setor
