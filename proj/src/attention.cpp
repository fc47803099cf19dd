#include "setor/attention.hpp"

#include <cmath>

namespace setor {

double glorot_bound(Index fan_in, Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

MultiHeadParams MultiHeadParams::create(ParameterStore& store, const std::string& prefix, Index d, int heads,
                                        std::mt19937_64& rng) {
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("multi_head_attention", "d=" + std::to_string(d) + " not divisible by heads=" +
                                                 std::to_string(heads));
  }
  const double bound = glorot_bound(d, d);
  MultiHeadParams p;
  p.query = store.uniform(prefix + ".query", d, d, bound, rng);
  p.key = store.uniform(prefix + ".key", d, d, bound, rng);
  p.value = store.uniform(prefix + ".value", d, d, bound, rng);
  p.output = store.uniform(prefix + ".output", d, d, bound, rng);
  p.heads = heads;
  return p;
}

LayerNormParams LayerNormParams::create(ParameterStore& store, const std::string& prefix, Index d) {
  return {store.ones(prefix + ".gain", 1, d), store.zeros(prefix + ".bias", 1, d)};
}

Mask key_padding_mask(const std::vector<bool>& key_valid, Index queries) {
  Mask m(queries, static_cast<Index>(key_valid.size()));
  for (Index i = 0; i < queries; ++i) {
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = key_valid[j];
  }
  return m;
}

Mask causal_mask(const std::vector<bool>& valid) {
  const Index n = static_cast<Index>(valid.size());
  Mask m(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) m(i, j) = j <= i && valid[j];
  }
  return m;
}

AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask& allowed,
                                     const MultiHeadParams& params, AttentionScale scale,
                                     const Dropout& dropout) {
  const Index d = params.model_dim();
  if (q.cols() != d || k.cols() != d || v.cols() != d) {
    throw ShapeError("multi_head_attention", "inputs must have " + std::to_string(d) + " columns");
  }
  if (k.rows() != v.rows()) throw ShapeError("multi_head_attention", "key/value row mismatch");
  if (allowed.rows() != q.rows() || allowed.cols() != k.rows()) {
    throw ShapeError("multi_head_attention", "mask shape does not match queries x keys");
  }
  for (Index i = 0; i < allowed.rows(); ++i) {
    if (!allowed.row(i).any()) {
      throw ShapeError("multi_head_attention", "query row " + std::to_string(i) + " has every key masked");
    }
  }

  const Index dk = params.key_dim();
  const double divisor = std::sqrt(static_cast<double>(scale == AttentionScale::kModelDim ? d : dk));
  Tensor qp = matmul(q, params.query);
  Tensor kp = matmul(k, params.key);
  Tensor vp = matmul(v, params.value);

  AttentionResult result;
  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (int h = 0; h < params.heads; ++h) {
    Tensor qh = slice_cols(qp, h * dk, dk);
    Tensor kh = slice_cols(kp, h * dk, dk);
    Tensor vh = slice_cols(vp, h * dk, dk);
    Tensor logits = affine(matmul(qh, transpose(kh)), 1.0 / divisor, 0.0);
    Tensor weights = softmax_rows(logits, allowed);
    result.weights.push_back(weights.value());
    heads.push_back(matmul(dropout(weights), vh));
  }
  result.out = matmul(concat_cols(heads), params.output);
  return result;
}

}  // namespace setor
