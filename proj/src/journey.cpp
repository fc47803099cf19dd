#include "setor/journey.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace setor {

JourneyLayer JourneyLayer::create(ParameterStore& store, const std::string& prefix, Index d, int heads, Index d_ff,
                                  std::mt19937_64& rng) {
  JourneyLayer layer;
  layer.attention = MultiHeadParams::create(store, prefix + ".attention", d, heads, rng);
  layer.ff_in = store.uniform(prefix + ".ff_in", d, d_ff, glorot_bound(d, d_ff), rng);
  layer.ff_in_bias = store.zeros(prefix + ".ff_in_bias", 1, d_ff);
  layer.ff_out = store.uniform(prefix + ".ff_out", d_ff, d, glorot_bound(d_ff, d), rng);
  layer.ff_out_bias = store.zeros(prefix + ".ff_out_bias", 1, d);
  layer.attention_norm = LayerNormParams::create(store, prefix + ".attention_norm", d);
  layer.ff_norm = LayerNormParams::create(store, prefix + ".ff_norm", d);
  return layer;
}

Tensor j_transformer(const Tensor& visits, const std::vector<bool>& valid, std::span<const JourneyLayer> layers,
                     AttentionScale scale, const Dropout& dropout) {
  if (visits.rows() == 0 || std::none_of(valid.begin(), valid.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("j_transformer: journey has no valid visit");
  }
  if (static_cast<Index>(valid.size()) != visits.rows()) {
    throw ShapeError("j_transformer", "valid flags do not match visit rows");
  }
  // A leading padded row would have nothing to attend to; let padded rows see
  // themselves so the layer stays defined. Valid rows never attend to them.
  Mask allowed = causal_mask(valid);
  for (Index i = 0; i < allowed.rows(); ++i) {
    if (!valid[i]) allowed(i, i) = true;
  }
  Tensor x = visits;
  for (const auto& layer : layers) {
    Tensor attended = multi_head_attention(x, x, x, allowed, layer.attention, scale, dropout).out;
    x = layer.attention_norm(add(x, attended));
    Tensor hidden = relu(add(matmul(x, layer.ff_in), layer.ff_in_bias));
    Tensor ff = dropout(add(matmul(hidden, layer.ff_out), layer.ff_out_bias));
    x = layer.ff_norm(add(x, ff));
  }
  return x;
}

PredictionHead PredictionHead::create(ParameterStore& store, const std::string& prefix, Index d, Index categories,
                                      std::mt19937_64& rng) {
  return {store.uniform(prefix + ".weight", d, categories, glorot_bound(d, categories), rng),
          store.zeros(prefix + ".bias", 1, categories)};
}

Prediction predict_next(const Tensor& contextual, const PredictionHead& head, HeadActivation activation) {
  Tensor logits = add(matmul(contextual, head.weight), head.bias);
  Tensor probs = activation == HeadActivation::kSoftmax ? softmax_rows(logits) : sigmoid(logits);
  return {logits, probs};
}

Tensor sequence_loss(const Tensor& probs, const Matrix& labels, const std::vector<bool>& step_valid) {
  if (labels.rows() != probs.rows() || labels.cols() != probs.cols()) {
    throw ShapeError("sequence_loss", "labels do not match predictions");
  }
  if (static_cast<Index>(step_valid.size()) != probs.rows()) {
    throw ShapeError("sequence_loss", "step mask does not match predictions");
  }
  const auto steps = std::count(step_valid.begin(), step_valid.end(), true);
  if (steps == 0) throw std::invalid_argument("sequence_loss: no unmasked steps");

  Tensor p = clamp(probs, kProbabilityClamp, 1.0 - kProbabilityClamp);
  Tensor y = Tensor::constant(labels);
  Tensor not_y = Tensor::constant((1.0 - labels.array()).matrix());
  Tensor ll = add(mul(log(p), y), mul(log(affine(p, -1.0, 1.0)), not_y));
  Matrix weights(probs.rows(), 1);
  for (Index t = 0; t < probs.rows(); ++t) weights(t, 0) = step_valid[t] ? -1.0 / static_cast<double>(steps) : 0.0;
  return sum(mul(row_sums(ll), Tensor::constant(std::move(weights))));
}

std::vector<int> rank_categories(const Eigen::Ref<const RowVector>& scores) {
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  return order;
}

std::vector<double> accuracy_ratios(const Matrix& logits, const Matrix& labels, int k) {
  if (k < 1) throw std::invalid_argument("accuracy_at_k: k must be >= 1");
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols()) {
    throw ShapeError("accuracy_at_k", "logits and labels differ in shape");
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(logits.rows()));
  const int top = std::min<int>(k, static_cast<int>(logits.cols()));
  for (Index r = 0; r < logits.rows(); ++r) {
    const double positives = (labels.row(r).array() > 0.5).count();
    if (positives == 0) throw std::invalid_argument("accuracy_at_k: row " + std::to_string(r) + " has no positive label");
    const RowVector row = logits.row(r);
    const auto order = rank_categories(row);
    double hits = 0;
    for (int i = 0; i < top; ++i) hits += labels(r, order[i]) > 0.5 ? 1.0 : 0.0;
    out.push_back(hits / positives);
  }
  return out;
}

double accuracy_at_k(const Matrix& logits, const Matrix& labels, int k) {
  const auto ratios = accuracy_ratios(logits, labels, k);
  if (ratios.empty()) return 0.0;
  return std::accumulate(ratios.begin(), ratios.end(), 0.0) / static_cast<double>(ratios.size());
}

double best_constant_accuracy(const Matrix& labels, int k) {
  // Accuracy of a fixed set S is mean_r sum_{c in S} y_rc / |y_r|, which is
  // additive over c: the best S is the top k of the column sums.
  Matrix weighted = labels;
  for (Index r = 0; r < labels.rows(); ++r) {
    const double positives = (labels.row(r).array() > 0.5).count();
    if (positives == 0) throw std::invalid_argument("best_constant_accuracy: row without positives");
    weighted.row(r) = (labels.row(r).array() > 0.5).cast<double>().matrix() / positives;
  }
  const RowVector mass = weighted.colwise().sum();
  const auto order = rank_categories(mass);
  const int top = std::min<int>(k, static_cast<int>(labels.cols()));
  double total = 0;
  for (int i = 0; i < top; ++i) total += mass(order[i]);
  return labels.rows() > 0 ? total / static_cast<double>(labels.rows()) : 0.0;
}

}  // namespace setor
