#pragma once

#include "setor/attention.hpp"

#include <vector>

namespace setor {

/// One post-norm transformer layer: x = LN(x + MHA(x)); x = LN(x + FFN(x)).
struct JourneyLayer {
  MultiHeadParams attention;
  Tensor ff_in;        // d x d_ff
  Tensor ff_in_bias;   // 1 x d_ff
  Tensor ff_out;       // d_ff x d
  Tensor ff_out_bias;  // 1 x d
  LayerNormParams attention_norm;
  LayerNormParams ff_norm;

  static JourneyLayer create(ParameterStore& store, const std::string& prefix, Index d, int heads, Index d_ff,
                             std::mt19937_64& rng);
};

/// Causal journey transformer over fused visit vectors (rows). Row t attends
/// to rows <= t that are marked valid. Dropout hits attention weights and
/// the feed-forward output of every layer.
Tensor j_transformer(const Tensor& visits, const std::vector<bool>& valid, std::span<const JourneyLayer> layers,
                     AttentionScale scale, const Dropout& dropout = {});

enum class HeadActivation { kSoftmax, kSigmoid };

struct PredictionHead {
  Tensor weight;  // d x categories
  Tensor bias;    // 1 x categories

  static PredictionHead create(ParameterStore& store, const std::string& prefix, Index d, Index categories,
                               std::mt19937_64& rng);
  Index categories() const { return weight.cols(); }
};

struct Prediction {
  Tensor logits;  // rows x categories
  Tensor probs;
};

/// Next-visit scores for every row of `contextual`.
Prediction predict_next(const Tensor& contextual, const PredictionHead& head, HeadActivation activation);

inline constexpr double kProbabilityClamp = 1e-12;

/// Mean over valid steps of sum_c -(y log p + (1 - y) log(1 - p)), with p
/// clamped to [1e-12, 1 - 1e-12].
Tensor sequence_loss(const Tensor& probs, const Matrix& labels, const std::vector<bool>& step_valid);

/// Per-row ratio of positives ranked in the top k (ties go to the lower
/// category id), averaged over rows.
double accuracy_at_k(const Matrix& logits, const Matrix& labels, int k);

/// Same ratios, one per row.
std::vector<double> accuracy_ratios(const Matrix& logits, const Matrix& labels, int k);

/// Category ordering used by accuracy_at_k: descending score, ascending id.
std::vector<int> rank_categories(const Eigen::Ref<const RowVector>& scores);

/// Best accuracy any fixed (history-free) top-k category set achieves on
/// `labels`, chosen in hindsight.
double best_constant_accuracy(const Matrix& labels, int k);

}  // namespace setor
