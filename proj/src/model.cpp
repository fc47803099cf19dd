#include "setor/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace setor {

SetorModel::SetorModel(const ModelConfig& model, const SolverConfig& solver, const AblationFlags& ablation,
                       const OntologyDAG& ontology, const Grouper& grouper, std::uint64_t seed)
    : model_(model), solver_(solver), ablation_(ablation), grouper_(grouper) {
  if (static_cast<int>(grouper.category_of.size()) != ontology.leaf_count) {
    throw std::invalid_argument("SetorModel: grouper covers " + std::to_string(grouper.category_of.size()) +
                                " leaves, ontology has " + std::to_string(ontology.leaf_count));
  }
  if (model.d % model.heads != 0) throw std::invalid_argument("SetorModel: d must be divisible by heads");
  std::mt19937_64 rng(seed);
  const Index d = model.d;

  code_table_ = store_.uniform("embedding.M", ontology.leaf_count, d, 0.1, rng);
  if (!ablation.wo_ontology) {
    ancestors_.emplace(ontology);
    basic_table_ = store_.uniform("embedding.E", ontology.node_count(), d, 0.1, rng);
    const Index a = model.ontology_dim();
    ontology_attention_.proj = store_.uniform("ontology.proj", 2 * d, a, glorot_bound(2 * d, a), rng);
    ontology_attention_.bias = store_.zeros("ontology.bias", 1, a);
    ontology_attention_.weight = store_.uniform("ontology.weight", a, 1, glorot_bound(a, 1), rng);
  }
  encoder_ = EncoderParams::create(store_, "encoder", d, model.heads, model.pool_dim(), rng);
  if (ablation.wo_ode) {
    positions_ = PositionTable::create(store_, "positions", model.max_journey_length, d, rng);
  } else {
    if (!ablation.wo_los) los_ode_ = OdeFunc::create(store_, "ode.los", d, rng, model.ode_output_scale);
    if (!ablation.wo_interval) {
      interval_ode_ = OdeFunc::create(store_, "ode.interval", d, rng, model.ode_output_scale, model.interval_decay);
      if (model.interval_affine_init) {
        interval_init_weight_ = store_.zeros("ode.interval_init.weight", d, d);
        interval_init_bias_ = store_.zeros("ode.interval_init.bias", 1, d);
      }
    }
  }
  fuse_norm_ = LayerNormParams::create(store_, "fuse.norm", d);
  if (!ablation.wo_j_trans) {
    for (int l = 0; l < model.layers; ++l) {
      layers_.push_back(JourneyLayer::create(store_, "journey.layer" + std::to_string(l), d, model.heads,
                                             model.ff_dim(), rng));
    }
  }
  head_ = PredictionHead::create(store_, "head", d, grouper.category_count, rng);
}

Tensor SetorModel::ontology_embeddings() {
  if (ablation_.wo_ontology) return {};
  ++counters_.ontology_evaluations;
  return ontological_embedding(basic_table_, ontology_attention_, *ancestors_).g;
}

Tensor SetorModel::visit_vector(const Visit& visit, const Tensor& g, const Dropout& dropout) {
  VisitInput input;
  input.code_rows = gather_rows(code_table_, visit.codes);
  if (g.defined()) input.node_rows = gather_rows(g, visit.codes);
  input.valid.assign(visit.codes.size(), true);
  Tensor encoded = encode_visit(input, encoder_, model_.attention_scale, dropout);
  return attention_pool(encoded, input.valid, encoder_.pool).pooled;
}

PatientForward SetorModel::forward(const PatientJourney& journey, const Tensor& g, const ForwardOptions& options) {
  const auto& visits = journey.visits;
  if (visits.size() < 2) throw std::invalid_argument("forward: a journey needs at least two visits");
  if (!ablation_.wo_ontology && !g.defined()) throw std::invalid_argument("forward: missing ontology embeddings");
  if (options.training && options.rng == nullptr) throw std::invalid_argument("forward: training needs an RNG");
  const int steps = static_cast<int>(visits.size()) - 1;
  const Dropout dropout(model_.dropout, options.training, options.rng);
  const double origin = visits.front().admit_day;

  std::vector<Tensor> pooled;
  pooled.reserve(steps);
  for (int t = 0; t < steps; ++t) pooled.push_back(visit_vector(visits[t], g, dropout));

  Tensor discharge;
  Tensor interval;
  if (ablation_.wo_ode) {
    std::vector<Tensor> rows;
    for (int t = 0; t < steps; ++t) {
      rows.push_back(positional_encoding(positions_, t));
      ++counters_.positional_lookups;
    }
    interval = concat_rows(rows);
  } else {
    if (!ablation_.wo_los) {
      std::vector<Tensor> rows;
      for (int t = 0; t < steps; ++t) {
        rows.push_back(los_state(pooled[t], visits[t].admit_day - origin, visits[t].discharge_day - origin,
                                 los_ode_, solver_));
        ++counters_.ode_solves;
      }
      discharge = concat_rows(rows);
    }
    if (!ablation_.wo_interval) {
      std::vector<double> admits;
      for (int t = 0; t < steps; ++t) admits.push_back(visits[t].admit_day - origin);
      Tensor initial = pooled.front();
      if (interval_init_weight_.defined()) initial = add(matmul(initial, interval_init_weight_), interval_init_bias_);
      interval = interval_states(initial, admits, interval_ode_, solver_);
      ++counters_.ode_solves;
    }
  }
  Tensor fused = fuse(concat_rows(pooled), discharge, interval, fuse_norm_);

  const int rows = std::max(steps, options.pad_to);
  std::vector<bool> valid(rows, false);
  std::fill(valid.begin(), valid.begin() + steps, true);
  if (rows > steps) {
    const Tensor parts[] = {fused, Tensor::constant(Matrix::Zero(rows - steps, model_.d))};
    fused = concat_rows(parts);
  }

  PatientForward out;
  out.fused = fused;
  Tensor x = dropout(fused);
  out.contextual = ablation_.wo_j_trans ? x : j_transformer(x, valid, layers_, model_.attention_scale, dropout);
  const Prediction prediction = predict_next(out.contextual, head_, model_.head_activation);
  out.logits = prediction.logits;
  out.labels = Matrix::Zero(rows, categories());
  for (int t = 0; t < steps; ++t) out.labels.row(t) = group_labels(visits[t + 1].codes, grouper_);
  out.loss = sequence_loss(prediction.probs, out.labels, valid);
  out.step_valid = std::move(valid);
  return out;
}

Tensor SetorModel::batch_loss(std::span<const PatientJourney* const> batch, const ForwardOptions& options) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const Tensor g = ontology_embeddings();
  Tensor total;
  for (const PatientJourney* journey : batch) {
    Tensor loss = forward(*journey, g, options).loss;
    total = total.defined() ? add(total, loss) : loss;
  }
  return affine(total, 1.0 / static_cast<double>(batch.size()), 0.0);
}

std::string parameter_group(const std::string& name) {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (name == "embedding.E") return "E";
  if (name == "embedding.M") return "M";
  if (starts("ontology.")) return "ontology_attention";
  if (starts("encoder.code_attention.")) return "code_attention";
  if (starts("encoder.node_attention.")) return "node_attention";
  if (starts("encoder.pool.")) return "pooling";
  if (starts("encoder.")) return "integration";
  if (starts("ode.los.")) return "los_ode";
  if (starts("ode.interval")) return "interval_ode";
  if (starts("positions.")) return "positions";
  if (starts("fuse.")) return "fuse_norm";
  if (starts("journey.")) return "j_transformer";
  if (starts("head.")) return "head";
  return name;
}

}  // namespace setor
