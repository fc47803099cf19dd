#pragma once

#include "setor/config.hpp"
#include "setor/ehr_data.hpp"
#include "setor/journey.hpp"
#include "setor/ode.hpp"
#include "setor/ontology.hpp"
#include "setor/parameters.hpp"
#include "setor/visit_encoder.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace setor {

/// How often the optional components ran; lets tests confirm what an ablation removed.
struct ModelCounters {
  long ontology_evaluations = 0;
  long positional_lookups = 0;
  long ode_solves = 0;
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout stream; required when training
  int pad_to = 0;                  // pad the step axis with masked rows up to this length
};

/// Everything one patient's forward pass produces. Step t predicts visit t+1.
struct PatientForward {
  Tensor loss;        // 1 x 1
  Tensor fused;       // steps x d, input to the journey transformer
  Tensor contextual;  // steps x d
  Tensor logits;      // steps x C'
  Matrix labels;      // steps x C'
  std::vector<bool> step_valid;
};

class SetorModel {
 public:
  SetorModel(const ModelConfig& model, const SolverConfig& solver, const AblationFlags& ablation,
             const OntologyDAG& ontology, const Grouper& grouper, std::uint64_t seed);

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const ModelConfig& model_config() const { return model_; }
  const AblationFlags& ablation() const { return ablation_; }
  const Grouper& grouper() const { return grouper_; }
  int categories() const { return grouper_.category_count; }
  ModelCounters& counters() { return counters_; }

  /// Code embedding table M (leaf_count x d).
  const Tensor& code_embeddings() const { return code_table_; }
  /// Ontological embedding G; undefined when the ontology is ablated.
  /// Compute once per minibatch and pass to every forward call.
  Tensor ontology_embeddings();

  PatientForward forward(const PatientJourney& journey, const Tensor& g, const ForwardOptions& options);

  /// Mean over patients of each patient's loss, sharing one G evaluation.
  Tensor batch_loss(std::span<const PatientJourney* const> batch, const ForwardOptions& options);

 private:
  Tensor visit_vector(const Visit& visit, const Tensor& g, const Dropout& dropout);

  ModelConfig model_;
  SolverConfig solver_;
  AblationFlags ablation_;
  Grouper grouper_;
  std::optional<AncestorTable> ancestors_;
  ParameterStore store_;
  ModelCounters counters_;

  Tensor basic_table_;  // E over leaves then ancestors
  Tensor code_table_;   // M
  OntologyAttention ontology_attention_;
  EncoderParams encoder_;
  OdeFunc los_ode_;
  OdeFunc interval_ode_;
  Tensor interval_init_weight_;
  Tensor interval_init_bias_;
  LayerNormParams fuse_norm_;
  PositionTable positions_;
  std::vector<JourneyLayer> layers_;
  PredictionHead head_;
};

/// Coarse parameter family of a parameter name, used when reporting gradient checks.
std::string parameter_group(const std::string& name);

}  // namespace setor
