#pragma once

#include "setor/attention.hpp"
#include "setor/ehr_data.hpp"
#include "setor/journey.hpp"
#include "setor/ode.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace setor {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AblationFlags {
  bool wo_j_trans = false;
  bool wo_ontology = false;
  bool wo_los = false;
  bool wo_interval = false;
  bool wo_ode = false;
};

struct ModelConfig {
  int d = 200;
  int heads = 4;
  int layers = 2;
  int d_ff = 0;  // 0 means 4d
  double dropout = 0.1;
  HeadActivation head_activation = HeadActivation::kSoftmax;
  AttentionScale attention_scale = AttentionScale::kModelDim;
  int ontology_attention_dim = 0;  // 0 means d
  int pool_hidden = 0;             // 0 means d
  int max_journey_length = 16;
  bool interval_affine_init = false;
  double ode_output_scale = 0.1;  // W2 of both ODE functions starts at this fraction of the Glorot bound
  double interval_decay = 0.05;   // > 0: interval W2 starts at -interval_decay * W1^T (contracting flow)

  int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d; }
  int ontology_dim() const { return ontology_attention_dim > 0 ? ontology_attention_dim : d; }
  int pool_dim() const { return pool_hidden > 0 ? pool_hidden : d; }
};

struct TrainConfig {
  int batch_size = 32;
  int epochs = 100;
  double train_fraction = 0.8;
  double adadelta_rho = 0.95;
  double adadelta_eps = 1e-6;
  double learning_rate = 1.0;
  std::uint64_t seed = 1;
  std::vector<int> eval_ks = {5, 10, 20, 30};
};

/// Empty paths mean "generate in memory from `generator` and `data_seed`".
struct DataConfig {
  std::string corpus;
  std::string ontology;
  std::string grouper;
  std::string ground_truth;
  std::uint64_t data_seed = 7;
};

struct RunConfig {
  ModelConfig model;
  SolverConfig solver;
  AblationFlags ablation;
  TrainConfig train;
  DataConfig data;
  GeneratorParams generator;
  std::string output_dir;

  /// Throws ConfigError on invariant violations (d % heads, ablation overlap, ...).
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);

/// Overlays `j` on the defaults; unknown keys and mistyped values are errors.
RunConfig config_from_json(const nlohmann::json& j);

/// Reads a JSON config file; relative data paths resolve against its directory.
RunConfig load_config(const std::filesystem::path& path);

/// Applies "section.key=value" overrides. Values parse as JSON, falling back to a string.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides);

/// Hex digest of the canonical JSON dump (FNV-1a 64).
std::string config_hash(const RunConfig& cfg);

}  // namespace setor
