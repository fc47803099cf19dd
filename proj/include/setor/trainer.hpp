#pragma once

#include "setor/config.hpp"
#include "setor/ehr_data.hpp"
#include "setor/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace setor {

struct Dataset {
  OntologyDAG ontology;
  Grouper grouper;
  Corpus patients;
  std::optional<GroundTruth> truth;
};

/// Reads the configured files, or generates the corpus in memory when no
/// paths are set. Journeys are truncated to model.max_journey_length.
Dataset load_dataset(const RunConfig& cfg);

struct Metrics {
  std::string split;
  std::vector<int> ks;
  std::vector<double> accuracy;  // one per k
  double loss = 0;               // mean over patients
  long patients = 0;
  long steps = 0;
};

nlohmann::json to_json(const Metrics& m);

/// Dropout off, no parameter updates.
Metrics evaluate(SetorModel& model, const Corpus& corpus, std::span<const int> ks, const std::string& split);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  Metrics valid;
};

/// Reference points on the test split: the best fixed top-k category set and,
/// for generated data, the Bayes oracle.
struct Baselines {
  std::vector<double> constant;
  std::vector<double> oracle;  // empty without a ground truth
};

struct TrainReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t train_patients = 0;
  std::size_t valid_patients = 0;
  std::size_t test_patients = 0;
  std::size_t parameter_count = 0;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  Metrics test;
  Baselines baselines;
  ModelCounters counters;
  std::string checkpoint;
};

nlohmann::json to_json(const TrainReport& r);

struct TrainResult {
  TrainReport report;
  std::unique_ptr<SetorModel> model;  // holds the best-epoch parameters
  CorpusSplit split;
};

/// Minibatch Adadelta with per-epoch validation. The parameters of the best
/// validation epoch are restored before the single test evaluation. With a
/// non-empty `output_dir` the best checkpoint and report.json are written there.
TrainResult train(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& output_dir = {});

/// The split a config trains on.
CorpusSplit config_split(const RunConfig& cfg, const Dataset& data);

/// Rebuilds the model for `cfg`, loads `checkpoint` and scores one split
/// ("train", "valid" or "test").
Metrics evaluate_checkpoint(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& checkpoint,
                            const std::string& split);

/// The full model followed by the five single-component ablations.
std::vector<std::pair<std::string, AblationFlags>> ablation_variants();

struct AblationRow {
  std::string variant;
  TrainReport report;
};

/// Trains every variant on the same corpus, split and seed.
std::vector<AblationRow> ablate(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& output_dir = {});

std::string format_ablation_table(const std::vector<AblationRow>& rows);

struct GradcheckResult {
  std::map<std::string, double> group_error;  // max relative error per parameter group
  double max_error = 0;
};

/// Finite-difference check of the whole pipeline on a two-patient,
/// three-visit toy batch (d = 8, two heads, one journey layer, no dropout).
GradcheckResult pipeline_gradcheck(std::uint64_t seed, const SolverConfig& solver = {}, double fd_step = 1e-6);

}  // namespace setor
