#pragma once

#include "setor/ontology.hpp"
#include "setor/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <vector>

namespace setor {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Visit {
  double admit_day = 0;
  double discharge_day = 0;
  std::vector<int> codes;  // leaf ids, sorted and distinct

  bool operator==(const Visit&) const = default;
};

struct PatientJourney {
  std::int64_t id = 0;
  std::vector<Visit> visits;

  bool operator==(const PatientJourney&) const = default;
};

using Corpus = std::vector<PatientJourney>;

/// Throws CorpusError unless: >= 2 visits, admit <= discharge <= next admit,
/// every visit has 1..max_codes distinct codes (max_codes <= 0 disables the cap).
void validate_journey(const PatientJourney& journey, int max_codes = 0);

/// Leaf code -> label category.
struct Grouper {
  std::vector<int> category_of;
  int category_count = 0;

  static Grouper from_ontology(const OntologyDAG& dag);
};

/// 0/1 row over categories: the union of the visit's code categories.
RowVector group_labels(std::span<const int> codes, const Grouper& grouper);

/// Generator for the next visit's primary category.
struct GroundTruth {
  Matrix base_kernel;        // L x L, row-stochastic
  Matrix short_stay_kernel;  // used when the current stay is short
  Matrix long_stay_kernel;   // used when the current stay is long
  double los_coupling = 0;
  double interval_coupling = 0;
  double los_median = 3;
  double interval_median = 30;
  double modulation_slope = 3;

  int categories() const { return static_cast<int>(base_kernel.rows()); }

  /// P(next primary | current primary, current stay length, gap preceding the
  /// current visit). The gap is absent for a journey's first visit.
  RowVector next_distribution(int current, double length_of_stay, std::optional<double> preceding_gap) const;
};

struct GeneratorParams {
  int patients = 1000;
  int categories = 20;
  int leaves_per_category = 15;
  int top_level_groups = 18;
  double mean_visits = 3.3;
  double mean_codes_per_visit = 12.0;
  int max_codes_per_visit = 39;
  double background_mean = 0.3;  // extra single-code categories per visit
  double interval_median = 30.0;
  double interval_sigma = 0.8;
  double los_median = 3.0;
  double los_sigma = 0.8;
  double los_coupling = 0.6;
  double interval_coupling = 0.3;
  double kernel_smoothing = 0.1;
  std::vector<double> successor_weights = {0.4, 0.3, 0.2, 0.1};  // likely successors per stay regime
  Matrix kernel;  // optional override of every transition kernel (L x L)
};

struct GeneratedCorpus {
  OntologyDAG ontology;
  Grouper grouper;
  Corpus patients;
  GroundTruth truth;
};

/// Root -> top-level groups -> leaves; category c hangs under group c mod groups.
OntologyDAG make_toy_ontology(int categories, int leaves_per_category, int top_level_groups);

/// Samples a corpus over `ontology`. Each patient draws from its own stream
/// seeded by (seed, patient index), so the result is deterministic.
GeneratedCorpus generate_corpus(const GeneratorParams& params, const OntologyDAG& ontology, std::uint64_t seed);

/// Builds the toy ontology from `params` and samples over it.
GeneratedCorpus generate_corpus(const GeneratorParams& params, std::uint64_t seed);

/// Primary category of a visit: the category with the most codes, ties to the lower id.
int primary_category(std::span<const int> codes, const Grouper& grouper);

/// Accuracy@k of the predictor that ranks categories by the true
/// next-primary probability given the observed history.
double bayes_oracle_accuracy(const Corpus& corpus, const GroundTruth& truth, const Grouper& grouper, int k);

/// Label rows of every predicted step (visits 2..T of each journey).
Matrix next_visit_labels(const Corpus& corpus, const Grouper& grouper);

struct CorpusSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
};

/// Patient-level split: validation is fixed at 10%, training takes
/// `train_fraction`, test gets the rest.
CorpusSplit split_corpus(std::size_t patients, double train_fraction, std::uint64_t seed);

Corpus select(const Corpus& corpus, std::span<const std::size_t> indices);

/// Keeps the most recent `max_visits` visits of each journey.
Corpus truncate_journeys(const Corpus& corpus, int max_visits);

/// One JSON object per line: {"id":..,"visits":[{"admit_day":..,"discharge_day":..,"codes":[..]}]}
void write_corpus(const Corpus& corpus, std::ostream& out);
Corpus read_corpus(std::istream& in);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

/// "leaf_id<TAB>category_id" per line.
void save_grouper(const Grouper& grouper, const std::filesystem::path& path);
Grouper load_grouper(const std::filesystem::path& path);

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path);
GroundTruth load_ground_truth(const std::filesystem::path& path);

}  // namespace setor
