#include "setor/ehr_data.hpp"

#include "setor/journey.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace setor {

using json = nlohmann::json;

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::mt19937_64 stream_for(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kKernelStream = 0xC0FFEEull << 32;

int sample_row(const RowVector& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng) * probs.sum();
  for (Index c = 0; c < probs.size(); ++c) {
    u -= probs(c);
    if (u <= 0.0) return static_cast<int>(c);
  }
  return static_cast<int>(probs.size() - 1);
}

template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> pool, std::size_t count, std::mt19937_64& rng) {
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

GroundTruth make_truth(const GeneratorParams& params, std::uint64_t seed) {
  const int L = params.categories;
  GroundTruth truth;
  truth.los_coupling = params.los_coupling;
  truth.interval_coupling = params.interval_coupling;
  truth.los_median = params.los_median;
  truth.interval_median = params.interval_median;
  if (params.kernel.size() > 0) {
    if (params.kernel.rows() != L || params.kernel.cols() != L) {
      throw CorpusError("kernel override must be " + std::to_string(L) + "x" + std::to_string(L));
    }
    truth.base_kernel = truth.short_stay_kernel = truth.long_stay_kernel = params.kernel;
    return truth;
  }
  // Each category gets a few likely successors after short stays and as many
  // different ones after long stays, plus a uniform floor.
  auto rng = stream_for(seed, kKernelStream);
  std::vector<double> weights = params.successor_weights;
  if (weights.empty()) throw CorpusError("successor_weights must not be empty");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0)) throw CorpusError("successor_weights must be nonnegative");
    total += w;
  }
  if (total <= 0) throw CorpusError("successor_weights must not all be zero");
  for (double& w : weights) w /= total;
  const double floor = params.kernel_smoothing / L;
  truth.short_stay_kernel = Matrix::Constant(L, L, floor);
  truth.long_stay_kernel = Matrix::Constant(L, L, floor);
  std::vector<int> all(L);
  std::iota(all.begin(), all.end(), 0);
  const int per_regime = std::min(static_cast<int>(weights.size()), L / 2);
  for (int c = 0; c < L; ++c) {
    auto successors = sample_without_replacement(all, static_cast<std::size_t>(2 * per_regime), rng);
    for (int j = 0; j < per_regime; ++j) {
      truth.short_stay_kernel(c, successors[j]) += (1.0 - params.kernel_smoothing) * weights[j];
      truth.long_stay_kernel(c, successors[per_regime + j]) += (1.0 - params.kernel_smoothing) * weights[j];
    }
    truth.short_stay_kernel.row(c) /= truth.short_stay_kernel.row(c).sum();
    truth.long_stay_kernel.row(c) /= truth.long_stay_kernel.row(c).sum();
  }
  truth.base_kernel = 0.5 * (truth.short_stay_kernel + truth.long_stay_kernel);
  return truth;
}

int poisson(double mean, std::mt19937_64& rng) {
  if (mean <= 0) return 0;
  std::poisson_distribution<int> dist(mean);
  return dist(rng);
}

}  // namespace

void validate_journey(const PatientJourney& journey, int max_codes) {
  const auto who = "patient " + std::to_string(journey.id);
  if (journey.visits.size() < 2) throw CorpusError(who + ": fewer than two visits");
  for (std::size_t i = 0; i < journey.visits.size(); ++i) {
    const auto& v = journey.visits[i];
    const auto where = who + " visit " + std::to_string(i);
    if (!std::isfinite(v.admit_day) || !std::isfinite(v.discharge_day)) throw CorpusError(where + ": non-finite time");
    if (v.discharge_day < v.admit_day) throw CorpusError(where + ": discharge before admission");
    if (i + 1 < journey.visits.size() && journey.visits[i + 1].admit_day < v.discharge_day) {
      throw CorpusError(where + ": next admission before discharge");
    }
    if (v.codes.empty()) throw CorpusError(where + ": no codes");
    if (max_codes > 0 && static_cast<int>(v.codes.size()) > max_codes) throw CorpusError(where + ": too many codes");
    for (std::size_t c = 0; c < v.codes.size(); ++c) {
      if (v.codes[c] < 0) throw CorpusError(where + ": negative code");
      if (c > 0 && v.codes[c] <= v.codes[c - 1]) throw CorpusError(where + ": codes not sorted and distinct");
    }
  }
}

Grouper Grouper::from_ontology(const OntologyDAG& dag) {
  return {dag.category_of, dag.category_count()};
}

RowVector group_labels(std::span<const int> codes, const Grouper& grouper) {
  RowVector out = RowVector::Zero(grouper.category_count);
  for (int code : codes) {
    if (code < 0 || code >= static_cast<int>(grouper.category_of.size())) {
      throw CorpusError("group_labels: unknown code " + std::to_string(code));
    }
    out(grouper.category_of[code]) = 1.0;
  }
  return out;
}

RowVector GroundTruth::next_distribution(int current, double length_of_stay,
                                         std::optional<double> preceding_gap) const {
  RowVector p = base_kernel.row(current);
  if (los_coupling > 0) {
    const double stay = std::max(length_of_stay, 1e-6);
    const double w = logistic(modulation_slope * (std::log(stay) - std::log(los_median)));
    p = (1.0 - los_coupling) * p +
        los_coupling * (w * long_stay_kernel.row(current) + (1.0 - w) * short_stay_kernel.row(current));
  }
  if (interval_coupling > 0 && preceding_gap) {
    const double gap = std::max(*preceding_gap, 1e-6);
    const double u = interval_coupling * logistic(modulation_slope * (std::log(interval_median) - std::log(gap)));
    p *= (1.0 - u);
    p(current) += u;
  }
  return p;
}

OntologyDAG make_toy_ontology(int categories, int leaves_per_category, int top_level_groups) {
  if (categories <= 0 || leaves_per_category <= 0 || top_level_groups <= 0) {
    throw OntologyError("toy ontology needs positive sizes");
  }
  std::ostringstream text;
  text << "#root\troot\n";
  const int leaves = categories * leaves_per_category;
  for (int i = 0; i < leaves; ++i) {
    const int cat = i / leaves_per_category;
    text << "#leaf\t" << i << "\tcode " << i << " (category " << cat << ")\t" << cat << "\n";
  }
  for (int g = 0; g < top_level_groups; ++g) text << "group" << g << "\troot\n";
  for (int i = 0; i < leaves; ++i) {
    text << i << "\tgroup" << (i / leaves_per_category) % top_level_groups << "\n";
  }
  std::istringstream in(text.str());
  return parse_ontology(in);
}

GeneratedCorpus generate_corpus(const GeneratorParams& params, const OntologyDAG& ontology, std::uint64_t seed) {
  if (ontology.leaf_count == 0) throw CorpusError("generate_corpus: empty ontology");
  if (params.mean_visits < 2.0) throw CorpusError("generate_corpus: mean_visits must be >= 2");
  GeneratedCorpus out;
  out.ontology = ontology;
  out.grouper = Grouper::from_ontology(ontology);
  const int L = out.grouper.category_count;
  GeneratorParams effective = params;
  effective.categories = L;
  out.truth = make_truth(effective, seed);

  std::vector<std::vector<int>> leaves_of(L);
  for (int leaf = 0; leaf < ontology.leaf_count; ++leaf) leaves_of[out.grouper.category_of[leaf]].push_back(leaf);
  for (int c = 0; c < L; ++c) {
    if (leaves_of[c].empty()) throw CorpusError("generate_corpus: category " + std::to_string(c) + " has no leaves");
  }

  const double extra_visits = params.mean_visits - 2.0;
  const double primary_mean = std::max(2.0, params.mean_codes_per_visit - params.background_mean);
  std::lognormal_distribution<double> stay(std::log(params.los_median), params.los_sigma);
  std::lognormal_distribution<double> gap(std::log(params.interval_median), params.interval_sigma);

  out.patients.reserve(params.patients);
  for (int p = 0; p < params.patients; ++p) {
    auto rng = stream_for(seed, static_cast<std::uint64_t>(p));
    int visits = 2;
    if (extra_visits > 0) {
      std::geometric_distribution<int> more(1.0 / (extra_visits + 1.0));
      visits += more(rng);
    }
    PatientJourney journey;
    journey.id = p;
    std::uniform_int_distribution<int> first(0, L - 1);
    int category = first(rng);
    double admit = 0.0;
    std::optional<double> preceding_gap;
    for (int t = 0; t < visits; ++t) {
      Visit v;
      const double los = stay(rng);
      v.admit_day = admit;
      v.discharge_day = admit + los;

      const auto& own = leaves_of[category];
      int background = std::min(poisson(params.background_mean, rng), L - 1);
      if (params.max_codes_per_visit > 0) background = std::min(background, params.max_codes_per_visit - 2);
      background = std::max(background, 0);
      int primary = 2 + poisson(primary_mean - 2.0, rng);
      primary = std::min<int>(primary, static_cast<int>(own.size()));
      if (params.max_codes_per_visit > 0) primary = std::min(primary, params.max_codes_per_visit - background);
      primary = std::max(primary, 1);
      v.codes = sample_without_replacement(own, static_cast<std::size_t>(primary), rng);

      std::vector<int> others;
      for (int c = 0; c < L; ++c) {
        if (c != category) others.push_back(c);
      }
      for (int c : sample_without_replacement(others, static_cast<std::size_t>(background), rng)) {
        std::uniform_int_distribution<std::size_t> pick(0, leaves_of[c].size() - 1);
        v.codes.push_back(leaves_of[c][pick(rng)]);
      }
      std::sort(v.codes.begin(), v.codes.end());
      journey.visits.push_back(std::move(v));

      const RowVector next = out.truth.next_distribution(category, los, preceding_gap);
      category = sample_row(next, rng);
      const double g = gap(rng);
      preceding_gap = g;
      admit = journey.visits.back().discharge_day + g;
    }
    out.patients.push_back(std::move(journey));
  }
  return out;
}

GeneratedCorpus generate_corpus(const GeneratorParams& params, std::uint64_t seed) {
  return generate_corpus(params, make_toy_ontology(params.categories, params.leaves_per_category,
                                                   params.top_level_groups),
                         seed);
}

int primary_category(std::span<const int> codes, const Grouper& grouper) {
  std::vector<int> counts(grouper.category_count, 0);
  for (int code : codes) {
    if (code < 0 || code >= static_cast<int>(grouper.category_of.size())) {
      throw CorpusError("primary_category: unknown code " + std::to_string(code));
    }
    ++counts[grouper.category_of[code]];
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Matrix next_visit_labels(const Corpus& corpus, const Grouper& grouper) {
  std::size_t steps = 0;
  for (const auto& j : corpus) steps += j.visits.size() - 1;
  Matrix labels(static_cast<Index>(steps), grouper.category_count);
  Index row = 0;
  for (const auto& j : corpus) {
    for (std::size_t t = 1; t < j.visits.size(); ++t) labels.row(row++) = group_labels(j.visits[t].codes, grouper);
  }
  return labels;
}

double bayes_oracle_accuracy(const Corpus& corpus, const GroundTruth& truth, const Grouper& grouper, int k) {
  const Matrix labels = next_visit_labels(corpus, grouper);
  Matrix scores(labels.rows(), labels.cols());
  Index row = 0;
  for (const auto& j : corpus) {
    for (std::size_t t = 0; t + 1 < j.visits.size(); ++t) {
      const auto& v = j.visits[t];
      std::optional<double> gap;
      if (t > 0) gap = v.admit_day - j.visits[t - 1].discharge_day;
      scores.row(row++) =
          truth.next_distribution(primary_category(v.codes, grouper), v.discharge_day - v.admit_day, gap);
    }
  }
  return accuracy_at_k(scores, labels, k);
}

CorpusSplit split_corpus(std::size_t patients, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0) || train_fraction >= 0.9) {
    throw std::invalid_argument("split_corpus: train fraction must lie in (0, 0.9), got " +
                                std::to_string(train_fraction));
  }
  std::vector<std::size_t> order(patients);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(patients);
  const auto valid = static_cast<std::size_t>(std::llround(0.1 * n));
  const auto train = std::min(patients - valid, static_cast<std::size_t>(std::llround(train_fraction * n)));
  CorpusSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train));
  split.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(train),
                     order.begin() + static_cast<std::ptrdiff_t>(train + valid));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(train + valid), order.end());
  return split;
}

Corpus select(const Corpus& corpus, std::span<const std::size_t> indices) {
  Corpus out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(corpus.at(i));
  return out;
}

Corpus truncate_journeys(const Corpus& corpus, int max_visits) {
  Corpus out = corpus;
  for (auto& j : out) {
    if (static_cast<int>(j.visits.size()) > max_visits) {
      j.visits.erase(j.visits.begin(), j.visits.end() - max_visits);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const auto& j : corpus) {
    json visits = json::array();
    for (const auto& v : j.visits) {
      visits.push_back({{"admit_day", v.admit_day}, {"discharge_day", v.discharge_day}, {"codes", v.codes}});
    }
    out << json{{"id", j.id}, {"visits", visits}}.dump() << "\n";
  }
}

Corpus read_corpus(std::istream& in) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto where = "corpus line " + std::to_string(line_no) + ": ";
    PatientJourney j;
    try {
      const json rec = json::parse(line);
      if (!rec.is_object() || rec.size() != 2 || !rec.contains("id") || !rec.contains("visits")) {
        throw CorpusError("expected exactly {id, visits}");
      }
      j.id = rec.at("id").get<std::int64_t>();
      for (const auto& v : rec.at("visits")) {
        if (!v.is_object() || v.size() != 3) throw CorpusError("visit must have admit_day, discharge_day, codes");
        Visit visit;
        visit.admit_day = v.at("admit_day").get<double>();
        visit.discharge_day = v.at("discharge_day").get<double>();
        visit.codes = v.at("codes").get<std::vector<int>>();
        j.visits.push_back(std::move(visit));
      }
      validate_journey(j);
    } catch (const CorpusError& e) {
      throw CorpusError(where + e.what());
    } catch (const json::exception& e) {
      throw CorpusError(where + e.what());
    }
    corpus.push_back(std::move(j));
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write corpus: " + path.string());
  write_corpus(corpus, out);
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read corpus: " + path.string());
  return read_corpus(in);
}

void save_grouper(const Grouper& grouper, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write grouper: " + path.string());
  for (std::size_t i = 0; i < grouper.category_of.size(); ++i) out << i << "\t" << grouper.category_of[i] << "\n";
}

Grouper load_grouper(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read grouper: " + path.string());
  Grouper g;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    long leaf = -1, cat = -1;
    char tab = 0;
    std::string rest;
    if (!(ss >> leaf) || !ss.get(tab) || tab != '\t' || !(ss >> cat) || (ss >> rest) || leaf < 0 || cat < 0) {
      throw CorpusError("grouper line " + std::to_string(line_no) + ": expected leaf_id<TAB>category_id");
    }
    if (leaf != static_cast<long>(g.category_of.size())) {
      throw CorpusError("grouper line " + std::to_string(line_no) + ": leaf ids must be contiguous from 0");
    }
    g.category_of.push_back(static_cast<int>(cat));
    g.category_count = std::max(g.category_count, static_cast<int>(cat) + 1);
  }
  return g;
}

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.row(r).data(), m.row(r).data() + m.cols());
    rows.push_back(row);
  }
  return rows;
}

Matrix json_matrix(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  Matrix m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Index>(rows[r].size()) != m.cols()) throw CorpusError("ragged kernel matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  }
  return m;
}

}  // namespace

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write ground truth: " + path.string());
  json j{{"base_kernel", matrix_json(truth.base_kernel)},
         {"short_stay_kernel", matrix_json(truth.short_stay_kernel)},
         {"long_stay_kernel", matrix_json(truth.long_stay_kernel)},
         {"los_coupling", truth.los_coupling},
         {"interval_coupling", truth.interval_coupling},
         {"los_median", truth.los_median},
         {"interval_median", truth.interval_median},
         {"modulation_slope", truth.modulation_slope}};
  out << j.dump(1) << "\n";
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read ground truth: " + path.string());
  try {
    const json j = json::parse(in);
    GroundTruth t;
    t.base_kernel = json_matrix(j.at("base_kernel"));
    t.short_stay_kernel = json_matrix(j.at("short_stay_kernel"));
    t.long_stay_kernel = json_matrix(j.at("long_stay_kernel"));
    t.los_coupling = j.at("los_coupling").get<double>();
    t.interval_coupling = j.at("interval_coupling").get<double>();
    t.los_median = j.at("los_median").get<double>();
    t.interval_median = j.at("interval_median").get<double>();
    t.modulation_slope = j.at("modulation_slope").get<double>();
    return t;
  } catch (const json::exception& e) {
    throw CorpusError("ground truth " + path.string() + ": " + e.what());
  }
}

}  // namespace setor
