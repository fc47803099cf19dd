#include "setor/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace setor {

using json = nlohmann::json;

Dataset load_dataset(const RunConfig& cfg) {
  Dataset data;
  if (cfg.data.corpus.empty()) {
    GeneratedCorpus generated = generate_corpus(cfg.generator, cfg.data.data_seed);
    data.ontology = std::move(generated.ontology);
    data.grouper = std::move(generated.grouper);
    data.patients = std::move(generated.patients);
    data.truth = std::move(generated.truth);
  } else {
    data.ontology = load_ontology(cfg.data.ontology);
    data.grouper = load_grouper(cfg.data.grouper);
    data.patients = load_corpus(cfg.data.corpus);
    if (!cfg.data.ground_truth.empty()) data.truth = load_ground_truth(cfg.data.ground_truth);
    if (static_cast<int>(data.grouper.category_of.size()) != data.ontology.leaf_count) {
      throw CorpusError("grouper covers " + std::to_string(data.grouper.category_of.size()) +
                        " leaves but the ontology has " + std::to_string(data.ontology.leaf_count));
    }
    for (const auto& journey : data.patients) {
      validate_journey(journey);
      for (const auto& visit : journey.visits) {
        for (int code : visit.codes) {
          if (code < 0 || code >= data.ontology.leaf_count) {
            throw CorpusError("patient " + std::to_string(journey.id) + " uses unknown code " + std::to_string(code));
          }
        }
      }
    }
  }
  data.patients = truncate_journeys(data.patients, cfg.model.max_journey_length);
  return data;
}

json to_json(const Metrics& m) {
  json accuracy = json::object();
  for (std::size_t i = 0; i < m.ks.size(); ++i) accuracy["@" + std::to_string(m.ks[i])] = m.accuracy[i];
  return {{"split", m.split}, {"ks", m.ks},         {"accuracy", accuracy},
          {"loss", m.loss},   {"patients", m.patients}, {"steps", m.steps}};
}

Metrics evaluate(SetorModel& model, const Corpus& corpus, std::span<const int> ks, const std::string& split) {
  Metrics m;
  m.split = split;
  m.ks.assign(ks.begin(), ks.end());
  m.accuracy.assign(ks.size(), 0.0);
  m.patients = static_cast<long>(corpus.size());
  if (corpus.empty()) return m;

  const Tensor g = model.ontology_embeddings();
  std::vector<Matrix> logits;
  std::vector<Matrix> labels;
  double loss = 0;
  for (const auto& journey : corpus) {
    PatientForward out = model.forward(journey, g, {});
    loss += out.loss.item();
    logits.push_back(out.logits.value());
    labels.push_back(out.labels);
    m.steps += out.logits.rows();
  }
  m.loss = loss / static_cast<double>(corpus.size());

  Matrix all_logits(m.steps, model.categories());
  Matrix all_labels(m.steps, model.categories());
  Index row = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    all_logits.middleRows(row, logits[i].rows()) = logits[i];
    all_labels.middleRows(row, labels[i].rows()) = labels[i];
    row += logits[i].rows();
  }
  for (std::size_t i = 0; i < ks.size(); ++i) m.accuracy[i] = accuracy_at_k(all_logits, all_labels, ks[i]);
  return m;
}

json to_json(const TrainReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid", to_json(e.valid)}});
  }
  json baselines = {{"constant", r.baselines.constant}};
  if (!r.baselines.oracle.empty()) baselines["oracle"] = r.baselines.oracle;
  return {
      {"config_hash", r.config_hash},
      {"seed", r.seed},
      {"split", {{"train", r.train_patients}, {"valid", r.valid_patients}, {"test", r.test_patients}}},
      {"parameter_count", r.parameter_count},
      {"epochs", epochs},
      {"best_epoch", r.best_epoch},
      {"test", to_json(r.test)},
      {"baselines", baselines},
      {"counters",
       {{"ontology_evaluations", r.counters.ontology_evaluations},
        {"positional_lookups", r.counters.positional_lookups},
        {"ode_solves", r.counters.ode_solves}}},
      {"checkpoint", r.checkpoint},
  };
}

CorpusSplit config_split(const RunConfig& cfg, const Dataset& data) {
  return split_corpus(data.patients.size(), cfg.train.train_fraction, cfg.train.seed);
}

namespace {

std::unique_ptr<SetorModel> build_model(const RunConfig& cfg, const Dataset& data) {
  return std::make_unique<SetorModel>(cfg.model, cfg.solver, cfg.ablation, data.ontology, data.grouper,
                                      cfg.train.seed);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& output_dir) {
  cfg.validate();
  TrainResult result;
  result.split = config_split(cfg, data);
  result.model = build_model(cfg, data);
  SetorModel& model = *result.model;
  ParameterStore& store = model.parameters();

  const Corpus train_set = select(data.patients, result.split.train);
  const Corpus valid_set = select(data.patients, result.split.valid);
  const Corpus test_set = select(data.patients, result.split.test);
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");

  TrainReport& report = result.report;
  report.config_hash = config_hash(cfg);
  report.seed = cfg.train.seed;
  report.train_patients = train_set.size();
  report.valid_patients = valid_set.size();
  report.test_patients = test_set.size();
  for (const auto& t : store.tensors()) report.parameter_count += static_cast<std::size_t>(t.value().size());

  AdadeltaState optimizer;
  optimizer.rho = cfg.train.adadelta_rho;
  optimizer.eps = cfg.train.adadelta_eps;
  optimizer.learning_rate = cfg.train.learning_rate;
  std::mt19937_64 shuffle_rng = stream(cfg.train.seed, 1);
  std::mt19937_64 dropout_rng = stream(cfg.train.seed, 2);
  const ForwardOptions options{true, &dropout_rng, 0};

  std::vector<std::size_t> order(train_set.size());
  std::vector<Matrix> best_values = store.snapshot();
  double best_score = -1.0;
  const std::size_t batch_size = static_cast<std::size_t>(cfg.train.batch_size);
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<const PatientJourney*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set[order[i]]);
      store.zero_grad();
      Tensor loss = model.batch_loss(batch, options);
      backward(loss);
      adadelta_step(store.tensors(), optimizer);
      loss_sum += loss.item() * static_cast<double>(batch.size());
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(train_set.size());
    record.valid = evaluate(model, valid_set, cfg.train.eval_ks, "valid");
    const double score = valid_set.empty() ? -record.train_loss : record.valid.accuracy.front();
    if (score > best_score || report.best_epoch == 0) {
      best_score = score;
      report.best_epoch = epoch;
      best_values = store.snapshot();
    }
    report.epochs.push_back(std::move(record));
  }
  store.restore(best_values);
  report.test = evaluate(model, test_set, cfg.train.eval_ks, "test");
  report.counters = model.counters();

  if (!test_set.empty()) {
    const Matrix labels = next_visit_labels(test_set, data.grouper);
    for (int k : cfg.train.eval_ks) {
      report.baselines.constant.push_back(best_constant_accuracy(labels, k));
      if (data.truth) report.baselines.oracle.push_back(bayes_oracle_accuracy(test_set, *data.truth, data.grouper, k));
    }
  }

  if (!output_dir.empty()) {
    std::filesystem::create_directories(output_dir);
    const auto checkpoint = output_dir / "checkpoint.txt";
    save_checkpoint(store, checkpoint);
    report.checkpoint = checkpoint.filename().string();
    std::ofstream out(output_dir / "report.json");
    out << to_json(report).dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write " + (output_dir / "report.json").string());
  }
  return result;
}

Metrics evaluate_checkpoint(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& checkpoint,
                            const std::string& split) {
  cfg.validate();
  auto model = build_model(cfg, data);
  load_checkpoint(model->parameters(), checkpoint);
  const CorpusSplit parts = config_split(cfg, data);
  const std::vector<std::size_t>* indices = nullptr;
  if (split == "train") indices = &parts.train;
  if (split == "valid") indices = &parts.valid;
  if (split == "test") indices = &parts.test;
  if (indices == nullptr) throw std::invalid_argument("unknown split '" + split + "' (train, valid, test)");
  return evaluate(*model, select(data.patients, *indices), cfg.train.eval_ks, split);
}

std::vector<std::pair<std::string, AblationFlags>> ablation_variants() {
  std::vector<std::pair<std::string, AblationFlags>> out;
  out.emplace_back("full", AblationFlags{});
  AblationFlags f;
  f.wo_j_trans = true;
  out.emplace_back("wo_j_trans", f);
  f = {};
  f.wo_ontology = true;
  out.emplace_back("wo_ontology", f);
  f = {};
  f.wo_los = true;
  out.emplace_back("wo_los", f);
  f = {};
  f.wo_interval = true;
  out.emplace_back("wo_interval", f);
  f = {};
  f.wo_ode = true;
  out.emplace_back("wo_ode", f);
  return out;
}

std::vector<AblationRow> ablate(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& output_dir) {
  std::vector<AblationRow> rows;
  for (const auto& [name, flags] : ablation_variants()) {
    RunConfig variant = cfg;
    variant.ablation = flags;
    const auto dir = output_dir.empty() ? std::filesystem::path{} : output_dir / name;
    rows.push_back({name, train(variant, data, dir).report});
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant";
  if (!rows.empty()) {
    for (int k : rows.front().report.test.ks) out << "\tacc@" << k;
  }
  out << "\ttest_loss\tbest_epoch\n";
  out.setf(std::ios::fixed);
  out.precision(4);
  for (const auto& row : rows) {
    out << row.variant;
    for (double a : row.report.test.accuracy) out << "\t" << a;
    out << "\t" << row.report.test.loss << "\t" << row.report.best_epoch << "\n";
  }
  return out.str();
}

GradcheckResult pipeline_gradcheck(std::uint64_t seed, const SolverConfig& solver, double fd_step) {
  const OntologyDAG ontology = make_toy_ontology(4, 3, 2);
  const Grouper grouper = Grouper::from_ontology(ontology);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> code(0, ontology.leaf_count - 1);
  auto random_codes = [&](int n) {
    std::vector<int> codes;
    while (static_cast<int>(codes.size()) < n) {
      const int c = code(rng);
      if (std::find(codes.begin(), codes.end(), c) == codes.end()) codes.push_back(c);
    }
    std::sort(codes.begin(), codes.end());
    return codes;
  };
  Corpus batch(2);
  const double times[2][3][2] = {{{0.0, 0.5}, {1.5, 2.25}, {4.0, 4.5}}, {{0.0, 1.0}, {2.0, 2.5}, {3.0, 3.5}}};
  for (int p = 0; p < 2; ++p) {
    batch[p].id = p;
    for (int v = 0; v < 3; ++v) batch[p].visits.push_back({times[p][v][0], times[p][v][1], random_codes(2 + v % 2)});
  }

  ModelConfig model;
  model.d = 8;
  model.heads = 2;
  model.layers = 1;
  model.dropout = 0.0;
  SetorModel setor(model, solver, AblationFlags{}, ontology, grouper, seed);
  // Untrained LayerNorm gains/biases and zero biases sit at special points;
  // perturb every parameter so the check covers a generic configuration.
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (auto& t : setor.parameters().tensors()) {
    for (Index i = 0; i < t.value().size(); ++i) t.mutable_value().data()[i] += jitter(rng);
  }

  std::vector<const PatientJourney*> ptrs{&batch[0], &batch[1]};
  auto build = [&] { return setor.batch_loss(ptrs, {}); };
  auto& params = setor.parameters().tensors();
  const auto errors = grad_check_each(build, params, fd_step);

  GradcheckResult result;
  const auto& names = setor.parameters().names();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    double& slot = result.group_error[parameter_group(names[i])];
    slot = std::max(slot, errors[i]);
    result.max_error = std::max(result.max_error, errors[i]);
  }
  return result;
}

}  // namespace setor
