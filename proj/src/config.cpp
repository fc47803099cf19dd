#include "setor/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace setor {

using json = nlohmann::json;

namespace {

const char* to_string(HeadActivation a) { return a == HeadActivation::kSoftmax ? "softmax" : "sigmoid"; }
const char* to_string(AttentionScale s) { return s == AttentionScale::kModelDim ? "d" : "d_k"; }
const char* to_string(SolverMethod m) { return m == SolverMethod::kRk4 ? "rk4" : "euler"; }
const char* to_string(GradientMode g) { return g == GradientMode::kBackprop ? "backprop" : "adjoint"; }

template <typename Enum>
Enum parse_enum(const json& j, const char* key, std::initializer_list<std::pair<const char*, Enum>> options) {
  const auto value = j.at(key).get<std::string>();
  for (const auto& [name, e] : options) {
    if (value == name) return e;
  }
  throw ConfigError(std::string("bad value '") + value + "' for " + key);
}

bool same_kind(const json& a, const json& b) {
  if (a.is_boolean() || b.is_boolean()) return a.is_boolean() && b.is_boolean();
  if (a.is_number_integer() && a.is_number_unsigned() != b.is_number_unsigned() && b.is_number_integer()) return true;
  if (a.is_number_integer()) return b.is_number_integer();
  if (a.is_number()) return b.is_number();
  return a.type() == b.type();
}

void merge_strict(json& base, const json& overlay, const std::string& path) {
  if (!overlay.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const auto where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, where);
    } else if (!same_kind(slot, value)) {
      throw ConfigError("config key '" + where + "' expects " + std::string(slot.type_name()) + ", got " +
                        value.type_name());
    } else {
      slot = value;
    }
  }
}

json kernel_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

void RunConfig::validate() const {
  if (model.d <= 0 || model.heads <= 0) throw ConfigError("model.d and model.heads must be positive");
  if (model.d % model.heads != 0) {
    throw ConfigError("model.d=" + std::to_string(model.d) + " is not divisible by model.heads=" +
                      std::to_string(model.heads));
  }
  if (model.layers < 1 && !ablation.wo_j_trans) throw ConfigError("model.layers must be >= 1");
  if (model.dropout < 0.0 || model.dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
  if (model.max_journey_length < 2) throw ConfigError("model.max_journey_length must be >= 2");
  if (ablation.wo_ode && (ablation.wo_los || ablation.wo_interval)) {
    throw ConfigError("ablation.wo_ode supersedes wo_los/wo_interval; set only one");
  }
  if (solver.steps_per_unit_time <= 0) throw ConfigError("solver.steps_per_unit_time must be positive");
  if (train.batch_size <= 0 || train.epochs <= 0) throw ConfigError("train.batch_size and train.epochs must be positive");
  if (!(train.train_fraction > 0.0 && train.train_fraction < 0.9)) {
    throw ConfigError("train.train_fraction must lie in (0, 0.9)");
  }
  if (!(train.adadelta_rho > 0.0 && train.adadelta_rho < 1.0) || train.adadelta_eps <= 0.0) {
    throw ConfigError("train.adadelta_rho must lie in (0,1) and adadelta_eps must be positive");
  }
  if (train.eval_ks.empty()) throw ConfigError("train.eval_ks must not be empty");
  for (int k : train.eval_ks) {
    if (k < 1) throw ConfigError("train.eval_ks entries must be >= 1");
  }
  const bool any_path = !data.corpus.empty() || !data.ontology.empty() || !data.grouper.empty();
  const bool all_paths = !data.corpus.empty() && !data.ontology.empty() && !data.grouper.empty();
  if (any_path && !all_paths) throw ConfigError("data.corpus, data.ontology and data.grouper go together");
}

json to_json(const RunConfig& c) {
  const auto& g = c.generator;
  return json{
      {"model",
       {{"d", c.model.d},
        {"heads", c.model.heads},
        {"layers", c.model.layers},
        {"d_ff", c.model.d_ff},
        {"dropout", c.model.dropout},
        {"head_activation", to_string(c.model.head_activation)},
        {"attention_scale", to_string(c.model.attention_scale)},
        {"ontology_attention_dim", c.model.ontology_attention_dim},
        {"pool_hidden", c.model.pool_hidden},
        {"max_journey_length", c.model.max_journey_length},
        {"interval_init", c.model.interval_affine_init ? "affine" : "identity"},
        {"ode_output_scale", c.model.ode_output_scale},
        {"interval_decay", c.model.interval_decay}}},
      {"solver",
       {{"method", to_string(c.solver.method)},
        {"steps_per_unit_time", c.solver.steps_per_unit_time},
        {"gradient_mode", to_string(c.solver.gradient_mode)}}},
      {"ablation",
       {{"wo_j_trans", c.ablation.wo_j_trans},
        {"wo_ontology", c.ablation.wo_ontology},
        {"wo_los", c.ablation.wo_los},
        {"wo_interval", c.ablation.wo_interval},
        {"wo_ode", c.ablation.wo_ode}}},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"train_fraction", c.train.train_fraction},
        {"adadelta_rho", c.train.adadelta_rho},
        {"adadelta_eps", c.train.adadelta_eps},
        {"learning_rate", c.train.learning_rate},
        {"seed", c.train.seed},
        {"eval_ks", c.train.eval_ks}}},
      {"data",
       {{"corpus", c.data.corpus},
        {"ontology", c.data.ontology},
        {"grouper", c.data.grouper},
        {"ground_truth", c.data.ground_truth},
        {"data_seed", c.data.data_seed}}},
      {"generator",
       {{"patients", g.patients},
        {"categories", g.categories},
        {"leaves_per_category", g.leaves_per_category},
        {"top_level_groups", g.top_level_groups},
        {"mean_visits", g.mean_visits},
        {"mean_codes_per_visit", g.mean_codes_per_visit},
        {"max_codes_per_visit", g.max_codes_per_visit},
        {"background_mean", g.background_mean},
        {"interval_median", g.interval_median},
        {"interval_sigma", g.interval_sigma},
        {"los_median", g.los_median},
        {"los_sigma", g.los_sigma},
        {"los_coupling", g.los_coupling},
        {"interval_coupling", g.interval_coupling},
        {"kernel_smoothing", g.kernel_smoothing},
        {"successor_weights", g.successor_weights},
        {"kernel", kernel_json(g.kernel)}}},
      {"output_dir", c.output_dir},
  };
}

RunConfig config_from_json(const json& overlay) {
  json merged = to_json(RunConfig{});
  merge_strict(merged, overlay, "");
  RunConfig c;
  try {
    const auto& m = merged.at("model");
    c.model.d = m.at("d").get<int>();
    c.model.heads = m.at("heads").get<int>();
    c.model.layers = m.at("layers").get<int>();
    c.model.d_ff = m.at("d_ff").get<int>();
    c.model.dropout = m.at("dropout").get<double>();
    c.model.head_activation = parse_enum<HeadActivation>(
        m, "head_activation", {{"softmax", HeadActivation::kSoftmax}, {"sigmoid", HeadActivation::kSigmoid}});
    c.model.attention_scale = parse_enum<AttentionScale>(
        m, "attention_scale", {{"d", AttentionScale::kModelDim}, {"d_k", AttentionScale::kKeyDim}});
    c.model.ontology_attention_dim = m.at("ontology_attention_dim").get<int>();
    c.model.pool_hidden = m.at("pool_hidden").get<int>();
    c.model.max_journey_length = m.at("max_journey_length").get<int>();
    c.model.interval_affine_init =
        parse_enum<bool>(m, "interval_init", {{"identity", false}, {"affine", true}});
    c.model.ode_output_scale = m.at("ode_output_scale").get<double>();
    c.model.interval_decay = m.at("interval_decay").get<double>();

    const auto& s = merged.at("solver");
    c.solver.method = parse_enum<SolverMethod>(s, "method", {{"rk4", SolverMethod::kRk4}, {"euler", SolverMethod::kEuler}});
    c.solver.steps_per_unit_time = s.at("steps_per_unit_time").get<int>();
    c.solver.gradient_mode = parse_enum<GradientMode>(
        s, "gradient_mode", {{"backprop", GradientMode::kBackprop}, {"adjoint", GradientMode::kAdjoint}});

    const auto& a = merged.at("ablation");
    c.ablation.wo_j_trans = a.at("wo_j_trans").get<bool>();
    c.ablation.wo_ontology = a.at("wo_ontology").get<bool>();
    c.ablation.wo_los = a.at("wo_los").get<bool>();
    c.ablation.wo_interval = a.at("wo_interval").get<bool>();
    c.ablation.wo_ode = a.at("wo_ode").get<bool>();

    const auto& t = merged.at("train");
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.epochs = t.at("epochs").get<int>();
    c.train.train_fraction = t.at("train_fraction").get<double>();
    c.train.adadelta_rho = t.at("adadelta_rho").get<double>();
    c.train.adadelta_eps = t.at("adadelta_eps").get<double>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.seed = t.at("seed").get<std::uint64_t>();
    c.train.eval_ks = t.at("eval_ks").get<std::vector<int>>();

    const auto& d = merged.at("data");
    c.data.corpus = d.at("corpus").get<std::string>();
    c.data.ontology = d.at("ontology").get<std::string>();
    c.data.grouper = d.at("grouper").get<std::string>();
    c.data.ground_truth = d.at("ground_truth").get<std::string>();
    c.data.data_seed = d.at("data_seed").get<std::uint64_t>();

    const auto& g = merged.at("generator");
    auto& p = c.generator;
    p.patients = g.at("patients").get<int>();
    p.categories = g.at("categories").get<int>();
    p.leaves_per_category = g.at("leaves_per_category").get<int>();
    p.top_level_groups = g.at("top_level_groups").get<int>();
    p.mean_visits = g.at("mean_visits").get<double>();
    p.mean_codes_per_visit = g.at("mean_codes_per_visit").get<double>();
    p.max_codes_per_visit = g.at("max_codes_per_visit").get<int>();
    p.background_mean = g.at("background_mean").get<double>();
    p.interval_median = g.at("interval_median").get<double>();
    p.interval_sigma = g.at("interval_sigma").get<double>();
    p.los_median = g.at("los_median").get<double>();
    p.los_sigma = g.at("los_sigma").get<double>();
    p.los_coupling = g.at("los_coupling").get<double>();
    p.interval_coupling = g.at("interval_coupling").get<double>();
    p.kernel_smoothing = g.at("kernel_smoothing").get<double>();
    p.successor_weights = g.at("successor_weights").get<std::vector<double>>();
    const auto rows = g.at("kernel").get<std::vector<std::vector<double>>>();
    if (!rows.empty()) {
      p.kernel.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.front().size()) throw ConfigError("generator.kernel is ragged");
        for (std::size_t col = 0; col < rows[r].size(); ++col) {
          p.kernel(static_cast<Index>(r), static_cast<Index>(col)) = rows[r][col];
        }
      }
    }
    c.output_dir = merged.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  RunConfig c = config_from_json(j);
  const auto base = path.parent_path();
  for (std::string* p : {&c.data.corpus, &c.data.ontology, &c.data.grouper, &c.data.ground_truth}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return c;
}

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides) {
  json j = to_json(cfg);
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq);
    const std::string raw = item.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json overlay = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
      parts.push_back(rest.substr(0, dot));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = json{{*it, overlay}};
    merge_strict(j, overlay, "");
  }
  return config_from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace setor
