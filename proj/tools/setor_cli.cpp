// Command-line entry point: generate, train, eval, ablate, gradcheck, export-embeddings.

#include "setor/config.hpp"
#include "setor/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifndef SETOR_CODE_VERSION
#define SETOR_CODE_VERSION "unknown"
#endif

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr int kUsageError = 2;
constexpr int kRunError = 1;

// Single-line, machine-parsable error record on stderr.
int fail(int code, const std::string& kind, const std::string& message) {
  std::string flat = message;
  for (char& c : flat) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error\tkind=" << kind << "\tcode=" << code << "\tmessage=" << flat << "\n";
  return code;
}

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string split = "test";
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_manifest(const fs::path& dir, const std::string& verb, const setor::RunConfig& cfg, std::uint64_t seed,
                    double seconds) {
  json manifest = {{"verb", verb},
                   {"config_hash", setor::config_hash(cfg)},
                   {"seed", seed},
                   {"code_version", SETOR_CODE_VERSION},
                   {"elapsed_seconds", seconds},
                   {"config", setor::to_json(cfg)}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

void export_rows(const fs::path& path, const setor::Matrix& rows, const setor::Grouper& grouper) {
  std::ofstream out(path);
  char buf[32];
  for (setor::Index i = 0; i < rows.rows(); ++i) {
    out << i << '\t' << grouper.category_of[static_cast<std::size_t>(i)] << '\t';
    for (setor::Index j = 0; j < rows.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", rows(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int run_verb(const std::string& verb, const Options& opt) {
  setor::RunConfig cfg;
  try {
    if (!opt.config.empty()) cfg = setor::load_config(opt.config);
    cfg = setor::apply_overrides(cfg, opt.overrides);
    if (opt.seed) {
      if (verb == "generate") {
        cfg.data.data_seed = *opt.seed;
      } else {
        cfg.train.seed = *opt.seed;
      }
    }
    cfg.validate();
    if ((verb == "eval" || verb == "export-embeddings") && opt.checkpoint.empty()) {
      throw setor::ConfigError(verb + " needs --checkpoint");
    }
    if (!opt.checkpoint.empty() && !fs::exists(opt.checkpoint)) {
      throw setor::ConfigError("checkpoint not found: " + opt.checkpoint);
    }
    for (const std::string* p : {&cfg.data.corpus, &cfg.data.ontology, &cfg.data.grouper, &cfg.data.ground_truth}) {
      if (!p->empty() && !fs::exists(*p)) throw setor::ConfigError("data file not found: " + *p);
    }
  } catch (const std::exception& e) {
    return fail(kUsageError, "usage", e.what());
  }

  const fs::path out = !opt.out.empty() ? fs::path(opt.out)
                        : !cfg.output_dir.empty() ? fs::path(cfg.output_dir)
                                                  : fs::path("setor_out") / verb;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  const std::uint64_t seed = verb == "generate" ? cfg.data.data_seed : cfg.train.seed;

  try {
    if (verb == "gradcheck") {
      const auto result = setor::pipeline_gradcheck(seed, cfg.solver);
      fs::create_directories(out);
      json groups = result.group_error;
      for (const auto& [group, err] : result.group_error) std::cout << group << '\t' << err << '\n';
      std::cout << "max_relative_error\t" << result.max_error << '\n';
      write_text(out / "gradcheck.json", json{{"groups", groups}, {"max_relative_error", result.max_error}}.dump(2));
      write_manifest(out, verb, cfg, seed, elapsed());
      return result.max_error < 1e-4 ? 0 : kRunError;
    }

    if (verb == "generate") {
      const auto generated = setor::generate_corpus(cfg.generator, cfg.data.data_seed);
      fs::create_directories(out);
      setor::save_corpus(generated.patients, out / "corpus.jsonl");
      setor::save_grouper(generated.grouper, out / "grouper.tsv");
      setor::save_ontology(generated.ontology, out / "ontology.txt");
      setor::save_ground_truth(generated.truth, out / "ground_truth.json");
      write_manifest(out, verb, cfg, seed, elapsed());
      std::cout << json{{"patients", generated.patients.size()},
                        {"leaves", generated.ontology.leaf_count},
                        {"categories", generated.grouper.category_count},
                        {"out", out.string()}}
                       .dump()
                << '\n';
      return 0;
    }

    const setor::Dataset data = setor::load_dataset(cfg);

    if (verb == "train") {
      const auto result = setor::train(cfg, data, out);
      write_manifest(out, verb, cfg, seed, elapsed());
      std::cout << setor::to_json(result.report.test).dump() << '\n';
      return 0;
    }
    if (verb == "eval") {
      const auto metrics = setor::evaluate_checkpoint(cfg, data, opt.checkpoint, opt.split);
      fs::create_directories(out);
      write_text(out / ("metrics_" + opt.split + ".json"), setor::to_json(metrics).dump() + "\n");
      write_manifest(out, verb, cfg, seed, elapsed());
      std::cout << setor::to_json(metrics).dump() << '\n';
      return 0;
    }
    if (verb == "ablate") {
      const auto rows = setor::ablate(cfg, data, out);
      json table = json::array();
      for (const auto& row : rows) table.push_back({{"variant", row.variant}, {"test", setor::to_json(row.report.test)}});
      const std::string text = setor::format_ablation_table(rows);
      write_text(out / "ablation.tsv", text);
      write_text(out / "ablation.json", table.dump(2) + "\n");
      write_manifest(out, verb, cfg, seed, elapsed());
      std::cout << text;
      return 0;
    }
    if (verb == "export-embeddings") {
      setor::SetorModel model(cfg.model, cfg.solver, cfg.ablation, data.ontology, data.grouper, cfg.train.seed);
      setor::load_checkpoint(model.parameters(), opt.checkpoint);
      fs::create_directories(out);
      export_rows(out / "embeddings_M.tsv", model.code_embeddings().value(), data.grouper);
      const setor::Tensor g = model.ontology_embeddings();
      if (g.defined()) export_rows(out / "embeddings_G.tsv", g.value(), data.grouper);
      write_manifest(out, verb, cfg, seed, elapsed());
      std::cout << json{{"leaves", data.ontology.leaf_count}, {"d", cfg.model.d}, {"out", out.string()}}.dump() << '\n';
      return 0;
    }
  } catch (const setor::ConfigError& e) {
    return fail(kUsageError, "usage", e.what());
  } catch (const std::exception& e) {
    return fail(kRunError, "runtime", e.what());
  }
  return fail(kUsageError, "usage", "unknown verb " + verb);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"setor: next-visit diagnosis prediction over patient journeys"};
  app.require_subcommand(1, 1);
  Options opt;
  const char* verbs[][2] = {
      {"generate", "Sample a synthetic corpus with its ontology, grouper and ground truth"},
      {"train", "Train one model and report test metrics for the best validation epoch"},
      {"eval", "Score a checkpoint on one split"},
      {"ablate", "Train the full model and the five single-component ablations"},
      {"gradcheck", "Finite-difference check of the full pipeline on a toy batch"},
      {"export-embeddings", "Write the G and M embedding rows of a checkpoint"},
  };
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--set", opt.overrides, "Override section.key=value (repeatable)");
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--seed", opt.seed, "Data seed for generate, training seed otherwise");
    if (std::string(name) == "eval" || std::string(name) == "export-embeddings") {
      sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint file")->required();
    }
    if (std::string(name) == "eval") {
      sub->add_option("--split", opt.split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsageError, "usage", e.what());
  }
  return run_verb(app.get_subcommands().front()->get_name(), opt);
}
