#include "setor/config.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace setor;
using json = nlohmann::json;

TEST_CASE("defaults validate and survive a JSON round trip") {
  const RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.model.d == 200);
  CHECK(cfg.train.batch_size == 32);
  CHECK(cfg.model.dropout == 0.1);
  const RunConfig back = config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
}

TEST_CASE("partial documents overlay the defaults") {
  const RunConfig cfg = config_from_json(json::parse(R"({"model": {"d": 16, "heads": 2}, "solver": {"method": "euler"}})"));
  CHECK(cfg.model.d == 16);
  CHECK(cfg.model.layers == RunConfig{}.model.layers);
  CHECK(cfg.solver.method == SolverMethod::kEuler);
}

TEST_CASE("unknown keys and wrong types are rejected") {
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"modle": {}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"model": {"dd": 3}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"model": {"d": "big"}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"solver": {"method": "midpoint"}})")), ConfigError);
}

TEST_CASE("invariants") {
  auto invalid = [](auto edit) {
    RunConfig cfg;
    edit(cfg);
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  };
  invalid([](RunConfig& c) { c.model.d = 30; c.model.heads = 4; });
  invalid([](RunConfig& c) { c.ablation.wo_ode = true; c.ablation.wo_los = true; });
  invalid([](RunConfig& c) { c.ablation.wo_ode = true; c.ablation.wo_interval = true; });
  invalid([](RunConfig& c) { c.model.dropout = 1.0; });
  invalid([](RunConfig& c) { c.train.train_fraction = 0.95; });
  invalid([](RunConfig& c) { c.train.eval_ks = {}; });
  invalid([](RunConfig& c) { c.solver.steps_per_unit_time = 0; });
  invalid([](RunConfig& c) { c.data.corpus = "x.jsonl"; });
}

TEST_CASE("overrides") {
  const RunConfig cfg = apply_overrides({}, {"model.d=8", "train.eval_ks=[1,2]", "solver.method=euler", "output_dir=out"});
  CHECK(cfg.model.d == 8);
  CHECK(cfg.train.eval_ks == std::vector<int>{1, 2});
  CHECK(cfg.solver.method == SolverMethod::kEuler);
  CHECK(cfg.output_dir == "out");
  CHECK(config_hash(cfg) != config_hash(RunConfig{}));
  CHECK_THROWS_AS(apply_overrides({}, {"model.nope=1"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides({}, {"model.d"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides({}, {"model.d=abc"}), ConfigError);
}

TEST_CASE("config files resolve data paths against their directory") {
  const auto dir = std::filesystem::temp_directory_path() / "setor_tests" / "cfg";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "run.json") << R"({"data": {"corpus": "c.jsonl", "ontology": "o.txt", "grouper": "g.tsv"}})";
  const RunConfig cfg = load_config(dir / "run.json");
  CHECK(std::filesystem::path(cfg.data.corpus) == dir / "c.jsonl");
  std::ofstream(dir / "bad.json") << "{not json";
  CHECK_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
}
