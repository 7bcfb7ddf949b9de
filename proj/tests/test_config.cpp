#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "metabias/config.hpp"

using namespace metabias;

namespace {

std::string write_temp_config(const std::string& body) {
  auto path = std::filesystem::temp_directory_path() / "metabias_cfg.json";
  std::ofstream f(path);
  f << body;
  return path.string();
}

}  // namespace

TEST_CASE("defaults carry the stated protocol values") {
  ExperimentConfig cfg = load_config("");
  CHECK(cfg.batch_tasks == 4);
  CHECK(cfg.adapt_steps == 1);
  CHECK(cfg.outer.lr == 0.001);
  CHECK(cfg.outer.weight_decay == 0.01);
  CHECK(cfg.search_episodes == 10000);
  CHECK(cfg.alpha_lo == 0.005);
  CHECK(cfg.alpha_hi == 0.1);
  CHECK(cfg.budget.patience == 2000);
  CHECK(cfg.eval_tasks == 100);
  // concept defaults
  CHECK(cfg.support_sizes == std::vector<int>{5, 10, 15});
  CHECK(cfg.train_support_lo == 2);
  CHECK(cfg.train_support_hi == 15);
}

TEST_CASE("unknown keys are rejected with the offending path") {
  std::string path = write_temp_config(
      R"({"training": {"learning_rate": 0.01}, "typo_block": {}})");
  try {
    load_config(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("training.learning_rate") != std::string::npos);
    CHECK(msg.find("typo_block") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("file values override defaults and flags override the file") {
  std::string path = write_temp_config(
      R"({"training": {"outer_lr": 0.005}, "task": {"family": "modular"}})");
  ExperimentConfig cfg = load_config(path, {"training.outer_lr=0.01"});
  CHECK(cfg.outer.lr == 0.01);                 // flag wins
  CHECK(cfg.task == TaskKind::Modular);        // file wins over default
  CHECK(cfg.support_sizes == std::vector<int>{20, 40, 100});
  CHECK(cfg.train_support_lo == 10);
  CHECK(cfg.train_support_hi == 100);
  std::remove(path.c_str());
}

TEST_CASE("conditions must match the task's reported set") {
  std::string path = write_temp_config(
      R"({"task": {"family": "modular"},
          "evaluation": {"conditions": ["M1", "R200"]}})");
  CHECK_THROWS_AS(load_config(path), ConfigError);
  std::remove(path.c_str());

  ExperimentConfig concept_cfg = load_config("");
  REQUIRE(concept_cfg.conditions.size() == 4);  // R1 R10 R200 M1

  std::string mod = write_temp_config(R"({"task": {"family": "modular"}})");
  ExperimentConfig mod_cfg = load_config(mod);
  CHECK(mod_cfg.conditions.size() == 3);  // R1 R10 M1
  std::remove(mod.c_str());
}

TEST_CASE("variant grids") {
  auto paper = ExperimentConfig::grid_variants(Family::MLP, true);
  CHECK(paper.size() == 16);
  auto desk = ExperimentConfig::grid_variants(Family::Transformer, false);
  CHECK(desk.size() == 2);
  auto cnn = ExperimentConfig::grid_variants(Family::CNN, true);
  CHECK(cnn.size() == 16);
  for (auto [l, w] : cnn) {
    CHECK((l == 2 || l == 4 || l == 6 || l == 8));
    CHECK((w == 16 || w == 32 || w == 64 || w == 128));
  }
}

TEST_CASE("explicit variants are validated against the grid constraints") {
  std::string path = write_temp_config(
      R"({"architecture": {"families": ["mlp"], "variants": [[3, 8]]}})");
  ExperimentConfig cfg = load_config(path);
  CHECK_THROWS_AS(cfg.plan_for(Family::MLP), SpecError);
  std::remove(path.c_str());
}

TEST_CASE("plan carries task settings into episode generation") {
  std::string path = write_temp_config(
      R"({"task": {"family": "modular", "scheme": "twenty_twenty",
                   "representation": "image"},
          "architecture": {"families": ["lstm"]}})");
  ExperimentConfig cfg = load_config(path);
  ExperimentPlan plan = cfg.plan_for(Family::LSTM);
  CHECK(plan.task == TaskKind::Modular);
  CHECK(plan.scheme == ModuliScheme::TwentyTwenty);
  CHECK(plan.repr == Representation::Image);
  ArchSpec spec = plan.arch_spec(1, 32);
  CHECK(spec.token_dim == 16);  // 4x4 patches of a grayscale image
  CHECK(spec.output_dim == 1);
}

TEST_CASE("checkpoint names are deterministic and scheme-tagged") {
  ExperimentConfig cfg = load_config("");
  ExperimentPlan plan = cfg.plan_for(Family::MLP);
  CHECK(checkpoint_name(plan, 3) == "concept_bits_mlp_seed3.ckpt");
  plan.task = TaskKind::Modular;
  plan.scheme = ModuliScheme::TwentyTwenty;
  CHECK(checkpoint_name(plan, 0) ==
        "modular_twenty_twenty_bits_mlp_seed0.ckpt");
}

TEST_CASE("malformed json reports a parse error") {
  std::string path = write_temp_config("{ not json");
  CHECK_THROWS_AS(load_config(path), ConfigError);
  std::remove(path.c_str());
}
