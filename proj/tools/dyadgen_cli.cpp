#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dyadgen/pipeline.hpp"

namespace fs = std::filesystem;
using dyadgen::pipeline::RunConfig;

int main(int argc, char** argv) {
  CLI::App app{"dyadgen: audio-driven interactive head generation"};
  app.require_subcommand(1);

  struct CommonArgs {
    std::string config;
    std::string out;
    uint64_t seed = 0;
    bool seed_set = false;
  };

  auto add_common = [](CLI::App* sub, CommonArgs& a) {
    sub->add_option("--config", a.config, "JSON config file")->required();
    sub->add_option("--seed", a.seed, "override config seed");
    sub->add_option("--out", a.out, "override output directory");
  };

  CommonArgs gen_a, t1_a, t2_a, genr_a, eval_a;
  int stage = 0;
  std::string run_dir;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, gen_a);
  CLI::App* train = app.add_subcommand("train", "train one pipeline stage");
  train->add_option("--stage", stage, "1 or 2")->required();
  add_common(train, t1_a);
  CLI::App* genr = app.add_subcommand("generate", "sample motion and render frames");
  add_common(genr, genr_a);
  CLI::App* eval = app.add_subcommand("evaluate", "evaluate a generated run");
  add_common(eval, eval_a);
  eval->add_option("--run-dir", run_dir, "run directory (default: output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  CommonArgs* a = nullptr;
  std::string command;
  if (gen->parsed()) {
    a = &gen_a;
    command = "gen-data";
  } else if (train->parsed()) {
    a = &t1_a;
    command = stage == 2 ? "train-stage2" : stage == 1 ? "train-stage1" : "train-bad";
  } else if (genr->parsed()) {
    a = &genr_a;
    command = "generate";
  } else {
    a = &eval_a;
    command = "evaluate";
  }

  RunConfig cfg;
  try {
    cfg = dyadgen::pipeline::load_config(a->config);
  } catch (const dyadgen::ParamError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return 2;
  } catch (const dyadgen::FormatError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  }
  CLI::App* active = app.get_subcommands().front();
  if (active->count("--seed") > 0) cfg.seed = a->seed;
  if (!a->out.empty()) cfg.output_dir = a->out;
  if (command == "train-bad") {
    std::cerr << "parameter error: --stage must be 1 or 2\n";
    return 2;
  }

  fs::path rd = run_dir.empty() ? cfg.output_dir : fs::path(run_dir);
  return dyadgen::pipeline::run_command(command, cfg, rd);
}
