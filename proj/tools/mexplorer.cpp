// Batch experiment runner for the massive harmonic explorer laboratory.
//
// Usage:
//   mexplorer run <config.json> [--threads N] [--seed S] [--outdir D]
//   mexplorer list-experiments
//
// Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mhe/experiments.hpp"

int main(int argc, char** argv) {
  CLI::App app{"massive harmonic explorer experiment runner"};
  app.require_subcommand(1);

  auto* list_cmd = app.add_subcommand("list-experiments", "print the experiment catalog");

  std::string config_path;
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  std::uint64_t seed = 0;
  std::string outdir;
  auto* run_cmd = app.add_subcommand("run", "run one experiment from a JSON config");
  run_cmd->add_option("config", config_path, "experiment config file")->required();
  run_cmd->add_option("--threads", threads, "worker pool size");
  auto* seed_opt = run_cmd->add_option("--seed", seed, "override the config seed");
  run_cmd->add_option("--outdir", outdir, "output directory (default $MEXPLORER_OUTDIR or ./out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (list_cmd->parsed()) {
    for (const auto& name : mhe::experiment_names()) std::cout << name << "\n";
    return 0;
  }

  try {
    std::ifstream in(config_path);
    if (!in) {
      std::cerr << "usage error: cannot open config " << config_path << "\n";
      return 2;
    }
    nlohmann::json cfg;
    try {
      cfg = nlohmann::json::parse(in);
    } catch (const std::exception& e) {
      std::cerr << "usage error: invalid JSON: " << e.what() << "\n";
      return 2;
    }

    mhe::RunOptions opt;
    opt.threads = threads > 0 ? threads : 1;
    opt.seed = seed_opt->count() > 0 ? seed : cfg.value("seed", std::uint64_t{1});

    std::string out = outdir;
    if (out.empty()) {
      const char* env = std::getenv("MEXPLORER_OUTDIR");
      out = env != nullptr ? env : "out";
    }

    const mhe::ExperimentOutcome outcome = mhe::run_and_write(cfg, out, opt);
    for (const auto& c : outcome.checks) {
      std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " value=" << c.value
                << " bound=" << c.bound << "\n";
    }
    if (!outcome.pass) {
      std::cerr << "check failed: " << outcome.first_failure() << "\n";
      return 1;
    }
    return 0;
  } catch (const mhe::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
