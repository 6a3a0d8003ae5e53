#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mhe/experiments.hpp"

using namespace mhe;

namespace {
std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunOptions quick_opts(std::uint64_t seed = 1) {
  RunOptions o;
  o.threads = 2;
  o.seed = seed;
  return o;
}
}  // namespace

TEST_CASE("solver identities pass on a seven-vertex patch") {
  const nlohmann::json cfg = {
      {"experiment", "solver-identities"},
      {"domain",
       {{"shape", "disk"}, {"radius", 0.55}, {"delta", 0.5}, {"a_angle", 1.5707963267948966},
        {"b_angle", -1.5707963267948966}, {"mass", {{"kind", "constant"}, {"value", 0.3}}}}}};
  const ExperimentOutcome out = run_solver_identities(cfg, quick_opts());
  INFO(out.first_failure());
  REQUIRE(out.pass);
  REQUIRE(out.report.at("interior_vertices").get<int>() == 7);
}

TEST_CASE("solver identities pass with a radial mass profile") {
  const nlohmann::json cfg = {
      {"experiment", "solver-identities"},
      {"domain",
       {{"shape", "disk"}, {"radius", 1.0}, {"delta", 0.125}, {"a_angle", 2.2},
        {"b_angle", -0.9}, {"mass", {{"kind", "radial"}, {"value", 2.0}, {"scale", 0.7}}}}}};
  const ExperimentOutcome out = run_solver_identities(cfg, quick_opts());
  INFO(out.first_failure());
  REQUIRE(out.pass);
}

TEST_CASE("unknown experiment names are rejected") {
  REQUIRE_THROWS_AS(run_experiment({{"experiment", "nope"}}, quick_opts()), ConfigError);
  REQUIRE_THROWS_AS(run_experiment(nlohmann::json::object(), quick_opts()), ConfigError);
}

TEST_CASE("experiment catalog is fixed") {
  REQUIRE(experiment_names().size() == 8);
}

TEST_CASE("artifacts are written and reruns are byte-identical") {
  const nlohmann::json cfg = {
      {"experiment", "solver-identities"},
      {"domain",
       {{"shape", "disk"}, {"radius", 0.55}, {"delta", 0.5}, {"a_angle", 1.5707963267948966},
        {"b_angle", -1.5707963267948966}, {"mass", {{"kind", "constant"}, {"value", 0.3}}}}}};
  const auto base = std::filesystem::temp_directory_path() / "mhe_exp_test";
  std::filesystem::remove_all(base);
  const auto out1 = base / "run1";
  const auto out2 = base / "run2";
  RunOptions opt = quick_opts(42);
  const ExperimentOutcome o1 = run_and_write(cfg, out1, opt);
  const ExperimentOutcome o2 = run_and_write(cfg, out2, opt);
  REQUIRE(o1.pass);
  REQUIRE(o2.pass);

  const std::string runid = run_id_for(cfg, opt.seed);
  const auto dir1 = out1 / "solver-identities" / runid;
  const auto dir2 = out2 / "solver-identities" / runid;
  REQUIRE(std::filesystem::exists(dir1 / "manifest.json"));
  REQUIRE(std::filesystem::exists(dir1 / "report.json"));
  for (const char* name : {"residuals.csv", "observable.csv"}) {
    REQUIRE(std::filesystem::exists(dir1 / name));
    REQUIRE(slurp(dir1 / name) == slurp(dir2 / name));
  }
  std::filesystem::remove_all(base);
}

TEST_CASE("kappa4 smoke run produces the expected report shape") {
  const nlohmann::json cfg = {
      {"experiment", "kappa4-check"},
      {"N", 40},
      {"t", 0.05},
      {"domain",
       {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 16}, {"a_angle", 3.141592653589793},
        {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 0.0}}}}}};
  const ExperimentOutcome out = run_kappa4_check(cfg, quick_opts(3));
  REQUIRE(out.report.contains("var_ratio"));
  REQUIRE(out.report.at("N").get<int>() == 40);
  REQUIRE(out.report.at("var_ratio").get<double>() > 0.0);
}

TEST_CASE("observable convergence on a reduced ladder") {
  const nlohmann::json cfg = {{"experiment", "observable-convergence"},
                              {"deltas", {1.0 / 12, 1.0 / 24}},
                              {"h_ref", 1.0 / 64},
                              {"masses", {0.0}},
                              {"probes", {{0.25, 0.3}}}};
  const ExperimentOutcome out = run_observable_convergence(cfg, quick_opts());
  REQUIRE(out.report.contains("masses"));
  const auto errors = out.report.at("masses")[0].at("errors")[0].get<std::vector<double>>();
  REQUIRE(errors.size() == 2);
  REQUIRE(errors[1] <= errors[0]);
}

TEST_CASE("crossing smoke run reports four annuli") {
  const nlohmann::json cfg = {
      {"experiment", "crossing-powerlaw"},
      {"N", 60},
      {"domain",
       {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 10}, {"a_angle", 3.141592653589793},
        {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}}}};
  const ExperimentOutcome out = run_crossing_powerlaw(cfg, quick_opts(5));
  REQUIRE(out.report.at("annuli").size() == 4);
}

TEST_CASE("gff covariance audit passes at small scale") {
  const nlohmann::json cfg = {
      {"experiment", "gff-coupling"},
      {"covariance_samples", 800},
      {"covariance_pairs", 6},
      {"tau", 0.01},
      {"N", 150},
      {"probes", {{0.3, 0.2}}},
      {"domain",
       {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 8}, {"a_angle", 3.141592653589793},
        {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}}},
      {"coupling_domain",
       {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 10}, {"a_angle", 3.141592653589793},
        {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}}}};
  const ExperimentOutcome out = run_gff_coupling(cfg, quick_opts(9));
  INFO(out.first_failure());
  REQUIRE(out.pass);
}

TEST_CASE("msle drift smoke run: novikov bound and finite slope") {
  const nlohmann::json cfg = {{"experiment", "msle-drift"}, {"N", 8},    {"h", 1.0 / 16},
                              {"mass2", 16.0},              {"dt", 1e-3}, {"t_end", 0.05},
                              {"qv_dt", 1e-3},              {"qv_t_end", 0.04}};
  const ExperimentOutcome out = run_msle_drift(cfg, quick_opts(2));
  bool novikov_pass = false;
  for (const auto& c : out.checks) {
    if (c.name == "novikov_bound") novikov_pass = c.pass;
  }
  REQUIRE(novikov_pass);
  REQUIRE(std::isfinite(out.report.at("slope").get<double>()));
}
