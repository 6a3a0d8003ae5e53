#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhe/common.hpp"
#include "mhe/continuum.hpp"
#include "mhe/explorer.hpp"
#include "mhe/gff.hpp"
#include "mhe/io.hpp"
#include "mhe/lattice.hpp"
#include "mhe/loewner.hpp"
#include "mhe/mharmonic.hpp"
#include "mhe/stats.hpp"

namespace mhe {

struct ExperimentCheck {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double bound = 0.0;
};

struct ExperimentOutcome {
  std::string experiment;
  bool pass = true;
  std::vector<ExperimentCheck> checks;
  nlohmann::json report;

  void check(const std::string& name, bool ok, double value = 0.0, double bound = 0.0) {
    checks.push_back({name, ok, value, bound});
    pass = pass && ok;
  }
  std::string first_failure() const {
    for (const auto& c : checks) {
      if (!c.pass) return c.name;
    }
    return {};
  }
  nlohmann::json checks_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : checks) {
      arr.push_back({{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"bound", c.bound}});
    }
    return arr;
  }
};

struct RunOptions {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  std::uint64_t seed = 1;
  std::filesystem::path artifact_dir;  // empty: no files written
};

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {
      "solver-identities", "martingale-mc",        "kappa4-check",
      "crossing-powerlaw", "continuum-identities", "msle-drift",
      "gff-coupling",      "observable-convergence"};
  return names;
}

namespace detail {

inline DomainSpec domain_spec(const nlohmann::json& cfg, const nlohmann::json& fallback) {
  if (cfg.contains("domain")) return domain_spec_from_json(cfg.at("domain"));
  return domain_spec_from_json(fallback);
}

inline std::vector<Point> probes_from(const nlohmann::json& cfg,
                                      const std::vector<Point>& fallback) {
  if (!cfg.contains("probes")) return fallback;
  std::vector<Point> out;
  for (const auto& p : cfg.at("probes")) out.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  if (out.empty()) throw ConfigError("probes must be nonempty");
  return out;
}

inline void write_check_csv(const std::filesystem::path& dir, const ExperimentOutcome& o) {
  if (dir.empty()) return;
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : o.checks) {
    rows.push_back({c.name, c.pass ? "1" : "0", format_double(c.value), format_double(c.bound)});
  }
  write_csv(dir / "checks.csv", {"check", "pass", "value", "bound"}, rows);
}

}  // namespace detail

// --- solver-identities ------------------------------------------------------

inline ExperimentOutcome run_solver_identities(const nlohmann::json& cfg,
                                               const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "solver-identities";
  const DomainSpec spec = detail::domain_spec(
      cfg, {{"shape", "disk"}, {"radius", 1.0}, {"delta", 0.125}, {"a_angle", 3.141592653589793},
            {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}});
  const LatticeDomain dom = spec.build();
  const DomainState state = DomainState::initial(dom);

  const ScalarField h = observable_h(state);  // the solve throws above 1e-10 residual

  std::vector<int> plus, minus;
  for (int v : dom.boundary_ids) (dom.sign[v] > 0 ? plus : minus).push_back(v);
  const ScalarField Hp = massive_harmonic_measure(state, plus);
  const ScalarField Hm = massive_harmonic_measure(state, minus);
  const ScalarField kill = killing_probability(state);

  double partition = 0.0, two_route = 0.0, range = 0.0;
  for (int v : dom.interior_ids) {
    partition = std::max(partition,
                         std::abs(Hp.values[v] + Hm.values[v] + kill.values[v] - 1.0));
    two_route = std::max(two_route,
                         std::abs(h.values[v] - 0.5 * (Hp.values[v] - Hm.values[v])));
    range = std::max({range, -Hp.values[v], Hp.values[v] - 1.0, -kill.values[v]});
  }
  const double identity4 = mharm_identity_residual(state, h);

  // swapped-sign solve: 1 - (h + 1/2) must equal h~ + 1/2
  const ScalarField h_swapped =
      solve_massive_harmonic(state, sign_boundary_values(state, -0.5, 0.5));
  double sign_swap = 0.0;
  for (int v : dom.interior_ids) {
    sign_swap = std::max(sign_swap, std::abs(1.0 - (h.values[v] + 0.5) -
                                             (h_swapped.values[v] + 0.5)));
  }

  const ScalarField eta = eta_field(state);
  double eta_rel = 0.0;
  const double root_pi_half = std::sqrt(1.5707963267948966);
  for (int v : dom.interior_ids) {
    eta_rel = std::max(eta_rel, std::abs(eta.values[v] - root_pi_half * h.values[v]));
  }

  out.check("partition_identity", partition <= 1e-10, partition, 1e-10);
  out.check("observable_two_routes", two_route <= 1e-10, two_route, 1e-10);
  out.check("rescaled_harmonicity_identity", identity4 <= 1e-8, identity4, 1e-8);
  out.check("sign_swap_symmetry", sign_swap <= 1e-10, sign_swap, 1e-10);
  out.check("eta_proportionality", eta_rel <= 1e-12, eta_rel, 1e-12);
  out.check("measure_range", range <= 1e-12, range, 1e-12);

  out.report["interior_vertices"] = dom.interior_count();
  out.report["residuals"] = {{"partition", partition},
                             {"two_route", two_route},
                             {"identity", identity4},
                             {"sign_swap", sign_swap},
                             {"eta", eta_rel}};
  if (!opt.artifact_dir.empty()) {
    write_field_csv(opt.artifact_dir / "observable.csv", h);
    std::vector<std::vector<std::string>> rows = {
        {"partition", format_double(partition)},   {"two_route", format_double(two_route)},
        {"identity", format_double(identity4)},    {"sign_swap", format_double(sign_swap)},
        {"eta", format_double(eta_rel)}};
    write_csv(opt.artifact_dir / "residuals.csv", {"identity", "max_residual"}, rows);
  }
  return out;
}

// --- martingale-mc ----------------------------------------------------------

inline ExperimentOutcome run_martingale_mc(const nlohmann::json& cfg, const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "martingale-mc";
  const DomainSpec spec = detail::domain_spec(
      cfg, {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 24}, {"a_angle", 3.141592653589793},
            {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}});
  const LatticeDomain dom = spec.build();
  const std::vector<Point> probes =
      detail::probes_from(cfg, {Point(0.31, 0.22), Point(-0.27, 0.38)});
  const std::vector<double> times = cfg.value("times", std::vector<double>{0.02, 0.05, 0.1});
  const int N = cfg.value("N", 2000);

  nlohmann::json probes_json = nlohmann::json::array();
  std::vector<std::vector<std::string>> rows;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const MartingaleMcReport rep =
        martingale_audit_mc(dom, probes[p], times, N, opt.seed + p, opt.threads);
    nlohmann::json tj = nlohmann::json::array();
    for (std::size_t t = 0; t < times.size(); ++t) {
      const double mean = rep.h_stats[t].mean();
      const double se = rep.h_stats[t].stderror();
      const double z = z_score(mean, rep.h0, se);
      out.check("probe" + std::to_string(p) + "_t" + std::to_string(times[t]),
                std::abs(z) <= 3.0, z, 3.0);
      tj.push_back({{"t", times[t]}, {"mean", mean}, {"stderr", se}, {"z", z},
                    {"swallowed_fraction", rep.swallowed_fraction[t]}});
      rows.push_back({std::to_string(p), format_double(times[t]), format_double(mean),
                      format_double(se), format_double(rep.h0), format_double(z)});
    }
    probes_json.push_back({{"probe", {probes[p].real(), probes[p].imag()}},
                           {"h0", rep.h0},
                           {"checkpoints", tj},
                           {"warnings", rep.warnings}});
  }
  out.report["probes"] = probes_json;
  out.report["N"] = N;
  if (!opt.artifact_dir.empty()) {
    write_csv(opt.artifact_dir / "checkpoints.csv", {"probe", "t", "mean", "stderr", "h0", "z"},
              rows);
  }
  return out;
}

// --- kappa4-check -----------------------------------------------------------

inline ExperimentOutcome run_kappa4_check(const nlohmann::json& cfg, const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "kappa4-check";
  const DomainSpec spec = detail::domain_spec(
      cfg, {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 40}, {"a_angle", 3.141592653589793},
            {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 0.0}}}});
  const LatticeDomain dom = spec.build();
  const double t = cfg.value("t", 0.1);
  const int N = cfg.value("N", 1000);

  const MartingaleMcReport rep =
      martingale_audit_mc(dom, Point(0.0, 0.0), {t}, N, opt.seed, opt.threads);
  const double mean = rep.w_stats[0].mean();
  const double se = rep.w_stats[0].stderror();
  const double var_ratio = rep.w_stats[0].variance() / (4.0 * t);

  out.check("mean_within_3se", std::abs(mean) <= 3.0 * se, mean, 3.0 * se);
  out.check("var_ratio", var_ratio >= 0.85 && var_ratio <= 1.15, var_ratio, 1.15);
  out.report = {{"t", t}, {"N", N}, {"mean_W", mean}, {"stderr", se}, {"var_ratio", var_ratio}};
  if (!opt.artifact_dir.empty()) {
    write_csv(opt.artifact_dir / "kappa4.csv", {"t", "mean_W", "stderr", "var_ratio"},
              {{format_double(t), format_double(mean), format_double(se),
                format_double(var_ratio)}});
  }
  return out;
}

// --- crossing-powerlaw ------------------------------------------------------

inline ExperimentOutcome run_crossing_powerlaw(const nlohmann::json& cfg,
                                               const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "crossing-powerlaw";
  const DomainSpec spec = detail::domain_spec(
      cfg, {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 20}, {"a_angle", 3.141592653589793},
            {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}});
  const LatticeDomain dom = spec.build();
  const int N = cfg.value("N", 2000);
  const double cx = cfg.value("center_x", 0.0), cy = cfg.value("center_y", 0.85);
  const double R = cfg.value("R", 0.55);
  std::vector<double> radii = cfg.value("radii", std::vector<double>{});
  if (radii.empty()) {
    const double ratio = cfg.value("ratio", 0.72);
    double r = R * 0.8;
    for (int k = 0; k < 4; ++k) {
      radii.push_back(r);
      r *= ratio;
    }
  }
  std::vector<Annulus> annuli;
  for (double r : radii) annuli.push_back({Point(cx, cy), r, R});

  const CrossingReport rep = crossing_statistics(dom, annuli, N, opt.seed, opt.threads);

  bool monotone = true;
  for (std::size_t j = 1; j < rep.probability.size(); ++j) {
    if (rep.probability[j] > rep.probability[j - 1] + rep.stderror[j] + rep.stderror[j - 1]) {
      monotone = false;
    }
  }
  out.check("monotone_in_ratio", monotone, 0.0, 0.0);
  out.check("slope_positive", rep.slope_defined && rep.loglog_slope > 0.0, rep.loglog_slope, 0.0);

  nlohmann::json table = nlohmann::json::array();
  std::vector<std::vector<std::string>> rows;
  for (std::size_t j = 0; j < annuli.size(); ++j) {
    table.push_back({{"r", annuli[j].r}, {"R", annuli[j].R}, {"p", rep.probability[j]},
                     {"stderr", rep.stderror[j]}, {"flagged", static_cast<bool>(rep.flagged[j])}});
    rows.push_back({format_double(annuli[j].r / annuli[j].R), format_double(rep.probability[j]),
                    format_double(rep.stderror[j])});
  }
  out.report = {{"annuli", table}, {"slope", rep.loglog_slope}, {"N", N}};
  if (!opt.artifact_dir.empty()) {
    write_csv(opt.artifact_dir / "crossings.csv", {"r_over_R", "p", "stderr"}, rows);
    // one capacity-tracked sample path for inspection
    ExplorerState sample(dom, opt.seed, 0, /*track_capacity=*/true);
    long budget = kStepBudget;
    while (!sample.terminated()) {
      if (--budget < 0) throw NonTermination();
      sample.step();
    }
    write_path_csv(opt.artifact_dir / "sample_path.csv", sample.path(),
                   sample.capacity_per_step());
  }
  return out;
}

// --- continuum-identities ---------------------------------------------------

inline ExperimentOutcome run_continuum_identities(const nlohmann::json& cfg,
                                                  const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "continuum-identities";
  const double h = cfg.value("h", 1.0 / 64);
  const double m2 = cfg.value("mass2", 4.0);
  ShapeInfo shape;
  shape.kind = ShapeInfo::Kind::Disk;
  shape.radius = 1.0;
  shape.a_angle = cfg.value("a_angle", 3.141592653589793);
  shape.b_angle = cfg.value("b_angle", 0.0);
  auto mass_fn = [m2](Point) { return m2; };
  const Grid grid = make_grid(shape, h, mass_fn);

  const double resolvent = resolvent_check(grid, 8, opt.seed);
  out.check("resolvent_identity", resolvent <= 1e-6, resolvent, 1e-6);

  // deliberate-bug power check: a wrong kernel in the correction term must be
  // visibly inconsistent; bulk nodes, where the kernels are largest
  {
    GreenOperator gm(grid), g0(grid, true);
    const int z = grid.nearest_node(Point(0.15, 0.05));
    const int w = grid.nearest_node(Point(-0.2, 0.1));
    const Eigen::VectorXd colz = g0.kernel_column(z);
    const Eigen::VectorXd colw0 = g0.kernel_column(w);
    const Eigen::VectorXd colwm = gm.kernel_column(w);
    double wrong = 0.0;
    for (int y = 0; y < grid.size(); ++y) {
      wrong += grid.mass2[y] * colz[y] * colw0[y] * h * h;  // massless kernel twice
    }
    const double sentinel = std::abs(colwm[z] - (colz[w] - wrong));
    out.check("resolvent_sentinel", sentinel > 1e-3, sentinel, 1e-3);
  }

  const auto arcs = [&](Point z) {
    return on_clockwise_arc(std::atan2(z.imag(), z.real()), shape.a_angle, shape.b_angle)
               ? 0.5
               : -0.5;
  };
  const HarmonicTriple triple = massive_harmonic_continuum(grid, arcs);
  out.check("representation_triangle", triple.max_pairwise_diff <= 1e-8,
            triple.max_pairwise_diff, 1e-8);

  const PoissonKernels pk = massive_poisson_P(grid);
  double min_pm = std::numeric_limits<double>::max(), max_excess = -1.0;
  for (int n = 0; n < grid.size(); ++n) {
    if (!pk.valid[n]) continue;
    min_pm = std::min(min_pm, pk.Pm[n]);
    max_excess = std::max(max_excess, pk.Pm[n] - pk.P[n]);
  }
  out.check("kernel_positive", min_pm > 0.0, min_pm, 0.0);
  out.check("kernel_dominated", max_excess <= 1e-12, max_excess, 1e-12);

  // ratio monotonicity in the mass field
  {
    const Grid grid2 = make_grid(shape, h, [m2](Point) { return 2.0 * m2; });
    const PoissonKernels pk2 = massive_poisson_P(grid2);
    double worst = -1.0;
    for (int n = 0; n < grid.size(); ++n) {
      if (!pk.valid[n] || !pk2.valid[n] || pk.P[n] <= 0.0) continue;
      worst = std::max(worst, pk2.Pm[n] / pk2.P[n] - pk.Pm[n] / pk.P[n]);
    }
    out.check("kernel_ratio_mass_monotone", worst <= 1e-10, worst, 1e-10);
  }

  // conformal covariance of the massive Green function under a disk
  // automorphism, pushing the mass forward
  {
    const AnalyticMap phi = disk_automorphism(Point(0.3, 0.2));
    const Grid grid_t = make_grid(shape, h, pushforward_mass(phi, mass_fn));
    GreenOperator gm(grid), gmt(grid_t);
    double worst = 0.0;
    const std::vector<std::pair<Point, Point>> pairs = {
        {Point(-0.35, 0.1), Point(0.2, 0.45)},
        {Point(0.1, -0.4), Point(-0.2, 0.3)},
        {Point(0.45, 0.05), Point(-0.1, -0.35)}};
    for (const auto& [z, w] : pairs) {
      const int nw = grid.nearest_node(w);
      const Eigen::VectorXd col = gm.kernel_column(nw);
      const double g1 = grid_interpolate(grid, col, z);
      const int nwt = grid_t.nearest_node(phi.f(grid.coords[nw]));
      const Eigen::VectorXd colt = gmt.kernel_column(nwt);
      const double g2 = grid_interpolate(grid_t, colt, phi.f(z));
      worst = std::max(worst, std::abs(g1 - g2) / std::max(std::abs(g1), 1e-12));
    }
    out.check("green_conformal_covariance", worst <= 0.05, worst, 0.05);
  }

  // antisymmetric configuration: vanishing drift functional
  {
    ShapeInfo sym = shape;
    sym.a_angle = -1.5707963267948966;
    sym.b_angle = 1.5707963267948966;
    Grid gsym = make_grid(sym, h, mass_fn);
    const double F = drift_functional(gsym);
    out.check("drift_antisymmetric_zero", std::abs(F) <= 1e-8, F, 1e-8);
  }

  out.report = {{"h", h}, {"mass2", m2}, {"resolvent", resolvent},
                {"triple", triple.max_pairwise_diff}};
  detail::write_check_csv(opt.artifact_dir, out);
  return out;
}

// --- msle-drift -------------------------------------------------------------

inline ExperimentOutcome run_msle_drift(const nlohmann::json& cfg, const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "msle-drift";
  ShapeInfo shape;
  shape.kind = ShapeInfo::Kind::Disk;
  shape.radius = 1.0;
  shape.a_angle = cfg.value("a_angle", 3.141592653589793);
  shape.b_angle = cfg.value("b_angle", 0.6);
  const double h = cfg.value("h", 1.0 / 32);
  const double m2 = cfg.value("mass2", 16.0);
  const int N = cfg.value("N", 500);
  MsleOptions mopt;
  mopt.dt = cfg.value("dt", 1e-3);
  mopt.t_end = cfg.value("t_end", 0.1);
  mopt.drift_refresh_every = cfg.value("refresh_every", 10);
  mopt.seed = opt.seed;

  const GridDriftProvider provider(shape, h, [m2](Point) { return m2; });
  const double novikov_rhs =
      (m2 * m2 / (8.0 * 3.141592653589793)) * fd_green_massless(provider.grid_for({})).total_mass();

  struct RunRow {
    std::vector<double> x, y;
    double novikov = 0.0;
  };
  std::vector<RunRow> rows(N);
  run_parallel(N, opt.threads, [&](std::size_t i) {
    MsleOptions o = mopt;
    o.stream = i;
    const MsleResult res = simulate_msle4(
        [&provider](const SlitChain& c, double t) { return provider(c, t); }, o);
    RunRow row;
    const int K = o.drift_refresh_every;
    const int nblocks = static_cast<int>(res.drift_values.size());
    for (int j = 0; j < nblocks; ++j) {
      const std::size_t k0 = static_cast<std::size_t>(j) * K;
      const std::size_t k1 = std::min(k0 + K, res.driving.values.size() - 1);
      if (k0 >= res.driving.values.size() - 1) break;
      row.x.push_back(-res.drift_values[j] * (res.driving.times[k1] - res.driving.times[k0]));
      row.y.push_back(res.driving.values[k1] - res.driving.values[k0]);
    }
    row.novikov = res.novikov_accumulated;
    rows[i] = std::move(row);
  });

  std::vector<double> xs, ys;
  double novikov_worst = 0.0;
  for (const auto& row : rows) {
    xs.insert(xs.end(), row.x.begin(), row.x.end());
    ys.insert(ys.end(), row.y.begin(), row.y.end());
    novikov_worst = std::max(novikov_worst, row.novikov);
  }
  // regression through the origin: slope = <x, y> / <x, x>
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += xs[i] * ys[i];
    sxx += xs[i] * xs[i];
  }
  const double slope = sxx > 0 ? sxy / sxx : 0.0;
  out.check("drift_regression_slope", slope >= 0.7 && slope <= 1.3, slope, 1.3);
  out.check("novikov_bound", novikov_worst <= novikov_rhs, novikov_worst, novikov_rhs);

  // eta quadratic-variation checks on single runs
  {
    MsleOptions qv;
    qv.dt = cfg.value("qv_dt", 1e-4);
    qv.t_end = cfg.value("qv_t_end", 0.1);
    qv.drift_refresh_every = 10;
    qv.seed = opt.seed + 17;
    const Point probe(0.15, 0.45);
    const GridDriftProvider massless(shape, h, [](Point) { return 0.0; });
    const EtaQvReport qv0 = eta_qv_check(massless, probe, qv, 5);
    out.check("eta_qv_ratio_massless", qv0.ratio >= 0.8 && qv0.ratio <= 1.2, qv0.ratio, 1.2);
    const GridDriftProvider massive(shape, h, [m2](Point) { return m2; });
    const EtaQvReport qvm = eta_qv_check(massive, probe, qv, 5);
    out.check("eta_qv_ratio_massive", qvm.ratio >= 0.8 && qvm.ratio <= 1.2, qvm.ratio, 1.2);
    out.report["eta_qv"] = {{"massless_ratio", qv0.ratio},
                            {"massive_ratio", qvm.ratio},
                            {"increments", qv0.increments}};
  }

  out.report["slope"] = slope;
  out.report["novikov_max"] = novikov_worst;
  out.report["novikov_bound"] = novikov_rhs;
  out.report["N"] = N;
  if (!opt.artifact_dir.empty()) {
    std::vector<std::vector<std::string>> csv;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      csv.push_back({format_double(xs[i]), format_double(ys[i])});
    }
    write_csv(opt.artifact_dir / "drift_blocks.csv", {"expected_dW", "observed_dW"}, csv);
    // representative run: driving samples, traced curve and the drift trace
    MsleOptions o = mopt;
    o.stream = 0;
    const MsleResult res = simulate_msle4(
        [&provider](const SlitChain& c, double t) { return provider(c, t); }, o);
    write_driving_csv(opt.artifact_dir / "driving.csv", res.driving);
    write_curve_csv(opt.artifact_dir / "curve.csv", res.driving, res.curve);
    std::vector<std::vector<std::string>> ft;
    for (std::size_t i = 0; i < res.drift_times.size(); ++i) {
      ft.push_back({format_double(res.drift_times[i]), format_double(res.drift_values[i])});
    }
    write_csv(opt.artifact_dir / "drift_trace.csv", {"t", "F"}, ft);
  }
  return out;
}

// --- gff-coupling -----------------------------------------------------------

inline ExperimentOutcome run_gff_coupling(const nlohmann::json& cfg, const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "gff-coupling";
  const DomainSpec spec = detail::domain_spec(
      cfg, {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 16}, {"a_angle", 3.141592653589793},
            {"b_angle", 0.0}, {"mass", {{"kind", "constant"}, {"value", 1.0}}}});
  const LatticeDomain dom = spec.build();
  const int n_samples = cfg.value("covariance_samples", 5000);
  const int n_pairs = cfg.value("covariance_pairs", 20);

  // covariance audit against the factorization's own covariance entries
  {
    const DomainState state = DomainState::initial(dom);
    const GffSampler sampler(state);
    Rng pick(opt.seed, 123);
    std::vector<std::pair<int, int>> pairs;
    for (int k = 0; k < n_pairs; ++k) {
      pairs.emplace_back(dom.interior_ids[pick.uniform_index(dom.interior_ids.size())],
                         dom.interior_ids[pick.uniform_index(dom.interior_ids.size())]);
    }
    std::vector<Eigen::VectorXd> fields(n_samples);
    run_parallel(n_samples, opt.threads, [&](std::size_t i) {
      Rng rng(opt.seed, i);
      fields[i] = sampler.sample(rng).values;
    });
    double worst_dev = 0.0;
    nlohmann::json pj = nlohmann::json::array();
    bool all_ok = true;
    for (auto [v, w] : pairs) {
      double s1 = 0.0, s2 = 0.0, s12 = 0.0;
      for (const auto& f : fields) {
        s1 += f[v];
        s2 += f[w];
        s12 += f[v] * f[w];
      }
      const double emp = s12 / n_samples - (s1 / n_samples) * (s2 / n_samples);
      const double cvv = sampler.covariance(v, v);
      const double cww = sampler.covariance(w, w);
      const double cvw = sampler.covariance(v, w);
      const double mc_se = std::sqrt((cvv * cww + cvw * cvw) / n_samples);
      const double dev = std::abs(emp - cvw) / mc_se;
      worst_dev = std::max(worst_dev, dev);
      all_ok = all_ok && dev <= 4.0;
      pj.push_back({{"v", v}, {"w", w}, {"empirical", emp}, {"exact", cvw}, {"dev_se", dev}});
    }
    out.check("covariance_audit", all_ok, worst_dev, 4.0);
    out.report["covariance_pairs"] = pj;
    if (!opt.artifact_dir.empty()) {
      ScalarField f;
      f.dom = &dom;
      f.values = fields[0];
      write_field_csv(opt.artifact_dir / "gff_sample.csv", f);
    }
  }

  // coupling audit at a stopped exploration
  {
    const DomainSpec cspec = detail::domain_spec(
        cfg.contains("coupling_domain") ? nlohmann::json{{"domain", cfg.at("coupling_domain")}}
                                        : nlohmann::json::object(),
        {{"shape", "disk"}, {"radius", 1.0}, {"delta", 1.0 / 24},
         {"a_angle", 3.141592653589793}, {"b_angle", 0.0},
         {"mass", {{"kind", "constant"}, {"value", 1.0}}}});
    const LatticeDomain cdom = cspec.build();
    const double tau = cfg.value("tau", 0.05);
    const int N = cfg.value("N", 2000);
    const std::vector<Point> probes = detail::probes_from(
        cfg, {Point(0.3, 0.2), Point(-0.3, 0.4), Point(0.1, -0.35), Point(-0.45, -0.1),
              Point(0.5, 0.35)});
    const CouplingAuditReport rep =
        coupling_audit(cdom, probes, tau, N, opt.seed + 1000, opt.threads);
    nlohmann::json pj = nlohmann::json::array();
    for (std::size_t p = 0; p < probes.size(); ++p) {
      out.check("coupling_probe" + std::to_string(p), std::abs(rep.z_scores[p]) <= 3.0,
                rep.z_scores[p], 3.0);
      pj.push_back({{"eta0", rep.eta0[p]}, {"mean", rep.field_stats[p].mean()},
                    {"stderr", rep.field_stats[p].stderror()}, {"z", rep.z_scores[p]}});
    }
    out.check("cross_correlation", std::abs(rep.cross_correlation_z) <= 3.0,
              rep.cross_correlation_z, 3.0);
    out.report["coupling"] = {{"tau", tau}, {"N", N}, {"probes", pj},
                              {"survival_fraction", rep.survival_fraction},
                              {"cross_correlation", rep.cross_correlation}};
  }

  detail::write_check_csv(opt.artifact_dir, out);
  return out;
}

// --- observable-convergence -------------------------------------------------

inline ExperimentOutcome run_observable_convergence(const nlohmann::json& cfg,
                                                    const RunOptions& opt) {
  ExperimentOutcome out;
  out.experiment = "observable-convergence";
  const std::vector<double> deltas =
      cfg.value("deltas", std::vector<double>{1.0 / 16, 1.0 / 32, 1.0 / 64});
  const double h_ref = cfg.value("h_ref", 1.0 / 128);
  const double a_angle = cfg.value("a_angle", 3.141592653589793);
  const double b_angle = cfg.value("b_angle", 0.0);
  const std::vector<Point> probes =
      detail::probes_from(cfg, {Point(0.25, 0.3), Point(-0.35, 0.15), Point(0.1, -0.4)});
  const std::vector<double> masses = cfg.value("masses", std::vector<double>{0.0, 1.0});

  ShapeInfo shape;
  shape.kind = ShapeInfo::Kind::Disk;
  shape.radius = 1.0;
  shape.a_angle = a_angle;
  shape.b_angle = b_angle;
  const auto arcs = [&](Point z) {
    return on_clockwise_arc(std::atan2(z.imag(), z.real()), a_angle, b_angle) ? 0.5 : -0.5;
  };

  nlohmann::json mass_reports = nlohmann::json::array();
  std::vector<std::vector<std::string>> rows;
  for (double m2 : masses) {
    // reference: the lattice killing rate corresponds to the continuum
    // operator -Laplace + (9/4) m^2
    const double m2_ref = kLatticeMassCalibration * m2;
    const Grid grid = make_grid(shape, h_ref, [m2_ref](Point) { return m2_ref; });
    const HarmonicTriple ref = massive_harmonic_continuum(grid, arcs);
    std::vector<double> ref_vals;
    for (const Point& p : probes) ref_vals.push_back(grid_interpolate(grid, ref.direct, p));

    // errors per delta
    std::vector<std::vector<double>> err(probes.size());
    for (double delta : deltas) {
      DomainSpec spec;
      spec.shape = DomainSpec::Shape::Disk;
      spec.radius = 1.0;
      spec.delta = delta;
      spec.a_angle = a_angle;
      spec.b_angle = b_angle;
      spec.mass.kind = MassSpec::Kind::Constant;
      spec.mass.value = m2;
      const LatticeDomain dom = spec.build();
      const ScalarField h = observable_h(dom);
      for (std::size_t p = 0; p < probes.size(); ++p) {
        err[p].push_back(std::abs(field_interpolate(h, probes[p]) - ref_vals[p]));
        rows.push_back({format_double(m2), format_double(delta),
                        std::to_string(p), format_double(err[p].back())});
      }
    }

    bool monotone = true;
    bool final_ok = true;
    for (std::size_t p = 0; p < probes.size(); ++p) {
      for (std::size_t d = 1; d < deltas.size(); ++d) {
        if (err[p][d] > err[p][d - 1]) monotone = false;
      }
      // the lattice sequence's own Richardson-style error estimate
      const std::size_t nd = deltas.size();
      const double est = nd >= 2 ? std::abs(err[p][nd - 2] - err[p][nd - 1]) : err[p].back();
      if (err[p].back() > 3.0 * std::max(est, 1e-5)) final_ok = false;
    }
    out.check("monotone_m2_" + format_double(m2), monotone, 0.0, 0.0);
    out.check("final_error_m2_" + format_double(m2), final_ok, 0.0, 0.0);

    nlohmann::json ej = nlohmann::json::array();
    for (std::size_t p = 0; p < probes.size(); ++p) ej.push_back(err[p]);
    mass_reports.push_back({{"mass2", m2}, {"errors", ej}, {"reference", ref_vals}});
  }
  out.report["masses"] = mass_reports;
  out.report["deltas"] = deltas;
  if (!opt.artifact_dir.empty()) {
    write_csv(opt.artifact_dir / "convergence.csv", {"mass2", "delta", "probe", "error"}, rows);
  }
  return out;
}

// --- dispatcher --------------------------------------------------------------

inline ExperimentOutcome run_experiment(const nlohmann::json& cfg, const RunOptions& opt) {
  const std::string name = cfg.value("experiment", "");
  for (const char* field : {"N", "t", "t_end", "dt", "h", "h_ref", "tau"}) {
    if (cfg.contains(field) && cfg.at(field).is_number() && cfg.at(field).get<double>() <= 0) {
      throw ConfigError(std::string("config field must be positive: ") + field);
    }
  }
  if (name == "solver-identities") return run_solver_identities(cfg, opt);
  if (name == "martingale-mc") return run_martingale_mc(cfg, opt);
  if (name == "kappa4-check") return run_kappa4_check(cfg, opt);
  if (name == "crossing-powerlaw") return run_crossing_powerlaw(cfg, opt);
  if (name == "continuum-identities") return run_continuum_identities(cfg, opt);
  if (name == "msle-drift") return run_msle_drift(cfg, opt);
  if (name == "gff-coupling") return run_gff_coupling(cfg, opt);
  if (name == "observable-convergence") return run_observable_convergence(cfg, opt);
  throw ConfigError("unknown experiment: " + name);
}

inline std::string run_id_for(const nlohmann::json& cfg, std::uint64_t seed) {
  std::ostringstream os;
  os << cfg.dump() << "#" << seed;
  const std::size_t h = std::hash<std::string>{}(os.str());
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016zx", h);
  return buf;
}

/// Runs an experiment and writes manifest, report and data files under
/// outdir/<experiment>/<runid>/.
inline ExperimentOutcome run_and_write(const nlohmann::json& cfg,
                                       const std::filesystem::path& outdir, RunOptions opt) {
  const std::string name = cfg.value("experiment", "");
  if (std::find(experiment_names().begin(), experiment_names().end(), name) ==
      experiment_names().end()) {
    throw ConfigError("unknown experiment: " + name);
  }
  const std::string runid = run_id_for(cfg, opt.seed);
  const std::filesystem::path dir = outdir / name / runid;
  std::filesystem::create_directories(dir);
  opt.artifact_dir = dir;

  const auto t0 = std::chrono::system_clock::now();
  ExperimentOutcome outcome = run_experiment(cfg, opt);
  const auto t1 = std::chrono::system_clock::now();

  nlohmann::json manifest = {
      {"experiment", name},
      {"runid", runid},
      {"seed", opt.seed},
      {"threads", opt.threads},
      {"config", cfg},
      {"timestamp",
       std::chrono::duration_cast<std::chrono::seconds>(t0.time_since_epoch()).count()},
      {"elapsed_ms",
       std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count()}};
  write_json(dir / "manifest.json", manifest);

  nlohmann::json report = {{"experiment", name},
                           {"pass", outcome.pass},
                           {"checks", outcome.checks_json()},
                           {"details", outcome.report}};
  write_json(dir / "report.json", report);
  return outcome;
}

}  // namespace mhe
