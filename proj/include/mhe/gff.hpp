#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "mhe/common.hpp"
#include "mhe/continuum.hpp"
#include "mhe/explorer.hpp"
#include "mhe/lattice.hpp"
#include "mhe/loewner.hpp"
#include "mhe/mharmonic.hpp"
#include "mhe/stats.hpp"

namespace mhe {

inline constexpr double kLambda = 0.62665706865775012560;  // sqrt(pi/8)

// Massive GFF sampler over the interior of a domain state. The covariance is
// the inverse of the symmetric operator -D_d + m^2 (the same Laplacian
// normalization as the rescaled massive-harmonicity identity), which is
// positive definite also for non-constant mass.
class GffSampler {
 public:
  explicit GffSampler(const DomainState& state) : dom_(state.dom) {
    const LatticeDomain& d = *dom_;
    row_of_.assign(d.vertex_count(), -1);
    for (int v = 0; v < d.vertex_count(); ++v) {
      if (state.interior[v]) {
        row_of_[v] = static_cast<int>(unknowns_.size());
        unknowns_.push_back(v);
      }
    }
    const int n = static_cast<int>(unknowns_.size());
    if (n == 0) throw DomainTooCoarse("no interior vertices to sample on");
    const double w_lap = kHalfAngleTan / (kHexAreaConstant * d.delta * d.delta);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(7 * n);
    for (int r = 0; r < n; ++r) {
      const int v = unknowns_[r];
      const double m2 = d.mass_d2[v] / kMassDiscretization;
      trip.emplace_back(r, r, 6.0 * w_lap + m2);
      for (int w : d.nbr[v]) {
        if (w >= 0 && row_of_[w] >= 0) trip.emplace_back(r, row_of_[w], -w_lap);
      }
    }
    A_.resize(n, n);
    A_.setFromTriplets(trip.begin(), trip.end());
    A_.makeCompressed();
    llt_.compute(A_);
    if (llt_.info() != Eigen::Success) throw SolverFailure("covariance factorization failed");
  }

  int dimension() const { return static_cast<int>(unknowns_.size()); }
  const std::vector<int>& unknowns() const { return unknowns_; }
  int row_of(int v) const { return row_of_[v]; }

  // one centered sample with covariance A^{-1}
  ScalarField sample(Rng& rng) const {
    const int n = dimension();
    Eigen::VectorXd xi(n);
    for (int i = 0; i < n; ++i) xi[i] = rng.normal();
    const Eigen::VectorXd u = llt_.matrixU().solve(xi);
    const Eigen::VectorXd y = llt_.permutationPinv() * u;
    ScalarField f;
    f.dom = dom_;
    f.values = Eigen::VectorXd::Zero(dom_->vertex_count());
    for (int i = 0; i < n; ++i) f.values[unknowns_[i]] = y[i];
    return f;
  }

  // covariance entries C(v, .) by one solve
  Eigen::VectorXd covariance_column(int v) const {
    const int r = row_of_[v];
    if (r < 0) throw BadSource("covariance column asked at a non-interior vertex");
    Eigen::VectorXd e = Eigen::VectorXd::Zero(dimension());
    e[r] = 1.0;
    return llt_.solve(e);
  }
  double covariance(int v, int w) const {
    const int rw = row_of_[w];
    if (rw < 0) throw BadSource();
    return covariance_column(v)[rw];
  }

 private:
  const LatticeDomain* dom_;
  std::vector<int> unknowns_;
  std::vector<int> row_of_;
  Eigen::SparseMatrix<double> A_;
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
};

inline ScalarField sample_massive_gff(const LatticeDomain& dom, std::uint64_t seed,
                                      std::uint64_t stream = 0) {
  Rng rng(seed, stream);
  return GffSampler(DomainState::initial(dom)).sample(rng);
}

/// Massive harmonic function with boundary values +-lambda; proportional to
/// the observable by linearity: eta = sqrt(pi/2) h.
inline ScalarField eta_field(const DomainState& state) {
  return solve_massive_harmonic(state, sign_boundary_values(state, kLambda, -kLambda));
}
inline ScalarField eta_field(const LatticeDomain& dom) {
  return eta_field(DomainState::initial(dom));
}

struct CouplingAuditReport {
  std::vector<int> probe_vertices;
  std::vector<double> eta0;          // deterministic reference per probe
  std::vector<RunningStat> field_stats;
  std::vector<double> z_scores;
  double survival_fraction = 0.0;
  double cross_correlation = 0.0;    // path functional vs field residual
  double cross_correlation_z = 0.0;
  int samples = 0;
};

/// Two-ensemble audit of the level-line coupling: explore to capacity tau,
/// sample a massive GFF in the slit domain and add the eta boundary-data
/// field; per probe, the ensemble mean must match the time-zero eta field.
inline CouplingAuditReport coupling_audit(const LatticeDomain& dom,
                                          const std::vector<Point>& probe_points, double tau,
                                          int N, std::uint64_t seed, int threads) {
  CouplingAuditReport rep;
  const ScalarField eta0 = eta_field(dom);
  for (const Point& p : probe_points) {
    const int v = nearest_interior_vertex(dom, p);
    if (v < 0) throw ConfigError("probe point has no interior vertex");
    rep.probe_vertices.push_back(v);
    rep.eta0.push_back(eta0.values[v]);
  }
  const std::size_t np = probe_points.size();
  struct Row {
    std::vector<double> field;
    double w_tau = 0.0;
    double residual = 0.0;
    bool survived = false;
  };
  std::vector<Row> rows(N);
  run_parallel(N, threads, [&](std::size_t i) {
    ExplorerState s(dom, seed, i, /*track_capacity=*/true);
    long budget = kStepBudget;
    while (!s.terminated() && s.capacity() < tau) {
      if (--budget < 0) throw NonTermination();
      s.step();
    }
    Row row;
    row.survived = s.capacity() >= tau;
    row.w_tau = s.last_driving_value();
    const DomainState ds = s.domain_state();
    const ScalarField eta_tau = eta_field(ds);
    Rng grng(seed ^ 0x5eed5eedULL, i);
    const ScalarField gamma = GffSampler(ds).sample(grng);
    row.field.resize(np);
    for (std::size_t p = 0; p < np; ++p) {
      const int v = rep.probe_vertices[p];
      row.field[p] = eta_tau.values[v] + gamma.values[v];
    }
    row.residual = gamma.values[rep.probe_vertices[0]];
    rows[i] = std::move(row);
  });

  rep.samples = N;
  rep.field_stats.assign(np, RunningStat());
  RunningStat wstat, rstat;
  double swr = 0.0;
  int survived = 0;
  for (const Row& row : rows) {
    survived += row.survived;
    for (std::size_t p = 0; p < np; ++p) rep.field_stats[p].add(row.field[p]);
    wstat.add(row.w_tau);
    rstat.add(row.residual);
    swr += row.w_tau * row.residual;
  }
  rep.survival_fraction = static_cast<double>(survived) / std::max(1, N);
  if (rep.survival_fraction < 0.5) throw InsufficientSamples();
  for (std::size_t p = 0; p < np; ++p) {
    rep.z_scores.push_back(
        z_score(rep.field_stats[p].mean(), rep.eta0[p], rep.field_stats[p].stderror()));
  }
  // weaker check than independence: zero cross-correlation between the path
  // functional W_tau and the Dirichlet field sampled on top of it
  const double cov = swr / N - wstat.mean() * rstat.mean();
  const double denom = wstat.stddev() * rstat.stddev();
  rep.cross_correlation = denom > 0 ? cov / denom : 0.0;
  rep.cross_correlation_z = rep.cross_correlation * std::sqrt(static_cast<double>(N));
  return rep;
}

struct EtaQvReport {
  double realized_qv = 0.0;
  double predicted_qv = 0.0;  // int 2 pi (P_t^m)^2 dt
  double ratio = 0.0;
  int increments = 0;
  bool truncated = false;     // probe swallowed before t_end
  std::vector<double> times;
  std::vector<double> eta_values;
  std::vector<double> drift_means;  // E[eta_{k+1} - eta_k] accumulators live elsewhere
};

/// Tracks eta_t^m(z) = sqrt(pi/2) (h_t - int m^2 h_t G_t^m)(z) along a
/// simulated run and compares its realized quadratic variation with
/// int 2 pi (P_t^m(z))^2 dt.
class EtaTracker {
 public:
  EtaTracker(GridDriftProvider provider, Point probe, int eval_every)
      : provider_(std::move(provider)), probe_(probe), eval_every_(eval_every) {}

  void observe(const SlitChain& chain, double t) {
    if (truncated_) return;
    if (static_cast<int>(chain.size()) % eval_every_ != 0) return;
    const Grid g = provider_.grid_for(chain);
    const int n = g.nearest_node(probe_);
    if (n < 0 || std::abs(g.coords[n] - probe_) > g.h || g.tip_excluded[n]) {
      truncated_ = true;
      return;
    }
    GreenOperator gm(g);
    const Eigen::VectorXd ht = arc_observable(g);
    const Eigen::VectorXd hm = ht - gm.apply_mass_green(ht);
    const double eta = std::sqrt(1.5707963267948966) * hm[n];
    const PoissonKernels pk = massive_poisson_P(g);
    const double pm = pk.valid[n] ? pk.Pm[n] : 0.0;
    if (!times_.empty()) {
      const double dt = t - times_.back();
      realized_ += (eta - etas_.back()) * (eta - etas_.back());
      predicted_ += 6.283185307179586 * last_pm_ * last_pm_ * dt;
      ++increments_;
    }
    times_.push_back(t);
    etas_.push_back(eta);
    last_pm_ = pm;
  }

  EtaQvReport report() const {
    EtaQvReport r;
    r.realized_qv = realized_;
    r.predicted_qv = predicted_;
    r.ratio = predicted_ > 0 ? realized_ / predicted_ : 0.0;
    r.increments = increments_;
    r.truncated = truncated_;
    r.times = times_;
    r.eta_values = etas_;
    return r;
  }

 private:
  GridDriftProvider provider_;
  Point probe_;
  int eval_every_;
  bool truncated_ = false;
  std::vector<double> times_, etas_;
  double realized_ = 0.0, predicted_ = 0.0, last_pm_ = 0.0;
  int increments_ = 0;
};

/// One simulated run plus the eta quadratic-variation comparison at a probe.
inline EtaQvReport eta_qv_check(const GridDriftProvider& provider, Point probe,
                                const MsleOptions& opt, int eval_every) {
  EtaTracker tracker(provider, probe, eval_every);
  simulate_msle4([&provider](const SlitChain& c, double t) { return provider(c, t); }, opt,
                 [&tracker](const SlitChain& c, double t, double) { tracker.observe(c, t); });
  return tracker.report();
}

}  // namespace mhe
