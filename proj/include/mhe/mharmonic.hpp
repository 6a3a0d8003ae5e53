#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "mhe/common.hpp"
#include "mhe/lattice.hpp"

namespace mhe {

// Evolving view of a lattice domain: which stored vertices are currently
// interior and the sign carried by the non-interior ones.
struct DomainState {
  const LatticeDomain* dom = nullptr;
  std::vector<std::uint8_t> interior;
  std::vector<std::int8_t> sign;

  static DomainState initial(const LatticeDomain& d) {
    DomainState s;
    s.dom = &d;
    s.interior = d.interior;
    s.sign = d.sign;
    return s;
  }

  int interior_count() const {
    int n = 0;
    for (auto f : interior) n += f;
    return n;
  }
};

struct ScalarField {
  const LatticeDomain* dom = nullptr;
  Eigen::VectorXd values;

  double operator()(int v) const { return values[v]; }

  // value at the vertex nearest to z
  int nearest_vertex(Point z) const {
    int best = 0;
    double bd = std::numeric_limits<double>::max();
    for (int v = 0; v < dom->vertex_count(); ++v) {
      const double d = std::abs(dom->pos[v] - z);
      if (d < bd) {
        bd = d;
        best = v;
      }
    }
    return best;
  }
};

// Piecewise-linear interpolation on the lattice triangle containing z, with
// nearest-vertex fallback at the fringe.
inline double field_interpolate(const ScalarField& f, Point z) {
  const LatticeDomain& d = *f.dom;
  const int v = f.nearest_vertex(z);
  static constexpr std::array<int, 6> cyc = {0, 2, 5, 1, 3, 4};  // angular neighbor order
  for (int k = 0; k < 6; ++k) {
    const int a = d.nbr[v][cyc[k]];
    const int b = d.nbr[v][cyc[(k + 1) % 6]];
    if (a < 0 || b < 0) continue;
    const Point A = d.pos[v], B = d.pos[a], C = d.pos[b];
    const double denom = cross2(B - A, C - A);
    if (denom == 0.0) continue;
    const double l2 = cross2(z - A, C - A) / denom;
    const double l3 = cross2(B - A, z - A) / denom;
    const double l1 = 1.0 - l2 - l3;
    if (l1 >= -1e-12 && l2 >= -1e-12 && l3 >= -1e-12) {
      return l1 * f.values[v] + l2 * f.values[a] + l3 * f.values[b];
    }
  }
  return f.values[v];
}

inline int nearest_interior_vertex(const LatticeDomain& dom, Point z) {
  int best = -1;
  double bd = std::numeric_limits<double>::max();
  for (int v : dom.interior_ids) {
    const double d = std::abs(dom.pos[v] - z);
    if (d < bd) {
      bd = d;
      best = v;
    }
  }
  return best;
}

// Sparse walk-form system over the currently interior vertices:
//   h(v) = ((1 - m_d^2(v) d^2)/6) sum_{w ~ v} h(w).
// Per row the jump weights and the killing weight add up to one exactly.
class WalkSystem {
 public:
  WalkSystem(const DomainState& state, bool massless = false) : state_(state) {
    const LatticeDomain& d = *state.dom;
    const int n = d.vertex_count();
    row_of_.assign(n, -1);
    for (int v = 0; v < n; ++v) {
      if (state.interior[v]) {
        row_of_[v] = static_cast<int>(unknowns_.size());
        unknowns_.push_back(v);
      }
    }
    const int m = static_cast<int>(unknowns_.size());
    if (m == 0) throw DomainTooCoarse("no interior vertices left");
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(7 * m);
    for (int r = 0; r < m; ++r) {
      const int v = unknowns_[r];
      const double q = massless ? 0.0 : d.killing_weight(v);
      const double jw = (1.0 - q) / 6.0;
      trip.emplace_back(r, r, 1.0);
      for (int w : d.nbr[v]) {
        if (w < 0) throw SolverFailure("interior vertex with missing neighbor");
        if (row_of_[w] >= 0) trip.emplace_back(r, row_of_[w], -jw);
      }
      jump_weight_.push_back(jw);
    }
    A_.resize(m, m);
    A_.setFromTriplets(trip.begin(), trip.end());
    A_.makeCompressed();
    lu_.compute(A_);
    if (lu_.info() != Eigen::Success) throw SolverFailure("factorization failed");
  }

  const std::vector<int>& unknowns() const { return unknowns_; }
  int row_of(int v) const { return row_of_[v]; }

  // dirichlet holds values for every non-interior stored vertex
  Eigen::VectorXd rhs(const Eigen::VectorXd& dirichlet) const {
    const LatticeDomain& d = *state_.dom;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(unknowns_.size());
    for (std::size_t r = 0; r < unknowns_.size(); ++r) {
      const int v = unknowns_[r];
      for (int w : d.nbr[v]) {
        if (row_of_[w] < 0) b[r] += jump_weight_[r] * dirichlet[w];
      }
    }
    return b;
  }

  ScalarField solve(const Eigen::VectorXd& dirichlet) const {
    const Eigen::VectorXd b = rhs(dirichlet);
    const Eigen::VectorXd x = lu_.solve(b);
    if ((A_ * x - b).lpNorm<Eigen::Infinity>() > 1e-10) throw SolverFailure("residual too large");
    ScalarField f;
    f.dom = state_.dom;
    f.values = dirichlet;
    for (std::size_t r = 0; r < unknowns_.size(); ++r) f.values[unknowns_[r]] = x[r];
    return f;
  }

  // expected number of visits to each vertex for the killed walk started at
  // source, before exit or killing; solves the transposed balance equations
  Eigen::VectorXd expected_visits(int source) const {
    const int r = row_of_[source];
    if (r < 0) throw BadSource();
    Eigen::VectorXd e = Eigen::VectorXd::Zero(unknowns_.size());
    e[r] = 1.0;
    Eigen::SparseMatrix<double> At = A_.transpose();
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lut;
    lut.compute(At);
    if (lut.info() != Eigen::Success) throw SolverFailure("transpose factorization failed");
    Eigen::VectorXd g = lut.solve(e);
    if ((At * g - e).lpNorm<Eigen::Infinity>() > 1e-10) throw SolverFailure("residual too large");
    return g;
  }

  // visits vector for a general nonnegative start measure over interior rows
  Eigen::VectorXd visits_from_measure(const Eigen::VectorXd& mu) const {
    Eigen::SparseMatrix<double> At = A_.transpose();
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lut;
    lut.compute(At);
    if (lut.info() != Eigen::Success) throw SolverFailure("transpose factorization failed");
    return lut.solve(mu);
  }

  Eigen::VectorXd solve_raw(const Eigen::VectorXd& b) const { return lu_.solve(b); }

 private:
  DomainState state_;
  std::vector<int> unknowns_;
  std::vector<int> row_of_;
  std::vector<double> jump_weight_;
  Eigen::SparseMatrix<double> A_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
};

inline Eigen::VectorXd sign_boundary_values(const DomainState& state, double plus_value,
                                            double minus_value) {
  const LatticeDomain& d = *state.dom;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(d.vertex_count());
  for (int v = 0; v < d.vertex_count(); ++v) {
    if (!state.interior[v]) g[v] = state.sign[v] > 0 ? plus_value : minus_value;
  }
  return g;
}

/// Dirichlet solve of the discrete massive-harmonicity equations.
inline ScalarField solve_massive_harmonic(const DomainState& state,
                                          const Eigen::VectorXd& dirichlet) {
  return WalkSystem(state).solve(dirichlet);
}
inline ScalarField solve_massive_harmonic(const LatticeDomain& dom,
                                          const Eigen::VectorXd& dirichlet) {
  return solve_massive_harmonic(DomainState::initial(dom), dirichlet);
}

/// Probability of exiting through `target` before being killed.
inline ScalarField massive_harmonic_measure(const DomainState& state,
                                            const std::vector<int>& target) {
  const LatticeDomain& d = *state.dom;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(d.vertex_count());
  for (int v : target) {
    if (state.interior[v]) throw Error("measure target must be a boundary subset");
    g[v] = 1.0;
  }
  return solve_massive_harmonic(state, g);
}
inline ScalarField massive_harmonic_measure(const LatticeDomain& dom,
                                            const std::vector<int>& target) {
  return massive_harmonic_measure(DomainState::initial(dom), target);
}

inline std::vector<int> current_boundary_ids(const DomainState& state) {
  std::vector<int> out;
  for (int v = 0; v < state.dom->vertex_count(); ++v) {
    if (!state.interior[v]) out.push_back(v);
  }
  return out;
}

/// P(walk is killed before reaching the boundary), zero for massless walks.
inline ScalarField killing_probability(const DomainState& state) {
  ScalarField f = massive_harmonic_measure(state, current_boundary_ids(state));
  f.values = Eigen::VectorXd::Ones(f.values.size()) - f.values;
  return f;
}
inline ScalarField killing_probability(const LatticeDomain& dom) {
  return killing_probability(DomainState::initial(dom));
}

/// The martingale observable: boundary data +1/2 on the plus arc, -1/2 on the
/// minus arc.
inline ScalarField observable_h(const DomainState& state) {
  return solve_massive_harmonic(state, sign_boundary_values(state, 0.5, -0.5));
}
inline ScalarField observable_h(const LatticeDomain& dom) {
  return observable_h(DomainState::initial(dom));
}

/// Expected visit counts of the killed walk from `source` (row Green function).
inline ScalarField discrete_massive_green(const DomainState& state, int source) {
  if (!state.interior[source]) throw BadSource();
  WalkSystem sys(state);
  const Eigen::VectorXd g = sys.expected_visits(source);
  ScalarField f;
  f.dom = state.dom;
  f.values = Eigen::VectorXd::Zero(state.dom->vertex_count());
  for (std::size_t r = 0; r < sys.unknowns().size(); ++r) f.values[sys.unknowns()[r]] = g[r];
  return f;
}
inline ScalarField discrete_massive_green(const LatticeDomain& dom, int source) {
  return discrete_massive_green(DomainState::initial(dom), source);
}

/// Total visits to x under the simple-random-walk excursion measure started
/// from the directed boundary-to-interior edges E1.
inline double excursion_visit_integral(const DomainState& state,
                                       const std::vector<std::pair<int, int>>& E1, int x) {
  if (E1.empty()) return 0.0;
  const LatticeDomain& d = *state.dom;
  WalkSystem sys(state, /*massless=*/true);
  if (sys.row_of(x) < 0) throw BadSource("visit vertex must be interior");
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(sys.unknowns().size());
  for (const auto& [v, w] : E1) {
    if (state.interior[v] || !state.interior[w]) {
      throw Error("excursion edges must run from the boundary into the interior");
    }
    bool adjacent = false;
    for (int z : d.nbr[v]) adjacent |= (z == w);
    if (!adjacent) throw Error("excursion edge endpoints are not neighbors");
    mu[sys.row_of(w)] += 1.0 / 6.0;
  }
  const Eigen::VectorXd visits = sys.visits_from_measure(mu);
  return visits[sys.row_of(x)];
}
inline double excursion_visit_integral(const LatticeDomain& dom,
                                       const std::vector<std::pair<int, int>>& E1, int x) {
  return excursion_visit_integral(DomainState::initial(dom), E1, x);
}

/// P(simple walk from x exits through an edge of rev(E1)); the independent
/// route for the excursion visit identity.
inline double exit_probability_via_reversed_edges(
    const DomainState& state, const std::vector<std::pair<int, int>>& E1, int x) {
  if (E1.empty()) return 0.0;
  WalkSystem sys(state, /*massless=*/true);
  if (sys.row_of(x) < 0) throw BadSource("start vertex must be interior");
  Eigen::VectorXd b = Eigen::VectorXd::Zero(sys.unknowns().size());
  for (const auto& [v, w] : E1) b[sys.row_of(w)] += 1.0 / 6.0;
  const Eigen::VectorXd u = sys.solve_raw(b);
  return u[sys.row_of(x)];
}
inline double exit_probability_via_reversed_edges(
    const LatticeDomain& dom, const std::vector<std::pair<int, int>>& E1, int x) {
  return exit_probability_via_reversed_edges(DomainState::initial(dom), E1, x);
}

// max over interior vertices of the rescaled massive-harmonicity identity
//   -D_d h + m^2 h + A_d (m^2 / (6 tan(pi/6))) D_d h = 0
// with D_d the triangular-lattice Laplacian weighted by tan(pi/6)/A_d.
inline double mharm_identity_residual(const DomainState& state, const ScalarField& h) {
  const LatticeDomain& d = *state.dom;
  const double area = kHexAreaConstant * d.delta * d.delta;
  double worst = 0.0;
  for (int v = 0; v < d.vertex_count(); ++v) {
    if (!state.interior[v]) continue;
    double lap = 0.0;
    for (int w : d.nbr[v]) lap += h.values[w] - h.values[v];
    lap *= kHalfAngleTan / area;
    const double m2 = d.mass_d2[v] / kMassDiscretization;
    const double res = -lap + m2 * h.values[v] + area * m2 / (6.0 * kHalfAngleTan) * lap;
    worst = std::max(worst, std::abs(res));
  }
  return worst;
}

// Incremental Dirichlet solver for the explorer: unknowns stay fixed at the
// snapshot's interior set; absorbing a vertex replaces its row by an identity
// row, handled as a low-rank (Woodbury) update of the snapshot factorization.
// A full refactorization happens every `refresh_interval` absorptions.
class IncrementalDirichletSolver {
 public:
  IncrementalDirichletSolver(const DomainState& state, Eigen::VectorXd dirichlet,
                             int refresh_interval = 64)
      : dom_(state.dom), dirichlet_(std::move(dirichlet)), refresh_interval_(refresh_interval) {
    interior_ = state.interior;
    rebuild();
  }

  void absorb(int v, double value) {
    if (!interior_[v]) throw Error("absorb: vertex is not interior");
    interior_[v] = 0;
    dirichlet_[v] = value;
    const int r = row_of_[v];
    replaced_.push_back(r);
    b_[r] = value;
    // new column of Y = A0^{-1} e_r and its image under A0
    Eigen::VectorXd e = Eigen::VectorXd::Zero(b_.size());
    e[r] = 1.0;
    const Eigen::VectorXd y = lu_.solve(e);
    const auto k = static_cast<Eigen::Index>(replaced_.size());
    if (Y_.cols() < k) {
      Y_.conservativeResize(Eigen::NoChange, k + 16);
      AY_.conservativeResize(Eigen::NoChange, k + 16);
    }
    Y_.col(k - 1) = y;
    AY_.col(k - 1) = A_ * y;
    if (!in_audit_ && static_cast<int>(replaced_.size()) >= refresh_interval_) rebuild();
  }

  // speculative absorb/rollback for one-step audits
  void push_audit(int v, double value) {
    in_audit_ = true;
    saved_dirichlet_ = dirichlet_[v];
    saved_b_ = b_[row_of_[v]];
    absorb(v, value);
  }
  void pop_audit() {
    const int r = replaced_.back();
    replaced_.pop_back();
    const int v = unknowns_[r];
    interior_[v] = 1;
    dirichlet_[v] = saved_dirichlet_;
    b_[r] = saved_b_;
    in_audit_ = false;
  }

  ScalarField solve() const {
    Eigen::VectorXd x = lu_.solve(b_);
    const int k = static_cast<int>(replaced_.size());
    if (k > 0) {
      const Eigen::VectorXd Ax0 = A_ * x;
      Eigen::VectorXd z(k);
      Eigen::MatrixXd S = Eigen::MatrixXd::Identity(k, k);
      for (int i = 0; i < k; ++i) {
        z[i] = x[replaced_[i]] - Ax0[replaced_[i]];
        for (int j = 0; j < k; ++j) {
          S(i, j) += Y_(replaced_[i], j) - AY_(replaced_[i], j);
        }
      }
      const Eigen::VectorXd s = S.partialPivLu().solve(z);
      x -= Y_.leftCols(k) * s;
    }
    ScalarField f;
    f.dom = dom_;
    f.values = dirichlet_;
    for (std::size_t r = 0; r < unknowns_.size(); ++r) f.values[unknowns_[r]] = x[r];
    if (residual(f) > 1e-10) throw SolverFailure("incremental solve residual too large");
    return f;
  }

  double residual(const ScalarField& f) const {
    double worst = 0.0;
    for (std::size_t r = 0; r < unknowns_.size(); ++r) {
      const int v = unknowns_[r];
      if (!interior_[v]) {
        worst = std::max(worst, std::abs(f.values[v] - dirichlet_[v]));
        continue;
      }
      const double q = dom_->killing_weight(v);
      double acc = f.values[v];
      for (int w : dom_->nbr[v]) acc -= (1.0 - q) / 6.0 * f.values[w];
      worst = std::max(worst, std::abs(acc));
    }
    return worst;
  }

  const std::vector<std::uint8_t>& interior() const { return interior_; }
  const Eigen::VectorXd& dirichlet() const { return dirichlet_; }

  DomainState state(std::vector<std::int8_t> signs) const {
    DomainState s;
    s.dom = dom_;
    s.interior = interior_;
    s.sign = std::move(signs);
    return s;
  }

 private:
  void rebuild() {
    unknowns_.clear();
    row_of_.assign(dom_->vertex_count(), -1);
    for (int v : dom_->interior_ids) {
      row_of_[v] = static_cast<int>(unknowns_.size());
      unknowns_.push_back(v);
    }
    const int m = static_cast<int>(unknowns_.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(7 * m);
    b_ = Eigen::VectorXd::Zero(m);
    for (int r = 0; r < m; ++r) {
      const int v = unknowns_[r];
      trip.emplace_back(r, r, 1.0);
      if (!interior_[v]) {
        b_[r] = dirichlet_[v];
        continue;
      }
      const double jw = (1.0 - dom_->killing_weight(v)) / 6.0;
      for (int w : dom_->nbr[v]) {
        if (row_of_[w] >= 0) {
          trip.emplace_back(r, row_of_[w], -jw);
        } else {
          b_[r] += jw * dirichlet_[w];
        }
      }
    }
    A_.resize(m, m);
    A_.setFromTriplets(trip.begin(), trip.end());
    A_.makeCompressed();
    lu_.compute(A_);
    if (lu_.info() != Eigen::Success) throw SolverFailure("refactorization failed");
    replaced_.clear();
    Y_.resize(m, 0);
    AY_.resize(m, 0);
  }

  const LatticeDomain* dom_;
  Eigen::VectorXd dirichlet_;
  int refresh_interval_;
  std::vector<std::uint8_t> interior_;
  std::vector<int> unknowns_;
  std::vector<int> row_of_;
  Eigen::SparseMatrix<double> A_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
  Eigen::VectorXd b_;
  std::vector<int> replaced_;
  Eigen::MatrixXd Y_, AY_;
  bool in_audit_ = false;
  double saved_dirichlet_ = 0.0, saved_b_ = 0.0;
};

}  // namespace mhe
