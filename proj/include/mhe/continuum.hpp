#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "mhe/common.hpp"
#include "mhe/conformal.hpp"
#include "mhe/loewner.hpp"

namespace mhe {

// Uniform five-point grid over a reference domain (disk or rectangle), with a
// per-node mass field, an optional staircase slit mask and the conformal data
// needed to evaluate f_t = g_t - W_t per node.
struct Grid {
  double h = 0.0;
  ShapeInfo shape;
  std::function<bool(Point)> inside;
  std::function<Point(Point)> boundary_project;
  ConformalMap psi;

  int nx = 0, ny = 0;
  double x0 = 0.0, y0 = 0.0;
  std::vector<int> node_of_cell;  // (i,j) -> active node index or -1
  std::vector<Point> coords;      // per active node
  std::vector<double> mass2;      // continuum m^2 per active node
  std::vector<std::uint8_t> tip_excluded;
  std::vector<Point> slit;        // staircase mask source, kept for arm lengths

  const SlitChain* chain = nullptr;  // not owned
  std::size_t chain_prefix = 0;      // number of slit maps in force

  int cell_index(int i, int j) const { return j * nx + i; }
  int node_at(int i, int j) const {
    if (i < 0 || j < 0 || i >= nx || j >= ny) return -1;
    return node_of_cell[cell_index(i, j)];
  }
  int size() const { return static_cast<int>(coords.size()); }

  std::array<int, 4> neighbors(int node) const {
    const Point z = coords[node];
    const int i = static_cast<int>(std::lround((z.real() - x0) / h));
    const int j = static_cast<int>(std::lround((z.imag() - y0) / h));
    return {node_at(i + 1, j), node_at(i - 1, j), node_at(i, j + 1), node_at(i, j - 1)};
  }

  static constexpr std::array<Point, 4> arm_dirs() {
    return {Point(1, 0), Point(-1, 0), Point(0, 1), Point(0, -1)};
  }

  struct Arm {
    double d = 0.0;  // distance from the node to the Dirichlet wall, in (0, h]
    Point wall;
  };

  // Cut-cell arm toward a missing neighbor: the Dirichlet wall sits where the
  // grid ray meets the true boundary (or the slit), not at the dropped node.
  Arm boundary_arm(int node, int dir) const {
    const Point z = coords[node];
    const Point e = arm_dirs()[dir];
    bool found = false;
    double t = h;
    const double tol = h * (1.0 + 1e-9);
    if (shape.kind == ShapeInfo::Kind::Disk) {
      // |z + t e| = R with |z| < R: positive root of t^2 + 2 t <z,e> + |z|^2 - R^2
      const double b = z.real() * e.real() + z.imag() * e.imag();
      const double c = std::norm(z) - shape.radius * shape.radius;
      const double disc = b * b - c;
      if (disc >= 0.0) {
        const double root = -b + std::sqrt(disc);
        if (root > 0.0 && root <= tol) {
          t = std::min(root, h);
          found = true;
        }
      }
    } else {
      auto side = [&](double dist) {
        if (dist >= 0.0 && dist <= tol) {
          t = std::min({dist, t, h});
          found = true;
        }
      };
      if (e.real() > 0) side(0.5 * shape.width - z.real());
      if (e.real() < 0) side(0.5 * shape.width + z.real());
      if (e.imag() > 0) side(0.5 * shape.height - z.imag());
      if (e.imag() < 0) side(0.5 * shape.height + z.imag());
    }
    // slit mask: intersect the arm with the polyline
    const Point zb = z + h * e;
    for (std::size_t i = 0; i + 1 < slit.size(); ++i) {
      const Point a = slit[i], b2 = slit[i + 1];
      const double d1 = cross2(h * e, a - z);
      const double d2 = cross2(h * e, b2 - z);
      const double d3 = cross2(b2 - a, z - a);
      const double d4 = cross2(b2 - a, zb - a);
      if (((d1 >= 0) != (d2 >= 0)) && ((d3 >= 0) != (d4 >= 0))) {
        const double denom = cross2(b2 - a, h * e);
        if (denom != 0.0) {
          const double s = cross2(b2 - a, a - z) / denom;  // fraction along [z, zb]
          if (s > 0.0 && s * h <= t) {
            t = s * h;
            found = true;
          }
        }
      }
    }
    // neighbor removed by the mask radius without the ray meeting the
    // polyline: keep the wall at the dropped node, so arms only shrink as the
    // slit grows
    if (!found) t = h;
    t = std::min(std::max(t, 0.05 * h), h);
    return {t, z + t * e};
  }

  Point f_t(Point z) const {
    const Point w = psi.to_H(psi.clamp(z));
    if (chain == nullptr) return w;
    return chain->map_f_prefix(w, chain_prefix);
  }

  int nearest_node(Point z) const {
    int best = -1;
    double bd = std::numeric_limits<double>::max();
    for (int n = 0; n < size(); ++n) {
      const double d = std::abs(coords[n] - z);
      if (d < bd) {
        bd = d;
        best = n;
      }
    }
    return best;
  }
};

inline Grid make_grid(const ShapeInfo& shape, double h,
                      const std::function<double(Point)>& mass2_fn,
                      const std::vector<Point>& slit = {}) {
  if (h <= 0.0) throw GridError("grid spacing must be positive");
  Grid g;
  g.h = h;
  g.shape = shape;
  if (shape.kind == ShapeInfo::Kind::Disk) {
    const double R = shape.radius;
    g.inside = [R](Point z) { return std::abs(z) < R; };
    g.boundary_project = [R](Point z) {
      const double r = std::abs(z);
      return r == 0.0 ? Point(R, 0.0) : z * (R / r);
    };
    g.x0 = -R;
    g.y0 = -R;
    g.nx = g.ny = 2 * static_cast<int>(std::floor(R / h)) + 1;
  } else {
    const double W = shape.width, H = shape.height;
    g.inside = [W, H](Point z) {
      return std::abs(z.real()) < 0.5 * W && std::abs(z.imag()) < 0.5 * H;
    };
    g.boundary_project = [W, H](Point z) {
      double x = std::max(-0.5 * W, std::min(0.5 * W, z.real()));
      double y = std::max(-0.5 * H, std::min(0.5 * H, z.imag()));
      // push the nearer coordinate onto the boundary
      if (0.5 * W - std::abs(x) < 0.5 * H - std::abs(y)) {
        x = x >= 0 ? 0.5 * W : -0.5 * W;
      } else {
        y = y >= 0 ? 0.5 * H : -0.5 * H;
      }
      return Point(x, y);
    };
    g.x0 = -0.5 * W;
    g.y0 = -0.5 * H;
    g.nx = 2 * static_cast<int>(std::floor(0.5 * W / h)) + 1;
    g.ny = 2 * static_cast<int>(std::floor(0.5 * H / h)) + 1;
  }
  g.psi = map_to_H(shape);

  auto near_slit = [&](Point z) {
    for (std::size_t i = 0; i + 1 < slit.size(); ++i) {
      const Point a = slit[i], b = slit[i + 1];
      const Point ab = b - a;
      const double len2 = std::norm(ab);
      double t = len2 > 0 ? std::clamp(((z - a) * std::conj(ab)).real() / len2, 0.0, 1.0) : 0.0;
      if (std::abs(z - (a + t * ab)) <= 0.5 * h) return true;
    }
    return false;
  };

  // sliver nodes closer to the wall than the shortest representable arm are
  // dropped with their cells
  auto sliver = [&](Point z) {
    if (shape.kind == ShapeInfo::Kind::Disk) return std::abs(z) > shape.radius - 0.05 * h;
    return std::abs(z.real()) > 0.5 * shape.width - 0.05 * h ||
           std::abs(z.imag()) > 0.5 * shape.height - 0.05 * h;
  };
  g.slit = slit;
  g.node_of_cell.assign(g.nx * g.ny, -1);
  for (int j = 0; j < g.ny; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const Point z(g.x0 + i * h, g.y0 + j * h);
      if (!g.inside(z) || sliver(z)) continue;
      if (!slit.empty() && near_slit(z)) continue;
      g.node_of_cell[g.cell_index(i, j)] = g.size();
      g.coords.push_back(z);
      g.mass2.push_back(mass2_fn(z));
    }
  }
  if (g.size() == 0) throw GridError("no active grid nodes");

  // tip mask: at capacity zero the curve tip is the marked point a itself,
  // where the kernel P is singular
  Point tip;
  if (!slit.empty()) {
    tip = slit.back();
  } else if (shape.kind == ShapeInfo::Kind::Disk) {
    tip = shape.radius * std::polar(1.0, shape.a_angle);
  } else {
    const Point dir = std::polar(1.0, shape.a_angle);
    double t = std::numeric_limits<double>::max();
    if (dir.real() != 0.0) t = std::min(t, 0.5 * shape.width / std::abs(dir.real()));
    if (dir.imag() != 0.0) t = std::min(t, 0.5 * shape.height / std::abs(dir.imag()));
    tip = t * dir;
  }
  g.tip_excluded.assign(g.size(), 0);
  for (int n = 0; n < g.size(); ++n) {
    if (std::abs(g.coords[n] - tip) < 3.0 * h) g.tip_excluded[n] = 1;
  }
  return g;
}

// Factorized (-Laplace_h + m^2) with zero Dirichlet data on the domain
// boundary and on the slit mask.
class GreenOperator {
 public:
  explicit GreenOperator(const Grid& grid, bool massless = false) : grid_(&grid) {
    const int n = grid.size();
    const double ih2 = 1.0 / (grid.h * grid.h);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(5 * n);
    for (int r = 0; r < n; ++r) {
      double diag = massless ? 0.0 : grid.mass2[r];
      const auto nbs = grid.neighbors(r);
      for (int k = 0; k < 4; ++k) {
        if (nbs[k] >= 0) {
          trip.emplace_back(r, nbs[k], -ih2);
          diag += ih2;
        } else {
          // shortened arm toward the Dirichlet wall; keeps the matrix
          // symmetric because only the diagonal is touched
          diag += 1.0 / (grid.h * grid.boundary_arm(r, k).d);
        }
      }
      trip.emplace_back(r, r, diag);
    }
    A_.resize(n, n);
    A_.setFromTriplets(trip.begin(), trip.end());
    A_.makeCompressed();
    llt_.compute(A_);
    if (llt_.info() != Eigen::Success) throw GridError("grid operator factorization failed");
  }

  const Grid& grid() const { return *grid_; }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x = llt_.solve(b);
    if ((A_ * x - b).lpNorm<Eigen::Infinity>() >
        1e-10 * std::max(1.0, b.lpNorm<Eigen::Infinity>())) {
      throw SolverFailure("grid solve residual too large");
    }
    return x;
  }

  // kernel column G(., source): delta source discretized as 1/h^2 at the node
  Eigen::VectorXd kernel_column(int source) const {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(grid_->size());
    e[source] = 1.0 / (grid_->h * grid_->h);
    return solve(e);
  }

  double kernel(int z, int w) const { return kernel_column(w)[z]; }

  // int over Omega x Omega of G(z, w) dz dw by cell quadrature
  double total_mass() const {
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(grid_->size());
    const double h2 = grid_->h * grid_->h;
    return h2 * ones.dot(solve(ones));
  }

  // field z -> int m^2(w) f(w) G(z, w) dw; exact adjoint of the cell quadrature
  Eigen::VectorXd apply_mass_green(const Eigen::VectorXd& f) const {
    Eigen::VectorXd mf(grid_->size());
    for (int i = 0; i < grid_->size(); ++i) mf[i] = grid_->mass2[i] * f[i];
    return solve(mf);
  }

 private:
  const Grid* grid_;
  Eigen::SparseMatrix<double> A_;
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
};

inline GreenOperator fd_green(const Grid& grid) { return GreenOperator(grid); }
inline GreenOperator fd_green_massless(const Grid& grid) {
  return GreenOperator(grid, true);
}

/// Bilinear interpolation of a grid field, nearest-node fallback near the
/// boundary.
inline double grid_interpolate(const Grid& g, const Eigen::VectorXd& values, Point z) {
  const double fx = (z.real() - g.x0) / g.h;
  const double fy = (z.imag() - g.y0) / g.h;
  const int i = static_cast<int>(std::floor(fx));
  const int j = static_cast<int>(std::floor(fy));
  const int n00 = g.node_at(i, j), n10 = g.node_at(i + 1, j);
  const int n01 = g.node_at(i, j + 1), n11 = g.node_at(i + 1, j + 1);
  if (n00 >= 0 && n10 >= 0 && n01 >= 0 && n11 >= 0) {
    const double tx = fx - i, ty = fy - j;
    return (1 - tx) * (1 - ty) * values[n00] + tx * (1 - ty) * values[n10] +
           (1 - tx) * ty * values[n01] + tx * ty * values[n11];
  }
  const int n = g.nearest_node(z);
  if (n < 0) throw GridError("interpolation point outside the grid");
  return values[n];
}

/// Max residual of the resolvent identity
///   G^m(z,w) = G(z,w) - int m^2(y) G(z,y) G^m(w,y) dy
/// over sample node pairs, both sides computed on the same grid.
inline double resolvent_check(const Grid& grid, int npairs = 8, std::uint64_t seed = 7) {
  GreenOperator gm(grid), g0(grid, true);
  Rng rng(seed, 0);
  const double h2 = grid.h * grid.h;
  double worst = 0.0;
  for (int p = 0; p < npairs; ++p) {
    const int z = static_cast<int>(rng.uniform_index(grid.size()));
    const int w = static_cast<int>(rng.uniform_index(grid.size()));
    if (z == w) continue;
    const Eigen::VectorXd colz = g0.kernel_column(z);   // G(z, .)
    const Eigen::VectorXd colw = gm.kernel_column(w);   // G^m(w, .)
    double integral = 0.0;
    for (int y = 0; y < grid.size(); ++y) integral += grid.mass2[y] * colz[y] * colw[y] * h2;
    worst = std::max(worst, std::abs(colw[z] - (colz[w] - integral)));
  }
  return worst;
}

struct HarmonicTriple {
  Eigen::VectorXd direct;       // solve of (-Laplace + m^2) u = 0 with data f
  Eigen::VectorXd via_green_m;  // h - int m^2 h G^m
  Eigen::VectorXd via_green_0;  // h - int m^2 h^m G
  double max_pairwise_diff = 0.0;
};

/// Massive harmonic extension of boundary data along all three routes.
inline HarmonicTriple massive_harmonic_continuum(
    const Grid& grid, const std::function<double(Point)>& boundary_data) {
  GreenOperator gm(grid), g0(grid, true);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(grid.size());
  for (int r = 0; r < grid.size(); ++r) {
    const auto nbs = grid.neighbors(r);
    for (int k = 0; k < 4; ++k) {
      if (nbs[k] < 0) {
        const Grid::Arm arm = grid.boundary_arm(r, k);
        b[r] += boundary_data(arm.wall) / (grid.h * arm.d);
      }
    }
  }
  HarmonicTriple out;
  out.direct = gm.solve(b);
  const Eigen::VectorXd h0 = g0.solve(b);
  out.via_green_m = h0 - gm.apply_mass_green(h0);
  out.via_green_0 = h0 - g0.apply_mass_green(out.direct);
  out.max_pairwise_diff =
      std::max((out.direct - out.via_green_m).lpNorm<Eigen::Infinity>(),
               std::max((out.direct - out.via_green_0).lpNorm<Eigen::Infinity>(),
                        (out.via_green_m - out.via_green_0).lpNorm<Eigen::Infinity>()));
  return out;
}

struct PoissonKernels {
  Eigen::VectorXd P;
  Eigen::VectorXd Pm;
  std::vector<std::uint8_t> valid;  // inside the tip mask and away from f_t ~ 0
};

/// P(z) = Im(-1/f_t(psi(z))) / pi and its massive counterpart
/// P^m = P - int m^2 P G_t^m.
inline PoissonKernels massive_poisson_P(const Grid& grid) {
  PoissonKernels out;
  out.P = Eigen::VectorXd::Zero(grid.size());
  out.valid.assign(grid.size(), 1);
  for (int n = 0; n < grid.size(); ++n) {
    const Point f = grid.f_t(grid.coords[n]);
    if (std::abs(f) < 1e-9 || grid.tip_excluded[n]) {
      out.valid[n] = 0;
      continue;
    }
    out.P[n] = (-1.0 / f).imag() / 3.141592653589793;
  }
  GreenOperator gm(grid);
  out.Pm = out.P - gm.apply_mass_green(out.P);
  return out;
}

/// h_t(z) = arg(f_t(psi(z))) / pi - 1/2, the two-arc harmonic function.
inline Eigen::VectorXd arc_observable(const Grid& grid) {
  Eigen::VectorXd h(grid.size());
  for (int n = 0; n < grid.size(); ++n) {
    const Point f = grid.f_t(grid.coords[n]);
    h[n] = std::atan2(f.imag(), f.real()) / 3.141592653589793 - 0.5;
  }
  return h;
}

/// F_t = 2 pi int m^2(w) P_t^m(w) h_t(w) dw by cell quadrature.
inline double drift_functional(const Grid& grid) {
  const PoissonKernels pk = massive_poisson_P(grid);
  const Eigen::VectorXd ht = arc_observable(grid);
  const double h2 = grid.h * grid.h;
  double acc = 0.0;
  for (int n = 0; n < grid.size(); ++n) {
    if (!pk.valid[n]) continue;
    acc += grid.mass2[n] * pk.Pm[n] * ht[n];
  }
  const double F = 6.283185307179586 * acc * h2;
  if (!std::isfinite(F)) throw QuadratureError();
  return F;
}

// Drift functional supplier for the Loewner SDE: every evaluation pulls the
// simulated curve back into the domain, builds the masked grid there with the
// chain's conformal data and integrates 2 pi m^2 P^m h over it.
struct GridDriftProvider {
  ShapeInfo shape;
  double h = 1.0 / 32.0;
  std::function<double(Point)> mass2_fn;
  ConformalMap psi;

  GridDriftProvider(const ShapeInfo& s, double spacing, std::function<double(Point)> m2)
      : shape(s), h(spacing), mass2_fn(std::move(m2)), psi(map_to_H(s)) {}

  std::vector<Point> curve_in_domain(const SlitChain& chain) const {
    std::vector<Point> out;
    out.reserve(chain.size() + 1);
    out.push_back(psi.pull_back(Point(0.0, 1e-12)));
    for (std::size_t k = 1; k <= chain.size(); ++k) {
      Point t = chain.tip_at(k);
      if (t.imag() < 1e-12) t = Point(t.real(), 1e-12);
      out.push_back(psi.pull_back(t));
    }
    return out;
  }

  Grid grid_for(const SlitChain& chain) const {
    Grid g = make_grid(shape, h, mass2_fn,
                       chain.size() == 0 ? std::vector<Point>{} : curve_in_domain(chain));
    g.chain = &chain;
    g.chain_prefix = chain.size();
    return g;
  }

  double operator()(const SlitChain& chain, double) const {
    return drift_functional(grid_for(chain));
  }
};

/// m~^2(w) = |(phi^{-1})'(w)|^2 m^2(phi^{-1}(w)).
inline std::function<double(Point)> pushforward_mass(
    const AnalyticMap& map, const std::function<double(Point)>& mass2_fn) {
  return [map, mass2_fn](Point w) {
    const Point d = map.dinverse(w);
    if (std::abs(d) < 1e-12) throw DegenerateMap();
    return std::norm(d) * mass2_fn(map.inverse(w));
  };
}

struct HadamardReport {
  std::vector<double> times;
  std::vector<double> fd_derivative;       // centered difference of G_t^m(z, w)
  std::vector<double> formula;             // -2 pi P_t^m(z) P_t^m(w)
  std::vector<double> rel_error;           // per checkpoint
  double integrated_rel_error = 0.0;       // ratio of integrated sides
};

// Slit data for the Hadamard check: a smooth polyline from the boundary,
// cut at prescribed capacity times via the zipper.
struct GrowingSlit {
  std::vector<Point> polyline;          // fine polyline in the domain
  SlitChain chain;                      // zipper of the full polyline
  std::vector<double> capacity_at_pt;   // cumulative capacity per polyline point
  std::vector<std::size_t> maps_at_pt;  // chain prefix length per polyline point

  GrowingSlit(const ShapeInfo& shape, const std::vector<Point>& pts) : polyline(pts) {
    const ConformalMap cm = map_to_H(shape);
    capacity_at_pt.reserve(pts.size());
    maps_at_pt.reserve(pts.size());
    Point first = cm.to_H(cm.clamp(pts.front()));
    const double shift = first.real();
    for (const Point& p : polyline) {
      Point q = cm.to_H(cm.clamp(p)) - shift;
      if (q.imag() < -1e-9) throw MapError("slit polyline maps below the real axis");
      q = Point(q.real(), std::max(0.0, q.imag()));
      chain.unzip(q);
      capacity_at_pt.push_back(chain.capacity());
      maps_at_pt.push_back(chain.size());
    }
  }

  double max_capacity() const { return capacity_at_pt.back(); }

  // index such that the slit up to it has capacity >= tau
  std::size_t cut_index(double tau) const {
    for (std::size_t i = 0; i < capacity_at_pt.size(); ++i) {
      if (capacity_at_pt[i] >= tau) return i;
    }
    throw Error("requested capacity beyond the slit");
  }

  std::vector<Point> prefix(std::size_t idx) const {
    return std::vector<Point>(polyline.begin(), polyline.begin() + idx + 1);
  }
};

/// Massive Hadamard formula check along a growing slit: centered finite
/// differences of G_t^m(z, w) in capacity time against -2 pi P_t^m P_t^m.
/// The headline number compares the two sides integrated over the whole
/// checkpoint range, which is insensitive to the staircase quantization of
/// the mask.
inline HadamardReport hadamard_check(const ShapeInfo& shape,
                                     const std::function<double(Point)>& mass2_fn, double h,
                                     double dt, const std::vector<double>& times, Point z,
                                     Point w, const GrowingSlit& slit) {
  HadamardReport rep;
  struct CutData {
    double green = 0.0;
    double formula = 0.0;
  };
  std::map<std::size_t, CutData> cache;
  auto at = [&](double tau) -> const CutData& {
    const std::size_t idx = slit.cut_index(tau);
    auto it = cache.find(idx);
    if (it != cache.end()) return it->second;
    Grid g = make_grid(shape, h, mass2_fn, slit.prefix(idx));
    g.chain = &slit.chain;
    g.chain_prefix = slit.maps_at_pt[idx];
    const int nz = g.nearest_node(z), nw = g.nearest_node(w);
    if (nz < 0 || nw < 0) throw SwallowedProbe();
    if (std::abs(g.coords[nz] - z) > h || std::abs(g.coords[nw] - w) > h) throw SwallowedProbe();
    CutData d;
    GreenOperator op(g);
    d.green = op.kernel_column(nw)[nz];
    const PoissonKernels pk = massive_poisson_P(g);
    if (!pk.valid[nz] || !pk.valid[nw]) throw SwallowedProbe();
    d.formula = -6.283185307179586 * pk.Pm[nz] * pk.Pm[nw];
    return cache.emplace(idx, d).first->second;
  };

  double fd_sum = 0.0, formula_sum = 0.0;
  for (double t : times) {
    const double fd = (at(t + dt).green - at(t - dt).green) / (2.0 * dt);
    const double fm = (at(t - dt).formula + at(t).formula + at(t + dt).formula) / 3.0;
    rep.times.push_back(t);
    rep.fd_derivative.push_back(fd);
    rep.formula.push_back(fm);
    rep.rel_error.push_back(std::abs(fd - fm) / std::max(std::abs(fm), 1e-300));
    fd_sum += fd;
    formula_sum += fm;
  }
  rep.integrated_rel_error =
      std::abs(fd_sum - formula_sum) / std::max(std::abs(formula_sum), 1e-300);
  return rep;
}

}  // namespace mhe
