#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "mhe/mharmonic.hpp"

using namespace mhe;

namespace {
constexpr double kPi = 3.141592653589793;

// one interior vertex (the origin), six boundary neighbors
LatticeDomain one_vertex_domain(double q) {
  // q = m_d^2 delta^2 with delta = 0.5; invert the discretization factor
  const double m2 = q / (0.25 * kMassDiscretization);
  return build_disk_domain(0.4, 0.5, kPi / 2, -kPi / 2, [m2](Point) { return m2; });
}

// center plus the six-vertex ring
LatticeDomain hex_patch_domain(double m2) {
  return build_disk_domain(0.55, 0.5, kPi / 2, -kPi / 2, [m2](Point) { return m2; });
}

// dense absorbing-chain transition matrix over the interior, built directly
// from the walk definition
Eigen::MatrixXd dense_walk_matrix(const LatticeDomain& dom, std::vector<int>& ids) {
  ids.clear();
  for (int v : dom.interior_ids) ids.push_back(v);
  const int n = static_cast<int>(ids.size());
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(n, n);
  for (int r = 0; r < n; ++r) {
    const double jw = (1.0 - dom.killing_weight(ids[r])) / 6.0;
    for (int w : dom.nbr[ids[r]]) {
      for (int c = 0; c < n; ++c) {
        if (ids[c] == w) Q(r, c) = jw;
      }
    }
  }
  return Q;
}
}  // namespace

TEST_CASE("one-step evaluation at a single interior vertex") {
  const double q = 0.2;
  const LatticeDomain dom = one_vertex_domain(q);
  REQUIRE(dom.interior_count() == 1);
  const int v = dom.interior_ids[0];
  REQUIRE(dom.killing_weight(v) == Catch::Approx(q).epsilon(1e-13));

  Eigen::VectorXd ones = Eigen::VectorXd::Ones(dom.vertex_count());
  const ScalarField h = solve_massive_harmonic(dom, ones);
  REQUIRE(h.values[v] == Catch::Approx(1.0 - q).epsilon(1e-13));
}

TEST_CASE("affine functions are exactly harmonic at zero mass") {
  const LatticeDomain dom = build_disk_domain(1.0, 0.25, kPi / 2, -kPi / 2,
                                              [](Point) { return 0.0; });
  auto affine = [](Point z) { return 0.7 * z.real() - 1.3 * z.imag() + 0.1; };
  Eigen::VectorXd g(dom.vertex_count());
  for (int v = 0; v < dom.vertex_count(); ++v) g[v] = affine(dom.pos[v]);
  const ScalarField h = solve_massive_harmonic(dom, g);
  for (int v : dom.interior_ids) {
    REQUIRE(h.values[v] == Catch::Approx(affine(dom.pos[v])).margin(1e-10));
  }
}

TEST_CASE("small massive system matches hand-rolled elimination") {
  // three collinear interior vertices in a thin rectangle
  const double q = 0.1;
  const double m2 = q / (0.25 * kMassDiscretization);
  const LatticeDomain dom =
      build_rect_domain(1.2, 0.2, 0.5, kPi, 0.0, [m2](Point) { return m2; });
  REQUIRE(dom.interior_count() == 3);

  // identify center and flanks by x-coordinate
  std::vector<int> order = dom.interior_ids;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return dom.pos[a].real() < dom.pos[b].real(); });

  Eigen::VectorXd g = Eigen::VectorXd::Zero(dom.vertex_count());
  for (int v : dom.boundary_ids) g[v] = 0.25 * dom.pos[v].real() + 0.6 * dom.pos[v].imag() + 0.3;

  // independent elimination oracle for h_i = jw * sum of neighbor values
  const double jw = (1.0 - q) / 6.0;
  auto boundary_sum = [&](int v) {
    double s = 0.0;
    for (int w : dom.nbr[v]) {
      if (!dom.interior[w]) s += g[w];
    }
    return s;
  };
  // unknowns x0 (left), x1 (center), x2 (right); chain coupling through jw
  const double b0 = jw * boundary_sum(order[0]);
  const double b1 = jw * boundary_sum(order[1]);
  const double b2 = jw * boundary_sum(order[2]);
  // x0 = b0 + jw x1; x2 = b2 + jw x1; x1 = b1 + jw (x0 + x2)
  const double x1 = (b1 + jw * (b0 + b2)) / (1.0 - 2.0 * jw * jw);
  const double x0 = b0 + jw * x1;
  const double x2 = b2 + jw * x1;

  const ScalarField h = solve_massive_harmonic(dom, g);
  REQUIRE(h.values[order[0]] == Catch::Approx(x0).margin(1e-12));
  REQUIRE(h.values[order[1]] == Catch::Approx(x1).margin(1e-12));
  REQUIRE(h.values[order[2]] == Catch::Approx(x2).margin(1e-12));
}

TEST_CASE("harmonic measure basics") {
  SECTION("all boundary, no mass: certain exit") {
    const LatticeDomain dom = hex_patch_domain(0.0);
    const ScalarField H = massive_harmonic_measure(dom, dom.boundary_ids);
    for (int v : dom.interior_ids) REQUIRE(H.values[v] == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("single vertex, all boundary with killing") {
    const double q = 0.15;
    const LatticeDomain dom = one_vertex_domain(q);
    const ScalarField H = massive_harmonic_measure(dom, dom.boundary_ids);
    REQUIRE(H.values[dom.interior_ids[0]] == Catch::Approx(1.0 - q).epsilon(1e-13));
  }
  SECTION("single vertex, half the boundary, no mass") {
    const LatticeDomain dom = one_vertex_domain(0.0);
    std::vector<int> half(dom.boundary_ids.begin(), dom.boundary_ids.begin() + 3);
    const ScalarField H = massive_harmonic_measure(dom, half);
    REQUIRE(H.values[dom.interior_ids[0]] == Catch::Approx(0.5).epsilon(1e-13));
  }
}

TEST_CASE("killing probability") {
  SECTION("no mass means no killing") {
    const LatticeDomain dom = hex_patch_domain(0.0);
    const ScalarField k = killing_probability(dom);
    for (int v : dom.interior_ids) REQUIRE(k.values[v] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("single vertex killing weight") {
    const double q = 0.05;
    const LatticeDomain dom = one_vertex_domain(q);
    const ScalarField k = killing_probability(dom);
    REQUIRE(k.values[dom.interior_ids[0]] == Catch::Approx(q).epsilon(1e-12));
  }
  SECTION("hex patch against the dense absorbing-chain oracle") {
    const LatticeDomain dom = hex_patch_domain(0.35);
    std::vector<int> ids;
    const Eigen::MatrixXd Q = dense_walk_matrix(dom, ids);
    Eigen::VectorXd death(ids.size());
    for (std::size_t r = 0; r < ids.size(); ++r) death[r] = dom.killing_weight(ids[r]);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(ids.size(), ids.size());
    const Eigen::VectorXd oracle = (I - Q).fullPivLu().solve(death);

    const ScalarField k = killing_probability(dom);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      REQUIRE(k.values[ids[r]] == Catch::Approx(oracle[r]).margin(1e-12));
    }
  }
}

TEST_CASE("partition of outcomes and domination") {
  const LatticeDomain dom = build_disk_domain(1.0, 0.2, 2.0, -0.8, [](Point z) {
    return 1.5 / (1.0 + std::norm(z));
  });
  std::vector<int> plus, minus;
  for (int v : dom.boundary_ids) (dom.sign[v] > 0 ? plus : minus).push_back(v);
  const ScalarField Hp = massive_harmonic_measure(dom, plus);
  const ScalarField Hm = massive_harmonic_measure(dom, minus);
  const ScalarField kill = killing_probability(dom);
  for (int v : dom.interior_ids) {
    REQUIRE(Hp.values[v] + Hm.values[v] + kill.values[v] == Catch::Approx(1.0).margin(1e-10));
  }

  // massless measure dominates the massive one for the same target
  const LatticeDomain dom0 = build_disk_domain(1.0, 0.2, 2.0, -0.8, [](Point) { return 0.0; });
  const ScalarField Hp0 = massive_harmonic_measure(dom0, plus);
  for (int v : dom.interior_ids) {
    REQUIRE(Hp.values[v] <= Hp0.values[v] + 1e-12);
  }
}

TEST_CASE("observable: antisymmetry, one-step value and route identity") {
  SECTION("mirror-symmetric domain vanishes on the axis") {
    // marks at +-pi/2: reflecting across the imaginary axis swaps the arcs
    const LatticeDomain dom = build_disk_domain(1.0, 0.25, kPi / 2, -kPi / 2,
                                                [](Point) { return 0.4; });
    const ScalarField h = observable_h(dom);
    int on_axis = 0;
    for (int v : dom.interior_ids) {
      if (std::abs(dom.pos[v].real()) < 1e-12) {
        REQUIRE(h.values[v] == Catch::Approx(0.0).margin(1e-11));
        ++on_axis;
      }
    }
    REQUIRE(on_axis > 0);
  }
  SECTION("single vertex with empty minus arc") {
    const double q = 0.12;
    LatticeDomain dom = one_vertex_domain(q);
    for (int v : dom.boundary_ids) dom.sign[v] = 1;  // make the minus arc empty
    const ScalarField h = observable_h(dom);
    REQUIRE(h.values[dom.interior_ids[0]] == Catch::Approx(0.5 * (1.0 - q)).epsilon(1e-12));
  }
  SECTION("two computation routes agree") {
    const LatticeDomain dom = build_disk_domain(1.0, 0.2, 2.3, -0.6,
                                                [](Point) { return 0.8; });
    const ScalarField h = observable_h(dom);
    std::vector<int> plus, minus;
    for (int v : dom.boundary_ids) (dom.sign[v] > 0 ? plus : minus).push_back(v);
    const ScalarField Hp = massive_harmonic_measure(dom, plus);
    const ScalarField Hm = massive_harmonic_measure(dom, minus);
    for (int v : dom.interior_ids) {
      REQUIRE(h.values[v] ==
              Catch::Approx(0.5 * (Hp.values[v] - Hm.values[v])).margin(1e-10));
    }
  }
}

TEST_CASE("maximum principle for nonnegative data") {
  const LatticeDomain dom = build_disk_domain(1.0, 0.2, 1.0, -1.5, [](Point) { return 0.6; });
  Eigen::VectorXd g = Eigen::VectorXd::Zero(dom.vertex_count());
  double gmax = 0.0;
  Rng rng(11, 0);
  for (int v : dom.boundary_ids) {
    g[v] = rng.uniform();
    gmax = std::max(gmax, g[v]);
  }
  const ScalarField h = solve_massive_harmonic(dom, g);
  for (int v : dom.interior_ids) {
    REQUIRE(h.values[v] >= -1e-12);
    REQUIRE(h.values[v] <= gmax + 1e-12);
  }
}

TEST_CASE("rescaled massive-harmonicity identity holds for solver output") {
  const LatticeDomain dom = build_disk_domain(1.0, 1.0 / 12, 2.8, -0.2, [](Point z) {
    return 2.0 / (1.0 + std::norm(z) * 0.5);
  });
  const DomainState state = DomainState::initial(dom);
  const ScalarField h = observable_h(state);
  REQUIRE(mharm_identity_residual(state, h) <= 1e-8);
}

TEST_CASE("expected visits of the killed walk") {
  SECTION("single vertex is visited exactly once") {
    const LatticeDomain dom = one_vertex_domain(0.3);
    const ScalarField g = discrete_massive_green(dom, dom.interior_ids[0]);
    REQUIRE(g.values[dom.interior_ids[0]] == Catch::Approx(1.0).epsilon(1e-13));
  }
  SECTION("pointwise mass increase cannot increase the diagonal") {
    const LatticeDomain lo = hex_patch_domain(0.2);
    const LatticeDomain hi = hex_patch_domain(0.9);
    const int c_lo = nearest_interior_vertex(lo, Point(0, 0));
    const int c_hi = nearest_interior_vertex(hi, Point(0, 0));
    const double g_lo = discrete_massive_green(lo, c_lo).values[c_lo];
    const double g_hi = discrete_massive_green(hi, c_hi).values[c_hi];
    REQUIRE(g_hi <= g_lo + 1e-13);
  }
  SECTION("hex patch against the dense inverse oracle") {
    const LatticeDomain dom = hex_patch_domain(0.5);
    std::vector<int> ids;
    const Eigen::MatrixXd Q = dense_walk_matrix(dom, ids);
    const Eigen::MatrixXd N =
        (Eigen::MatrixXd::Identity(ids.size(), ids.size()) - Q).inverse();
    const int src = 0;
    const ScalarField g = discrete_massive_green(dom, ids[src]);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      REQUIRE(g.values[ids[c]] == Catch::Approx(N(src, c)).margin(1e-12));
    }
  }
  SECTION("boundary source is rejected") {
    const LatticeDomain dom = hex_patch_domain(0.1);
    REQUIRE_THROWS_AS(discrete_massive_green(dom, dom.boundary_ids[0]), BadSource);
  }
}

TEST_CASE("excursion visit identity") {
  SECTION("all boundary-to-interior edges integrate to one") {
    const LatticeDomain dom = build_disk_domain(1.0, 0.35, 2.0, -1.0,
                                                [](Point) { return 0.7; });
    std::vector<std::pair<int, int>> all_edges;
    for (int v : dom.boundary_ids) {
      for (int w : dom.nbr[v]) {
        if (w >= 0 && dom.interior[w]) all_edges.emplace_back(v, w);
      }
    }
    for (int x : dom.interior_ids) {
      REQUIRE(excursion_visit_integral(dom, all_edges, x) ==
              Catch::Approx(1.0).margin(1e-10));
    }
  }
  SECTION("empty edge set integrates to zero") {
    const LatticeDomain dom = hex_patch_domain(0.0);
    REQUIRE(excursion_visit_integral(dom, {}, dom.interior_ids[0]) == 0.0);
  }
  SECTION("single vertex with two marked edges") {
    const LatticeDomain dom = one_vertex_domain(0.0);
    const int x = dom.interior_ids[0];
    std::vector<std::pair<int, int>> e1;
    for (int v : dom.boundary_ids) {
      if (e1.size() < 2) e1.emplace_back(v, x);
    }
    REQUIRE(excursion_visit_integral(dom, e1, x) == Catch::Approx(2.0 / 6.0).margin(1e-13));
  }
  SECTION("matches the reversed-edge exit probability") {
    const LatticeDomain dom = build_disk_domain(1.0, 0.35, 2.0, -1.0,
                                                [](Point) { return 0.0; });
    REQUIRE(dom.interior_count() + dom.boundary_count() <= 60);
    std::vector<std::pair<int, int>> e1;
    Rng rng(5, 0);
    for (int v : dom.boundary_ids) {
      for (int w : dom.nbr[v]) {
        if (w >= 0 && dom.interior[w] && rng.uniform() < 0.4) e1.emplace_back(v, w);
      }
    }
    REQUIRE(!e1.empty());
    for (int x : dom.interior_ids) {
      const double lhs = excursion_visit_integral(dom, e1, x);
      const double rhs = exit_probability_via_reversed_edges(dom, e1, x);
      REQUIRE(lhs == Catch::Approx(rhs).margin(1e-10));
    }
  }
}

TEST_CASE("incremental solver tracks fresh factorizations across absorptions") {
  const LatticeDomain dom = build_disk_domain(1.0, 1.0 / 8, 2.5, -0.5,
                                              [](Point) { return 0.9; });
  DomainState state = DomainState::initial(dom);
  IncrementalDirichletSolver inc(state, sign_boundary_values(state, 0.5, -0.5), 16);

  Rng rng(42, 0);
  std::vector<int> interior = dom.interior_ids;
  for (int k = 0; k < 40; ++k) {
    // absorb a random still-interior vertex with a random sign
    int v = -1;
    do {
      v = interior[rng.uniform_index(interior.size())];
    } while (!inc.interior()[v]);
    const bool plus = rng.uniform() < 0.5;
    inc.absorb(v, plus ? 0.5 : -0.5);
    state.interior[v] = 0;
    state.sign[v] = plus ? 1 : -1;

    if (k % 7 == 0) {
      const ScalarField fast = inc.solve();
      const ScalarField slow =
          solve_massive_harmonic(state, sign_boundary_values(state, 0.5, -0.5));
      for (int u : dom.interior_ids) {
        REQUIRE(fast.values[u] == Catch::Approx(slow.values[u]).margin(1e-10));
      }
    }
  }

  SECTION("audit push and pop restore the solution") {
    const ScalarField before = inc.solve();
    int v = -1;
    Rng r2(7, 0);
    do {
      v = interior[r2.uniform_index(interior.size())];
    } while (!inc.interior()[v]);
    inc.push_audit(v, 0.5);
    const ScalarField plus = inc.solve();
    REQUIRE(plus.values[v] == Catch::Approx(0.5).margin(1e-12));
    inc.pop_audit();
    const ScalarField after = inc.solve();
    for (int u : dom.interior_ids) {
      REQUIRE(after.values[u] == Catch::Approx(before.values[u]).margin(1e-13));
    }
  }
}
