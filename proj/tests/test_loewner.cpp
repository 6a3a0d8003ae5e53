#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mhe/conformal.hpp"
#include "mhe/lattice.hpp"
#include "mhe/loewner.hpp"
#include "mhe/stats.hpp"

using namespace mhe;

namespace {
constexpr double kPi = 3.141592653589793;

DrivingFunction brownian_driving(double dt, double t_end, std::uint64_t seed) {
  DrivingFunction d;
  d.dt_hint = dt;
  Rng rng(seed, 0);
  d.times.push_back(0.0);
  d.values.push_back(0.0);
  double w = 0.0;
  const int n = static_cast<int>(std::llround(t_end / dt));
  for (int k = 1; k <= n; ++k) {
    w += 2.0 * std::sqrt(dt) * rng.normal();
    d.times.push_back(k * dt);
    d.values.push_back(w);
  }
  return d;
}
}  // namespace

TEST_CASE("zero driving has the closed-form flow g_t(iy) = i sqrt(y^2 - 4t)") {
  // g dg = 2 dt from the Loewner equation, so g_t(iy)^2 = 4t - y^2; the point
  // rides the slit axis down and is swallowed at t = y^2 / 4
  DrivingFunction d;
  d.times = {0.0, 0.05, 0.1};
  d.values = {0.0, 0.0, 0.0};
  d.dt_hint = 1e-4;
  for (double y : {1.0, 1.7, 2.5}) {
    const EvolveResult r = loewner_evolve(d, Point(0.0, y), 0.1);
    REQUIRE_FALSE(r.swallowed);
    REQUIRE(r.value.real() == Catch::Approx(0.0).margin(1e-10));
    REQUIRE(r.value.imag() == Catch::Approx(std::sqrt(y * y - 0.4)).epsilon(1e-9));
  }
  const EvolveResult sw = loewner_evolve(d, Point(0.0, 0.3), 0.1);
  REQUIRE(sw.swallowed);
  REQUIRE(sw.swallow_time == Catch::Approx(0.3 * 0.3 / 4.0).margin(1e-4));
}

TEST_CASE("evolving to time zero is the identity") {
  const DrivingFunction d = brownian_driving(1e-3, 0.05, 4);
  const Point z(0.4, 0.7);
  const EvolveResult r = loewner_evolve(d, z, 0.0);
  REQUIRE(r.value == z);
}

TEST_CASE("imaginary parts shrink along the flow") {
  const DrivingFunction d = brownian_driving(1e-3, 0.08, 9);
  for (double x : {-0.8, 0.1, 0.9}) {
    const Point z(x, 1.1);
    double last = z.imag();
    for (double t : {0.02, 0.04, 0.08}) {
      const EvolveResult r = loewner_evolve(d, z, t);
      if (r.swallowed) break;
      REQUIRE(r.value.imag() <= last + 1e-12);
      last = r.value.imag();
    }
  }
}

TEST_CASE("swallowing time is monotone under extension") {
  const DrivingFunction d = brownian_driving(1e-3, 0.1, 12);
  const Point z(0.01, 0.02);  // near the start point, swallowed quickly
  const EvolveResult r1 = loewner_evolve(d, z, 0.05);
  const EvolveResult r2 = loewner_evolve(d, z, 0.1);
  if (r1.swallowed) {
    REQUIRE(r2.swallowed);
    REQUIRE(r2.swallow_time == Catch::Approx(r1.swallow_time).margin(1e-9));
  }
}

TEST_CASE("vertical slit extraction recovers the exact driver and capacity") {
  const double x0 = 0.37, height = 0.8;
  const int n = 200;
  CurveInH curve;
  curve.points.push_back(Point(0.0, 0.0));
  for (int k = 1; k <= n; ++k) {
    curve.points.push_back(Point(x0, height * k / n));
  }
  const DrivingFunction d = extract_driving(curve);
  for (std::size_t i = 1; i < d.values.size(); ++i) {
    REQUIRE(d.values[i] == Catch::Approx(x0).margin(1e-11));
  }
  REQUIRE(d.total_time() == Catch::Approx(height * height / 4.0).margin(1e-12));
}

TEST_CASE("extraction is exactly scale covariant") {
  CurveInH curve;
  curve.points.push_back(Point(0, 0));
  Rng rng(31, 0);
  Point p(0.0, 0.0);
  for (int k = 0; k < 60; ++k) {
    p += Point(0.05 * (rng.uniform() - 0.5), 0.05 * rng.uniform() + 0.01);
    curve.points.push_back(p);
  }
  const double lambda = 2.3;
  CurveInH scaled;
  for (const Point& q : curve.points) scaled.points.push_back(lambda * q);

  const DrivingFunction d1 = extract_driving(curve);
  const DrivingFunction d2 = extract_driving(scaled);
  REQUIRE(d1.times.size() == d2.times.size());
  for (std::size_t i = 0; i < d1.times.size(); ++i) {
    REQUIRE(d2.times[i] == Catch::Approx(lambda * lambda * d1.times[i]).epsilon(1e-11));
    REQUIRE(d2.values[i] == Catch::Approx(lambda * d1.values[i]).margin(1e-11));
  }
}

TEST_CASE("consecutive duplicate points are rejected") {
  CurveInH curve;
  curve.points = {Point(0, 0), Point(0.1, 0.2), Point(0.1, 0.2), Point(0.0, 0.4)};
  REQUIRE_THROWS_AS(extract_driving(curve), DegenerateSegment);
}

TEST_CASE("driving round trip: Brownian sample, trace, re-extract") {
  const double dt = 2e-4, T = 0.1;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const DrivingFunction d = brownian_driving(dt, T, seed);
    const CurveInH fine = trace_curve(d);

    // full resolution: unzipping inverts the tip tracking exactly
    const DrivingFunction exact = extract_driving(fine);
    REQUIRE(exact.times.size() == d.times.size());
    for (std::size_t i = 0; i < d.times.size(); ++i) {
      REQUIRE(exact.values[i] == Catch::Approx(d.values[i]).margin(1e-9));
      REQUIRE(exact.times[i] == Catch::Approx(d.times[i]).margin(1e-12));
    }

    // thinned curve: genuine self-consistency of the slit discretization
    CurveInH thin;
    for (std::size_t i = 0; i < fine.points.size(); i += 2) thin.points.push_back(fine.points[i]);
    const DrivingFunction d2 = extract_driving(thin);
    double worst = 0.0;
    std::size_t j = 1;
    for (std::size_t i = 1; i < d.times.size(); ++i) {
      const double t = d.times[i];
      if (t > d2.total_time()) break;
      while (j < d2.times.size() && d2.times[j] < t) ++j;
      if (j >= d2.times.size()) break;
      const double t1 = d2.times[j - 1], t2 = d2.times[j];
      const double w =
          d2.values[j - 1] + (d2.values[j] - d2.values[j - 1]) * (t - t1) / (t2 - t1);
      worst = std::max(worst, std::abs(w - d.values[i]));
    }
    REQUIRE(worst <= 0.05);
  }
}

TEST_CASE("capacity additivity under concatenated extraction") {
  const DrivingFunction d = brownian_driving(1e-3, 0.05, 21);
  const CurveInH curve = trace_curve(d);
  SlitChain whole, firsthalf;
  const std::size_t half = curve.points.size() / 2;
  for (std::size_t i = 1; i < curve.points.size(); ++i) whole.unzip(curve.points[i]);
  for (std::size_t i = 1; i <= half; ++i) firsthalf.unzip(curve.points[i]);
  const double cap_first = firsthalf.capacity();
  for (std::size_t i = half + 1; i < curve.points.size(); ++i) firsthalf.unzip(curve.points[i]);
  REQUIRE(firsthalf.capacity() == Catch::Approx(whole.capacity()).margin(1e-9));
  REQUIRE(cap_first <= whole.capacity());
}

TEST_CASE("transversal self-crossings are detected") {
  CurveInH bad;
  bad.points = {Point(0, 0), Point(0, 1), Point(1, 1), Point(1, 2), Point(0.5, 0.2)};
  bool crosses = false;
  for (std::size_t i = 0; i + 1 < bad.points.size(); ++i) {
    for (std::size_t j = i + 2; j + 1 < bad.points.size(); ++j) {
      crosses |= segments_cross(bad.points[i], bad.points[i + 1], bad.points[j],
                                bad.points[j + 1]);
    }
  }
  REQUIRE(crosses);
  REQUIRE_THROWS_AS(validate_curve(bad), Error);

  CurveInH good;
  good.points = {Point(0, 0), Point(0, 1), Point(0.5, 1.2), Point(0.4, 1.8)};
  REQUIRE_NOTHROW(validate_curve(good));
}

TEST_CASE("disk uniformization hits the marked points and the center value") {
  // a = -i, b = +i on the unit disk maps the center to i
  const ConformalMap cm = disk_to_H(1.0, -kPi / 2, kPi / 2);
  REQUIRE(std::abs(cm.to_H(Point(0, -1))) <= 1e-9);
  REQUIRE(std::abs(cm.to_H(Point(0, 0)) - Point(0, 1)) <= 1e-9);
  REQUIRE(std::abs(cm.to_H(Point(0, 0.999999))) > 1e5);

  // the counterclockwise arc from a carries the minus side: positive axis
  const Point near_a_minus = cm.to_H(0.9999 * std::polar(1.0, -kPi / 2 + 0.05));
  REQUIRE(near_a_minus.real() > 0.0);
  REQUIRE(std::abs(near_a_minus.imag()) <= 1e-3);
  const Point near_a_plus = cm.to_H(0.9999 * std::polar(1.0, -kPi / 2 - 0.05));
  REQUIRE(near_a_plus.real() < 0.0);

  // inverse round trip
  for (Point z : {Point(0.3, 0.2), Point(-0.5, -0.4), Point(0.1, 0.7)}) {
    REQUIRE(std::abs(cm.from_H(cm.to_H(z)) - z) <= 1e-10);
  }
}

TEST_CASE("lattice dual paths map into the closed half-plane") {
  const LatticeDomain dom =
      build_disk_domain(1.0, 0.2, kPi / 2, -kPi / 2, [](Point) { return 0.4; });
  DualPath path;
  path.points = {dom.a_mark};
  const CurveInH trivial = curve_to_H(dom, path);
  REQUIRE(trivial.points.size() == 1);
  REQUIRE(trivial.points[0] == Point(0, 0));
}

TEST_CASE("rectangle uniformization: boundary to the real axis") {
  const ConformalMap cm = rect_to_H(2.0, 1.0, kPi, 0.0);
  // marked points map to 0 and infinity
  REQUIRE(std::abs(cm.to_H(Point(-1.0, 0.0))) <= 1e-8);
  REQUIRE(std::abs(cm.to_H(Point(0.9999, 0.0))) > 1e3);
  // boundary samples go to the real axis, interior to the open half-plane
  for (double t : {-0.8, -0.3, 0.2, 0.7}) {
    REQUIRE(std::abs(cm.to_H(Point(t, -0.5)).imag()) <= 1e-8);
    REQUIRE(std::abs(cm.to_H(Point(t, 0.5)).imag()) <= 1e-8);
  }
  for (Point z : {Point(0.0, 0.0), Point(-0.5, 0.2), Point(0.6, -0.3)}) {
    REQUIRE(cm.to_H(z).imag() > 0.0);
  }
}

TEST_CASE("jacobi sn reduces to sine and tanh at the modulus extremes") {
  for (double u : {0.2, 0.7, 1.3}) {
    REQUIRE(jacobi_sn(Point(u, 0.0), 1e-14).real() == Catch::Approx(std::sin(u)).margin(1e-9));
    double s, c, d;
    jacobi_sncndn(u, 1.0 - 1e-15, s, c, d);
    REQUIRE(s == Catch::Approx(std::tanh(u)).margin(1e-6));
  }
  // sn(K, k) = 1
  const double k = 0.6;
  double s, c, d;
  jacobi_sncndn(elliptic_K(k), k, s, c, d);
  REQUIRE(s == Catch::Approx(1.0).margin(1e-10));
  REQUIRE(elliptic_K(1e-14) == Catch::Approx(kPi / 2).margin(1e-10));
}

TEST_CASE("zero-drift simulation matches 2 * Brownian statistics") {
  MsleOptions opt;
  opt.dt = 1e-3;
  opt.t_end = 0.1;
  opt.seed = 7;
  const int N = 400;
  RunningStat endpoint;
  RunningStat lag_product;
  for (int i = 0; i < N; ++i) {
    MsleOptions o = opt;
    o.stream = i;
    const MsleResult r =
        simulate_msle4([](const SlitChain&, double) { return 0.0; }, o);
    endpoint.add(r.driving.values.back());
    // adjacent increment products for independence
    const auto& w = r.driving.values;
    for (std::size_t k = 2; k + 1 < w.size(); k += 2) {
      lag_product.add((w[k] - w[k - 1]) * (w[k + 1] - w[k]));
    }
    REQUIRE(r.novikov_accumulated == 0.0);
  }
  REQUIRE(std::abs(endpoint.mean()) <= 3.0 * endpoint.stderror());
  const double ratio = endpoint.variance() / (4.0 * opt.t_end);
  REQUIRE(ratio >= 0.85);
  REQUIRE(ratio <= 1.15);
  REQUIRE(std::abs(lag_product.mean()) <= 3.0 * lag_product.stderror());
}

TEST_CASE("oversized step size is rejected") {
  MsleOptions opt;
  opt.dt = 5e-3;
  REQUIRE_THROWS_AS(simulate_msle4([](const SlitChain&, double) { return 0.0; }, opt),
                    ConfigError);
}
