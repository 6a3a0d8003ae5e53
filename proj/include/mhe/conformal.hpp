#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mhe/common.hpp"
#include "mhe/lattice.hpp"

namespace mhe {

// --- Jacobi elliptic machinery for the rectangle map -----------------------

/// Complete elliptic integral K(k), via the arithmetic-geometric mean.
inline double elliptic_K(double k) {
  if (k < 0.0 || k >= 1.0) throw Error("elliptic_K: modulus out of range");
  double a = 1.0, b = std::sqrt(1.0 - k * k);
  while (std::abs(a - b) > 1e-15 * a) {
    const double an = 0.5 * (a + b);
    b = std::sqrt(a * b);
    a = an;
  }
  return 1.5707963267948966 / a;
}

/// Real Jacobi sn, cn, dn by the descending Landen transformation.
inline void jacobi_sncndn(double u, double k, double& sn, double& cn, double& dn) {
  if (k < 1e-12) {
    sn = std::sin(u);
    cn = std::cos(u);
    dn = 1.0;
    return;
  }
  if (k > 1.0 - 1e-12) {
    sn = std::tanh(u);
    cn = 1.0 / std::cosh(u);
    dn = cn;
    return;
  }
  std::vector<double> as = {1.0}, cs = {k};
  double a = 1.0, b = std::sqrt(1.0 - k * k), c = k;
  while (std::abs(c) > 1e-15) {
    c = 0.5 * (a - b);
    const double an = 0.5 * (a + b);
    b = std::sqrt(a * b);
    a = an;
    as.push_back(a);
    cs.push_back(c);
  }
  const int n = static_cast<int>(as.size()) - 1;
  double phi = std::ldexp(1.0, n) * as[n] * u;
  for (int i = n; i >= 1; --i) {
    const double s = cs[i] / as[i] * std::sin(phi);
    phi = 0.5 * (phi + std::asin(std::max(-1.0, std::min(1.0, s))) );
    if (i == 1) break;
  }
  // one more halving to reach level 0: the loop above ends at level 1
  sn = std::sin(phi);
  cn = std::cos(phi);
  dn = std::sqrt(std::max(0.0, 1.0 - k * k * sn * sn));
}

/// sn of a complex argument via the addition formula with modulus k.
inline Point jacobi_sn(Point u, double k) {
  const double kp = std::sqrt(std::max(0.0, 1.0 - k * k));
  double s, c, d, s1, c1, d1;
  jacobi_sncndn(u.real(), k, s, c, d);
  jacobi_sncndn(u.imag(), kp, s1, c1, d1);
  const double denom = c1 * c1 + k * k * s * s * s1 * s1;
  if (std::abs(denom) < 1e-300) return Point(std::numeric_limits<double>::infinity(), 0.0);
  return Point(s * d1 / denom, c * d * s1 * c1 / denom);
}

/// Modulus k with K'(k)/K(k) equal to the given aspect ratio, via the nome.
inline double modulus_from_aspect(double aspect) {
  if (aspect <= 0.0) throw Error("aspect must be positive");
  const double q = std::exp(-3.141592653589793 * aspect);
  double th2 = 0.0, th3 = 1.0;
  for (int n = 0; n < 64; ++n) {
    const double e2 = std::pow(q, (n + 0.5) * (n + 0.5));
    const double e3 = std::pow(q, static_cast<double>(n + 1) * (n + 1));
    th2 += 2.0 * e2;
    th3 += 2.0 * e3;
    if (e2 < 1e-18 && e3 < 1e-18) break;
  }
  const double k = (th2 / th3) * (th2 / th3);
  return std::min(k, 1.0 - 1e-15);
}

// --- conformal maps onto the upper half-plane ------------------------------

// psi maps the continuum domain onto H with psi(a) = 0 and psi(b) = infinity;
// clamp projects a point into the closed domain (dual-lattice points can
// stick out of it by a fraction of the meshsize). from_H is the inverse where
// available (Moebius shapes).
struct ConformalMap {
  std::function<Point(Point)> to_H;
  std::function<Point(Point)> clamp;
  std::function<Point(Point)> from_H;

  Point pull_back(Point w) const {
    if (!from_H) throw MapError("inverse map not available for this shape");
    return from_H(w);
  }
};

inline ConformalMap disk_to_H(double radius, double a_angle, double b_angle) {
  const Point p = std::polar(1.0, a_angle);
  const Point q = std::polar(1.0, b_angle);
  Point s = -p;
  if (std::abs(s - q) < 1e-9) s = Point(-p.imag(), p.real());
  const Point vs = (s - p) / (s - q);
  Point lambda = 1.0 / vs;
  if ((lambda * p / q).imag() < 0.0) lambda = -lambda;
  auto to_H = [=](Point z) -> Point {
    const Point u = z / radius;
    return lambda * (u - p) / (u - q);
  };
  auto clamp = [=](Point z) -> Point {
    const double r = std::abs(z);
    const double rmax = radius * (1.0 - 1e-12);
    return r > rmax ? z * (rmax / r) : z;
  };
  auto from_H = [=](Point w) -> Point {
    return radius * (w * q - lambda * p) / (w - lambda);
  };
  return {to_H, clamp, from_H};
}

inline ConformalMap rect_to_H(double width, double height, double a_angle, double b_angle) {
  const double k = modulus_from_aspect(2.0 * height / width);
  const double K = elliptic_K(k);
  const double scale = 2.0 * K / width;
  auto premap = [=](Point z) { return (z + Point(0.0, 0.5 * height)) * scale; };
  auto ray_hit = [=](double angle) -> Point {
    const Point dir = std::polar(1.0, angle);
    double t = std::numeric_limits<double>::max();
    if (dir.real() != 0.0) t = std::min(t, 0.5 * width / std::abs(dir.real()));
    if (dir.imag() != 0.0) t = std::min(t, 0.5 * height / std::abs(dir.imag()));
    return t * dir;
  };
  const Point ua_c = jacobi_sn(premap(ray_hit(a_angle)), k);
  const Point ub_c = jacobi_sn(premap(ray_hit(b_angle)), k);
  if (!std::isfinite(ua_c.real())) throw MapError("marked point a at the sn pole");
  const double ua = ua_c.real();
  const bool b_at_pole = !std::isfinite(ub_c.real()) || std::abs(ub_c.real()) > 1e12;
  const double ub = b_at_pole ? 0.0 : ub_c.real();
  const double sigma = b_at_pole ? 1.0 : (ua > ub ? 1.0 : -1.0);
  auto to_H = [=](Point z) -> Point {
    const Point u = jacobi_sn(premap(z), k);
    if (b_at_pole) return sigma * (u - ua);
    return sigma * (u - ua) / (u - ub);
  };
  auto clamp = [=](Point z) -> Point {
    const double margin = 1e-12;
    const double x = std::max(-0.5 * width * (1 - margin),
                              std::min(0.5 * width * (1 - margin), z.real()));
    const double y = std::max(-0.5 * height * (1 - margin),
                              std::min(0.5 * height * (1 - margin), z.imag()));
    return Point(x, y);
  };
  return {to_H, clamp, nullptr};
}

inline ConformalMap map_to_H(const ShapeInfo& s) {
  if (s.kind == ShapeInfo::Kind::Disk) return disk_to_H(s.radius, s.a_angle, s.b_angle);
  return rect_to_H(s.width, s.height, s.a_angle, s.b_angle);
}

// Analytic map with derivative, for mass pushforward and covariance tests.
struct AnalyticMap {
  std::function<Point(Point)> f;
  std::function<Point(Point)> df;
  std::function<Point(Point)> inverse;
  std::function<Point(Point)> dinverse;
};

/// Unit-disk automorphism z -> (z - alpha) / (1 - conj(alpha) z).
inline AnalyticMap disk_automorphism(Point alpha) {
  if (std::abs(alpha) >= 1.0) throw Error("automorphism parameter must lie in the disk");
  const Point ac = std::conj(alpha);
  auto f = [=](Point z) { return (z - alpha) / (1.0 - ac * z); };
  auto df = [=](Point z) {
    const Point d = 1.0 - ac * z;
    return (1.0 - ac * alpha) / (d * d);
  };
  auto finv = [=](Point w) { return (w + alpha) / (1.0 + ac * w); };
  auto dfinv = [=](Point w) {
    const Point d = 1.0 + ac * w;
    return (1.0 - ac * alpha) / (d * d);
  };
  return {f, df, finv, dfinv};
}

inline AnalyticMap scaling_map(double lambda) {
  if (lambda == 0.0) throw DegenerateMap();
  auto f = [=](Point z) { return lambda * z; };
  auto df = [=](Point) { return Point(lambda, 0.0); };
  auto finv = [=](Point w) { return w / lambda; };
  auto dfinv = [=](Point) { return Point(1.0 / lambda, 0.0); };
  return {f, df, finv, dfinv};
}

inline AnalyticMap identity_map() {
  auto f = [](Point z) { return z; };
  auto one = [](Point) { return Point(1.0, 0.0); };
  return {f, one, f, one};
}

}  // namespace mhe
