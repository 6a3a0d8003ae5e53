#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "mhe/common.hpp"
#include "mhe/conformal.hpp"
#include "mhe/lattice.hpp"

namespace mhe {

// Elementary vertical-slit map g(w) = sqrt(w^2 + c^2), branch chosen so that
// H minus the slit [0, ic] maps onto H and g(w) ~ w at infinity.
inline Point forward_slit(Point w, double c) {
  Point r = std::sqrt(w * w + c * c);
  if (w.real() < 0.0) r = -r;
  return r;
}

// Inverse slit map H -> H minus [0, ic]: sqrt(w - c) * sqrt(w + c) with
// principal square roots.
inline Point inverse_slit(Point w, double c) {
  return std::sqrt(w - c) * std::sqrt(w + c);
}

// Chordal driving function samples: capacity times t_k (hcap normalization
// t = slit_height^2 / 4) and values W_k.
struct DrivingFunction {
  std::vector<double> times;
  std::vector<double> values;
  double dt_hint = 0.0;

  void validate() const {
    if (times.empty() || times.size() != values.size()) throw Error("empty driving function");
    if (times.front() != 0.0 || values.front() != 0.0) {
      throw Error("driving function must start at (0, 0)");
    }
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (times[i] <= times[i - 1]) throw Error("driving times must increase strictly");
    }
  }
  double total_time() const { return times.back(); }
};

// Curve in the closed upper half-plane starting at 0.
struct CurveInH {
  std::vector<Point> points;
};

// true if segments (a,b) and (c,d) cross transversally (shared endpoints and
// touchings do not count)
inline bool segments_cross(Point a, Point b, Point c, Point d) {
  const double d1 = cross2(b - a, c - a);
  const double d2 = cross2(b - a, d - a);
  const double d3 = cross2(d - c, a - c);
  const double d4 = cross2(d - c, b - c);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
         ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

inline void validate_curve(const CurveInH& curve) {
  const auto& p = curve.points;
  if (p.empty()) throw Error("empty curve");
  if (std::abs(p.front()) > 1e-12) throw Error("curve must start at 0");
  for (const Point& z : p) {
    if (z.imag() < -1e-12) throw Error("curve leaves the closed upper half-plane");
  }
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    for (std::size_t j = i + 2; j + 1 < p.size(); ++j) {
      if (segments_cross(p[i], p[i + 1], p[j], p[j + 1])) {
        throw Error("curve has a transversal self-crossing");
      }
    }
  }
}

// Composition of elementary vertical-slit maps; the running zipper. Map k has
// base point W_k and slit parameter c_k, contributing c_k^2/4 of capacity.
class SlitChain {
 public:
  std::size_t size() const { return W_.size(); }
  double capacity() const { return t_.empty() ? 0.0 : t_.back(); }
  double capacity_at(std::size_t k) const { return k == 0 ? 0.0 : t_[k - 1]; }
  double last_W() const { return W_.empty() ? 0.0 : W_.back(); }
  const std::vector<double>& drivers() const { return W_; }

  void append(double W, double c) {
    W_.push_back(W);
    c_.push_back(c);
    t_.push_back(capacity_at(W_.size() - 1) + 0.25 * c * c);
  }

  // g_t applied to a point of H (chronological composition)
  Point apply(Point z) const { return apply_prefix(z, W_.size()); }

  // composition of the first k maps only
  Point apply_prefix(Point z, std::size_t k) const {
    for (std::size_t j = 0; j < k && j < W_.size(); ++j) {
      z = W_[j] + forward_slit(z - W_[j], c_[j]);
    }
    return z;
  }

  // image of z under f_t = g_t - W_t
  Point map_f(Point z) const { return apply(z) - last_W(); }
  Point map_f_prefix(Point z, std::size_t k) const {
    return apply_prefix(z, k) - (k == 0 ? 0.0 : W_[std::min(k, W_.size()) - 1]);
  }

  // preimage of the current tip, i.e. the curve point gamma(t_k)
  Point tip() const { return tip_at(W_.size()); }

  // curve point after the first k maps
  Point tip_at(std::size_t k) const {
    if (k == 0 || W_.empty()) return Point(0.0, 0.0);
    k = std::min(k, W_.size());
    Point z(W_[k - 1], c_[k - 1]);
    for (std::size_t j = k - 1; j-- > 0;) {
      z = W_[j] + inverse_slit(z - W_[j], c_[j]);
    }
    return z;
  }

  // Unzip the next curve point: appends one elementary map unless the point
  // lies on the boundary of the current hull (zero capacity increment).
  // Returns true when a map was appended.
  bool unzip(Point p) {
    const Point q = apply(p);
    if (q.imag() < -1e-9) throw MapError("unzip: point maps below the real axis");
    const double height = std::max(0.0, q.imag());
    if (height * height < 1e-24) return false;
    append(q.real(), height);
    return true;
  }

  DrivingFunction driving() const {
    DrivingFunction d;
    d.times.reserve(size() + 1);
    d.values.reserve(size() + 1);
    d.times.push_back(0.0);
    d.values.push_back(0.0);
    for (std::size_t k = 0; k < size(); ++k) {
      d.times.push_back(t_[k]);
      d.values.push_back(W_[k]);
    }
    return d;
  }

 private:
  std::vector<double> W_, c_, t_;
};

/// Driving-function extraction by the vertical-slit zipper.
inline DrivingFunction extract_driving(const CurveInH& curve) {
  if (curve.points.size() < 2) throw Error("extract_driving: need at least two points");
  SlitChain chain;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    if (curve.points[i] == curve.points[i - 1]) throw DegenerateSegment();
    chain.unzip(curve.points[i]);
  }
  DrivingFunction d = chain.driving();
  d.validate();
  return d;
}

/// Curve generation from driving samples by composing inverse slit maps.
inline CurveInH trace_curve(const DrivingFunction& driving) {
  driving.validate();
  CurveInH curve;
  curve.points.push_back(Point(0.0, 0.0));
  SlitChain chain;
  for (std::size_t k = 1; k < driving.times.size(); ++k) {
    const double dt = driving.times[k] - driving.times[k - 1];
    chain.append(driving.values[k], 2.0 * std::sqrt(dt));
    curve.points.push_back(chain.tip());
  }
  return curve;
}

struct EvolveResult {
  Point value;
  bool swallowed = false;
  double swallow_time = 0.0;
};

/// Forward Loewner flow of a bulk point under sampled driving, by per-substep
/// exact constant-driver slit steps with adaptive splitting.
inline EvolveResult loewner_evolve(const DrivingFunction& driving, Point z, double t_end) {
  driving.validate();
  if (z.imag() <= 0.0) throw Error("loewner_evolve: z must lie in the open half-plane");
  if (t_end > driving.total_time() + 1e-15) throw Error("t_end beyond the driving samples");
  const double dt_scale = driving.dt_hint > 0.0 ? driving.dt_hint : 1e-6;
  Point g = z;
  double t = 0.0;
  for (std::size_t k = 1; k < driving.times.size() && t < t_end; ++k) {
    const double t0 = driving.times[k - 1];
    const double t1 = std::min(driving.times[k], t_end);
    if (t1 <= t0) continue;
    const double w0 = driving.values[k - 1];
    const double slope = (driving.values[k] - w0) / (driving.times[k] - t0);
    double s = t0;
    while (s < t1 - 1e-18) {
      const double eps = 1e-6 * std::sqrt(std::max(s, dt_scale));
      const double dist = std::abs(g - Point(w0 + slope * (s - t0), 0.0));
      if (dist < eps) return {g, true, s};
      double h = t1 - s;
      if (slope != 0.0) h = std::min(h, 0.2 * dist / std::abs(slope));
      h = std::min(h, std::max(0.25 * dist * dist, 1e-14));
      if (h < 1e-16 * std::max(1.0, t_end)) throw IntegrationFailure();
      const double wm = w0 + slope * (s + 0.5 * h - t0);
      g = wm + forward_slit(g - wm, 2.0 * std::sqrt(h));
      s += h;
    }
    t = t1;
  }
  return {g, false, 0.0};
}

/// Image of a lattice dual path in H under the domain's analytic uniformizing
/// map, normalized to start at 0.
inline CurveInH curve_to_H(const LatticeDomain& dom, const DualPath& path) {
  const ConformalMap cm = map_to_H(dom.shape);
  CurveInH curve;
  if (path.points.empty()) {
    curve.points.push_back(Point(0.0, 0.0));
    return curve;
  }
  std::vector<Point> mapped;
  mapped.reserve(path.points.size());
  for (const Point& p : path.points) {
    Point q = cm.to_H(cm.clamp(p));
    if (q.imag() < -1e-9) throw MapError("dual point maps outside the closed half-plane");
    q = Point(q.real(), std::max(0.0, q.imag()));
    mapped.push_back(q);
  }
  const double shift = mapped.front().real();
  curve.points.push_back(Point(0.0, 0.0));
  for (std::size_t i = 1; i < mapped.size(); ++i) {
    curve.points.push_back(mapped[i] - shift);
  }
  return curve;
}

struct MsleOptions {
  double dt = 1e-3;
  double t_end = 0.1;
  int drift_refresh_every = 10;  // noise steps per drift evaluation
  std::uint64_t seed = 1;
  std::uint64_t stream = 0;
};

struct MsleResult {
  DrivingFunction driving;
  CurveInH curve;
  std::vector<double> drift_times;
  std::vector<double> drift_values;          // F_t at evaluation times
  double novikov_accumulated = 0.0;          // int |F_t / (2 pi)|^2 dt
};

/// Euler-Maruyama simulation of dW = 2 dB - F_t dt with the drift functional
/// supplied by a callback (evaluated every drift_refresh_every steps and held
/// constant in between). The hull is grown by one vertical slit per step; the
/// observer, when set, sees the chain after every step.
inline MsleResult simulate_msle4(
    const std::function<double(const SlitChain&, double)>& drift_fn, const MsleOptions& opt,
    const std::function<void(const SlitChain&, double, double)>& observer = nullptr) {
  if (opt.dt > 1e-3) throw ConfigError("dt must be at most 1e-3");
  if (opt.dt <= 0.0 || opt.t_end <= 0.0) throw ConfigError("dt and t_end must be positive");
  Rng rng(opt.seed, opt.stream);
  const int nsteps = static_cast<int>(std::llround(opt.t_end / opt.dt));
  const double root_dt = std::sqrt(opt.dt);
  SlitChain chain;
  MsleResult out;
  out.driving.dt_hint = opt.dt;
  out.driving.times.push_back(0.0);
  out.driving.values.push_back(0.0);
  double W = 0.0;
  double F = 0.0;
  for (int k = 0; k < nsteps; ++k) {
    const double t = k * opt.dt;
    if (k % opt.drift_refresh_every == 0) {
      F = drift_fn(chain, t);
      if (!std::isfinite(F)) throw QuadratureError("drift evaluation returned a non-finite value");
      out.drift_times.push_back(t);
      out.drift_values.push_back(F);
    }
    const double twopi = 6.283185307179586476925286766559;
    out.novikov_accumulated += (F / twopi) * (F / twopi) * opt.dt;
    W += 2.0 * root_dt * rng.normal() - F * opt.dt;
    chain.append(W, 2.0 * root_dt);
    out.driving.times.push_back((k + 1) * opt.dt);
    out.driving.values.push_back(W);
    if (observer) observer(chain, (k + 1) * opt.dt, W);
  }
  out.curve = trace_curve(out.driving);
  return out;
}

}  // namespace mhe
