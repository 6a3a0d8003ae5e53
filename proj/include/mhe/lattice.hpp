#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <queue>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhe/common.hpp"

namespace mhe {

// Triangular lattice with edge length delta. Vertex (i, j) sits at
// delta * (i + j/2, j * sqrt(3)/2); the six neighbor offsets below are the
// standard axial ones.
inline constexpr std::array<std::pair<int, int>, 6> kTriNeighborOffsets = {
    {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, -1}, {-1, 1}}};

inline Point tri_vertex_position(int i, int j, double delta) {
  return Point(delta * (i + 0.5 * j), delta * (0.8660254037844386467637231707 * j));
}

// Faces of the hexagonal lattice dual to the triangular one have area
// A_delta = c * delta^2 with c below; the half opening angle is pi/6.
inline constexpr double kHexAreaConstant = 1.9485571585149868;  // 9*sqrt(3)/8
inline constexpr double kHalfAngleTan = 0.57735026918962576451;  // tan(pi/6)

// Discrete mass from the continuum mass field: m_d^2 = c m^2 / (6 tan(pi/6)),
// which evaluates to (9/16) m^2.
inline constexpr double kMassDiscretization = kHexAreaConstant / (6.0 * kHalfAngleTan);

// The killed-walk discretization above approximates the continuum operator
// -Laplace + (9/4) m^2, not -Laplace + m^2: the per-step killing rate
// m_d^2 delta^2 together with the triangular-lattice mean value property gives
// an effective continuum mass of 4 * m_d^2. Cross-resolution comparisons have
// to multiply lattice-side masses by this factor on the continuum side.
inline constexpr double kLatticeMassCalibration = 4.0 * kMassDiscretization;

struct BoundaryEdge {
  int u = -1;  // boundary vertex ids
  int w = -1;
  bool operator==(const BoundaryEdge& o) const {
    return (u == o.u && w == o.w) || (u == o.w && w == o.u);
  }
};

// Shape metadata kept so the analytic conformal map of the continuum domain
// can be reconstructed from the lattice approximation alone.
struct ShapeInfo {
  enum class Kind { Disk, Rect } kind = Kind::Disk;
  double radius = 1.0;
  double width = 2.0, height = 1.0;
  double a_angle = 0.0, b_angle = 0.0;
};

// Immutable lattice approximation of a bounded convex domain with two marked
// boundary points and a signed two-arc boundary partition.
struct LatticeDomain {
  double delta = 0.0;
  std::vector<Point> pos;                  // per stored vertex
  std::vector<std::pair<int, int>> axial;  // lattice coordinates per vertex
  std::vector<std::array<int, 6>> nbr;     // -1 where the neighbor is not stored
  std::vector<std::uint8_t> interior;      // 1 for Int, 0 for boundary
  std::vector<std::int8_t> sign;           // +1/-1 on boundary, 0 on interior
  std::vector<double> mass_d2;             // m_d^2(v), zero outside the continuum domain
  std::vector<int> interior_ids;
  std::vector<int> boundary_ids;

  BoundaryEdge a_edge, b_edge;
  Point a_mark, b_mark;  // midpoints of the sign-change edges
  Point a_point, b_point;  // the continuum marked points
  Point center{0.0, 0.0};
  double diameter = 0.0;
  ShapeInfo shape;

  int vertex_count() const { return static_cast<int>(pos.size()); }
  int interior_count() const { return static_cast<int>(interior_ids.size()); }
  int boundary_count() const { return static_cast<int>(boundary_ids.size()); }

  double killing_weight(int v) const { return mass_d2[v] * delta * delta; }

  // the two lattice vertices completing the triangles on either side of {u,w}
  std::array<int, 2> edge_apexes(int u, int w) const {
    std::array<int, 2> out = {-1, -1};
    int found = 0;
    for (int x : nbr[u]) {
      if (x < 0) continue;
      for (int y : nbr[w]) {
        if (y == x) {
          if (found < 2) out[found] = x;
          ++found;
        }
      }
    }
    return out;
  }
};

struct MassSpec {
  enum class Kind { Constant, Radial } kind = Kind::Constant;
  double value = 0.0;  // constant: m^2; radial: peak m^2 at center, decaying with |z|/scale
  double scale = 1.0;

  double operator()(Point z) const {
    if (kind == Kind::Constant) return value;
    const double r = std::abs(z) / scale;
    return value / (1.0 + r * r);
  }
};

// true if angle phi lies on the clockwise arc from alpha to beta; the arc
// endpoints themselves count as plus-side
inline bool on_clockwise_arc(double phi, double alpha, double beta) {
  const double two_pi = 6.283185307179586476925286766559;
  auto wrap = [&](double x) {
    x = std::fmod(x, two_pi);
    return x < 0 ? x + two_pi : x;
  };
  return wrap(alpha - phi) <= wrap(alpha - beta);
}

namespace detail {

struct PairHash {
  std::size_t operator()(const std::pair<int, int>& p) const {
    return std::hash<long long>()((static_cast<long long>(p.first) << 32) ^
                                  static_cast<unsigned>(p.second));
  }
};

inline LatticeDomain build_domain(const std::function<bool(Point)>& inside,
                                  const std::function<double(Point)>& boundary_radius,
                                  Point center, double extent, double delta, double a_angle,
                                  double b_angle,
                                  const std::function<double(Point)>& mass_fn) {
  if (delta <= 0.0) throw ConfigError("delta must be positive");
  if (a_angle == b_angle) throw ConfigError("marked angles must differ");

  LatticeDomain dom;
  dom.delta = delta;
  dom.center = center;

  // enumerate candidate lattice vertices over the bounding box
  const int range = static_cast<int>(std::ceil((std::abs(center) + extent) / delta)) + 2;
  std::unordered_map<std::pair<int, int>, int, PairHash> id_of;
  std::vector<std::pair<int, int>> inside_vertices;
  for (int j = -range; j <= range; ++j) {
    for (int i = -range; i <= range; ++i) {
      if (inside(tri_vertex_position(i, j, delta))) inside_vertices.emplace_back(i, j);
    }
  }
  if (inside_vertices.empty()) throw DomainTooCoarse();

  // largest connected component of the inside vertices
  std::unordered_map<std::pair<int, int>, int, PairHash> comp;
  comp.reserve(inside_vertices.size() * 2);
  for (const auto& v : inside_vertices) comp[v] = -1;
  int best_comp = -1, best_size = 0, ncomp = 0;
  for (const auto& v0 : inside_vertices) {
    if (comp[v0] >= 0) continue;
    int size = 0;
    std::queue<std::pair<int, int>> q;
    q.push(v0);
    comp[v0] = ncomp;
    while (!q.empty()) {
      auto v = q.front();
      q.pop();
      ++size;
      for (auto [di, dj] : kTriNeighborOffsets) {
        std::pair<int, int> w{v.first + di, v.second + dj};
        auto it = comp.find(w);
        if (it != comp.end() && it->second < 0) {
          it->second = ncomp;
          q.push(w);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_comp = ncomp;
    }
    ++ncomp;
  }

  // store interior vertices, then the boundary ring around them
  for (const auto& v : inside_vertices) {
    if (comp[v] != best_comp) continue;
    const int id = dom.vertex_count();
    id_of[v] = id;
    dom.pos.push_back(tri_vertex_position(v.first, v.second, delta));
    dom.axial.push_back(v);
    dom.interior.push_back(1);
  }
  const int n_int = dom.vertex_count();
  if (n_int == 0) throw DomainTooCoarse();
  for (int id = 0; id < n_int; ++id) {
    const auto [i, j] = dom.axial[id];
    for (auto [di, dj] : kTriNeighborOffsets) {
      std::pair<int, int> w{i + di, j + dj};
      if (id_of.find(w) == id_of.end()) {
        const int bid = dom.vertex_count();
        id_of[w] = bid;
        dom.pos.push_back(tri_vertex_position(w.first, w.second, delta));
        dom.axial.push_back(w);
        dom.interior.push_back(0);
      }
    }
  }

  const int n = dom.vertex_count();
  dom.nbr.assign(n, {-1, -1, -1, -1, -1, -1});
  for (int id = 0; id < n; ++id) {
    const auto [i, j] = dom.axial[id];
    for (int k = 0; k < 6; ++k) {
      auto [di, dj] = kTriNeighborOffsets[k];
      auto it = id_of.find({i + di, j + dj});
      if (it != id_of.end()) dom.nbr[id][k] = it->second;
    }
  }

  dom.sign.assign(n, 0);
  dom.mass_d2.assign(n, 0.0);
  double max_md2 = 0.0;
  for (int id = 0; id < n; ++id) {
    if (dom.interior[id]) {
      dom.interior_ids.push_back(id);
      // mass vanishes for vertices outside the continuum domain
      if (inside(dom.pos[id])) {
        dom.mass_d2[id] = kMassDiscretization * mass_fn(dom.pos[id]);
        max_md2 = std::max(max_md2, dom.mass_d2[id]);
      }
    } else {
      dom.boundary_ids.push_back(id);
    }
  }
  if (max_md2 > 0.0 && delta >= 1.0 / std::sqrt(max_md2)) throw MassTooLargeForMesh();

  // two-arc boundary partition by angle around the center
  for (int id : dom.boundary_ids) {
    const Point d = dom.pos[id] - center;
    const double phi = std::atan2(d.imag(), d.real());
    dom.sign[id] = on_clockwise_arc(phi, a_angle, b_angle) ? 1 : -1;
  }

  dom.a_point = center + boundary_radius(Point(std::cos(a_angle), std::sin(a_angle))) *
                             Point(std::cos(a_angle), std::sin(a_angle));
  dom.b_point = center + boundary_radius(Point(std::cos(b_angle), std::sin(b_angle))) *
                             Point(std::cos(b_angle), std::sin(b_angle));

  // sign-change edges exposed to the domain: both endpoints on the boundary,
  // opposite signs, and at least one adjacent triangle apex stored
  double best_a = std::numeric_limits<double>::max();
  double best_b = std::numeric_limits<double>::max();
  for (int u : dom.boundary_ids) {
    for (int w : dom.nbr[u]) {
      if (w < 0 || w <= u || dom.interior[w]) continue;
      if (dom.sign[u] == dom.sign[w]) continue;
      const auto apex = dom.edge_apexes(u, w);
      const bool exposed = (apex[0] >= 0 && dom.interior[apex[0]]) ||
                           (apex[1] >= 0 && dom.interior[apex[1]]);
      if (!exposed && apex[0] < 0 && apex[1] < 0) continue;
      const Point mid = 0.5 * (dom.pos[u] + dom.pos[w]);
      const double da = std::abs(mid - dom.a_point);
      const double db = std::abs(mid - dom.b_point);
      if (da < best_a) {
        best_a = da;
        dom.a_edge = {u, w};
        dom.a_mark = mid;
      }
      if (db < best_b) {
        best_b = db;
        dom.b_edge = {u, w};
        dom.b_mark = mid;
      }
    }
  }
  if (dom.a_edge.u < 0 || dom.b_edge.u < 0) throw BadMarkedPoint();

  double diam = 0.0;
  for (int id : dom.boundary_ids) diam = std::max(diam, 2.0 * std::abs(dom.pos[id] - center));
  dom.diameter = diam;
  return dom;
}

}  // namespace detail

/// Largest connected lattice subgraph inside the disk B(0, radius), with
/// marked boundary points at the given angles and mass field mass_fn = m^2.
inline LatticeDomain build_disk_domain(double radius, double delta, double a_angle,
                                       double b_angle,
                                       const std::function<double(Point)>& mass_fn) {
  if (radius <= 0.0) throw ConfigError("radius must be positive");
  auto inside = [radius](Point z) { return std::abs(z) < radius; };
  auto brad = [radius](Point) { return radius; };
  auto dom = detail::build_domain(inside, brad, Point(0, 0), radius, delta, a_angle, b_angle,
                                  mass_fn);
  if (dom.interior_count() < 1) throw DomainTooCoarse();
  dom.shape.kind = ShapeInfo::Kind::Disk;
  dom.shape.radius = radius;
  dom.shape.a_angle = a_angle;
  dom.shape.b_angle = b_angle;
  return dom;
}

/// Axis-aligned rectangle (-width/2, width/2) x (-height/2, height/2); marked
/// points where the rays at the given angles meet the rectangle boundary.
inline LatticeDomain build_rect_domain(double width, double height, double delta,
                                       double a_angle, double b_angle,
                                       const std::function<double(Point)>& mass_fn) {
  if (width <= 0.0 || height <= 0.0) throw ConfigError("rectangle sides must be positive");
  auto inside = [width, height](Point z) {
    return std::abs(z.real()) < 0.5 * width && std::abs(z.imag()) < 0.5 * height;
  };
  auto brad = [width, height](Point dir) {
    // distance from the center to the boundary along dir
    double t = std::numeric_limits<double>::max();
    if (dir.real() != 0.0) t = std::min(t, 0.5 * width / std::abs(dir.real()));
    if (dir.imag() != 0.0) t = std::min(t, 0.5 * height / std::abs(dir.imag()));
    return t;
  };
  auto dom = detail::build_domain(inside, brad, Point(0, 0), 0.5 * std::hypot(width, height),
                                  delta, a_angle, b_angle, mass_fn);
  if (dom.interior_count() < 1) throw DomainTooCoarse();
  dom.shape.kind = ShapeInfo::Kind::Rect;
  dom.shape.width = width;
  dom.shape.height = height;
  dom.shape.a_angle = a_angle;
  dom.shape.b_angle = b_angle;
  return dom;
}

struct DomainSpec {
  enum class Shape { Disk, Rect } shape = Shape::Disk;
  double radius = 1.0;
  double width = 2.0, height = 1.0;
  double delta = 1.0 / 16.0;
  double a_angle = 3.141592653589793;
  double b_angle = 0.0;
  MassSpec mass;

  LatticeDomain build() const {
    auto fn = [m = mass](Point z) { return m(z); };
    if (shape == Shape::Disk) return build_disk_domain(radius, delta, a_angle, b_angle, fn);
    return build_rect_domain(width, height, delta, a_angle, b_angle, fn);
  }
};

inline DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  DomainSpec spec;
  const std::string shape = j.value("shape", "disk");
  if (shape == "disk") {
    spec.shape = DomainSpec::Shape::Disk;
    spec.radius = j.value("radius", 1.0);
  } else if (shape == "rect") {
    spec.shape = DomainSpec::Shape::Rect;
    spec.width = j.value("width", 2.0);
    spec.height = j.value("height", 1.0);
  } else {
    throw ConfigError("unknown shape: " + shape);
  }
  spec.delta = j.value("delta", spec.delta);
  spec.a_angle = j.value("a_angle", spec.a_angle);
  spec.b_angle = j.value("b_angle", spec.b_angle);
  if (j.contains("mass")) {
    const auto& m = j.at("mass");
    const std::string kind = m.value("kind", "constant");
    if (kind == "constant") {
      spec.mass.kind = MassSpec::Kind::Constant;
    } else if (kind == "radial") {
      spec.mass.kind = MassSpec::Kind::Radial;
      spec.mass.scale = m.value("scale", 1.0);
    } else {
      throw ConfigError("unknown mass kind: " + kind);
    }
    spec.mass.value = m.value("value", 0.0);
    if (spec.mass.value < 0.0) throw ConfigError("mass must be nonnegative");
  }
  return spec;
}

// Path on the hexagonal dual: edge midpoints alternating with face centers.
struct DualPath {
  std::vector<Point> points;
  int steps = 0;
};

}  // namespace mhe
