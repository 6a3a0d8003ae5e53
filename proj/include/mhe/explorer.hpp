#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhe/common.hpp"
#include "mhe/conformal.hpp"
#include "mhe/lattice.hpp"
#include "mhe/loewner.hpp"
#include "mhe/mharmonic.hpp"
#include "mhe/stats.hpp"

namespace mhe {

inline constexpr long kStepBudget = 10'000'000;

// Evolving exploration. The tip always sits on the midpoint of an edge whose
// endpoints carry opposite signs; each step either absorbs the pivot vertex
// into the signed boundary or slides along it when the pivot is already
// signed.
class ExplorerState {
 public:
  ExplorerState(const LatticeDomain& dom, std::uint64_t seed, std::uint64_t stream = 0,
                bool track_capacity = false)
      : dom_(&dom), seed_(seed), stream_(stream), rng_(seed, stream),
        track_capacity_(track_capacity) {
    interior_ = dom.interior;
    sign_ = dom.sign;
    const auto [u, w] = dom.a_edge;
    if (sign_[u] * sign_[w] >= 0) throw BadMarkedPoint();
    tip_ = dom.a_edge;
    path_.points.push_back(dom.a_mark);
    path_assoc_.push_back({u, w, -1});
    if (dom.a_edge == dom.b_edge) {
      immediate_termination_ = true;
      terminated_ = true;
    }
    if (track_capacity_) {
      cmap_ = map_to_H(dom.shape);
      const Point q0 = cmap_.to_H(cmap_.clamp(dom.a_mark));
      shift_ = q0.real();
      hcap_per_step_.push_back(0.0);
    }
  }

  const LatticeDomain& domain() const { return *dom_; }
  const DualPath& path() const { return path_; }
  const std::vector<std::array<int, 3>>& path_assoc() const { return path_assoc_; }
  int step_count() const { return step_; }
  bool terminated() const { return terminated_; }
  bool immediate_termination() const { return immediate_termination_; }
  double capacity() const { return zipper_.capacity(); }
  const std::vector<double>& capacity_per_step() const { return hcap_per_step_; }
  const SlitChain& zipper() const { return zipper_; }
  double last_driving_value() const { return zipper_.last_W(); }
  const std::vector<int>& absorbed_order() const { return absorbed_order_; }

  DomainState domain_state() const {
    DomainState s;
    s.dom = dom_;
    s.interior = interior_;
    s.sign = sign_;
    return s;
  }

  int plus_count() const {
    int n = 0;
    for (int v = 0; v < dom_->vertex_count(); ++v) n += (!interior_[v] && sign_[v] > 0);
    return n;
  }
  int minus_count() const {
    int n = 0;
    for (int v = 0; v < dom_->vertex_count(); ++v) n += (!interior_[v] && sign_[v] < 0);
    return n;
  }

  // The vertex the next step pivots on: apex of the triangle entered through
  // the tip edge.
  int next_pivot() const {
    if (terminated_) throw AlreadyTerminated();
    const auto apex = dom_->edge_apexes(tip_.u, tip_.w);
    int v = -1;
    if (prev_apex_ < 0) {
      // first step: enter the triangle on the domain side
      for (int cand : apex) {
        if (cand >= 0 && interior_[cand]) v = cand;
      }
      if (v < 0) {
        for (int cand : apex) {
          if (cand >= 0) v = cand;
        }
      }
    } else {
      for (int cand : apex) {
        if (cand >= 0 && cand != prev_apex_) v = cand;
      }
    }
    if (v < 0) throw Error("exploration left the lattice domain");
    return v;
  }

  // h_n(pivot) + 1/2 for the current state
  double turn_probability() {
    const int v = next_pivot();
    if (!interior_[v]) return sign_[v] > 0 ? 1.0 : 0.0;
    const ScalarField h = solver().solve();
    return std::clamp(h.values[v] + 0.5, 0.0, 1.0);
  }

  void step() {
    if (terminated_) throw AlreadyTerminated();
    const int v = next_pivot();
    const double p = turn_probability();
    const bool to_plus = rng_.uniform() < p;

    // exit through the tip endpoint whose sign is opposite to the pivot's new one
    const int keep = to_plus ? (sign_[tip_.u] < 0 ? tip_.u : tip_.w)
                             : (sign_[tip_.u] > 0 ? tip_.u : tip_.w);
    if (interior_[v]) {
      interior_[v] = 0;
      sign_[v] = to_plus ? 1 : -1;
      absorbed_order_.push_back(v);
      if (solver_) solver_->absorb(v, to_plus ? 0.5 : -0.5);
    }

    const Point center = (dom_->pos[tip_.u] + dom_->pos[tip_.w] + dom_->pos[v]) / 3.0;
    const Point mid = 0.5 * (dom_->pos[v] + dom_->pos[keep]);
    path_.points.push_back(center);
    path_assoc_.push_back({tip_.u, tip_.w, v});
    path_.points.push_back(mid);
    path_assoc_.push_back({v, keep, -1});
    path_.steps = ++step_;

    if (track_capacity_) {
      push_capacity(center);
      push_capacity(mid);
      hcap_per_step_.push_back(zipper_.capacity());
    }

    // the triangle just traversed is, seen from the new tip edge, the one
    // whose apex is the dropped endpoint; the next step enters the other side
    prev_apex_ = (keep == tip_.u) ? tip_.w : tip_.u;
    tip_ = {v, keep};
    if (tip_ == dom_->b_edge) terminated_ = true;
  }

  // Exact one-step martingale residual at a probe vertex:
  //   p h^+(probe) + (1-p) h^-(probe) - h(probe).
  double martingale_audit_onestep(int probe) {
    if (terminated_) throw AlreadyTerminated();
    const int v = next_pivot();
    if (!interior_[v]) return 0.0;
    IncrementalDirichletSolver& s = solver();
    const ScalarField h = s.solve();
    const double p = std::clamp(h.values[v] + 0.5, 0.0, 1.0);
    s.push_audit(v, 0.5);
    const double hp = s.solve().values[probe];
    s.pop_audit();
    s.push_audit(v, -0.5);
    const double hm = s.solve().values[probe];
    s.pop_audit();
    return p * hp + (1.0 - p) * hm - h.values[probe];
  }

  double observable_at(int vertex) {
    if (!interior_[vertex]) return sign_[vertex] > 0 ? 0.5 : -0.5;
    return solver().solve().values[vertex];
  }
  bool is_interior(int vertex) const { return interior_[vertex] != 0; }

  nlohmann::json serialize() const {
    nlohmann::json j;
    j["seed"] = seed_;
    j["stream"] = stream_;
    j["step"] = step_;
    j["terminated"] = terminated_;
    j["immediate_termination"] = immediate_termination_;
    j["track_capacity"] = track_capacity_;
    j["tip"] = {tip_.u, tip_.w};
    j["prev_apex"] = prev_apex_;
    j["absorbed"] = absorbed_order_;
    std::vector<int> absorbed_signs;
    for (int v : absorbed_order_) absorbed_signs.push_back(sign_[v]);
    j["absorbed_signs"] = absorbed_signs;
    std::vector<double> px, py;
    for (const Point& p : path_.points) {
      px.push_back(p.real());
      py.push_back(p.imag());
    }
    j["path_x"] = px;
    j["path_y"] = py;
    std::vector<std::array<int, 3>> assoc = path_assoc_;
    j["path_assoc"] = assoc;
    const Rng::State rs = rng_.state();
    j["rng"] = {{"key", rs.key}, {"ctr", rs.ctr}, {"pos", rs.pos},
                {"have_spare", rs.have_spare}, {"spare", rs.spare}};
    return j;
  }

  // Reconstructs a mid-run state. The solver history is replayed absorb by
  // absorb, so a continued run is bit-identical to an uninterrupted one.
  static ExplorerState deserialize(const LatticeDomain& dom, const nlohmann::json& j) {
    ExplorerState s(dom, j.at("seed").get<std::uint64_t>(), j.at("stream").get<std::uint64_t>(),
                    j.at("track_capacity").get<bool>());
    const auto absorbed = j.at("absorbed").get<std::vector<int>>();
    const auto signs = j.at("absorbed_signs").get<std::vector<int>>();
    if (!absorbed.empty()) s.solver();  // force creation before replay
    for (std::size_t i = 0; i < absorbed.size(); ++i) {
      s.interior_[absorbed[i]] = 0;
      s.sign_[absorbed[i]] = static_cast<std::int8_t>(signs[i]);
      s.solver_->absorb(absorbed[i], signs[i] > 0 ? 0.5 : -0.5);
    }
    s.absorbed_order_ = absorbed;
    s.step_ = j.at("step").get<int>();
    s.terminated_ = j.at("terminated").get<bool>();
    s.immediate_termination_ = j.at("immediate_termination").get<bool>();
    const auto tip = j.at("tip").get<std::vector<int>>();
    s.tip_ = {tip[0], tip[1]};
    s.prev_apex_ = j.at("prev_apex").get<int>();
    const auto px = j.at("path_x").get<std::vector<double>>();
    const auto py = j.at("path_y").get<std::vector<double>>();
    s.path_.points.clear();
    for (std::size_t i = 0; i < px.size(); ++i) s.path_.points.emplace_back(px[i], py[i]);
    s.path_.steps = s.step_;
    s.path_assoc_ = j.at("path_assoc").get<std::vector<std::array<int, 3>>>();
    if (s.track_capacity_) {
      s.hcap_per_step_.clear();
      s.hcap_per_step_.push_back(0.0);
      for (std::size_t i = 1; i < s.path_.points.size(); ++i) {
        s.push_capacity(s.path_.points[i]);
        if (i % 2 == 0) s.hcap_per_step_.push_back(s.zipper_.capacity());
      }
    }
    const auto& rj = j.at("rng");
    Rng::State rs;
    rs.key = rj.at("key").get<std::array<std::uint32_t, 2>>();
    rs.ctr = rj.at("ctr").get<std::array<std::uint32_t, 4>>();
    rs.pos = rj.at("pos").get<std::uint32_t>();
    rs.have_spare = rj.at("have_spare").get<bool>();
    rs.spare = rj.at("spare").get<double>();
    s.rng_.restore(rs);
    return s;
  }

 private:
  IncrementalDirichletSolver& solver() {
    if (!solver_) {
      DomainState ds = domain_state();
      solver_ = std::make_unique<IncrementalDirichletSolver>(
          ds, sign_boundary_values(ds, 0.5, -0.5));
    }
    return *solver_;
  }

  void push_capacity(Point p) {
    Point q = cmap_.to_H(cmap_.clamp(p)) - shift_;
    if (q.imag() < -1e-9) throw MapError("dual point maps outside the closed half-plane");
    q = Point(q.real(), std::max(0.0, q.imag()));
    zipper_.unzip(q);
  }

  const LatticeDomain* dom_;
  std::uint64_t seed_, stream_;
  Rng rng_;
  bool track_capacity_;
  std::vector<std::uint8_t> interior_;
  std::vector<std::int8_t> sign_;
  DualPath path_;
  std::vector<std::array<int, 3>> path_assoc_;
  BoundaryEdge tip_;
  int prev_apex_ = -1;
  int step_ = 0;
  bool terminated_ = false;
  bool immediate_termination_ = false;
  std::vector<int> absorbed_order_;
  std::unique_ptr<IncrementalDirichletSolver> solver_;
  ConformalMap cmap_;
  SlitChain zipper_;
  std::vector<double> hcap_per_step_;
  double shift_ = 0.0;
};

inline ExplorerState initial_state(const LatticeDomain& dom, std::uint64_t seed = 0,
                                   std::uint64_t stream = 0, bool track_capacity = false) {
  return ExplorerState(dom, seed, stream, track_capacity);
}

/// Complete explorer path from the a-edge to the b-edge; deterministic given
/// the seed and stream.
inline DualPath sample_path(const LatticeDomain& dom, std::uint64_t seed,
                            std::uint64_t stream = 0) {
  ExplorerState s(dom, seed, stream);
  long budget = kStepBudget;
  while (!s.terminated()) {
    if (--budget < 0) throw NonTermination();
    s.step();
  }
  return s.path();
}

// --- capacity-stopped ensembles --------------------------------------------

struct CheckpointSample {
  std::vector<double> h_values;   // observable at the probe, per checkpoint
  std::vector<double> w_values;   // driving value, per checkpoint
  std::vector<std::uint8_t> probe_absorbed;
  std::vector<std::uint8_t> reached;
  double final_capacity = 0.0;
};

/// Runs one capacity-tracked exploration, recording the observable at `probe`
/// and the extracted driving value the first time each capacity checkpoint is
/// passed. Paths that terminate early keep their final values.
inline CheckpointSample run_to_capacity(const LatticeDomain& dom, int probe,
                                        const std::vector<double>& capacity_times,
                                        std::uint64_t seed, std::uint64_t stream) {
  ExplorerState s(dom, seed, stream, /*track_capacity=*/true);
  CheckpointSample out;
  const std::size_t nt = capacity_times.size();
  out.h_values.assign(nt, 0.0);
  out.w_values.assign(nt, 0.0);
  out.probe_absorbed.assign(nt, 0);
  out.reached.assign(nt, 0);
  std::size_t next_cp = 0;
  while (next_cp < nt && capacity_times[next_cp] <= 0.0) {
    out.h_values[next_cp] = s.observable_at(probe);
    out.w_values[next_cp] = 0.0;
    out.reached[next_cp] = 1;
    ++next_cp;
  }
  long budget = kStepBudget;
  while (!s.terminated() && next_cp < nt) {
    if (--budget < 0) throw NonTermination();
    s.step();
    while (next_cp < nt && s.capacity() >= capacity_times[next_cp]) {
      out.h_values[next_cp] = s.observable_at(probe);
      out.w_values[next_cp] = s.last_driving_value();
      out.probe_absorbed[next_cp] = !s.is_interior(probe);
      out.reached[next_cp] = 1;
      ++next_cp;
    }
  }
  // path ended before later checkpoints: the observable is frozen
  for (; next_cp < nt; ++next_cp) {
    out.h_values[next_cp] = s.observable_at(probe);
    out.w_values[next_cp] = s.last_driving_value();
    out.probe_absorbed[next_cp] = !s.is_interior(probe);
    out.reached[next_cp] = 0;
  }
  out.final_capacity = s.capacity();
  return out;
}

struct MartingaleMcReport {
  std::vector<double> times;
  double h0 = 0.0;  // deterministic value at the probe before exploration
  std::vector<RunningStat> h_stats;
  std::vector<RunningStat> w_stats;
  std::vector<double> swallowed_fraction;
  std::vector<std::string> warnings;
};

/// Monte Carlo audit of the martingale property of the observable: for each
/// capacity time the ensemble mean of h at the probe is compared against the
/// deterministic value at time zero.
inline MartingaleMcReport martingale_audit_mc(const LatticeDomain& dom, Point probe_point,
                                              std::vector<double> capacity_times, int N,
                                              std::uint64_t seed, int threads) {
  for (std::size_t i = 1; i < capacity_times.size(); ++i) {
    if (capacity_times[i] <= capacity_times[i - 1]) {
      throw ConfigError("capacity times must increase");
    }
  }
  const int probe = nearest_interior_vertex(dom, probe_point);
  if (probe < 0) throw ConfigError("probe point has no interior vertex");
  MartingaleMcReport rep;
  rep.times = capacity_times;
  rep.h0 = observable_h(dom).values[probe];
  std::vector<CheckpointSample> samples(N);
  run_parallel(N, threads, [&](std::size_t i) {
    samples[i] = run_to_capacity(dom, probe, capacity_times, seed, i);
  });
  rep.h_stats.assign(capacity_times.size(), RunningStat());
  rep.w_stats.assign(capacity_times.size(), RunningStat());
  rep.swallowed_fraction.assign(capacity_times.size(), 0.0);
  for (const auto& s : samples) {
    for (std::size_t t = 0; t < capacity_times.size(); ++t) {
      rep.h_stats[t].add(s.h_values[t]);
      rep.w_stats[t].add(s.w_values[t]);
      rep.swallowed_fraction[t] += s.probe_absorbed[t];
    }
  }
  for (std::size_t t = 0; t < capacity_times.size(); ++t) {
    rep.swallowed_fraction[t] /= std::max(1, N);
    if (rep.swallowed_fraction[t] > 0.5) {
      rep.warnings.push_back("SwallowedProbe at t=" + std::to_string(capacity_times[t]));
    }
  }
  return rep;
}

// --- unforced annulus crossings at time zero --------------------------------

struct Annulus {
  Point center;
  double r = 0.0;
  double R = 0.0;
};

struct AnnulusComponents {
  std::vector<int> comp_of_vertex;     // -1 outside the annulus
  std::vector<std::uint8_t> avoidable; // per component
  bool empty = false;                  // inner circle inside the open domain
  bool disjoint = false;
};

inline AnnulusComponents annulus_components(const LatticeDomain& dom, const Annulus& ann) {
  AnnulusComponents out;
  out.comp_of_vertex.assign(dom.vertex_count(), -1);
  if (ann.r > ann.R) throw ConfigError("annulus radii must satisfy r <= R");

  // the avoidable set is empty unless B(center, r) reaches the boundary
  double min_bd = std::numeric_limits<double>::max();
  for (int v : dom.boundary_ids) min_bd = std::min(min_bd, std::abs(dom.pos[v] - ann.center));
  if (min_bd > ann.r) {
    out.empty = true;
    return out;
  }

  std::vector<int> in_ann;
  for (int v : dom.interior_ids) {
    const double rho = std::abs(dom.pos[v] - ann.center);
    if (rho > ann.r && rho < ann.R) {
      out.comp_of_vertex[v] = -2;  // annulus, not yet labeled
      in_ann.push_back(v);
    }
  }
  if (in_ann.empty()) {
    out.disjoint = true;
    return out;
  }

  int ncomp = 0;
  for (int v0 : in_ann) {
    if (out.comp_of_vertex[v0] != -2) continue;
    std::vector<int> stack = {v0};
    out.comp_of_vertex[v0] = ncomp;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int w : dom.nbr[v]) {
        if (w >= 0 && out.comp_of_vertex[w] == -2) {
          out.comp_of_vertex[w] = ncomp;
          stack.push_back(w);
        }
      }
    }
    ++ncomp;
  }

  // anchors: the interior apexes of the marked edges
  auto anchor = [&](const BoundaryEdge& e) {
    const auto apex = dom.edge_apexes(e.u, e.w);
    for (int cand : apex) {
      if (cand >= 0 && dom.interior[cand]) return cand;
    }
    return -1;
  };
  const int a_anchor = anchor(dom.a_edge);
  const int b_anchor = anchor(dom.b_edge);

  out.avoidable.assign(ncomp, 0);
  for (int c = 0; c < ncomp; ++c) {
    if (a_anchor < 0 || b_anchor < 0) break;
    if (out.comp_of_vertex[a_anchor] == c || out.comp_of_vertex[b_anchor] == c) continue;
    // does removing component c keep a connected to b?
    std::vector<std::uint8_t> seen(dom.vertex_count(), 0);
    std::vector<int> stack = {a_anchor};
    seen[a_anchor] = 1;
    bool connected = false;
    while (!stack.empty() && !connected) {
      const int v = stack.back();
      stack.pop_back();
      if (v == b_anchor) {
        connected = true;
        break;
      }
      for (int w : dom.nbr[v]) {
        if (w < 0 || seen[w] || !dom.interior[w] || out.comp_of_vertex[w] == c) continue;
        seen[w] = 1;
        stack.push_back(w);
      }
    }
    out.avoidable[c] = connected;
  }
  return out;
}

/// true if the path crosses the annulus inside one avoidable component
inline bool path_makes_unforced_crossing(const LatticeDomain& dom, const DualPath& path,
                                         const std::vector<std::array<int, 3>>& assoc,
                                         const Annulus& ann, const AnnulusComponents& comps) {
  if (comps.empty || comps.disjoint || ann.r >= ann.R) return false;
  int from = 0;  // 0 none, 1 inner, 2 outer
  int comp = -1;
  bool consistent = true;
  for (std::size_t i = 0; i < path.points.size(); ++i) {
    const double rho = std::abs(path.points[i] - ann.center);
    if (rho <= ann.r || rho >= ann.R) {
      const int side = rho <= ann.r ? 1 : 2;
      if (from != 0 && from != side && consistent && comp >= 0 && comps.avoidable[comp]) {
        return true;
      }
      from = side;
      comp = -1;
      consistent = true;
      continue;
    }
    for (int v : assoc[i]) {
      if (v < 0) continue;
      const int c = comps.comp_of_vertex[v];
      if (c < 0) continue;
      if (comp == -1) {
        comp = c;
      } else if (c != comp) {
        consistent = false;
      }
    }
  }
  return false;
}

struct CrossingReport {
  std::vector<Annulus> annuli;
  std::vector<double> probability;
  std::vector<double> stderror;
  std::vector<std::uint8_t> flagged;  // annulus empty or disjoint
  double loglog_slope = 0.0;
  bool slope_defined = false;
};

/// Empirical unforced-crossing probabilities at time zero across an ensemble
/// of complete explorer paths.
inline CrossingReport crossing_statistics(const LatticeDomain& dom,
                                          const std::vector<Annulus>& annuli, int N,
                                          std::uint64_t seed, int threads) {
  CrossingReport rep;
  rep.annuli = annuli;
  std::vector<AnnulusComponents> comps;
  comps.reserve(annuli.size());
  for (const auto& a : annuli) {
    comps.push_back(annulus_components(dom, a));
    rep.flagged.push_back(comps.back().empty || comps.back().disjoint);
  }
  std::vector<std::vector<std::uint8_t>> hits(N);
  run_parallel(N, threads, [&](std::size_t i) {
    ExplorerState s(dom, seed, i);
    long budget = kStepBudget;
    while (!s.terminated()) {
      if (--budget < 0) throw NonTermination();
      s.step();
    }
    std::vector<std::uint8_t> row(annuli.size(), 0);
    for (std::size_t a = 0; a < annuli.size(); ++a) {
      row[a] = path_makes_unforced_crossing(dom, s.path(), s.path_assoc(), annuli[a], comps[a]);
    }
    hits[i] = std::move(row);
  });
  std::vector<double> log_ratio, log_prob;
  for (std::size_t a = 0; a < annuli.size(); ++a) {
    double k = 0.0;
    for (int i = 0; i < N; ++i) k += hits[i][a];
    const double p = k / N;
    rep.probability.push_back(p);
    rep.stderror.push_back(std::sqrt(std::max(p * (1.0 - p), 1e-300) / N));
    if (p > 0.0 && annuli[a].r > 0.0 && !rep.flagged[a]) {
      log_ratio.push_back(std::log(annuli[a].r / annuli[a].R));
      log_prob.push_back(std::log(p));
    }
  }
  if (log_ratio.size() >= 2) {
    rep.loglog_slope = linear_fit(log_ratio, log_prob).slope;
    rep.slope_defined = true;
  }
  return rep;
}

}  // namespace mhe
