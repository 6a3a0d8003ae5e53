#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhe/common.hpp"
#include "mhe/lattice.hpp"
#include "mhe/loewner.hpp"
#include "mhe/mharmonic.hpp"

namespace mhe {

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// rows of preformatted cells; deterministic output for identical inputs
inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  for (std::size_t i = 0; i < header.size(); ++i) {
    out << header[i] << (i + 1 < header.size() ? "," : "\n");
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
  }
}

inline void write_field_csv(const std::filesystem::path& path, const ScalarField& f) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(f.dom->vertex_count());
  for (int v = 0; v < f.dom->vertex_count(); ++v) {
    rows.push_back({std::to_string(v), format_double(f.dom->pos[v].real()),
                    format_double(f.dom->pos[v].imag()), format_double(f.values[v])});
  }
  write_csv(path, {"vertex_id", "x", "y", "value"}, rows);
}

inline void write_driving_csv(const std::filesystem::path& path, const DrivingFunction& d) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(d.times.size());
  for (std::size_t i = 0; i < d.times.size(); ++i) {
    rows.push_back({format_double(d.times[i]), format_double(d.values[i])});
  }
  write_csv(path, {"t", "W"}, rows);
}

inline void write_curve_csv(const std::filesystem::path& path, const DrivingFunction& d,
                            const CurveInH& c) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const double t = i < d.times.size() ? d.times[i] : 0.0;
    rows.push_back({format_double(t), format_double(c.points[i].real()),
                    format_double(c.points[i].imag())});
  }
  write_csv(path, {"t", "x", "y"}, rows);
}

// dual path with step index and cumulative capacity (zero when not tracked)
inline void write_path_csv(const std::filesystem::path& path, const DualPath& p,
                           const std::vector<double>& hcap_per_step) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < p.points.size(); ++i) {
    const std::size_t step = (i + 1) / 2;
    const double hcap = step < hcap_per_step.size() ? hcap_per_step[step] : 0.0;
    rows.push_back({std::to_string(step), format_double(p.points[i].real()),
                    format_double(p.points[i].imag()), format_double(hcap)});
  }
  write_csv(path, {"step", "x", "y", "hcap"}, rows);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace mhe
