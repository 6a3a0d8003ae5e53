#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "mhe/common.hpp"

namespace mhe {

// Welford accumulator.
class RunningStat {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double stddev() const { return std::sqrt(variance()); }
  double stderror() const {
    return n_ > 1 ? stddev() / std::sqrt(static_cast<double>(n_)) : 0.0;
  }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

// Per-checkpoint statistics of registered scalar functionals of a Monte Carlo
// ensemble, merged deterministically by sample index.
struct EnsembleStats {
  std::vector<std::string> names;
  std::vector<RunningStat> stats;
  std::map<std::string, std::string> tags;

  std::size_t add_channel(const std::string& name) {
    names.push_back(name);
    stats.emplace_back();
    return names.size() - 1;
  }
  void record(std::size_t channel, double value) { stats[channel].add(value); }
  const RunningStat& channel(std::size_t i) const { return stats[i]; }
  void tag(const std::string& key, const std::string& value) { tags[key] = value; }
};

inline double z_score(double observed, double expected, double stderror) {
  if (stderror == 0.0) return observed == expected ? 0.0 : std::numeric_limits<double>::infinity();
  return (observed - expected) / stderror;
}

// Runs fn(i) for i in [0, n) on a small worker pool. Samples own their RNG
// streams, so results are independent of the scheduling; callers merge
// per-index result slots afterwards.
inline void run_parallel(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int count = std::min<int>(threads, static_cast<int>(n));
  pool.reserve(count);
  for (int t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};

// least squares y = a + b x
inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw Error("linear_fit: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double dn = static_cast<double>(n);
  const double denom = dn * sxx - sx * sx;
  if (denom == 0.0) throw Error("linear_fit: degenerate abscissae");
  LinearFit f;
  f.slope = (dn * sxy - sx * sy) / denom;
  f.intercept = (sy - f.slope * sx) / dn;
  return f;
}

}  // namespace mhe
