#pragma once

// Independent sort-based statistics oracle used by the unit suite and the
// acceptance run: its own quantile interpolation, two-pass moments, and
// fence-to-fixed-point filtering, coded separately from the library against
// the same fixed definitions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace capnet::testing {

inline double oracle_quantile(const std::vector<int64_t>& sorted, double p) {
  if (sorted.size() == 1) return static_cast<double>(sorted[0]);
  double pos = p * static_cast<double>(sorted.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  if (lo + 1 >= sorted.size()) return static_cast<double>(sorted.back());
  double frac = pos - static_cast<double>(lo);
  double a = static_cast<double>(sorted[lo]);
  double b = static_cast<double>(sorted[lo + 1]);
  return a + frac * (b - a);
}

struct OracleSummary {
  double mean, stddev, median, p25, p75;
  int64_t min, max;
};

inline OracleSummary oracle_summary(std::vector<int64_t> values) {
  std::stable_sort(values.begin(), values.end());
  OracleSummary o{};
  double sum = 0;
  for (int64_t v : values) sum += static_cast<double>(v);
  o.mean = sum / static_cast<double>(values.size());
  double var = 0;
  for (int64_t v : values) {
    double d = static_cast<double>(v) - o.mean;
    var += d * d;
  }
  o.stddev = std::sqrt(var / static_cast<double>(values.size()));
  o.median = oracle_quantile(values, 0.5);
  o.p25 = oracle_quantile(values, 0.25);
  o.p75 = oracle_quantile(values, 0.75);
  o.min = values.front();
  o.max = values.back();
  return o;
}

inline std::pair<std::vector<int64_t>, std::vector<int64_t>> oracle_iqr(
    std::vector<int64_t> values, double k) {
  std::stable_sort(values.begin(), values.end());
  std::vector<int64_t> removed;
  bool changed = true;
  while (changed) {
    changed = false;
    double q1 = oracle_quantile(values, 0.25);
    double q3 = oracle_quantile(values, 0.75);
    double lo = q1 - k * (q3 - q1);
    double hi = q3 + k * (q3 - q1);
    std::vector<int64_t> kept;
    for (int64_t v : values) {
      if (static_cast<double>(v) < lo || static_cast<double>(v) > hi) {
        removed.push_back(v);
        changed = true;
      } else {
        kept.push_back(v);
      }
    }
    values.swap(kept);
  }
  std::sort(removed.begin(), removed.end());
  return {values, removed};
}

}  // namespace capnet::testing
