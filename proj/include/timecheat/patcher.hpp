#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "timecheat/data.hpp"
#include "timecheat/errors.hpp"

namespace timecheat {

/// Half-open slice [start, end) of the normalised time axis; the last patch
/// also owns t = 1.
struct Patch {
  std::size_t index = 0;
  double start = 0.0;
  double end = 1.0;
  std::vector<Observation> observations;  // ordered by (time, channel)
};

/// K regular query timestamps at the cell centres of a patch.
struct ReferenceGrid {
  std::vector<double> tau;
};

/// Patch index for a normalised time; times at or beyond 1 map to the last patch.
inline std::size_t patch_of(double t, std::size_t patches) {
  if (t <= 0.0) return 0;
  const double n = static_cast<double>(patches);
  auto p = std::min(static_cast<std::size_t>(std::floor(t * n)), patches - 1);
  // Agree with the boundaries p / P exactly, whatever the rounding of t * P.
  if (p + 1 < patches && t >= static_cast<double>(p + 1) / n) ++p;
  if (p > 0 && t < static_cast<double>(p) / n) --p;
  return p;
}

inline std::vector<Patch> segment(const Instance& instance, std::size_t patches) {
  if (patches == 0) throw ConfigError("segment: patch count must be at least 1");
  std::vector<Patch> out(patches);
  for (std::size_t p = 0; p < patches; ++p) {
    out[p].index = p;
    out[p].start = static_cast<double>(p) / static_cast<double>(patches);
    out[p].end = static_cast<double>(p + 1) / static_cast<double>(patches);
  }
  for (std::size_t c = 0; c < instance.channels(); ++c) {
    for (const auto& tv : instance.channel(c)) out[patch_of(tv.time, patches)].observations.push_back({c, tv.time, tv.value});
  }
  for (auto& p : out) {
    std::sort(p.observations.begin(), p.observations.end(), [](const Observation& a, const Observation& b) {
      return a.time < b.time || (a.time == b.time && a.channel < b.channel);
    });
  }
  return out;
}

inline ReferenceGrid reference_grid(const Patch& patch, std::size_t k) {
  if (k == 0) throw ConfigError("reference_grid: K must be at least 1");
  ReferenceGrid g;
  g.tau.reserve(k);
  const double width = patch.end - patch.start;
  for (std::size_t i = 0; i < k; ++i) {
    g.tau.push_back(patch.start + (static_cast<double>(i) + 0.5) * width / static_cast<double>(k));
  }
  return g;
}

}  // namespace timecheat
