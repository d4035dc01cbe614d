#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "timecheat/data.hpp"
#include "timecheat/errors.hpp"

namespace timecheat {

enum class Arrival { grid, uniform, poisson };

/// Settings for the desk-scale synthetic generator.
///
/// Every channel carries a sinusoid with a per-instance random phase and
/// amplitude. For classification the frequency (cycles per span) is chosen by
/// the class; for value tasks it is drawn from [min_frequency, max_frequency].
/// Channels listed in `lagged_channels` copy channel 0 delayed by `lag` (in
/// span units) plus independent noise.
struct SyntheticSpec {
  std::size_t channels = 2;
  std::size_t instances = 64;
  Task task = Task::classification;
  std::vector<double> class_frequencies{1.0, 2.0};
  double min_frequency = 0.5;
  double max_frequency = 2.0;
  double span = 48.0;
  std::size_t grid_steps = 48;
  Arrival arrival = Arrival::grid;
  double rate = 0.4;  // fraction of grid slots observed, per channel
  std::vector<double> rate_multipliers;  // per channel; empty = all 1
  double noise = 0.1;
  double min_amplitude = 0.8;
  double max_amplitude = 1.2;
  std::vector<std::size_t> lagged_channels;
  double lag = 0.05;
  std::size_t forecast_steps = 3;
  double observed_window = 0.75;  // forecasting: fraction of the span that is observed

  std::size_t classes() const { return task == Task::classification ? class_frequencies.size() : 0; }
};

inline Arrival parse_arrival(const std::string& s) {
  if (s == "grid") return Arrival::grid;
  if (s == "uniform") return Arrival::uniform;
  if (s == "poisson") return Arrival::poisson;
  throw ConfigError("unknown arrival process '" + s + "'");
}

inline std::string to_string(Arrival a) {
  switch (a) {
    case Arrival::grid: return "grid";
    case Arrival::uniform: return "uniform";
    case Arrival::poisson: return "poisson";
  }
  return "grid";
}

/// Named presets used by the CLI and the acceptance suite.
inline SyntheticSpec synthetic_preset(const std::string& name) {
  SyntheticSpec s;
  if (name == "two-class") return s;
  if (name == "coupled-two-class") {
    // Channel 1 is a noisy lag of channel 0.
    s.lagged_channels = {1};
    return s;
  }
  if (name == "interpolation") {
    s.task = Task::interpolation;
    s.instances = 128;
    s.rate = 0.5;
    s.noise = 0.05;
    s.class_frequencies.clear();
    return s;
  }
  if (name == "forecasting") {
    s.task = Task::forecasting;
    s.instances = 128;
    s.rate = 0.5;
    s.noise = 0.05;
    s.class_frequencies.clear();
    return s;
  }
  throw ConfigError("unknown synthetic preset '" + name + "'");
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s = j.contains("preset") ? synthetic_preset(j["preset"].get<std::string>()) : SyntheticSpec{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("task")) s.task = parse_task(j["task"].get<std::string>());
  if (j.contains("arrival")) s.arrival = parse_arrival(j["arrival"].get<std::string>());
  get("channels", s.channels);
  get("instances", s.instances);
  get("class_frequencies", s.class_frequencies);
  get("min_frequency", s.min_frequency);
  get("max_frequency", s.max_frequency);
  get("span", s.span);
  get("grid_steps", s.grid_steps);
  get("rate", s.rate);
  get("rate_multipliers", s.rate_multipliers);
  get("noise", s.noise);
  get("min_amplitude", s.min_amplitude);
  get("max_amplitude", s.max_amplitude);
  get("lagged_channels", s.lagged_channels);
  get("lag", s.lag);
  get("forecast_steps", s.forecast_steps);
  get("observed_window", s.observed_window);
  return s;
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"channels", s.channels},
          {"instances", s.instances},
          {"task", to_string(s.task)},
          {"class_frequencies", s.class_frequencies},
          {"min_frequency", s.min_frequency},
          {"max_frequency", s.max_frequency},
          {"span", s.span},
          {"grid_steps", s.grid_steps},
          {"arrival", to_string(s.arrival)},
          {"rate", s.rate},
          {"rate_multipliers", s.rate_multipliers},
          {"noise", s.noise},
          {"min_amplitude", s.min_amplitude},
          {"max_amplitude", s.max_amplitude},
          {"lagged_channels", s.lagged_channels},
          {"lag", s.lag},
          {"forecast_steps", s.forecast_steps},
          {"observed_window", s.observed_window}};
}

/// Generates a dataset deterministically from (spec, seed).
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.channels == 0 || spec.instances == 0 || spec.grid_steps == 0) {
    throw ConfigError("synthetic: channels, instances and grid_steps must be positive");
  }
  if (!(spec.span > 0.0)) throw ConfigError("synthetic: span must be positive");
  if (spec.task == Task::classification && spec.class_frequencies.size() < 2) {
    throw ConfigError("synthetic: classification needs at least two class frequencies");
  }
  if (spec.task == Task::forecasting && (spec.forecast_steps == 0 || !(spec.observed_window > 0.0) ||
                                         !(spec.observed_window < 1.0))) {
    throw ConfigError("synthetic: forecasting needs forecast_steps > 0 and observed_window in (0, 1)");
  }
  if (spec.rate < 0.0) throw ConfigError("synthetic: rate must be non-negative");
  if (!spec.rate_multipliers.empty() && spec.rate_multipliers.size() != spec.channels) {
    throw ConfigError("synthetic: rate_multipliers must list one value per channel");
  }
  for (auto c : spec.lagged_channels)
    if (c == 0 || c >= spec.channels) throw ConfigError("synthetic: lagged channel index out of range");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Dataset ds;
  ds.channels = spec.channels;
  ds.task = spec.task;
  ds.classes = spec.classes();
  const double dt = spec.span / static_cast<double>(spec.grid_steps);
  const double cutoff = spec.task == Task::forecasting ? spec.span * spec.observed_window : spec.span;
  if (spec.task == Task::forecasting) ds.horizon = static_cast<double>(spec.forecast_steps) * dt;

  std::vector<bool> lagged(spec.channels, false);
  for (auto c : spec.lagged_channels) lagged[c] = true;

  for (std::size_t n = 0; n < spec.instances; ++n) {
    std::optional<std::size_t> label;
    double freq;
    if (spec.task == Task::classification) {
      label = n % spec.class_frequencies.size();
      freq = spec.class_frequencies[*label];
    } else {
      freq = spec.min_frequency + (spec.max_frequency - spec.min_frequency) * unit(rng);
    }
    std::vector<double> phase(spec.channels), amp(spec.channels);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      phase[c] = 2.0 * std::numbers::pi * unit(rng);
      amp[c] = spec.min_amplitude + (spec.max_amplitude - spec.min_amplitude) * unit(rng);
    }
    auto clean = [&](std::size_t c, double t) {
      const std::size_t src = lagged[c] ? 0 : c;
      const double shifted = lagged[c] ? t - spec.lag * spec.span : t;
      return amp[src] * std::sin(2.0 * std::numbers::pi * freq * shifted / spec.span + phase[src]);
    };

    std::vector<Observation> obs;
    std::vector<Observation> queries;
    for (std::size_t c = 0; c < spec.channels; ++c) {
      const double mult = spec.rate_multipliers.empty() ? 1.0 : spec.rate_multipliers[c];
      const double r = spec.rate * mult;
      std::vector<double> times;
      const double window = cutoff;
      switch (spec.arrival) {
        case Arrival::grid: {
          std::bernoulli_distribution keep(std::min(r, 1.0));
          for (std::size_t k = 0; k < spec.grid_steps; ++k) {
            const double t = static_cast<double>(k) * dt;
            const bool kept = keep(rng);
            if (kept && t <= window) times.push_back(t);
          }
          break;
        }
        case Arrival::uniform:
        case Arrival::poisson: {
          const double expected = r * static_cast<double>(spec.grid_steps) * window / spec.span;
          std::size_t count;
          if (spec.arrival == Arrival::uniform) {
            count = static_cast<std::size_t>(std::llround(expected));
          } else {
            std::poisson_distribution<long> pois(std::max(expected, 1e-12));
            count = expected > 0.0 ? static_cast<std::size_t>(pois(rng)) : 0;
          }
          for (std::size_t k = 0; k < count; ++k) times.push_back(window * unit(rng));
          std::sort(times.begin(), times.end());
          times.erase(std::unique(times.begin(), times.end()), times.end());
          break;
        }
      }
      for (double t : times) obs.push_back({c, t, clean(c, t) + spec.noise * gauss(rng)});
      if (spec.task == Task::forecasting) {
        for (std::size_t k = 1; k <= spec.forecast_steps; ++k) {
          const double t = cutoff + static_cast<double>(k) * dt;
          queries.push_back({c, t, clean(c, t) + spec.noise * gauss(rng)});
        }
      }
    }
    ds.instances.emplace_back(spec.channels, Span{0.0, cutoff}, obs, label, std::move(queries));
  }
  return ds;
}

}  // namespace timecheat
