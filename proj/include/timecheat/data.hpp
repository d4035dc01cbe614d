#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "timecheat/errors.hpp"

namespace timecheat {

enum class Task { classification, interpolation, forecasting };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::classification: return "classification";
    case Task::interpolation: return "interpolation";
    case Task::forecasting: return "forecasting";
  }
  return "classification";
}

inline Task parse_task(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "interpolation") return Task::interpolation;
  if (s == "forecasting") return Task::forecasting;
  throw ConfigError("unknown task '" + s + "'");
}

struct Observation {
  std::size_t channel = 0;
  double time = 0.0;
  double value = 0.0;

  friend bool operator==(const Observation&, const Observation&) = default;
};

struct TimedValue {
  double time = 0.0;
  double value = 0.0;

  friend bool operator==(const TimedValue&, const TimedValue&) = default;
};

struct Span {
  double begin = 0.0;
  double end = 1.0;

  double width() const noexcept { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// One irregularly sampled multivariate series.
///
/// Observations live in per-channel lists sorted by time, so the storage is
/// independent of the order observations were supplied in. The target is a
/// class label or a set of query triples whose values are to be predicted.
class Instance {
 public:
  Instance() = default;

  /// Validates and sorts. Throws RangeError for channels >= C or times outside
  /// the span, DuplicateObservationError for a repeated (channel, time).
  Instance(std::size_t channels, Span span, const std::vector<Observation>& observations,
           std::optional<std::size_t> label = std::nullopt, std::vector<Observation> queries = {})
      : span_(span), label_(label), queries_(std::move(queries)), per_channel_(channels) {
    if (!(span.end >= span.begin) || !std::isfinite(span.begin) || !std::isfinite(span.end)) {
      throw RangeError("span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) + "] is not valid");
    }
    for (const auto& o : observations) {
      check_channel(o.channel, channels);
      if (!std::isfinite(o.value) || !std::isfinite(o.time)) {
        throw RangeError("non-finite observation on channel " + std::to_string(o.channel));
      }
      if (o.time < span.begin || o.time > span.end) {
        throw RangeError("observation time " + std::to_string(o.time) + " outside span [" +
                         std::to_string(span.begin) + ", " + std::to_string(span.end) + "]");
      }
      per_channel_[o.channel].push_back({o.time, o.value});
    }
    for (std::size_t c = 0; c < channels; ++c) {
      auto& list = per_channel_[c];
      std::sort(list.begin(), list.end(), [](const TimedValue& a, const TimedValue& b) {
        return a.time < b.time || (a.time == b.time && a.value < b.value);
      });
      for (std::size_t i = 1; i < list.size(); ++i) {
        if (list[i].time == list[i - 1].time) {
          throw DuplicateObservationError("duplicate observation for channel " + std::to_string(c) + " at time " +
                                          std::to_string(list[i].time));
        }
      }
    }
    for (const auto& q : queries_) {
      check_channel(q.channel, channels);
      if (!std::isfinite(q.time) || !std::isfinite(q.value)) throw RangeError("non-finite query");
    }
    std::sort(queries_.begin(), queries_.end(), [](const Observation& a, const Observation& b) {
      return a.time < b.time || (a.time == b.time && a.channel < b.channel);
    });
  }

  std::size_t channels() const noexcept { return per_channel_.size(); }
  const Span& span() const noexcept { return span_; }
  const std::optional<std::size_t>& label() const noexcept { return label_; }
  const std::vector<Observation>& queries() const noexcept { return queries_; }
  const std::vector<TimedValue>& channel(std::size_t c) const { return per_channel_.at(c); }

  std::size_t observation_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : per_channel_) n += l.size();
    return n;
  }

  /// All observations ordered by (channel, time).
  std::vector<Observation> observations() const {
    std::vector<Observation> out;
    out.reserve(observation_count());
    for (std::size_t c = 0; c < per_channel_.size(); ++c)
      for (const auto& tv : per_channel_[c]) out.push_back({c, tv.time, tv.value});
    return out;
  }

  /// Span used before time normalisation; equals span() for raw instances.
  const Span& original_span() const noexcept { return original_span_ ? *original_span_ : span_; }
  void set_original_span(Span s) { original_span_ = s; }

  friend bool operator==(const Instance& a, const Instance& b) {
    return a.span_ == b.span_ && a.label_ == b.label_ && a.queries_ == b.queries_ && a.per_channel_ == b.per_channel_;
  }

 private:
  static void check_channel(std::size_t c, std::size_t channels) {
    if (c >= channels) {
      throw RangeError("channel " + std::to_string(c) + " out of range for C=" + std::to_string(channels));
    }
  }

  Span span_{};
  std::optional<Span> original_span_;
  std::optional<std::size_t> label_;
  std::vector<Observation> queries_;
  std::vector<std::vector<TimedValue>> per_channel_;
};

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;

  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

using NormalizationStats = std::vector<ChannelStats>;

struct Dataset {
  std::size_t channels = 0;
  Task task = Task::classification;
  std::size_t classes = 0;  // 0 for value-prediction tasks
  std::optional<double> horizon;
  std::vector<Instance> instances;
  std::optional<NormalizationStats> stats;
  bool normalized = false;

  std::size_t size() const noexcept { return instances.size(); }
  bool empty() const noexcept { return instances.empty(); }

  /// Copy with the same metadata and the given subset of instances.
  Dataset subset(const std::vector<std::size_t>& index) const {
    Dataset d = *this;
    d.instances.clear();
    d.instances.reserve(index.size());
    for (auto i : index) d.instances.push_back(instances.at(i));
    return d;
  }
};

/// Per-channel mean and population standard deviation of observed values;
/// std is floored at 1e-8 and empty channels get (0, 1).
inline NormalizationStats compute_stats(const Dataset& ds) {
  NormalizationStats stats(ds.channels);
  for (std::size_t c = 0; c < ds.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& inst : ds.instances) {
      for (const auto& tv : inst.channel(c)) {
        sum += tv.value;
        ++n;
      }
    }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    for (const auto& inst : ds.instances)
      for (const auto& tv : inst.channel(c)) sq += (tv.value - mean) * (tv.value - mean);
    stats[c] = {mean, std::max(std::sqrt(sq / static_cast<double>(n)), 1e-8)};
  }
  return stats;
}

/// Maps values to (x - mean) / std per channel and times to [0, 1] over each
/// instance's span. Without stats the dataset is treated as a training split
/// and its own statistics are used.
inline Dataset normalize(const Dataset& ds, const std::optional<NormalizationStats>& stats = std::nullopt) {
  if (ds.normalized) throw ConfigError("normalize: dataset is already normalized");
  const NormalizationStats st = stats ? *stats : compute_stats(ds);
  if (st.size() != ds.channels) throw ConfigError("normalize: stats cover a different channel count");
  Dataset out = ds;
  out.stats = st;
  out.normalized = true;
  for (auto& inst : out.instances) {
    const Span span = inst.span();
    const double width = span.width() > 0.0 ? span.width() : 1.0;
    auto map_time = [&](double t) { return (t - span.begin) / width; };
    std::vector<Observation> obs = inst.observations();
    for (auto& o : obs) {
      o.time = map_time(o.time);
      o.value = (o.value - st[o.channel].mean) / st[o.channel].std;
    }
    std::vector<Observation> queries = inst.queries();
    for (auto& q : queries) {
      q.time = map_time(q.time);
      q.value = (q.value - st[q.channel].mean) / st[q.channel].std;
    }
    Instance n(ds.channels, Span{0.0, 1.0}, obs, inst.label(), std::move(queries));
    n.set_original_span(span);
    inst = std::move(n);
  }
  return out;
}

/// Inverse of normalize: restores values and timestamps.
inline Dataset denormalize(const Dataset& ds) {
  if (!ds.normalized || !ds.stats) throw ConfigError("denormalize: dataset is not normalized");
  const auto& st = *ds.stats;
  Dataset out = ds;
  out.normalized = false;
  for (auto& inst : out.instances) {
    const Span span = inst.original_span();
    const double width = span.width() > 0.0 ? span.width() : 1.0;
    auto unmap = [&](Observation o) {
      o.time = o.time * width + span.begin;
      o.value = o.value * st[o.channel].std + st[o.channel].mean;
      return o;
    };
    std::vector<Observation> obs = inst.observations();
    for (auto& o : obs) o = unmap(o);
    std::vector<Observation> queries = inst.queries();
    for (auto& q : queries) q = unmap(q);
    inst = Instance(ds.channels, span, obs, inst.label(), std::move(queries));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL format

namespace detail {

inline Observation parse_triple(const nlohmann::json& j, std::size_t line) {
  if (!j.is_array() || j.size() != 3 || !j[0].is_number_integer() || !j[1].is_number() || !j[2].is_number()) {
    throw ParseError("expected [channel, time, value], got " + j.dump(), line);
  }
  const auto ch = j[0].get<long long>();
  if (ch < 0) throw RangeError("line " + std::to_string(line) + ": channel " + std::to_string(ch) + " is negative");
  return {static_cast<std::size_t>(ch), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json triple(const Observation& o) { return nlohmann::json::array({o.channel, o.time, o.value}); }

}  // namespace detail

/// Reads the JSONL dataset format: a meta header line followed by one
/// instance per line.
inline Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string text;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t max_label = 0;
  bool any_label = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", line_no);
    if (!have_header) {
      if (!j.contains("meta")) throw ParseError("first line must be a {\"meta\": ...} header", line_no);
      const auto& m = j["meta"];
      try {
        ds.channels = m.at("C").get<std::size_t>();
        ds.task = parse_task(m.at("task").get<std::string>());
        if (m.contains("horizon") && !m["horizon"].is_null()) ds.horizon = m["horizon"].get<double>();
        if (m.contains("classes")) ds.classes = m["classes"].get<std::size_t>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad meta header: ") + e.what(), line_no);
      } catch (const ConfigError& e) {
        throw ParseError(e.what(), line_no);
      }
      if (ds.channels == 0) throw ParseError("meta.C must be positive", line_no);
      have_header = true;
      continue;
    }
    if (!j.contains("span") || !j["span"].is_array() || j["span"].size() != 2 || !j["span"][0].is_number() ||
        !j["span"][1].is_number()) {
      throw ParseError("missing or malformed \"span\"", line_no);
    }
    if (!j.contains("obs") || !j["obs"].is_array()) throw ParseError("missing \"obs\" array", line_no);
    Span span{j["span"][0].get<double>(), j["span"][1].get<double>()};
    std::vector<Observation> obs;
    for (const auto& t : j["obs"]) obs.push_back(detail::parse_triple(t, line_no));
    std::optional<std::size_t> label;
    std::vector<Observation> queries;
    if (ds.task == Task::classification) {
      if (!j.contains("label") || !j["label"].is_number_integer() || j["label"].get<long long>() < 0) {
        throw ParseError("classification record needs a non-negative integer \"label\"", line_no);
      }
      label = j["label"].get<std::size_t>();
      max_label = std::max(max_label, *label);
      any_label = true;
    } else {
      if (j.contains("queries")) {
        if (!j["queries"].is_array()) throw ParseError("\"queries\" must be an array", line_no);
        for (const auto& t : j["queries"]) queries.push_back(detail::parse_triple(t, line_no));
      }
      for (const auto& q : queries) {
        const bool ok = ds.task == Task::forecasting ? q.time > span.end
                                                     : (q.time >= span.begin && q.time <= span.end);
        if (!ok) {
          throw RangeError("line " + std::to_string(line_no) + ": query time " + std::to_string(q.time) +
                           (ds.task == Task::forecasting ? " does not exceed the observation window"
                                                         : " lies outside the span"));
        }
      }
    }
    try {
      ds.instances.emplace_back(ds.channels, span, obs, label, std::move(queries));
    } catch (const RangeError& e) {
      throw RangeError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DuplicateObservationError& e) {
      throw DuplicateObservationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (ds.task == Task::classification && any_label) ds.classes = std::max(ds.classes, max_label + 1);
  if (ds.instances.empty()) diag::warn("dataset contains no instances");
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  return read_dataset(in);
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  nlohmann::json meta{{"C", ds.channels}, {"task", to_string(ds.task)}};
  if (ds.horizon) meta["horizon"] = *ds.horizon;
  if (ds.task == Task::classification) meta["classes"] = ds.classes;
  out << nlohmann::json{{"meta", meta}}.dump() << '\n';
  for (const auto& inst : ds.instances) {
    nlohmann::json j;
    j["span"] = {inst.span().begin, inst.span().end};
    auto& obs = j["obs"] = nlohmann::json::array();
    for (const auto& o : inst.observations()) obs.push_back(detail::triple(o));
    if (inst.label()) j["label"] = *inst.label();
    if (ds.task != Task::classification) {
      auto& q = j["queries"] = nlohmann::json::array();
      for (const auto& o : inst.queries()) q.push_back(detail::triple(o));
    }
    out << j.dump() << '\n';
  }
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
  write_dataset(out, ds);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

struct SplitDatasets {
  Dataset train, val, test;
  SplitIndices index;
};

namespace detail {

/// Split sizes by largest remainder; ties go to the earlier split.
inline std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& ratios) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(counts[i]);
    used += counts[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[i] > frac[best] + 1e-12) best = i;
    ++counts[best];
    frac[best] = -1.0;
    ++used;
  }
  return counts;
}

}  // namespace detail

/// Deterministic per-seed partition into train/val/test. Classification
/// datasets are stratified: instances are grouped by label and the groups are
/// dealt across splits in proportion to the ratios.
inline SplitIndices split_indices(const Dataset& ds, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (!(r > 0.0)) throw ConfigError("split: ratios must be positive");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");
  const std::size_t n = ds.size();
  const auto counts = detail::apportion(n, ratios);
  const char* names[] = {"train", "val", "test"};
  for (int i = 0; i < 3; ++i) {
    if (counts[i] == 0) {
      throw ConfigError(std::string("split: ") + names[i] + " split would receive 0 of " + std::to_string(n) +
                        " instances");
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  if (ds.task == Task::classification) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return ds.instances[a].label().value_or(0) < ds.instances[b].label().value_or(0);
    });
  }

  // Even interleaving of split slots along the (stratified) order.
  SplitIndices out;
  std::array<std::vector<std::size_t>*, 3> dst{&out.train, &out.val, &out.test};
  std::array<std::size_t, 3> assigned{};
  for (std::size_t j = 0; j < n; ++j) {
    int best = -1;
    double best_deficit = -1e300;
    for (int i = 0; i < 3; ++i) {
      if (assigned[i] == counts[i]) continue;
      const double deficit =
          static_cast<double>(counts[i]) * static_cast<double>(j + 1) / static_cast<double>(n) -
          static_cast<double>(assigned[i]);
      if (deficit > best_deficit + 1e-12) {
        best = i;
        best_deficit = deficit;
      }
    }
    dst[best]->push_back(order[j]);
    ++assigned[best];
  }
  for (auto* v : dst) std::sort(v->begin(), v->end());
  return out;
}

inline SplitDatasets split(const Dataset& ds, std::array<double, 3> ratios, std::uint64_t seed) {
  SplitIndices idx = split_indices(ds, ratios, seed);
  return {ds.subset(idx.train), ds.subset(idx.val), ds.subset(idx.test), std::move(idx)};
}

}  // namespace timecheat
