#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>

namespace timecheat {

/// Operand shapes do not conform for a primitive.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity reached a primitive or a loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tape misuse, e.g. backward on a variable that was never recorded.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class DuplicateObservationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters, generator settings or split ratios.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Metric undefined for the given labels (e.g. AUROC with one class).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace diag {

using Sink = std::function<void(const std::string&)>;

namespace detail {
inline Sink& sink() {
  static Sink s = [](const std::string& msg) { std::clog << "warning: " << msg << '\n'; };
  return s;
}
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Replaces the warning sink and returns the previous one.
inline Sink set_warning_sink(Sink s) {
  std::lock_guard lock(detail::sink_mutex());
  return std::exchange(detail::sink(), std::move(s));
}

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink()) detail::sink()(msg);
}

/// Installs a sink for the lifetime of the guard.
class ScopedWarningSink {
 public:
  explicit ScopedWarningSink(Sink s) : previous_(set_warning_sink(std::move(s))) {}
  ~ScopedWarningSink() { set_warning_sink(std::move(previous_)); }
  ScopedWarningSink(const ScopedWarningSink&) = delete;
  ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace diag
}  // namespace timecheat
