#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "timecheat/autodiff.hpp"
#include "timecheat/errors.hpp"
#include "timecheat/tensor.hpp"

namespace timecheat {

struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
};

/// Named, ordered collection of learnable tensors. Slot numbers are stable
/// for the lifetime of the store and are what tapes bind to.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value, bool frozen = false) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value), frozen});
    return params_.size() - 1;
  }

  std::size_t slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& operator[](std::size_t slot) { return params_.at(slot); }
  const Parameter& operator[](std::size_t slot) const { return params_.at(slot); }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Var bind(Tape& tape, std::size_t slot) const { return tape.parameter(slot, params_.at(slot).value); }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t(Shape{fan_in, fan_out});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline Tensor zeros(std::size_t n) { return Tensor(Shape{1, n}, 0.0); }
inline Tensor ones(std::size_t n) { return Tensor(Shape{1, n}, 1.0); }

}  // namespace init

/// Weight and bias slots of one fully connected layer.
struct Dense {
  std::size_t weight = 0;
  std::size_t bias = 0;

  static Dense create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      std::mt19937_64& rng) {
    Dense d;
    d.weight = store.add(name + ".weight", init::glorot(in, out, rng));
    d.bias = store.add(name + ".bias", init::zeros(out));
    return d;
  }

  Var operator()(Tape& tape, const ParamStore& store, Var x) const {
    return ops::affine(x, store.bind(tape, weight), store.bind(tape, bias));
  }
};

}  // namespace timecheat
