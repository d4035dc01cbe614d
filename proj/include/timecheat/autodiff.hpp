#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "timecheat/errors.hpp"
#include "timecheat/tensor.hpp"

namespace timecheat {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const {
    if (!tape_) throw UsageError("variable is not attached to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool attached() const noexcept { return tape_ != nullptr; }
  inline const Tensor& value() const;
  inline const Shape& shape() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive applications so gradients can be propagated in reverse.
///
/// A tape is single-threaded. Independent tapes may be driven concurrently as
/// long as the parameter tensors they copy from are not being written.
class Tape {
 public:
  using ForwardFn = std::function<Tensor(const Tape&, std::span<const std::size_t>)>;
  using BackwardFn = std::function<void(Tape&, std::span<const std::size_t>, const Tensor& out, const Tensor& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return add_leaf(std::move(value), false, "constant"); }

  /// Leaf whose gradient is accumulated during backward.
  Var variable(Tensor value) { return add_leaf(std::move(value), true, "variable"); }

  /// Leaf bound to an external parameter slot. Repeated calls with the same
  /// slot return the same variable.
  Var parameter(std::size_t slot, const Tensor& value) {
    if (auto it = param_nodes_.find(slot); it != param_nodes_.end()) return Var(this, it->second);
    Var v = add_leaf(value, true, "parameter");
    param_nodes_.emplace(slot, v.id());
    param_order_.push_back(slot);
    return v;
  }

  Var record(std::vector<std::size_t> inputs, ForwardFn forward, BackwardFn backward, const char* name) {
    bool needs = false;
    for (auto in : inputs) {
      check_id(in);
      needs = needs || nodes_[in].requires_grad;
    }
    Tensor value = forward(*this, inputs);
    if (!value.all_finite()) throw NumericError(std::string(name) + ": produced a non-finite value");
    nodes_.push_back(Node{std::move(value), Tensor{}, false, needs, std::move(inputs), std::move(forward),
                          std::move(backward), name});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const char* name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer for a node, zero-initialised on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of the last backward pass with respect to v (zeros if unreached).
  Tensor grad(Var v) const {
    check_var(v);
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
  }

  void backward(Var out) {
    check_var(out);
    backward(out, Tensor(nodes_[out.id()].value.shape(), 1.0));
  }

  void backward(Var out, const Tensor& seed) {
    check_var(out);
    if (seed.shape() != nodes_[out.id()].value.shape()) {
      throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " differs from output shape " +
                       to_string(nodes_[out.id()].value.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor{};
    }
    visit_order_.clear();
    grad_buffer(out.id()) = seed;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.has_grad || !n.requires_grad) continue;
      visit_order_.push_back(i);
      n.backward(*this, n.inputs, n.value, n.grad);
    }
  }

  /// Node ids whose gradient rule ran during the last backward, in call order.
  const std::vector<std::size_t>& last_backward_order() const noexcept { return visit_order_; }

  /// Parameter slots in first-use order paired with their accumulated gradients.
  std::vector<std::pair<std::size_t, Tensor>> parameter_gradients() const {
    std::vector<std::pair<std::size_t, Tensor>> out;
    out.reserve(param_order_.size());
    for (auto slot : param_order_) {
      const Node& n = nodes_[param_nodes_.at(slot)];
      out.emplace_back(slot, n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0));
    }
    return out;
  }

  /// Overwrites a leaf value; call replay() to refresh dependent nodes.
  void set_leaf(Var v, Tensor value) {
    check_var(v);
    Node& n = nodes_[v.id()];
    if (n.forward) throw UsageError("set_leaf: node " + std::to_string(v.id()) + " is not a leaf");
    if (value.shape() != n.value.shape()) throw ShapeError("set_leaf: shape mismatch");
    n.value = std::move(value);
  }

  /// Re-evaluates every recorded operation in recording order.
  void replay() {
    for (auto& n : nodes_) {
      if (n.forward) n.value = n.forward(*this, n.inputs);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
    const char* name = "";
  };

  Var add_leaf(Tensor value, bool requires_grad, const char* name) {
    if (!value.all_finite()) throw NumericError(std::string(name) + ": non-finite input");
    nodes_.push_back(Node{std::move(value), Tensor{}, false, requires_grad, {}, {}, {}, name});
    return Var(this, nodes_.size() - 1);
  }

  void check_id(std::size_t id) const {
    if (id >= nodes_.size()) throw UsageError("node " + std::to_string(id) + " was never recorded on this tape");
  }

  void check_var(Var v) const {
    if (!v.attached() || &v.tape() != this) throw UsageError("variable does not belong to this tape");
    check_id(v.id());
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  std::unordered_map<std::size_t, std::size_t> param_nodes_;
  std::vector<std::size_t> param_order_;
  std::vector<std::size_t> visit_order_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline const Shape& Var::shape() const { return value().shape(); }

/// Sparsity pattern for attention: query q attends keys[offsets[q] .. offsets[q+1]).
struct AttentionPattern {
  std::size_t num_keys = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> keys;

  std::size_t num_queries() const noexcept { return offsets.size() - 1; }
  std::size_t degree(std::size_t q) const { return offsets[q + 1] - offsets[q]; }

  /// Dense attention inside consecutive blocks of `block` rows.
  static AttentionPattern blocks(std::size_t count, std::size_t block) {
    AttentionPattern p;
    p.num_keys = count * block;
    for (std::size_t b = 0; b < count; ++b) {
      for (std::size_t i = 0; i < block; ++i) {
        for (std::size_t j = 0; j < block; ++j) p.keys.push_back(b * block + j);
        p.offsets.push_back(p.keys.size());
      }
    }
    return p;
  }
};

/// Per-head attention weights aligned with AttentionPattern::keys (nnz x heads).
struct AttentionTrace {
  std::vector<double> weights;
  std::size_t heads = 0;
};

namespace ops {

namespace detail {
inline Tape& same_tape(std::initializer_list<Var> vars, const char* op) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.attached()) throw UsageError(std::string(op) + ": operand not attached to a tape");
    if (t && &v.tape() != t) throw UsageError(std::string(op) + ": operands recorded on different tapes");
    t = &v.tape();
  }
  return *t;
}

inline void accumulate(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& buf = t.grad_buffer(id);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template <typename F, typename G>
Var unary(Var a, const char* name, F f, G dfdx) {
  Tape& t = a.tape();
  return t.record(
      {a.id()}, [f](const Tape& tp, std::span<const std::size_t> in) { return kernels::map(tp.value(in[0]), f); },
      [dfdx](Tape& tp, std::span<const std::size_t> in, const Tensor& out, const Tensor& g) {
        if (!tp.requires_grad(in[0])) return;
        const Tensor& x = tp.value(in[0]);
        Tensor& buf = tp.grad_buffer(in[0]);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * dfdx(x[i], out[i]);
      },
      name);
}
}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape({a, b}, "add");
  return t.record(
      {a.id(), b.id()},
      [](const Tape& tp, std::span<const std::size_t> in) { return kernels::add(tp.value(in[0]), tp.value(in[1])); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        detail::accumulate(tp, in[0], g);
        detail::accumulate(tp, in[1], g);
      },
      "add");
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape({a, b}, "sub");
  return t.record(
      {a.id(), b.id()},
      [](const Tape& tp, std::span<const std::size_t> in) { return kernels::sub(tp.value(in[0]), tp.value(in[1])); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        detail::accumulate(tp, in[0], g);
        detail::accumulate(tp, in[1], kernels::scale(g, -1.0));
      },
      "sub");
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape({a, b}, "mul");
  return t.record(
      {a.id(), b.id()},
      [](const Tape& tp, std::span<const std::size_t> in) { return kernels::mul(tp.value(in[0]), tp.value(in[1])); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        detail::accumulate(tp, in[0], kernels::mul(g, tp.value(in[1])));
        detail::accumulate(tp, in[1], kernels::mul(g, tp.value(in[0])));
      },
      "mul");
}

/// Multiplies by a constant scalar.
inline Var scale(Var a, double s) {
  return a.tape().record(
      {a.id()}, [s](const Tape& tp, std::span<const std::size_t> in) { return kernels::scale(tp.value(in[0]), s); },
      [s](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        detail::accumulate(tp, in[0], kernels::scale(g, s));
      },
      "scale");
}

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape({a, b}, "matmul");
  return t.record(
      {a.id(), b.id()},
      [](const Tape& tp, std::span<const std::size_t> in) { return kernels::matmul(tp.value(in[0]), tp.value(in[1])); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        const Tensor& a = tp.value(in[0]);
        const Tensor& b = tp.value(in[1]);
        const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
        if (tp.requires_grad(in[0])) kernels::gemm_nt_acc(g.data(), b.data(), tp.grad_buffer(in[0]).data(), n, m, k);
        if (tp.requires_grad(in[1])) kernels::gemm_tn_acc(a.data(), g.data(), tp.grad_buffer(in[1]).data(), n, k, m);
      },
      "matmul");
}

/// x W + b, the bias broadcast over rows.
inline Var affine(Var x, Var w, Var b) {
  Tape& t = detail::same_tape({x, w, b}, "affine");
  return t.record(
      {x.id(), w.id(), b.id()},
      [](const Tape& tp, std::span<const std::size_t> in) {
        return kernels::affine(tp.value(in[0]), tp.value(in[1]), tp.value(in[2]));
      },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        const Tensor& x = tp.value(in[0]);
        const Tensor& w = tp.value(in[1]);
        const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
        if (tp.requires_grad(in[0])) kernels::gemm_nt_acc(g.data(), w.data(), tp.grad_buffer(in[0]).data(), n, m, k);
        if (tp.requires_grad(in[1])) kernels::gemm_tn_acc(x.data(), g.data(), tp.grad_buffer(in[1]).data(), n, k, m);
        if (tp.requires_grad(in[2])) {
          Tensor& db = tp.grad_buffer(in[2]);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) db[j] += g[i * m + j];
        }
      },
      "affine");
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = parts[0].tape();
  std::vector<std::size_t> ids;
  for (const Var& v : parts) {
    detail::same_tape({parts[0], v}, "concat_cols");
    ids.push_back(v.id());
  }
  return t.record(
      std::move(ids),
      [](const Tape& tp, std::span<const std::size_t> in) {
        std::vector<const Tensor*> ts;
        for (auto id : in) ts.push_back(&tp.value(id));
        return kernels::concat_cols(ts);
      },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor& out, const Tensor& g) {
        const std::size_t n = out.rows(), total = out.cols();
        std::size_t offset = 0;
        for (auto id : in) {
          const std::size_t w = tp.value(id).cols();
          if (tp.requires_grad(id)) {
            Tensor& buf = tp.grad_buffer(id);
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t c = 0; c < w; ++c) buf[r * w + c] += g[r * total + offset + c];
          }
          offset += w;
        }
      },
      "concat_cols");
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = parts[0].tape();
  std::vector<std::size_t> ids;
  for (const Var& v : parts) {
    detail::same_tape({parts[0], v}, "concat_rows");
    ids.push_back(v.id());
  }
  return t.record(
      std::move(ids),
      [](const Tape& tp, std::span<const std::size_t> in) {
        std::vector<const Tensor*> ts;
        for (auto id : in) ts.push_back(&tp.value(id));
        return kernels::concat_rows(ts);
      },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        std::size_t offset = 0;
        for (auto id : in) {
          const std::size_t n = tp.value(id).size();
          if (tp.requires_grad(id)) {
            Tensor& buf = tp.grad_buffer(id);
            for (std::size_t i = 0; i < n; ++i) buf[i] += g[offset + i];
          }
          offset += n;
        }
      },
      "concat_rows");
}

inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  auto shared = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return x.tape().record(
      {x.id()},
      [shared](const Tape& tp, std::span<const std::size_t> in) {
        return kernels::gather_rows(tp.value(in[0]), *shared);
      },
      [shared](Tape& tp, std::span<const std::size_t> in, const Tensor& out, const Tensor& g) {
        if (!tp.requires_grad(in[0])) return;
        Tensor& buf = tp.grad_buffer(in[0]);
        const std::size_t m = out.cols();
        for (std::size_t i = 0; i < shared->size(); ++i) {
          const std::size_t r = (*shared)[i];
          for (std::size_t c = 0; c < m; ++c) buf[r * m + c] += g[i * m + c];
        }
      },
      "gather_rows");
}

inline Var reshape(Var x, Shape shape) {
  return x.tape().record(
      {x.id()}, [shape](const Tape& tp, std::span<const std::size_t> in) { return tp.value(in[0]).reshaped(shape); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) { detail::accumulate(tp, in[0], g); },
      "reshape");
}

inline Var row_softmax(Var x) {
  return x.tape().record(
      {x.id()}, [](const Tape& tp, std::span<const std::size_t> in) { return kernels::row_softmax(tp.value(in[0])); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor& y, const Tensor& g) {
        if (!tp.requires_grad(in[0])) return;
        Tensor& buf = tp.grad_buffer(in[0]);
        const std::size_t m = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * y[r * m + c];
          for (std::size_t c = 0; c < m; ++c) buf[r * m + c] += y[r * m + c] * (g[r * m + c] - dot);
        }
      },
      "row_softmax");
}

inline Var sin(Var x) {
  return detail::unary(x, "sin", [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

inline Var cos(Var x) {
  return detail::unary(x, "cos", [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

inline Var relu(Var x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var x) {
  return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw NumericError("log: argument " + std::to_string(v) + " is not positive");
  }
  return detail::unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Sum of all elements, shape (1).
inline Var sum(Var x) {
  return x.tape().record(
      {x.id()},
      [](const Tape& tp, std::span<const std::size_t> in) { return Tensor::scalar(kernels::sum(tp.value(in[0]))); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        if (!tp.requires_grad(in[0])) return;
        for (auto& v : tp.grad_buffer(in[0]).data()) v += g[0];
      },
      "sum");
}

/// Mean of all elements, shape (1).
inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Column-wise mean over rows: (n, m) -> (1, m).
inline Var mean_rows(Var x) {
  return x.tape().record(
      {x.id()}, [](const Tape& tp, std::span<const std::size_t> in) { return kernels::mean_rows(tp.value(in[0])); },
      [](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        if (!tp.requires_grad(in[0])) return;
        Tensor& buf = tp.grad_buffer(in[0]);
        const std::size_t n = buf.rows(), m = buf.cols();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < m; ++c) buf[r * m + c] += g[c] * inv;
      },
      "mean_rows");
}

/// Row-wise layer normalisation with learned gain and shift of shape (1, m).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::same_tape({x, gamma, beta}, "layer_norm");
  return t.record(
      {x.id(), gamma.id(), beta.id()},
      [eps](const Tape& tp, std::span<const std::size_t> in) {
        const Tensor& x = tp.value(in[0]);
        const Tensor& ga = tp.value(in[1]);
        const Tensor& be = tp.value(in[2]);
        const std::size_t m = x.cols();
        if (ga.size() != m || be.size() != m) {
          throw ShapeError("layer_norm: x " + to_string(x.shape()) + ", gamma " + to_string(ga.shape()) + ", beta " +
                           to_string(be.shape()));
        }
        Tensor out(x.shape());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto row = x.row(r);
          double mu = 0.0;
          for (double v : row) mu += v;
          mu /= static_cast<double>(m);
          double var = 0.0;
          for (double v : row) var += (v - mu) * (v - mu);
          var /= static_cast<double>(m);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (std::size_t c = 0; c < m; ++c) out(r, c) = (row[c] - mu) * inv * ga[c] + be[c];
        }
        return out;
      },
      [eps](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        const Tensor& x = tp.value(in[0]);
        const Tensor& ga = tp.value(in[1]);
        const std::size_t m = x.cols();
        const double md = static_cast<double>(m);
        std::vector<double> xhat(m), dxhat(m);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto row = x.row(r);
          double mu = 0.0;
          for (double v : row) mu += v;
          mu /= md;
          double var = 0.0;
          for (double v : row) var += (v - mu) * (v - mu);
          var /= md;
          const double inv = 1.0 / std::sqrt(var + eps);
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t c = 0; c < m; ++c) {
            xhat[c] = (row[c] - mu) * inv;
            dxhat[c] = g[r * m + c] * ga[c];
            sum_d += dxhat[c];
            sum_dx += dxhat[c] * xhat[c];
          }
          if (tp.requires_grad(in[0])) {
            Tensor& bx = tp.grad_buffer(in[0]);
            for (std::size_t c = 0; c < m; ++c) bx[r * m + c] += inv / md * (md * dxhat[c] - sum_d - xhat[c] * sum_dx);
          }
          if (tp.requires_grad(in[1])) {
            Tensor& bg = tp.grad_buffer(in[1]);
            for (std::size_t c = 0; c < m; ++c) bg[c] += g[r * m + c] * xhat[c];
          }
          if (tp.requires_grad(in[2])) {
            Tensor& bb = tp.grad_buffer(in[2]);
            for (std::size_t c = 0; c < m; ++c) bb[c] += g[r * m + c];
          }
        }
      },
      "layer_norm");
}

/// Multi-head scaled dot-product attention restricted to a sparsity pattern.
///
/// q is (queries x d); k and v are (keys x d); d is split into `heads` equal
/// slices. A query with no keys produces a zero row. When `trace` is given it
/// receives the softmax weights of the forward pass.
inline Var sparse_attention(Var q, Var k, Var v, std::shared_ptr<const AttentionPattern> pattern, std::size_t heads,
                            AttentionTrace* trace = nullptr) {
  Tape& t = detail::same_tape({q, k, v}, "sparse_attention");
  const std::size_t d = q.value().cols();
  if (q.value().rank() != 2 || k.value().rank() != 2 || v.value().rank() != 2 || k.value().cols() != d ||
      v.value().cols() != d || k.value().rows() != v.value().rows()) {
    throw ShapeError("sparse_attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                     to_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("sparse_attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  if (pattern->num_queries() != q.value().rows() || pattern->num_keys != k.value().rows()) {
    throw ShapeError("sparse_attention: pattern is " + std::to_string(pattern->num_queries()) + "x" +
                     std::to_string(pattern->num_keys) + " but operands are " + std::to_string(q.value().rows()) +
                     "x" + std::to_string(k.value().rows()));
  }
  auto weights = std::make_shared<std::vector<double>>();
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  auto forward = [pattern, heads, dh, d, scl, weights](const Tape& tp, std::span<const std::size_t> in) {
    const Tensor& Q = tp.value(in[0]);
    const Tensor& K = tp.value(in[1]);
    const Tensor& V = tp.value(in[2]);
    const auto& P = *pattern;
    Tensor out(Shape{Q.rows(), d});
    weights->assign(P.keys.size() * heads, 0.0);
    std::vector<double> s;
    for (std::size_t qi = 0; qi < P.num_queries(); ++qi) {
      const std::size_t b = P.offsets[qi], e = P.offsets[qi + 1];
      if (b == e) continue;
      s.resize(e - b);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        double mx = -INFINITY;
        for (std::size_t j = b; j < e; ++j) {
          double dot = 0.0;
          const std::size_t kj = P.keys[j];
          for (std::size_t c = 0; c < dh; ++c) dot += Q(qi, off + c) * K(kj, off + c);
          s[j - b] = dot * scl;
          mx = std::max(mx, s[j - b]);
        }
        double z = 0.0;
        for (auto& sv : s) {
          sv = std::exp(sv - mx);
          z += sv;
        }
        for (std::size_t j = b; j < e; ++j) {
          const double a = s[j - b] / z;
          (*weights)[j * heads + h] = a;
          const std::size_t kj = P.keys[j];
          for (std::size_t c = 0; c < dh; ++c) out(qi, off + c) += a * V(kj, off + c);
        }
      }
    }
    return out;
  };

  auto backward = [pattern, heads, dh, scl, weights](Tape& tp, std::span<const std::size_t> in, const Tensor&,
                                                     const Tensor& g) {
    const Tensor& Q = tp.value(in[0]);
    const Tensor& K = tp.value(in[1]);
    const Tensor& V = tp.value(in[2]);
    const auto& P = *pattern;
    Tensor* gq = tp.requires_grad(in[0]) ? &tp.grad_buffer(in[0]) : nullptr;
    Tensor* gk = tp.requires_grad(in[1]) ? &tp.grad_buffer(in[1]) : nullptr;
    Tensor* gv = tp.requires_grad(in[2]) ? &tp.grad_buffer(in[2]) : nullptr;
    const std::size_t d = Q.cols();
    std::vector<double> da;
    for (std::size_t qi = 0; qi < P.num_queries(); ++qi) {
      const std::size_t b = P.offsets[qi], e = P.offsets[qi + 1];
      if (b == e) continue;
      da.resize(e - b);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        double dot_ada = 0.0;
        for (std::size_t j = b; j < e; ++j) {
          const std::size_t kj = P.keys[j];
          const double a = (*weights)[j * heads + h];
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            const double go = g[qi * d + off + c];
            acc += go * V(kj, off + c);
            if (gv) (*gv)[kj * d + off + c] += a * go;
          }
          da[j - b] = acc;
          dot_ada += a * acc;
        }
        for (std::size_t j = b; j < e; ++j) {
          const std::size_t kj = P.keys[j];
          const double ds = (*weights)[j * heads + h] * (da[j - b] - dot_ada) * scl;
          if (ds == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c) {
            if (gq) (*gq)[qi * d + off + c] += ds * K(kj, off + c);
            if (gk) (*gk)[kj * d + off + c] += ds * Q(qi, off + c);
          }
        }
      }
    }
  };

  Var out = t.record({q.id(), k.id(), v.id()}, std::move(forward), std::move(backward), "sparse_attention");
  if (trace) {
    trace->weights = *weights;
    trace->heads = heads;
  }
  return out;
}

/// Replaces rows of `fallback` with rows of `primary` where take_primary[r] is set.
inline Var select_rows(const std::vector<bool>& take_primary, Var primary, Var fallback) {
  Tape& t = detail::same_tape({primary, fallback}, "select_rows");
  kernels::require_same_shape(primary.value(), fallback.value(), "select_rows");
  if (take_primary.size() != primary.value().rows()) throw ShapeError("select_rows: mask length mismatch");
  auto mask = std::make_shared<const std::vector<bool>>(take_primary);
  return t.record(
      {primary.id(), fallback.id()},
      [mask](const Tape& tp, std::span<const std::size_t> in) {
        Tensor out = tp.value(in[1]);
        const Tensor& a = tp.value(in[0]);
        for (std::size_t r = 0; r < out.rows(); ++r)
          if ((*mask)[r]) std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
        return out;
      },
      [mask](Tape& tp, std::span<const std::size_t> in, const Tensor& out, const Tensor& g) {
        const std::size_t m = out.cols();
        for (int which = 0; which < 2; ++which) {
          if (!tp.requires_grad(in[which])) continue;
          Tensor& buf = tp.grad_buffer(in[which]);
          for (std::size_t r = 0; r < out.rows(); ++r) {
            if ((*mask)[r] != (which == 0)) continue;
            for (std::size_t c = 0; c < m; ++c) buf[r * m + c] += g[r * m + c];
          }
        }
      },
      "select_rows");
}

/// Mean over rows of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::vector<std::size_t> labels) {
  const Tensor& x = logits.value();
  if (x.rank() != 2 || labels.size() != x.rows()) {
    throw ShapeError("cross_entropy: logits " + to_string(x.shape()) + " with " + std::to_string(labels.size()) +
                     " labels");
  }
  for (auto l : labels) {
    if (l >= x.cols()) {
      throw RangeError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(x.cols()) + ")");
    }
  }
  auto lab = std::make_shared<const std::vector<std::size_t>>(std::move(labels));
  return logits.tape().record(
      {logits.id()},
      [lab](const Tape& tp, std::span<const std::size_t> in) {
        const Tensor& x = tp.value(in[0]);
        double total = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto row = x.row(r);
          const double mx = *std::max_element(row.begin(), row.end());
          double z = 0.0;
          for (double v : row) z += std::exp(v - mx);
          total += mx + std::log(z) - row[(*lab)[r]];
        }
        return Tensor::scalar(total / static_cast<double>(x.rows()));
      },
      [lab](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        if (!tp.requires_grad(in[0])) return;
        const Tensor& x = tp.value(in[0]);
        Tensor p = kernels::row_softmax(x);
        Tensor& buf = tp.grad_buffer(in[0]);
        const double inv = g[0] / static_cast<double>(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          for (std::size_t c = 0; c < x.cols(); ++c) {
            buf(r, c) += (p(r, c) - (c == (*lab)[r] ? 1.0 : 0.0)) * inv;
          }
        }
      },
      "cross_entropy");
}

/// Sum(mask * (pred - target)^2) / Sum(mask); zero with a warning when no
/// entry is valid.
inline Var masked_mse(Var pred, Tensor target, Tensor mask) {
  kernels::require_same_shape(pred.value(), target, "masked_mse");
  kernels::require_same_shape(pred.value(), mask, "masked_mse");
  const double denom = kernels::sum(mask);
  if (denom == 0.0) diag::warn("masked_mse: no valid targets");
  auto tm = std::make_shared<const std::pair<Tensor, Tensor>>(std::move(target), std::move(mask));
  return pred.tape().record(
      {pred.id()},
      [tm, denom](const Tape& tp, std::span<const std::size_t> in) {
        if (denom == 0.0) return Tensor::scalar(0.0);
        const Tensor& p = tp.value(in[0]);
        double s = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (tm->second[i] == 0.0) continue;
          const double r = p[i] - tm->first[i];
          s += tm->second[i] * r * r;
        }
        return Tensor::scalar(s / denom);
      },
      [tm, denom](Tape& tp, std::span<const std::size_t> in, const Tensor&, const Tensor& g) {
        if (denom == 0.0 || !tp.requires_grad(in[0])) return;
        const Tensor& p = tp.value(in[0]);
        Tensor& buf = tp.grad_buffer(in[0]);
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (tm->second[i] == 0.0) continue;
          buf[i] += g[0] * 2.0 * tm->second[i] * (p[i] - tm->first[i]) / denom;
        }
      },
      "masked_mse");
}

}  // namespace ops
}  // namespace timecheat
