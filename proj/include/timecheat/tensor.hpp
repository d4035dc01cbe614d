#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "timecheat/errors.hpp"

namespace timecheat {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Scalars have shape (1).
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + timecheat::to_string(shape_) + " holds " +
                       std::to_string(element_count(shape_)) + " elements but " +
                       std::to_string(data_.size()) + " values were given");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // 2-D views; a rank-1 tensor is treated as one row.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.size() >= 2 ? size() / shape_[0] : size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor of shape " + timecheat::to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw ShapeError("reshape: cannot view " + timecheat::to_string(shape_) + " as " + timecheat::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: empty shape");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + timecheat::to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must match.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Forward kernels. Each validates shapes and returns a fresh tensor; the
/// autodiff layer wraps them with gradient rules.
namespace kernels {

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
}

// C += A * B, A is n x k, B is k x m.
inline void gemm_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
                     std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A^T * B, A is k x n, B is k x m.
inline void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t k,
                        std::size_t n, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * n;
    const double* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T, A is n x k, B is m x k.
inline void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
                        std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * m + j] += s;
    }
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out(Shape{a.dim(0), b.dim(1)});
  gemm_acc(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

/// x W + b with b broadcast over rows; b has shape (m) or (1, m).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_matrix(x, "affine");
  require_matrix(w, "affine");
  if (x.dim(1) != w.dim(0) || b.size() != w.dim(1)) {
    throw ShapeError("affine: x " + to_string(x.shape()) + ", W " + to_string(w.shape()) + ", b " +
                     to_string(b.shape()));
  }
  const std::size_t n = x.dim(0), m = w.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) std::copy(b.data().begin(), b.data().end(), out.row(i).begin());
  gemm_acc(x.data(), w.data(), out.data(), n, x.dim(1), m);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out = a;
  for (auto& v : out.data()) v = f(v);
  return out;
}

/// Joins matrices along columns (axis 1); row counts must agree.
inline Tensor concat_cols(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t n = parts[0]->rows();
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    require_matrix(*p, "concat_cols");
    if (p->rows() != n) {
      throw ShapeError("concat_cols: row counts differ " + to_string(parts[0]->shape()) + " vs " + to_string(p->shape()));
    }
    total += p->cols();
  }
  Tensor out(Shape{n, total});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t offset = 0;
    for (const Tensor* p : parts) {
      auto src = p->row(i);
      std::copy(src.begin(), src.end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
      offset += p->cols();
    }
  }
  return out;
}

/// Stacks matrices along rows (axis 0); column counts must agree.
inline Tensor concat_rows(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t m = parts[0]->cols();
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    require_matrix(*p, "concat_rows");
    if (p->cols() != m) {
      throw ShapeError("concat_rows: column counts differ " + to_string(parts[0]->shape()) + " vs " +
                       to_string(p->shape()));
    }
    total += p->rows();
  }
  Tensor out(Shape{total, m});
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    std::copy(p->data().begin(), p->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p->size();
  }
  return out;
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_matrix(x, "gather_rows");
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Tensor out(Shape{index.size(), x.cols()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(index[i]) + " outside " + to_string(x.shape()));
    }
    auto src = x.row(index[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

/// Max-subtracted softmax over each row.
inline Tensor row_softmax(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (auto& v : row) v /= z;
  }
  return out;
}

inline double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s;
}

/// Column-wise mean over rows: (n, m) -> (1, m).
inline Tensor mean_rows(const Tensor& x) {
  require_matrix(x, "mean_rows");
  Tensor out(Shape{1, x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] += row[c];
  }
  for (auto& v : out.data()) v /= static_cast<double>(x.rows());
  return out;
}

}  // namespace kernels
}  // namespace timecheat
