#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include "bvit/errors.hpp"

namespace bvit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor. Most of the engine works on rank-2 views
/// (tokens x channels); images are rank-4 (batch, H, W, C).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{}) { return Tensor({rows, cols}, fill); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const {
    require_rank2();
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2();
    return shape_[1];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void require_rank2() const {
    if (shape_.size() != 2) throw ShapeError("expected a 2-D tensor, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

using FloatTensor = Tensor<float>;

template <class U, class T>
Tensor<U> cast(const Tensor<T>& x) {
  std::vector<U> out(x.size());
  std::transform(x.storage().begin(), x.storage().end(), out.begin(), [](T v) { return static_cast<U>(v); });
  return Tensor<U>(x.shape(), std::move(out));
}

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

/// c = a * b for a (m x k), b (k x n).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dims " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c = Tensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a(i, p);
      if (aip == T{}) continue;
      const T* bp = &b(p, 0);
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

/// c = a^T * b for a (k x m), b (k x n).
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor<T> c = Tensor<T>::matrix(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = &a(p, 0);
    const T* bp = &b(p, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const T aip = ap[i];
      if (aip == T{}) continue;
      T* ci = &c(i, 0);
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

/// Transpose of a 2-D tensor.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  Tensor<T> t = Tensor<T>::matrix(x.cols(), x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) t(c, r) = x(r, c);
  return t;
}

/// c = a * b^T for a (m x k), b (n x k).
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return matmul(a, transpose(b));
}

template <class T>
Tensor<T>& add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.size() == b.size(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

template <class T>
Tensor<T> add(Tensor<T> a, const Tensor<T>& b) {
  add_inplace(a, b);
  return a;
}

/// Adds a per-column vector to every row of a 2-D tensor.
template <class T>
Tensor<T> add_row_vector(Tensor<T> x, std::span<const std::type_identity_t<T>> v) {
  detail::require(x.cols() == v.size(), "add_row_vector: " + shape_str(x.shape()) + " vs " + std::to_string(v.size()));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < v.size(); ++c) row[c] += v[c];
  }
  return x;
}

/// Column sums of a 2-D tensor, accumulated into `out`.
template <class T>
void accumulate_column_sums(const Tensor<T>& x, Tensor<T>& out) {
  detail::require(out.size() == x.cols(), "column sums: size mismatch");
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
}

/// Copies columns [col0, col0 + ncols) of rows [row0, row0 + nrows).
template <class T>
Tensor<T> block(const Tensor<T>& x, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
  detail::require(row0 + nrows <= x.rows() && col0 + ncols <= x.cols(), "block out of range");
  Tensor<T> out = Tensor<T>::matrix(nrows, ncols);
  for (std::size_t r = 0; r < nrows; ++r)
    std::copy_n(&x(row0 + r, col0), ncols, &out(r, 0));
  return out;
}

template <class T>
void add_block(Tensor<T>& x, std::size_t row0, std::size_t col0, const Tensor<T>& b) {
  detail::require(row0 + b.rows() <= x.rows() && col0 + b.cols() <= x.cols(), "add_block out of range");
  for (std::size_t r = 0; r < b.rows(); ++r)
    for (std::size_t c = 0; c < b.cols(); ++c) x(row0 + r, col0 + c) += b(r, c);
}

template <class T>
void set_block(Tensor<T>& x, std::size_t row0, std::size_t col0, const Tensor<T>& b) {
  detail::require(row0 + b.rows() <= x.rows() && col0 + b.cols() <= x.cols(), "set_block out of range");
  for (std::size_t r = 0; r < b.rows(); ++r) std::copy_n(&b(r, 0), b.cols(), &x(row0 + r, col0));
}

/// Numerically stable row-wise softmax of a 2-D tensor.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T z{};
    for (std::size_t c = 0; c < in.size(); ++c) z += (out[c] = std::exp(in[c] - mx));
    for (auto& v : out) v /= z;
  }
  return y;
}

/// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
template <class T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(y.shape());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = dy.row(r);
    T dot{};
    for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
    auto out = dx.row(r);
    for (std::size_t c = 0; c < yr.size(); ++c) out[c] = yr[c] * (gr[c] - dot);
  }
  return dx;
}

/// Learnable tensor with its gradient slot.
template <class T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  explicit Param(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
  Param(Shape shape, T fill) : value(shape, fill), grad(shape) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
  std::size_t size() const noexcept { return value.size(); }
};

}  // namespace bvit
