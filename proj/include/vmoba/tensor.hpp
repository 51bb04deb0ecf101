#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vmoba {

enum class Dtype : std::uint32_t { f32 = 0, f64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::f64;
};

using Shape = std::vector<std::size_t>;

// Product of extents with overflow checking; an empty shape is a scalar and
// has one element. Throws std::invalid_argument on overflow.
std::size_t shape_numel(const Shape& shape);

// "3x4x5" for rank-3, "scalar" for rank-0. Used in error messages.
std::string shape_to_string(const Shape& shape);

// Dense row-major tensor over f32 or f64. All entries are finite: the
// data-taking constructor validates, and every public op validates what it
// returns. Zero extents are allowed (the tensor is then empty).
template <typename T>
class TensorT {
 public:
  // Scalar zero.
  TensorT() : shape_{}, data_(1, T{}) {}

  // Zero-filled tensor of the given shape.
  explicit TensorT(Shape shape);

  // Takes ownership of data; length must equal the shape's element count and
  // every value must be finite.
  TensorT(Shape shape, std::vector<T> data);

  static TensorT scalar(T v) { return TensorT(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const;

  // Rank-2 accessors; throw std::invalid_argument on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> flat() { return {data_.data(), data_.size()}; }
  std::span<const T> flat() const { return {data_.data(), data_.size()}; }

  bool all_finite() const;
  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Throws std::domain_error naming `op` if any entry of t is NaN or infinite.
template <typename T>
void ensure_finite(const TensorT<T>& t, const char* op);

// c[i][j] = sum over p of a[i][p] * b[p][j], accumulated in ascending p for
// every element, parallel only across rows of c. Throws std::invalid_argument
// with both shapes spelled out when the inner extents disagree.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// out[i] = exp(scale*v[i] - m) / sum_j exp(scale*v[j] - m) with
// m = max_i scale*v[i]. v must be rank-1 and non-empty.
template <typename T>
TensorT<T> stable_softmax(const TensorT<T>& v, T scale);

// Rank-2 transpose.
template <typename T>
TensorT<T> transpose(const TensorT<T>& m);

// Copy of columns [first, first + count) of a rank-2 tensor; used to carve
// per-head views out of packed projections.
template <typename T>
TensorT<T> column_slice(const TensorT<T>& m, std::size_t first,
                        std::size_t count);

extern template class TensorT<float>;
extern template class TensorT<double>;
extern template void ensure_finite(const TensorT<float>&, const char*);
extern template void ensure_finite(const TensorT<double>&, const char*);
extern template TensorT<float> matmul(const TensorT<float>&,
                                      const TensorT<float>&);
extern template TensorT<double> matmul(const TensorT<double>&,
                                       const TensorT<double>&);
extern template TensorT<float> stable_softmax(const TensorT<float>&, float);
extern template TensorT<double> stable_softmax(const TensorT<double>&, double);
extern template TensorT<float> transpose(const TensorT<float>&);
extern template TensorT<double> transpose(const TensorT<double>&);

}  // namespace vmoba
