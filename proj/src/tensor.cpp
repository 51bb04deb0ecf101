#include "vmoba/tensor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "vmoba/parallel.hpp"

namespace vmoba {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e != 0 && n > std::numeric_limits<std::size_t>::max() / e) {
      throw std::invalid_argument("shape " + shape_to_string(shape) +
                                  " overflows the element count");
    }
    n *= e;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

template <typename T>
TensorT<T>::TensorT(Shape shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), T{}) {}

template <typename T>
TensorT<T>::TensorT(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument(
        "tensor data length " + std::to_string(data_.size()) +
        " does not match shape " + shape_to_string(shape_));
  }
  if (!all_finite()) {
    throw std::invalid_argument("tensor data contains NaN or infinity");
  }
}

template <typename T>
std::size_t TensorT<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for shape " +
                                shape_to_string(shape_));
  }
  return shape_[axis];
}

template <typename T>
std::size_t TensorT<T>::rows() const {
  if (shape_.size() != 2) {
    throw std::invalid_argument("expected a rank-2 tensor, got shape " +
                                shape_to_string(shape_));
  }
  return shape_[0];
}

template <typename T>
std::size_t TensorT<T>::cols() const {
  if (shape_.size() != 2) {
    throw std::invalid_argument("expected a rank-2 tensor, got shape " +
                                shape_to_string(shape_));
  }
  return shape_[1];
}

template <typename T>
bool TensorT<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void ensure_finite(const TensorT<T>& t, const char* op) {
  if (!t.all_finite()) {
    throw std::domain_error(std::string(op) +
                            " produced a NaN or infinite value");
  }
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes (a is " +
                                shape_to_string(a.shape()) + ", b is " +
                                shape_to_string(b.shape()) + ")");
  }
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  TensorT<T> c(Shape{m, n});
  // The p-then-j nest keeps b's rows contiguous; each c element still
  // accumulates in ascending p, matching a plain dot product term by term.
  parallel_for(m, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      T* crow = c.data() + i * n;
      const T* arow = a.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        T apv = arow[p];
        const T* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += apv * brow[j];
      }
    }
  });
  ensure_finite(c, "matmul");
  return c;
}

template <typename T>
TensorT<T> stable_softmax(const TensorT<T>& v, T scale) {
  if (v.ndim() != 1) {
    throw std::invalid_argument("stable_softmax: expected a rank-1 tensor, got " +
                                shape_to_string(v.shape()));
  }
  std::size_t n = v.numel();
  if (n == 0) {
    throw std::invalid_argument("stable_softmax: input is empty");
  }
  T m = scale * v[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, scale * v[i]);
  TensorT<T> out(Shape{n});
  T total = T{0};
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(scale * v[i] - m);
    total += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= total;
  ensure_finite(out, "stable_softmax");
  return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& m) {
  std::size_t r = m.rows(), c = m.cols();
  TensorT<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = m.at(i, j);
  }
  return out;
}

template <typename T>
TensorT<T> column_slice(const TensorT<T>& m, std::size_t first,
                        std::size_t count) {
  std::size_t r = m.rows(), c = m.cols();
  if (first + count > c) {
    throw std::invalid_argument("column_slice: range exceeds column count");
  }
  TensorT<T> out(Shape{r, count});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = m.at(i, first + j);
  }
  return out;
}

template class TensorT<float>;
template class TensorT<double>;
template void ensure_finite(const TensorT<float>&, const char*);
template void ensure_finite(const TensorT<double>&, const char*);
template TensorT<float> matmul(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> matmul(const TensorT<double>&, const TensorT<double>&);
template TensorT<float> stable_softmax(const TensorT<float>&, float);
template TensorT<double> stable_softmax(const TensorT<double>&, double);
template TensorT<float> transpose(const TensorT<float>&);
template TensorT<double> transpose(const TensorT<double>&);
template TensorT<float> column_slice(const TensorT<float>&, std::size_t,
                                     std::size_t);
template TensorT<double> column_slice(const TensorT<double>&, std::size_t,
                                      std::size_t);

}  // namespace vmoba
