#pragma once

#include <Eigen/Dense>

#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpr {

using Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s);

/// Dense row-major n-d array over an Eigen column vector.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(shape_size(shape_))) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw std::invalid_argument("tensor data size does not match shape " + shape_string(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor filled(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(Scalar v) { return filled({1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar item() const { return data_[0]; }

  Eigen::Map<RowMatrix> matrix(Index rows, Index cols) { return {data_.data(), rows, cols}; }
  Eigen::Map<const RowMatrix> matrix(Index rows, Index cols) const { return {data_.data(), rows, cols}; }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && (data_ == o.data_).all();
  }

 private:
  Shape shape_;
  Array data_;
};

}  // namespace cpr
