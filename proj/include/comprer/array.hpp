#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "comprer/error.hpp"

namespace comprer {

using Shape = std::vector<std::size_t>;

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = RowMatrix<double>;
using VectorXd = Vector<double>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major n-dimensional array. A rank-0 array (empty shape) holds a
/// single scalar. Two-dimensional views go through matrix(), which treats the
/// leading axis as rows and flattens the rest.
template <class Scalar>
class BasicArray {
 public:
  using scalar_type = Scalar;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  BasicArray() : data_(Vector<Scalar>::Zero(1)) {}

  explicit BasicArray(Shape shape) : shape_(std::move(shape)) {
    check_dims();
    data_ = Vector<Scalar>::Zero(static_cast<Eigen::Index>(shape_size(shape_)));
  }

  BasicArray(Shape shape, Vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (static_cast<std::size_t>(data_.size()) != shape_size(shape_)) {
      throw DimensionError("array data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  template <class Derived>
  static BasicArray from_matrix(const Eigen::MatrixBase<Derived>& m) {
    BasicArray out({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    out.matrix() = m;
    return out;
  }

  static BasicArray full(Shape shape, Scalar value) {
    BasicArray out(std::move(shape));
    out.data_.setConstant(value);
    return out;
  }

  static BasicArray scalar(Scalar value) {
    BasicArray out;
    out.data_[0] = value;
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  Vector<Scalar>& values() { return data_; }
  const Vector<Scalar>& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on array of shape " + shape_string(shape_));
    return data_[0];
  }

  Eigen::Index rows() const { return shape_.empty() ? 1 : static_cast<Eigen::Index>(shape_[0]); }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(size()) / std::max<Eigen::Index>(rows(), 1); }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  BasicArray reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicArray(std::move(shape), data_);
  }

  template <class To>
  BasicArray<To> cast() const {
    return BasicArray<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.allFinite(); }

  /// Exact (bitwise for non-NaN values) equality of shape and contents.
  friend bool operator==(const BasicArray& a, const BasicArray& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("array dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Vector<Scalar> data_;
};

using Array = BasicArray<double>;
using ArrayF = BasicArray<float>;

}  // namespace comprer
