#include "weakvoc/tensor.hpp"

#include <sstream>

namespace weakvoc {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(Eigen::VectorXd::Constant(shape_numel(shape_), fill)) {}

Tensor::Tensor(Shape shape, Eigen::VectorXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), Eigen::VectorXd(static_cast<Index>(values.size()))) {
  Index i = 0;
  for (double v : values) data_[i++] = v;
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t(Shape{m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Index Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on non-scalar shape " + shape_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix() {
  if (rank() == 1) return {data_.data(), 1, shape_[0]};
  if (rank() != 2) throw DimensionError("matrix view needs rank 2, got " + shape_string(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

ConstMatrixMap Tensor::matrix() const {
  if (rank() == 1) return {data_.data(), 1, shape_[0]};
  if (rank() != 2) throw DimensionError("matrix view needs rank 2, got " + shape_string(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

MatrixMap Tensor::as_matrix(Index rows) {
  if (rows <= 0 || size() % rows != 0) {
    throw DimensionError("cannot view " + shape_string(shape_) + " with " + std::to_string(rows) + " rows");
  }
  return {data_.data(), rows, size() / rows};
}

ConstMatrixMap Tensor::as_matrix(Index rows) const {
  if (rows <= 0 || size() % rows != 0) {
    throw DimensionError("cannot view " + shape_string(shape_) + " with " + std::to_string(rows) + " rows");
  }
  return {data_.data(), rows, size() / rows};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace weakvoc
