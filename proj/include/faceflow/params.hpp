#pragma once

#include <string>
#include <vector>

#include "faceflow/dense.hpp"

namespace faceflow {

// Named view of one trainable tensor. Eigen dense storage is contiguous
// column-major, so a (data, rows, cols) triple is enough for the optimizer,
// finite-difference checks and checkpoint serialization to walk every
// parameter uniformly.
template <class Scalar>
struct TensorRef {
  std::string name;
  Scalar* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  Eigen::Map<MatX<Scalar>> map() const {
    return Eigen::Map<MatX<Scalar>>(data, rows, cols);
  }
};

template <class Scalar>
TensorRef<Scalar> tensor_ref(std::string name, MatX<Scalar>& m) {
  return {std::move(name), m.data(), m.rows(), m.cols()};
}

template <class Scalar>
TensorRef<Scalar> tensor_ref(std::string name, VecX<Scalar>& v) {
  return {std::move(name), v.data(), v.rows(), 1};
}

template <class Scalar>
using TensorRefs = std::vector<TensorRef<Scalar>>;

}  // namespace faceflow
