#pragma once

#include <Eigen/Dense>

namespace faceflow {

template <class Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatXd = MatX<double>;
using VecXd = VecX<double>;

inline constexpr double kLog2Pi = 1.8378770664093454836;

// LeakyReLU slope shared by coupling nets and conditioning projections.
inline constexpr double kLeakySlope = 0.01;

template <class Scalar>
MatX<Scalar> leaky_relu(const MatX<Scalar>& a) {
  return a.array().max(a.array() * Scalar(kLeakySlope)).matrix();
}

// Derivative of LeakyReLU evaluated at the pre-activation.
template <class Scalar>
MatX<Scalar> leaky_relu_grad(const MatX<Scalar>& a) {
  return (a.array() > Scalar(0))
      .select(MatX<Scalar>::Ones(a.rows(), a.cols()),
              MatX<Scalar>::Constant(a.rows(), a.cols(), Scalar(kLeakySlope)));
}

}  // namespace faceflow
