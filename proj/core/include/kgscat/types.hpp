#pragma once

#include <Eigen/Dense>
#include <complex>

namespace kgscat {

using Real = double;
using Complex = std::complex<double>;
using Vec = Eigen::VectorXcd;
using RealVec = Eigen::VectorXd;
using Mat = Eigen::MatrixXcd;
using RealMat = Eigen::MatrixXd;

inline constexpr Complex kI{0.0, 1.0};
inline constexpr Real kPi = 3.14159265358979323846;

}  // namespace kgscat
