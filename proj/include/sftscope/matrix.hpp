#pragma once

#include <Eigen/Dense>

namespace sftscope {

/// Row-major double matrix; tensors are stored as float32 on disk and widened
/// to double on load.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace sftscope
