#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>

namespace pbench {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Cells x genes, row-major so one cell is one contiguous compressed row.
template <typename Scalar>
using SparseRowMatrix = Eigen::SparseMatrix<Scalar, Eigen::RowMajor, int>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;
using CountMatrix = SparseRowMatrix<double>;

using Seed = std::uint64_t;

}  // namespace pbench
