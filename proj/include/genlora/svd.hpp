#pragma once

#include "genlora/core.hpp"

namespace genlora {

/// Thin SVD: m = U * S.asDiagonal() * V^T with k = min(rows, cols) columns.
struct SvdResult {
  Vector singular_values;  // non-negative, sorted descending
  Matrix left_vectors;     // rows x k, column-orthonormal
  Matrix right_vectors;    // cols x k, column-orthonormal
};

/// One-sided Jacobi (Hestenes) SVD.
///
/// Cyclic column sweeps with a fixed pivot order keep the result bitwise
/// deterministic for a given input. Null directions are completed to an
/// orthonormal basis by Gram-Schmidt over canonical vectors, so U and V are
/// orthonormal even for rank-deficient input. Throws NumericalError if the
/// sweep cap (60) is hit before the off-diagonal test passes.
SvdResult svd(const Eigen::Ref<const Matrix>& m);

}  // namespace genlora
