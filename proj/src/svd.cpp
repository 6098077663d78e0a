#include "genlora/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace genlora {
namespace {

constexpr int kMaxSweeps = 60;
constexpr double kConvergenceTol = 1e-14;  // relative off-diagonal threshold

// Hestenes one-sided Jacobi on a tall-or-square working copy (rows >= cols).
// Columns of `work` converge to U * diag(S); rotations accumulate into V.
void hestenes(Matrix& work, Matrix& v) {
  const Index n = work.cols();
  v = Matrix::Identity(n, n);
  if (n < 2) {
    return;
  }
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double app = work.col(p).squaredNorm();
        const double aqq = work.col(q).squaredNorm();
        const double apq = work.col(p).dot(work.col(q));
        // separate square roots keep the threshold out of underflow
        const double norm_product = std::sqrt(app) * std::sqrt(aqq);
        if (norm_product == 0.0 || std::abs(apq) <= kConvergenceTol * norm_product) {
          continue;
        }
        rotated = true;
        // classic stable rotation formulas
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        // right-multiply by the rotation in the (p, q) plane
        for (Index i = 0; i < work.rows(); ++i) {
          const double wp = work(i, p);
          const double wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (Index i = 0; i < n; ++i) {
          const double vp = v(i, p);
          const double vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) {
      return;
    }
  }
  throw NumericalError("svd: one-sided Jacobi did not converge within 60 sweeps");
}

// Replaces zero-norm columns of `u` with unit vectors orthogonal to the
// existing ones, chosen deterministically from the canonical basis.
void complete_basis(Matrix& u, const std::vector<Index>& null_cols) {
  const Index m = u.rows();
  Index candidate = 0;
  for (Index col : null_cols) {
    for (; candidate <= m; ++candidate) {
      if (candidate == m) {
        throw NumericalError("svd: failed to complete orthonormal basis");
      }
      Vector e = Vector::Zero(m);
      e[candidate] = 1.0;
      // two rounds of Gram-Schmidt for orthogonality near machine precision
      for (int round = 0; round < 2; ++round) {
        for (Index j = 0; j < u.cols(); ++j) {
          if (j != col) {
            e -= u.col(j).dot(e) * u.col(j);
          }
        }
      }
      const double norm = e.norm();
      if (norm > 0.5) {
        u.col(col) = e / norm;
        ++candidate;
        break;
      }
    }
  }
}

}  // namespace

SvdResult svd(const Eigen::Ref<const Matrix>& m) {
  require_finite(m, "svd");
  const bool transposed = m.rows() < m.cols();
  Matrix work = transposed ? Matrix(m.transpose()) : Matrix(m);
  const Index k = work.cols();

  // scale so column norms cannot overflow; singular values scale back
  const double scale = work.cwiseAbs().maxCoeff();
  if (scale > 0.0) {
    work /= scale;
  }

  Matrix v;
  hestenes(work, v);

  Vector sigma(k);
  Matrix u(work.rows(), k);
  std::vector<Index> null_cols;
  for (Index j = 0; j < k; ++j) {
    sigma[j] = work.col(j).norm();
    if (sigma[j] > 0.0) {
      u.col(j) = work.col(j) / sigma[j];
      sigma[j] *= scale;
    } else {
      u.col(j).setZero();
      null_cols.push_back(j);
    }
  }
  complete_basis(u, null_cols);

  // sort descending, stable on ties
  std::vector<Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return sigma[a] > sigma[b]; });

  SvdResult result;
  result.singular_values.resize(k);
  result.left_vectors.resize(u.rows(), k);
  result.right_vectors.resize(v.rows(), k);
  for (Index j = 0; j < k; ++j) {
    result.singular_values[j] = sigma[order[j]];
    result.left_vectors.col(j) = u.col(order[j]);
    result.right_vectors.col(j) = v.col(order[j]);
  }
  if (transposed) {
    std::swap(result.left_vectors, result.right_vectors);
  }
  return result;
}

}  // namespace genlora
