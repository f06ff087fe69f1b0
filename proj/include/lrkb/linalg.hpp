#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

namespace lrkb {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using SparseMat = Eigen::SparseMatrix<double>;

inline void resymmetrize(MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

/// Thrown when a weighted QR drops every input column, leaving no basis.
struct EmptyBasis : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown when a rank-R truncation asks for more directions than the
/// factored matrix can supply.
struct RankExceedsWidth : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Symmetric PSD square root by eigendecomposition. Eigenvalues below
/// 1e-12 * lambda_max are clamped to zero, so slightly indefinite inputs
/// (e.g. covariance iterates polluted by roundoff) are handled.
inline MatrixXd sym_sqrt_psd(const MatrixXd& m, double rel_tol = 1e-12) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("sym_sqrt_psd: eigendecomposition failed");
  VectorXd lam = es.eigenvalues();
  const double floor = rel_tol * std::max(0.0, lam.maxCoeff());
  for (Index i = 0; i < lam.size(); ++i)
    lam[i] = lam[i] > floor ? std::sqrt(lam[i]) : 0.0;
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

/// Factor L with L L^T = m, for sampling N(0, m). Cholesky when positive
/// definite, eigendecomposition fallback for semidefinite inputs.
inline MatrixXd gaussian_factor(const MatrixXd& m) {
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  return sym_sqrt_psd(m);
}

struct ThinQr {
  MatrixXd Q;
  MatrixXd R;
};

/// Thin QR with positive diagonal of R, so the factorization is unique and
/// runs are reproducible. `fix_signs = false` leaves Householder signs alone
/// (used by the full-rank R = d comparisons that start from U = I).
inline ThinQr orthonormalize(const MatrixXd& v, bool fix_signs = true) {
  Eigen::HouseholderQR<MatrixXd> qr(v);
  const Index r = std::min(v.rows(), v.cols());
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(v.rows(), r);
  MatrixXd rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  if (fix_signs) {
    for (Index j = 0; j < r; ++j) {
      if (rr(j, j) < 0.0) {
        q.col(j) = -q.col(j);
        rr.row(j) = -rr.row(j);
      }
    }
  }
  return {std::move(q), std::move(rr)};
}

struct WeightedQr {
  MatrixXd Q;                   // kept columns, Q^T W Q = I
  MatrixXd R;                   // coefficients: V approx Q * R (kept rows)
  std::vector<Index> dropped;   // input columns dropped as numerically dependent
};

/// Gram-Schmidt with one reorthogonalization pass in the inner product
/// <x, y> = x^T W y, W SPD (finite element mass matrix; identity for
/// Euclidean geometry). Columns whose residual W-norm falls below drop_tol
/// times the input column W-norm are dropped and reported.
template <typename WOp>
inline WeightedQr weighted_qr_impl(const MatrixXd& v, const WOp& apply_w,
                                   double drop_tol) {
  const Index n = v.rows(), k = v.cols();
  WeightedQr out;
  out.Q.resize(n, k);
  out.R = MatrixXd::Zero(k, k);
  Index kept = 0;
  for (Index j = 0; j < k; ++j) {
    VectorXd q = v.col(j);
    const double in_norm = std::sqrt(std::max(0.0, q.dot(apply_w(q))));
    for (int pass = 0; pass < 2 && kept > 0; ++pass) {
      const VectorXd wq = apply_w(q);
      const VectorXd c = out.Q.leftCols(kept).transpose() * wq;
      q -= out.Q.leftCols(kept) * c;
      out.R.col(j).head(kept) += c;
    }
    const double nrm = std::sqrt(std::max(0.0, q.dot(apply_w(q))));
    if (nrm <= drop_tol * in_norm || nrm == 0.0) {
      out.dropped.push_back(j);
      continue;
    }
    out.Q.col(kept) = q / nrm;
    out.R(kept, j) = nrm;
    ++kept;
  }
  if (kept == 0 && k > 0)
    throw EmptyBasis("weighted_qr: all input columns are numerically dependent");
  out.Q.conservativeResize(n, kept);
  out.R.conservativeResize(kept, k);
  return out;
}

inline WeightedQr weighted_qr(const MatrixXd& v,
                              const Eigen::SparseMatrix<double>& w,
                              double drop_tol = 1e-10) {
  return weighted_qr_impl(v, [&](const VectorXd& x) { return VectorXd(w * x); },
                          drop_tol);
}

inline WeightedQr weighted_qr(const MatrixXd& v, double drop_tol = 1e-10) {
  return weighted_qr_impl(v, [](const VectorXd& x) { return x; }, drop_tol);
}

struct TruncatedSvd {
  MatrixXd rotation;   // q x R, orthonormal columns
  VectorXd values;     // R singular values, descending
  MatrixXd V;          // P x R, orthonormal columns
  VectorXd tail;       // discarded singular values R+1..min(P,q), descending
};

/// Rank-R truncation of Y (P x q): Y ~ V * diag(values) * rotation^T.
/// Column signs are fixed by the largest-magnitude entry of each rotation
/// column for reproducibility. Requires R <= min(P, q).
inline TruncatedSvd truncate_svd(const MatrixXd& y, Index rank) {
  Eigen::BDCSVD<MatrixXd> svd(y, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Index r = rank;
  if (r > svd.singularValues().size())
    throw RankExceedsWidth("truncate_svd: requested rank exceeds matrix width");
  TruncatedSvd out;
  out.rotation = svd.matrixV().leftCols(r);
  out.values = svd.singularValues().head(r);
  out.V = svd.matrixU().leftCols(r);
  out.tail = svd.singularValues().tail(svd.singularValues().size() - r);
  for (Index j = 0; j < r; ++j) {
    Index imax = 0;
    out.rotation.col(j).cwiseAbs().maxCoeff(&imax);
    if (out.rotation(imax, j) < 0.0) {
      out.rotation.col(j) = -out.rotation.col(j);
      out.V.col(j) = -out.V.col(j);
    }
  }
  return out;
}

}  // namespace lrkb
