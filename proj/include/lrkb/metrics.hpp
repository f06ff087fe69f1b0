#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrkb/io.hpp"
#include "lrkb/linalg.hpp"

namespace lrkb {

struct NotPSD : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct MismatchedEnsembles : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NonPositiveData : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DimensionMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Uncertainty-aware error sqrt(|m - x|^2 + tr P).
inline double rmse(const VectorXd& m, double trace_P, const VectorXd& x) {
  if (m.size() != x.size())
    throw DimensionMismatch("rmse: mean/signal size mismatch");
  return std::sqrt((m - x).squaredNorm() + std::max(0.0, trace_P));
}

inline double rmse(const VectorXd& m, const MatrixXd& P, const VectorXd& x) {
  return rmse(m, P.trace(), x);
}

/// Time-integrated error (dt / T) sum_i series(i).
inline double irmse(const VectorXd& series, double dt, double T) {
  if (!(dt > 0.0) || !(T > 0.0))
    throw std::invalid_argument("irmse: dt and T must be positive");
  return dt / T * series.sum();
}

namespace metrics_detail {
inline double squared_norm(const VectorXd& v, const SparseMat* W) {
  return W ? v.dot(*W * v) : v.squaredNorm();
}
}  // namespace metrics_detail

/// Particle-averaged error sqrt((1/P) sum_p |x_p - x|^2), optionally in the
/// inner product induced by W (the FEM mass matrix).
inline double ensemble_rmse(const MatrixXd& ensemble, const VectorXd& x,
                            const SparseMat* W = nullptr) {
  if (ensemble.rows() != x.size() || ensemble.cols() < 1)
    throw MismatchedEnsembles("ensemble_rmse: bad ensemble shape");
  double total = 0.0;
  for (Eigen::Index p = 0; p < ensemble.cols(); ++p)
    total += metrics_detail::squared_norm(ensemble.col(p) - x, W);
  return std::sqrt(total / static_cast<double>(ensemble.cols()));
}

namespace metrics_detail {
// eigendecomposition with a PSD check; eigenvalues clamped at zero
inline void psd_eigen(const MatrixXd& P, MatrixXd& vectors, VectorXd& values,
                      const char* who) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig{
      MatrixXd(0.5 * (P + P.transpose()))};
  values = eig.eigenvalues();
  vectors = eig.eigenvectors();
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  if (values.minCoeff() < -1e-8 * scale)
    throw NotPSD(std::string(who) + ": matrix has negative eigenvalues");
  values = values.cwiseMax(0.0);
}
}  // namespace metrics_detail

/// 2-Wasserstein distance between Gaussians,
/// sqrt(|m1-m2|^2 + tr(P1 + P2 - 2 (P1^{1/2} P2 P1^{1/2})^{1/2})).
inline double gaussian_w2(const VectorXd& m1, const MatrixXd& P1,
                          const VectorXd& m2, const MatrixXd& P2) {
  if (m1.size() != m2.size() || P1.rows() != m1.size() ||
      P2.rows() != m2.size() || P1.rows() != P1.cols() ||
      P2.rows() != P2.cols())
    throw DimensionMismatch("gaussian_w2: incompatible shapes");
  MatrixXd V1, V2, Vin;
  VectorXd l1, l2, lin;
  metrics_detail::psd_eigen(P1, V1, l1, "gaussian_w2");
  metrics_detail::psd_eigen(P2, V2, l2, "gaussian_w2");
  const MatrixXd sqrt1 =
      V1 * l1.cwiseSqrt().asDiagonal() * V1.transpose();
  metrics_detail::psd_eigen(MatrixXd(sqrt1 * P2 * sqrt1), Vin, lin,
                            "gaussian_w2");
  const double cross =
      std::max(0.0, P1.trace() + P2.trace() - 2.0 * lin.cwiseSqrt().sum());
  return std::sqrt((m1 - m2).squaredNorm() + cross);
}

/// Frobenius error of the best rank-R approximation of a symmetric PSD
/// matrix, sqrt(sum of squared discarded eigenvalues).
inline double best_rank_error(const MatrixXd& P, Eigen::Index R) {
  if (P.rows() != P.cols())
    throw DimensionMismatch("best_rank_error: matrix not square");
  if (R < 0) throw std::invalid_argument("best_rank_error: negative rank");
  if (R >= P.rows()) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig{
      MatrixXd(0.5 * (P + P.transpose()))};
  // ascending order: the discarded tail is the first d - R entries
  return eig.eigenvalues().head(P.rows() - R).norm();
}

/// Matched-particle distance sqrt((1/P) sum_p |a_p - b_p|^2_W).
inline double ell2p_distance(const MatrixXd& A, const MatrixXd& B,
                             const SparseMat* W = nullptr) {
  if (A.rows() != B.rows() || A.cols() != B.cols() || A.cols() < 1)
    throw MismatchedEnsembles("ell2p_distance: ensembles do not match");
  double total = 0.0;
  for (Eigen::Index p = 0; p < A.cols(); ++p)
    total += metrics_detail::squared_norm(A.col(p) - B.col(p), W);
  return std::sqrt(total / static_cast<double>(A.cols()));
}

struct LoglogFit {
  double slope = 0.0;
  double half_width = 0.0;  // 2 x standard error of the slope
};

/// Least-squares slope of log y against log x.
inline LoglogFit fit_loglog_slope(const VectorXd& xs, const VectorXd& ys) {
  const Eigen::Index n = xs.size();
  if (n != ys.size() || n < 4)
    throw NonPositiveData("fit_loglog_slope: need >= 4 matched points");
  if (xs.minCoeff() <= 0.0 || ys.minCoeff() <= 0.0)
    throw NonPositiveData("fit_loglog_slope: data must be positive");
  const VectorXd lx = xs.array().log().matrix();
  const VectorXd ly = ys.array().log().matrix();
  const VectorXd cx = lx.array() - lx.mean();
  const double sxx = cx.squaredNorm();
  if (sxx == 0.0)
    throw NonPositiveData("fit_loglog_slope: degenerate abscissa");
  LoglogFit fit;
  fit.slope = cx.dot(ly) / sxx;
  const VectorXd resid =
      ly.array() - ly.mean() - fit.slope * cx.array();
  const double sigma2 = resid.squaredNorm() / static_cast<double>(n - 2);
  fit.half_width = 2.0 * std::sqrt(sigma2 / sxx);
  return fit;
}

/// Largest principal angle sine between the column spans of two
/// (W-)orthonormal bases, computed from the singular values of U^T W V.
inline double subspace_distance(const MatrixXd& U, const MatrixXd& V,
                                const SparseMat* W = nullptr) {
  if (U.rows() != V.rows() || U.cols() != V.cols() || U.cols() < 1)
    throw DimensionMismatch("subspace_distance: bases do not match");
  const MatrixXd C = W ? MatrixXd(U.transpose() * (*W * V))
                       : MatrixXd(U.transpose() * V);
  Eigen::JacobiSVD<MatrixXd> svd(C);
  const double smin = std::min(1.0, svd.singularValues().minCoeff());
  return std::sqrt(std::max(0.0, 1.0 - smin * smin));
}

/// One grid point of a replicated study: the independent variable, the
/// replicate mean of the metric, and its sample standard deviation (absent
/// for fewer than two replicates).
struct StudyPoint {
  double x = 0.0;
  double mean = 0.0;
  std::optional<double> std;
  int n_replicates = 0;
};

struct StudyResult {
  std::string study;
  std::vector<StudyPoint> points;
  std::optional<LoglogFit> slope;  // defined only for >= 4 grid points
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string git_revision;
};

inline StudyPoint make_study_point(double x, const std::vector<double>& vals) {
  if (vals.empty())
    throw std::invalid_argument("make_study_point: no replicate values");
  StudyPoint pt;
  pt.x = x;
  pt.n_replicates = static_cast<int>(vals.size());
  double sum = 0.0;
  for (double v : vals) sum += v;
  pt.mean = sum / static_cast<double>(vals.size());
  if (vals.size() >= 2) {
    double ss = 0.0;
    for (double v : vals) ss += (v - pt.mean) * (v - pt.mean);
    pt.std = std::sqrt(ss / static_cast<double>(vals.size() - 1));
  }
  return pt;
}

inline void write_study_csv(const std::filesystem::path& path,
                            const StudyResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "x, mean, std, n_replicates\n";
  for (const StudyPoint& pt : result.points) {
    out << io_detail::fmt_double(pt.x) << ","
        << io_detail::fmt_double(pt.mean) << ",";
    if (pt.std) out << io_detail::fmt_double(*pt.std);
    out << "," << pt.n_replicates << "\n";
  }
}

inline void write_study_json(const std::filesystem::path& path,
                             const StudyResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "{\n  \"schema_version\": 1,\n";
  out << "  \"study\": \"" << result.study << "\",\n";
  out << "  \"seed\": " << result.seed << ",\n";
  out << "  \"config_hash\": \"" << result.config_hash << "\",\n";
  out << "  \"git_revision\": \"" << result.git_revision << "\",\n";
  if (result.slope)
    out << "  \"slope\": " << io_detail::fmt_double(result.slope->slope)
        << ",\n  \"slope_half_width\": "
        << io_detail::fmt_double(result.slope->half_width) << ",\n";
  out << "  \"points\": [\n";
  for (size_t i = 0; i < result.points.size(); ++i) {
    const StudyPoint& pt = result.points[i];
    out << "    {\"x\": " << io_detail::fmt_double(pt.x)
        << ", \"mean\": " << io_detail::fmt_double(pt.mean);
    if (pt.std) out << ", \"std\": " << io_detail::fmt_double(*pt.std);
    out << ", \"n_replicates\": " << pt.n_replicates << "}"
        << (i + 1 < result.points.size() ? "," : "") << "\n";
  }
  out << "  ]\n}\n";
}

}  // namespace lrkb
