#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "lrkb/flops.hpp"
#include "lrkb/linalg.hpp"
#include "lrkb/rng.hpp"

namespace lrkb {

using SparseMat = Eigen::SparseMatrix<double>;

/// Linear-affine signal/observation pair
///   dX = (A X + f) dt + Sigma^{1/2} dW,   dZ = H X dt + Gamma^{1/2} dV,
/// optionally in finite element weak form
///   M dX = (A X + f) dt + Sigma^{1/2} M dW.
/// `Hgain` is the adjoint entering the Kalman gain P * Hgain * Gamma^{-1}.
/// In the Euclidean setting Hgain = H^T; for mass-weighted full-field
/// observations the L2 adjoint contributes the mass matrix instead.
struct LinearAffineModel {
  Eigen::Index d = 0;
  Eigen::Index k = 0;
  MatrixXd A;
  SparseMat A_sp;
  VectorXd f;
  MatrixXd Sigma;
  MatrixXd Sigma_sqrt;
  MatrixXd H;
  MatrixXd Hgain;
  MatrixXd Gamma;
  MatrixXd Gamma_inv;
  MatrixXd Gamma_sqrt;
  MatrixXd Gamma_inv_sqrt;
  MatrixXd S;  // Hgain * Gamma^{-1} * H, symmetric PSD

  // structure flags enabling O(d) observation algebra and honest flop counts
  bool H_identity = false;
  bool Hgain_identity = false;
  double gamma_scalar = 0.0;  // Gamma = gamma_scalar * I when > 0
  double sigma_scalar = -1.0; // Sigma = sigma_scalar * I when >= 0

  std::optional<SparseMat> mass;  // weak-form mass matrix (FEM models)

  bool has_mass() const { return mass.has_value(); }

  // --- observation algebra helpers ------------------------------------
  // Flop counts reflect the branch actually executed, so the cost-scaling
  // studies see the benefit of the identity/scalar fast paths.

  // innovation drift term H x
  VectorXd apply_H(const VectorXd& x, OpCount* ops = nullptr) const {
    if (H_identity) return x;
    count_gemv(ops, static_cast<double>(k), static_cast<double>(d));
    return H * x;
  }
  MatrixXd apply_H(const MatrixXd& x, OpCount* ops = nullptr) const {
    if (H_identity) return x;
    count_gemm(ops, static_cast<double>(k), static_cast<double>(x.cols()),
               static_cast<double>(d));
    return H * x;
  }
  // w = Hgain * Gamma^{-1} * v for an observation-space v
  VectorXd gain_adjoint(const VectorXd& v, OpCount* ops = nullptr) const {
    if (gamma_scalar > 0.0 && Hgain_identity) {
      count_axpy(ops, 0.5 * static_cast<double>(k));
      return v / gamma_scalar;
    }
    if (gamma_scalar > 0.0) {
      count_gemv(ops, static_cast<double>(d), static_cast<double>(k));
      count_axpy(ops, 0.5 * static_cast<double>(d));
      return (Hgain * v) / gamma_scalar;
    }
    count_gemv(ops, static_cast<double>(k), static_cast<double>(k));
    count_gemv(ops, static_cast<double>(d), static_cast<double>(k));
    return Hgain * (Gamma_inv * v);
  }
  MatrixXd gain_adjoint(const MatrixXd& v, OpCount* ops = nullptr) const {
    const double cols = static_cast<double>(v.cols());
    if (gamma_scalar > 0.0 && Hgain_identity) {
      count_axpy(ops, 0.5 * static_cast<double>(k) * cols);
      return v / gamma_scalar;
    }
    if (gamma_scalar > 0.0) {
      count_gemm(ops, static_cast<double>(d), cols, static_cast<double>(k));
      count_axpy(ops, 0.5 * static_cast<double>(d) * cols);
      return (Hgain * v) / gamma_scalar;
    }
    count_gemm(ops, static_cast<double>(k), cols, static_cast<double>(k));
    count_gemm(ops, static_cast<double>(d), cols, static_cast<double>(k));
    return Hgain * (Gamma_inv * v);
  }
  // half-whitened gain direction Hgain Gamma^{-1/2} v (the coefficient of
  // the observation-noise feedback term in the particle filters)
  MatrixXd gain_half_adjoint(const MatrixXd& v, OpCount* ops = nullptr) const {
    const double cols = static_cast<double>(v.cols());
    if (gamma_scalar > 0.0 && Hgain_identity) {
      count_axpy(ops, 0.5 * static_cast<double>(k) * cols);
      return v / std::sqrt(gamma_scalar);
    }
    if (gamma_scalar > 0.0) {
      count_gemm(ops, static_cast<double>(d), cols, static_cast<double>(k));
      count_axpy(ops, 0.5 * static_cast<double>(d) * cols);
      return (Hgain * v) / std::sqrt(gamma_scalar);
    }
    count_gemm(ops, static_cast<double>(k), cols, static_cast<double>(k));
    count_gemm(ops, static_cast<double>(d), cols, static_cast<double>(k));
    return Hgain * (Gamma_inv_sqrt * v);
  }
  // process noise scaling Sigma^{1/2} w
  MatrixXd apply_sigma_sqrt(const MatrixXd& w, OpCount* ops = nullptr) const {
    const double cols = static_cast<double>(w.cols());
    if (sigma_scalar >= 0.0) {
      count_axpy(ops, 0.5 * static_cast<double>(d) * cols);
      return std::sqrt(sigma_scalar) * w;
    }
    count_gemm(ops, static_cast<double>(d), cols, static_cast<double>(d));
    return Sigma_sqrt * w;
  }
  // observation noise scaling Gamma^{1/2} w
  MatrixXd apply_gamma_sqrt(const MatrixXd& w, OpCount* ops = nullptr) const {
    const double cols = static_cast<double>(w.cols());
    if (gamma_scalar > 0.0) {
      count_axpy(ops, 0.5 * static_cast<double>(k) * cols);
      return std::sqrt(gamma_scalar) * w;
    }
    count_gemm(ops, static_cast<double>(k), cols, static_cast<double>(k));
    return Gamma_sqrt * w;
  }
};

namespace detail {
inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}
inline bool is_symmetric(const MatrixXd& m, double tol = 1e-10) {
  return (m - m.transpose()).cwiseAbs().maxCoeff() <=
         tol * std::max(1.0, m.cwiseAbs().maxCoeff());
}
inline double min_eig(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()),
                                             Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}
}  // namespace detail

/// Validates dimensions and definiteness, precomputes Sigma^{1/2},
/// Gamma^{-1}, Gamma^{-1/2} and S = Hgain Gamma^{-1} H.
inline LinearAffineModel build_model(MatrixXd A, VectorXd f, MatrixXd Sigma,
                                     MatrixXd H, MatrixXd Gamma,
                                     std::optional<MatrixXd> Hgain = std::nullopt,
                                     std::optional<SparseMat> mass = std::nullopt) {
  LinearAffineModel m;
  m.d = A.rows();
  m.k = H.rows();
  detail::require(A.cols() == m.d, "build_model: A must be square");
  detail::require(f.size() == m.d, "build_model: f has wrong size");
  detail::require(Sigma.rows() == m.d && Sigma.cols() == m.d,
                  "build_model: Sigma must be d x d");
  detail::require(H.cols() == m.d, "build_model: H must be k x d");
  detail::require(Gamma.rows() == m.k && Gamma.cols() == m.k,
                  "build_model: Gamma must be k x k");
  detail::require(detail::is_symmetric(Sigma), "build_model: Sigma not symmetric");
  detail::require(detail::is_symmetric(Gamma), "build_model: Gamma not symmetric");
  detail::require(detail::min_eig(Gamma) > 0.0, "build_model: Gamma not PD");
  detail::require(detail::min_eig(Sigma) >= -1e-12 * std::max(1.0, Sigma.norm()),
                  "build_model: Sigma not PSD");

  m.A = std::move(A);
  m.A_sp = m.A.sparseView();
  m.A_sp.makeCompressed();
  m.f = std::move(f);
  m.Sigma = std::move(Sigma);
  m.Sigma_sqrt = sym_sqrt_psd(m.Sigma);
  m.H = std::move(H);
  m.Hgain = Hgain ? std::move(*Hgain) : MatrixXd(m.H.transpose());
  detail::require(m.Hgain.rows() == m.d && m.Hgain.cols() == m.k,
                  "build_model: Hgain must be d x k");
  m.Gamma = std::move(Gamma);
  {
    Eigen::LLT<MatrixXd> llt(m.Gamma);
    detail::require(llt.info() == Eigen::Success, "build_model: Gamma not PD");
    m.Gamma_inv = llt.solve(MatrixXd::Identity(m.k, m.k));
  }
  m.Gamma_sqrt = sym_sqrt_psd(m.Gamma);
  m.Gamma_inv_sqrt = sym_sqrt_psd(m.Gamma_inv);
  m.S = m.Hgain * m.Gamma_inv * m.H;
  resymmetrize(m.S);
  detail::require(detail::min_eig(m.S) >= -1e-10 * std::max(1.0, m.S.norm()),
                  "build_model: S = Hgain Gamma^-1 H not PSD");

  m.H_identity = m.H.isIdentity(1e-14);
  m.Hgain_identity = m.Hgain.rows() == m.Hgain.cols() && m.Hgain.isIdentity(1e-14);
  const double g0 = m.Gamma(0, 0);
  if ((m.Gamma - g0 * MatrixXd::Identity(m.k, m.k)).cwiseAbs().maxCoeff() <
      1e-14 * std::max(1.0, g0))
    m.gamma_scalar = g0;
  const double s0 = m.Sigma(0, 0);
  if ((m.Sigma - s0 * MatrixXd::Identity(m.d, m.d)).cwiseAbs().maxCoeff() <=
      1e-14 * std::max(1.0, std::abs(s0)))
    m.sigma_scalar = s0;
  if (mass) {
    m.mass = std::move(*mass);
    detail::require(m.mass->rows() == m.d && m.mass->cols() == m.d,
                    "build_model: mass must be d x d");
  }
  return m;
}

/// Periodic first-order upwind discretization of u_t = -u_x - decay*u + forcing
/// on [0, L) with d cells, full observations H = I and Gamma = gamma * I:
///   A[i][i] = -1/h - decay,  A[i][i-1 mod d] = 1/h,  h = L/d.
inline LinearAffineModel build_upwind_model(Eigen::Index d, double L, double decay,
                                            double forcing, double sigma,
                                            double gamma) {
  const double h = L / static_cast<double>(d);
  MatrixXd A = MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    A(i, i) = -1.0 / h - decay;
    A(i, (i - 1 + d) % d) = 1.0 / h;
  }
  VectorXd f = VectorXd::Constant(d, forcing);
  MatrixXd Sigma = sigma * MatrixXd::Identity(d, d);
  MatrixXd H = MatrixXd::Identity(d, d);
  MatrixXd Gamma = gamma * MatrixXd::Identity(d, d);
  return build_model(std::move(A), std::move(f), std::move(Sigma), std::move(H),
                     std::move(Gamma));
}

/// Rank-R Gaussian initial condition N(mean, U MY U^T) with orthonormal
/// modes U (in the W-inner product when a mass matrix is supplied).
struct LowRankGaussian {
  VectorXd mean;
  MatrixXd U;    // d x R, U^T W U = I
  MatrixXd MY;   // R x R SPD coefficient covariance
};

/// Factor a set of (generally non-orthonormal) covariance columns B,
/// cov = B B^T, into orthonormal modes: U MY U^T with MY = C C^T, B = U C.
inline LowRankGaussian make_low_rank_ic(VectorXd mean, const MatrixXd& B,
                                        const SparseMat* mass = nullptr) {
  WeightedQr qr = mass ? weighted_qr(B, *mass) : weighted_qr(B);
  if (!qr.dropped.empty())
    throw std::invalid_argument("make_low_rank_ic: dependent covariance columns");
  LowRankGaussian ic;
  ic.mean = std::move(mean);
  ic.U = std::move(qr.Q);
  ic.MY = qr.R * qr.R.transpose();
  resymmetrize(ic.MY);
  return ic;
}

/// Initial condition of the advection benchmark:
///   u0 = sin(2 pi x / L) + sum_{k=1..R} (1/k) sin(2 pi k x / L) xi_k.
inline LowRankGaussian advection_initial_condition(Eigen::Index d, double L,
                                                   Eigen::Index R) {
  const double h = L / static_cast<double>(d);
  VectorXd mean(d);
  MatrixXd B(d, R);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double x = static_cast<double>(i) * h;
    mean[i] = std::sin(2.0 * std::numbers::pi * x / L);
    for (Eigen::Index kk = 1; kk <= R; ++kk)
      B(i, kk - 1) =
          std::sin(2.0 * std::numbers::pi * x * static_cast<double>(kk) / L) /
          static_cast<double>(kk);
  }
  return make_low_rank_ic(std::move(mean), B);
}

/// Draw one state from a low-rank Gaussian.
inline VectorXd sample_low_rank_ic(const LowRankGaussian& ic, NoiseStream& stream) {
  const MatrixXd Lf = gaussian_factor(ic.MY);
  return ic.mean + ic.U * (Lf * stream.normal_vector(ic.U.cols()));
}

/// Observation increments over n steps: row n holds
///   dZ_n = H x_n dt + Gamma^{1/2} dV_n,  with Z_0 = 0.
struct ObservationPath {
  double dt = 0.0;
  MatrixXd dZ;  // n_steps x k
  Eigen::Index steps() const { return dZ.rows(); }
};

/// Thrown when a semi-implicit system matrix cannot be factored or solved.
struct SolveFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shared factorization of (W - dt*A), W = mass or identity, for the
/// semi-implicit steppers. Factored once, reused every step.
class SemiImplicitSolver {
 public:
  SemiImplicitSolver(const LinearAffineModel& m, double dt) {
    SparseMat lhs;
    if (m.has_mass())
      lhs = *m.mass - dt * m.A_sp;
    else {
      SparseMat id(m.d, m.d);
      id.setIdentity();
      lhs = id - dt * m.A_sp;
    }
    lhs.makeCompressed();
    lu_.compute(lhs);
    if (lu_.info() != Eigen::Success)
      throw SolveFailed("SemiImplicitSolver: factorization failed");
  }
  VectorXd solve(const VectorXd& rhs) const { return lu_.solve(rhs); }
  MatrixXd solve(const MatrixXd& rhs) const { return lu_.solve(rhs); }

 private:
  Eigen::SparseLU<SparseMat> lu_;
};

/// Explicit Euler(-Maruyama) signal simulation for identity-mass models,
/// semi-implicit (W - dt A) x_{n+1} = W x_n + dt f + noise for weak-form
/// models. Returns (n_steps+1) x d trajectory including the initial state.
inline MatrixXd simulate_signal(const LinearAffineModel& m, const VectorXd& x0,
                                Eigen::Index n_steps, double dt,
                                NoiseStream& stream) {
  MatrixXd traj(n_steps + 1, m.d);
  traj.row(0) = x0;
  VectorXd x = x0;
  const bool noisy = !(m.sigma_scalar == 0.0);
  std::optional<SemiImplicitSolver> solver;
  if (m.has_mass()) solver.emplace(m, dt);
  for (Eigen::Index n = 0; n < n_steps; ++n) {
    VectorXd noise = VectorXd::Zero(m.d);
    if (noisy) {
      const VectorXd dW = stream.brownian(m.d, dt);
      noise = m.sigma_scalar >= 0.0 ? VectorXd(std::sqrt(m.sigma_scalar) * dW)
                                    : VectorXd(m.Sigma_sqrt * dW);
    }
    if (m.has_mass()) {
      x = solver->solve(VectorXd(*m.mass * x + dt * m.f + *m.mass * noise));
    } else {
      x += dt * (m.A * x + m.f) + noise;
    }
    traj.row(n + 1) = x;
  }
  return traj;
}

/// Observation increments along a signal trajectory (left-endpoint rule).
inline ObservationPath simulate_observations(const LinearAffineModel& m,
                                             const MatrixXd& signal, double dt,
                                             NoiseStream& stream) {
  const Eigen::Index n = signal.rows() - 1;
  ObservationPath path;
  path.dt = dt;
  path.dZ.resize(n, m.k);
  const bool gscalar = m.gamma_scalar > 0.0;
  const double gs = std::sqrt(std::max(0.0, m.gamma_scalar));
  for (Eigen::Index i = 0; i < n; ++i) {
    const VectorXd hx = m.apply_H(VectorXd(signal.row(i)));
    const VectorXd dV = stream.brownian(m.k, dt);
    path.dZ.row(i) =
        (hx * dt + (gscalar ? VectorXd(gs * dV) : VectorXd(m.Gamma_sqrt * dV)))
            .transpose();
  }
  return path;
}

}  // namespace lrkb
