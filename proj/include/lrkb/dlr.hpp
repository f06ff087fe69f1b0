#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "lrkb/flops.hpp"
#include "lrkb/kbp.hpp"
#include "lrkb/linalg.hpp"
#include "lrkb/model.hpp"

namespace lrkb {

/// Rank-R factored posterior U M U^T with orthonormal modes U (d x R) and
/// reduced covariance M (R x R), plus the full-order mean.
struct DlrKbState {
  VectorXd mean;
  MatrixXd U;
  MatrixXd M;

  Eigen::Index rank() const { return U.cols(); }
};

inline MatrixXd reconstruct_cov(const DlrKbState& st) {
  MatrixXd cov = st.U * st.M * st.U.transpose();
  resymmetrize(cov);
  return cov;
}

namespace detail {

/// Reduced observation operator S_U = U^T Hgain Gamma^-1 H U without ever
/// forming the d x d matrix S. Identity observation fast path is O(d R^2).
inline MatrixXd reduced_obs(const LinearAffineModel& m, const MatrixXd& U,
                            OpCount* ops) {
  const double d = static_cast<double>(m.d);
  const double k = static_cast<double>(m.k);
  const double r = static_cast<double>(U.cols());
  if (m.H_identity && m.Hgain_identity && m.gamma_scalar > 0.0) {
    // U^T U = I by construction, so S_U collapses to I / gamma
    count_axpy(ops, 0.5 * r);
    return MatrixXd(MatrixXd::Identity(U.cols(), U.cols()) / m.gamma_scalar);
  }
  MatrixXd HU = m.apply_H(U, ops);  // k x R
  MatrixXd HgU = m.Hgain.transpose() * U;  // k x R
  count_gemm(ops, k, r, d);
  MatrixXd S_U = HgU.transpose() * (m.Gamma_inv * HU);
  count_gemm(ops, k, r, k);
  count_gemm(ops, r, r, k);
  return S_U;
}

/// Reduced process noise Sigma_U = U^T Sigma U; O(R^2) when Sigma = sigma I.
inline MatrixXd reduced_noise(const LinearAffineModel& m, const MatrixXd& U,
                              OpCount* ops) {
  const double d = static_cast<double>(m.d);
  const double r = static_cast<double>(U.cols());
  if (m.sigma_scalar >= 0.0)
    return MatrixXd(m.sigma_scalar *
                    MatrixXd::Identity(U.cols(), U.cols()));
  MatrixXd SU = m.Sigma * U;
  count_gemm(ops, d, r, d);
  count_gemm(ops, r, r, d);
  return MatrixXd(U.transpose() * SU);
}

/// Shared Euler + sign-fixed QR retraction for the mode equation
///   U <- orth(U + dt (A U - U A_U)),
/// used by every integrator that transports modes with the projected
/// generator, so the moment filter and the reduced ensemble filter move
/// their bases through identical arithmetic.
inline void oja_update(MatrixXd& U, const MatrixXd& AU, const MatrixXd& A_U,
                       double dt, OpCount* ops) {
  const double d = static_cast<double>(U.rows());
  const double r = static_cast<double>(U.cols());
  U += dt * (AU - U * A_U);
  count_gemm(ops, d, r, r);
  count_axpy(ops, d * r);
  U = orthonormalize(U).Q;
  if (ops) ops->add(2.0 * d * r * r);
}

}  // namespace detail

/// Euler step of the mode equation dU = (I - U U^T) A U dt followed by a
/// sign-fixed QR retraction back onto the Stiefel manifold. Restricted to
/// identity-mass models; weak-form problems use the projector-splitting
/// ensemble integrator instead.
inline void oja_step(const LinearAffineModel& m, MatrixXd& U, double dt,
                     OpCount* ops = nullptr) {
  if (m.has_mass())
    throw std::invalid_argument("oja_step: mass-matrix models not supported");
  const double d = static_cast<double>(m.d);
  const double r = static_cast<double>(U.cols());
  MatrixXd AU = m.A_sp * U;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()), r);
  MatrixXd A_U = U.transpose() * AU;
  count_gemm(ops, r, r, d);
  detail::oja_update(U, AU, A_U, dt, ops);
}

/// One step of the reduced covariance equation with coefficients frozen at
/// the current modes:
///   M <- M + dt (A_U M + M A_U^T - M S_U M + Sigma_U).
inline void reduced_riccati_step(const LinearAffineModel& m, const MatrixXd& U,
                                 MatrixXd& M, double dt,
                                 OpCount* ops = nullptr) {
  const double d = static_cast<double>(m.d);
  const double r = static_cast<double>(U.cols());
  MatrixXd AU = m.A_sp * U;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()), r);
  MatrixXd A_U = U.transpose() * AU;
  count_gemm(ops, r, r, d);
  MatrixXd S_U = detail::reduced_obs(m, U, ops);
  MatrixXd Sigma_U = detail::reduced_noise(m, U, ops);
  MatrixXd AM = A_U * M;
  MatrixXd MSM = M * S_U * M;
  count_gemm(ops, r, r, r);
  count_gemm(ops, r, r, r);
  count_gemm(ops, r, r, r);
  M += dt * (AM + AM.transpose() - MSM + Sigma_U);
  if (ops) ops->add(5.0 * r * r);
  resymmetrize(M);
}

/// Coupled low-rank filter step. All three updates (mean, reduced
/// covariance, modes) use the modes and reduced covariance frozen at the
/// start of the step; the mean gain applies U M U^T without forming it.
inline void dlr_kb_step(const LinearAffineModel& m, DlrKbState& st,
                        const VectorXd& dZ, double dt,
                        OpCount* ops = nullptr) {
  const double d = static_cast<double>(m.d);
  const double r = static_cast<double>(st.U.cols());

  // mean: m <- m + dt (A m + f) + U M U^T Hgain Gamma^-1 (dZ - H m dt)
  VectorXd innovation = dZ - dt * m.apply_H(st.mean, ops);
  VectorXd g = m.gain_adjoint(innovation, ops);
  VectorXd gain = st.U * (st.M * (st.U.transpose() * g));
  count_gemv(ops, r, d);
  count_gemv(ops, r, r);
  count_gemv(ops, d, r);
  VectorXd drift = m.A_sp * st.mean;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()));
  st.mean += dt * (drift + m.f) + gain;
  count_axpy(ops, 2.0 * d);

  // shared A U for the reduced Riccati and the mode update
  MatrixXd AU = m.A_sp * st.U;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()), r);
  MatrixXd A_U = st.U.transpose() * AU;
  count_gemm(ops, r, r, d);
  MatrixXd S_U = detail::reduced_obs(m, st.U, ops);
  MatrixXd Sigma_U = detail::reduced_noise(m, st.U, ops);

  MatrixXd AM = A_U * st.M;
  MatrixXd MSM = st.M * S_U * st.M;
  count_gemm(ops, r, r, r);
  count_gemm(ops, r, r, r);
  count_gemm(ops, r, r, r);
  MatrixXd M_next = st.M + dt * (AM + AM.transpose() - MSM + Sigma_U);
  if (ops) ops->add(5.0 * r * r);
  resymmetrize(M_next);

  // modes last, with the pre-update A_U
  detail::oja_update(st.U, AU, A_U, dt, ops);

  st.M = std::move(M_next);
  if (!st.M.allFinite() || !st.mean.allFinite())
    throw NonFiniteState("dlr_kb_step: non-finite state");
}

/// Run the low-rank filter along an observation path.
inline DlrKbState run_dlr_kb_filter(const LinearAffineModel& m, DlrKbState st,
                                    const ObservationPath& obs,
                                    std::vector<DlrKbState>* history = nullptr,
                                    OpCount* ops = nullptr) {
  if (history) {
    history->clear();
    history->push_back(st);
  }
  for (Eigen::Index n = 0; n < obs.steps(); ++n) {
    dlr_kb_step(m, st, VectorXd(obs.dZ.row(n)), obs.dt, ops);
    if (history) history->push_back(st);
  }
  return st;
}

/// Full-order Riccati step with the process noise projected onto the span
/// of U: dP = A P + P A^T - P S P + Pi Sigma Pi, Pi = U U^T. The low-rank
/// factored covariance solves exactly this equation along its own mode
/// path, which makes it a useful full-order cross-check.
inline void modified_riccati_step(const LinearAffineModel& m, const MatrixXd& U,
                                  MatrixXd& P, double dt) {
  MatrixXd AP = m.A * P;
  MatrixXd PSP = P * (m.S * P);
  MatrixXd SigU = U.transpose() * (m.Sigma * U);
  MatrixXd proj_noise = U * SigU * U.transpose();
  P += dt * (AP + AP.transpose() - PSP + proj_noise);
  resymmetrize(P);
}

/// Low-rank initial condition as a filter state.
inline DlrKbState dlr_state_from_ic(const LowRankGaussian& ic) {
  return DlrKbState{ic.mean, ic.U, ic.MY};
}

/// Full-order state with the same two moments.
inline KbState kb_state_from_ic(const LowRankGaussian& ic) {
  KbState st;
  st.mean = ic.mean;
  st.cov = ic.U * ic.MY * ic.U.transpose();
  resymmetrize(st.cov);
  return st;
}

}  // namespace lrkb
