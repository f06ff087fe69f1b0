#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrkb/dlr.hpp"
#include "lrkb/kbp.hpp"

namespace lrkb {

/// Reduced-basis ensemble X_p = U0 + U * Y.row(p)^T. The modes U are
/// W-orthonormal (W = mass or identity) and the particle coordinates Y keep
/// exact zero column means, so U0 is always the ensemble mean.
struct DlrEnsemble {
  VectorXd U0;  // d, ensemble mean
  MatrixXd U;   // d x R, W-orthonormal modes
  MatrixXd Y;   // P x R, centered particle coordinates

  Eigen::Index particles() const { return Y.rows(); }
  Eigen::Index rank() const { return U.cols(); }
};

/// Assembled particles U0 1^T + U Y^T as a d x P matrix.
inline MatrixXd reconstruct_particles(const DlrEnsemble& e) {
  MatrixXd x = e.U * e.Y.transpose();
  x.colwise() += e.U0;
  return x;
}

/// Reduced sample covariance Mhat = Y^T Y / (P - 1). Because Y is centered,
/// this is the ensemble covariance expressed in mode coordinates.
inline MatrixXd sample_reduced_cov(const DlrEnsemble& e,
                                   OpCount* ops = nullptr) {
  const Eigen::Index p = e.particles();
  if (p < 2)
    throw TooFewParticles("sample_reduced_cov: need at least 2 particles");
  const double rr = static_cast<double>(e.rank());
  count_gemm(ops, rr, rr, static_cast<double>(p));
  MatrixXd mh = e.Y.transpose() * e.Y / static_cast<double>(p - 1);
  resymmetrize(mh);
  return mh;
}

/// Draw a reduced ensemble from a low-rank Gaussian. Each particle has its
/// own keyed stream, so the first particles of a P = 425 ensemble coincide
/// with a P = 10 ensemble at the same seed. Coordinates are recentred once
/// and the removed mean is folded into U0, which makes the column means of
/// Y zero by construction.
inline DlrEnsemble init_reduced_ensemble(const LowRankGaussian& ic,
                                         Eigen::Index n_particles,
                                         const RngPlan& plan,
                                         std::uint64_t replicate = 0) {
  if (n_particles < 2)
    throw TooFewParticles("init_reduced_ensemble: need at least 2 particles");
  const Eigen::Index r = ic.U.cols();
  const MatrixXd factor = gaussian_factor(ic.MY);
  MatrixXd y(n_particles, r);
  for (Eigen::Index p = 0; p < n_particles; ++p) {
    auto stream =
        plan.stream("enkf-ic", replicate, static_cast<std::uint64_t>(p));
    y.row(p) = (factor * stream.normal_vector(r)).transpose();
  }
  const VectorXd mu = y.colwise().mean().transpose();
  y.rowwise() -= mu.transpose();
  DlrEnsemble ens;
  ens.U0 = ic.mean + ic.U * mu;
  ens.U = ic.U;
  ens.Y = std::move(y);
  return ens;
}

/// Centered increments and their mean: star.col(p) = inc.col(p) - mean.
/// These split each particle's Brownian increment into the fluctuation that
/// drives the coordinates and the mean that drives U0.
struct StarIncrements {
  MatrixXd star;  // dim x P, columns sum to ~0
  VectorXd mean;  // dim
};

inline StarIncrements star_increments(const MatrixXd& inc) {
  StarIncrements out;
  out.mean = inc.rowwise().mean();
  out.star = inc.colwise() - out.mean;
  return out;
}

/// One Euler-Maruyama step of the reduced ensemble filter for identity-mass
/// models. All coefficients (modes, sample covariance) are frozen at the
/// start of the step:
///   U0 <- U0 + dt (A U0 + f) + U Mhat U^T Hgain Gamma^-1 (dZ - H U0 dt)
///         + Pi_U Sigma^{1/2} mean(dW) - U Mhat U^T Hgain Gamma^-1/2 mean(dV)
///   Y  <- Y + dt Y (A_U - Mhat S_U)^T + (Sigma^{1/2} dW*)^T U
///         - (Hgain Gamma^-1/2 dV*)^T U Mhat
///   U  <- orth(U + dt (A U - U A_U))        (shared mode update)
/// Weak-form models use bug_step instead; there is no silent fallback.
inline void dlr_enkf_em_step(const LinearAffineModel& m, DlrEnsemble& ens,
                             const VectorXd& dZ, const MatrixXd& dW,
                             const MatrixXd& dV, double dt,
                             OpCount* ops = nullptr) {
  if (m.has_mass())
    throw std::invalid_argument(
        "dlr_enkf_em_step: weak-form models use bug_step");
  if (dW.rows() != m.d || dV.rows() != m.k ||
      dW.cols() != ens.particles() || dV.cols() != ens.particles())
    throw std::invalid_argument("dlr_enkf_em_step: increment shape mismatch");
  if (!ens.U0.allFinite() || !ens.U.allFinite() || !ens.Y.allFinite())
    throw NonFiniteState("dlr_enkf_em_step: non-finite ensemble state");
  const double dd = static_cast<double>(m.d);
  const double rr = static_cast<double>(ens.rank());
  const double pp = static_cast<double>(ens.particles());

  const MatrixXd Mh = sample_reduced_cov(ens, ops);
  const StarIncrements w = star_increments(dW);
  const StarIncrements v = star_increments(dV);
  count_axpy(ops, dd * pp + static_cast<double>(m.k) * pp);

  MatrixXd AU = m.A_sp * ens.U;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()), rr);
  MatrixXd A_U = ens.U.transpose() * AU;
  count_gemm(ops, rr, rr, dd);
  const MatrixXd S_U = detail::reduced_obs(m, ens.U, ops);

  // mean: deterministic drift + sample gain + projected mean noise
  VectorXd g = m.gain_adjoint(VectorXd(dZ - dt * m.apply_H(ens.U0, ops)), ops);
  VectorXd gain = ens.U * (Mh * (ens.U.transpose() * g));
  VectorXd wn = m.apply_sigma_sqrt(w.mean, ops);
  VectorXd wproj = ens.U * (ens.U.transpose() * wn);
  VectorXd vn = m.gain_half_adjoint(v.mean, ops);
  VectorXd vgain = ens.U * (Mh * (ens.U.transpose() * vn));
  count_gemv(ops, rr, dd);
  count_gemv(ops, rr, rr);
  count_gemv(ops, dd, rr);
  count_gemv(ops, rr, dd);
  count_gemv(ops, dd, rr);
  count_gemv(ops, rr, dd);
  count_gemv(ops, rr, rr);
  count_gemv(ops, dd, rr);
  VectorXd drift = m.A_sp * ens.U0;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()));
  VectorXd u0_next =
      ens.U0 + dt * (drift + m.f) + gain + wproj - vgain;
  count_axpy(ops, 4.0 * dd);

  // coordinates: frozen linear drift + fluctuating noise in mode coordinates
  MatrixXd Ws = m.apply_sigma_sqrt(w.star, ops);
  MatrixXd Vs = m.gain_half_adjoint(v.star, ops);
  MatrixXd coord_drift = A_U - Mh * S_U;
  count_gemm(ops, rr, rr, rr);
  MatrixXd y_next = ens.Y + dt * (ens.Y * coord_drift.transpose()) +
                    Ws.transpose() * ens.U -
                    (Vs.transpose() * ens.U) * Mh;
  count_gemm(ops, pp, rr, rr);
  count_gemm(ops, pp, rr, dd);
  count_gemm(ops, pp, rr, dd);
  count_gemm(ops, pp, rr, rr);
  count_axpy(ops, 3.0 * pp * rr);

  // modes last, through the shared update
  detail::oja_update(ens.U, AU, A_U, dt, ops);

  if (!u0_next.allFinite() || !y_next.allFinite() || !ens.U.allFinite())
    throw NonFiniteState("dlr_enkf_em_step: non-finite state");
  ens.U0 = std::move(u0_next);
  ens.Y = std::move(y_next);
}

/// One step of the standalone coupled pair used by the proof-of-concept
/// study: the low-rank moment filter advances (mean, M, U) and a single
/// process realization with reduced coordinate y rides along, driven by its
/// own raw Brownian increments and the Riccati covariance M:
///   y <- y + dt (A_U - M S_U) y + U^T Sigma^{1/2} dw - M U^T Hgain Gamma^-1/2 dv.
/// The realization is X = mean + U y.
inline void dlr_meanfield_step(const LinearAffineModel& m, DlrKbState& st,
                               VectorXd& y, const VectorXd& dZ,
                               const VectorXd& dw, const VectorXd& dv,
                               double dt) {
  if (m.has_mass())
    throw std::invalid_argument(
        "dlr_meanfield_step: weak-form models not supported");
  MatrixXd AU = m.A_sp * st.U;
  MatrixXd A_U = st.U.transpose() * AU;
  MatrixXd S_U = detail::reduced_obs(m, st.U, nullptr);
  VectorXd wn = m.apply_sigma_sqrt(dw);
  VectorXd vn = m.gain_half_adjoint(dv);
  VectorXd y_next = y + dt * ((A_U - st.M * S_U) * y) +
                    st.U.transpose() * wn -
                    st.M * (st.U.transpose() * vn);
  dlr_kb_step(m, st, dZ, dt);
  if (!y_next.allFinite())
    throw NonFiniteState("dlr_meanfield_step: non-finite coordinate");
  y = std::move(y_next);
}

/// Diagnostics from one projector-splitting (augmented basis) step.
struct BugStepReport {
  VectorXd discarded;              // singular values beyond rank R, descending
  double truncation_error = 0.0;   // Frobenius norm of the discarded tail
  double orthonormal_defect = 0.0; // ||U^T W U - I||_F after the step
  Eigen::Index dropped_cols = 0;   // augmented-QR columns dropped as dependent
  Eigen::Index padded_cols = 0;    // basis columns refilled after degeneracy
};

/// One step of the semi-implicit augmented-basis ensemble integrator for
/// stiff or weak-form models (W = mass, identity otherwise):
///   1. mean:      (W - dt A) U0' = W U0 + dt f + W Pi_U Sigma^{1/2} mean(dW)
///                 + W U Mhat U^T Hgain Gamma^-1 (dZ - H U0 dt
///                 - Gamma^{1/2} mean(dV))
///   2. predictor: (W - dt A) Ut = W (U - dt U Mhat S_U)
///   3. basis:     Ub = weighted_qr([U, Ut]), W-orthonormal, drops reported
///   4. particles: (I - dt Ub^T A Ub) Yt^T = [Y U^T W Ub
///                 - dt (Mhat S_U Y^T)^T U^T W Ub + (Sigma^{1/2} dW*)^T W Ub
///                 - (Hgain Gamma^-1/2 dV*)^T U Mhat U^T W Ub]^T
///   5. truncate:  Yt ~ V diag(s) Q^T rank R; U' = Ub Q, Y' = V diag(s);
///                 coordinate means are folded back into U0', never the
///                 other way around.
/// The solver must hold the factorization of (W - dt A) at this dt.
inline BugStepReport bug_step(const LinearAffineModel& m,
                              const SemiImplicitSolver& solver,
                              DlrEnsemble& ens, const VectorXd& dZ,
                              const MatrixXd& dW, const MatrixXd& dV,
                              double dt, double drop_tol = 1e-10,
                              OpCount* ops = nullptr) {
  const Eigen::Index P = ens.particles();
  const Eigen::Index R = ens.rank();
  if (dW.rows() != m.d || dV.rows() != m.k || dW.cols() != P ||
      dV.cols() != P)
    throw std::invalid_argument("bug_step: increment shape mismatch");
  if (!ens.U0.allFinite() || !ens.U.allFinite() || !ens.Y.allFinite())
    throw NonFiniteState("bug_step: non-finite ensemble state");
  const double dd = static_cast<double>(m.d);
  const double rr = static_cast<double>(R);
  const double pp = static_cast<double>(P);
  const double mass_nnz =
      m.has_mass() ? static_cast<double>(m.mass->nonZeros()) : 0.0;
  const auto apply_w = [&](const MatrixXd& x) -> MatrixXd {
    if (!m.has_mass()) return x;
    count_sparse(ops, mass_nnz, static_cast<double>(x.cols()));
    return *m.mass * x;
  };
  BugStepReport report;

  const MatrixXd Mh = sample_reduced_cov(ens, ops);
  const StarIncrements w = star_increments(dW);
  const StarIncrements v = star_increments(dV);
  count_axpy(ops, dd * pp + static_cast<double>(m.k) * pp);
  const MatrixXd S_U = detail::reduced_obs(m, ens.U, ops);

  // 1. semi-implicit mean with sample gain and projected mean noise
  VectorXd innovation =
      dZ - dt * m.apply_H(ens.U0, ops) - m.apply_gamma_sqrt(v.mean, ops);
  VectorXd g = m.gain_adjoint(innovation, ops);
  VectorXd gain = ens.U * (Mh * (ens.U.transpose() * g));
  VectorXd wn = m.apply_sigma_sqrt(w.mean, ops);
  VectorXd wproj = ens.U * (ens.U.transpose() * apply_w(wn));
  count_gemv(ops, rr, dd);
  count_gemv(ops, rr, rr);
  count_gemv(ops, dd, rr);
  count_gemv(ops, rr, dd);
  count_gemv(ops, dd, rr);
  VectorXd u0_next =
      solver.solve(VectorXd(apply_w(ens.U0) + dt * m.f + apply_w(gain + wproj)));
  count_axpy(ops, 3.0 * dd);
  count_sparse(ops, 2.0 * static_cast<double>(m.A_sp.nonZeros()));

  // 2. semi-implicit mode predictor
  MatrixXd Ut = solver.solve(
      MatrixXd(apply_w(ens.U - dt * ens.U * (Mh * S_U))));
  count_gemm(ops, rr, rr, rr);
  count_gemm(ops, dd, rr, rr);
  count_axpy(ops, dd * rr);
  count_sparse(ops, 2.0 * static_cast<double>(m.A_sp.nonZeros()), rr);

  // 3. W-orthonormal augmented basis
  MatrixXd aug(m.d, 2 * R);
  aug << ens.U, Ut;
  WeightedQr qr = m.has_mass() ? weighted_qr(aug, *m.mass, drop_tol)
                               : weighted_qr(aug, drop_tol);
  const MatrixXd& Ub = qr.Q;
  const Eigen::Index q = Ub.cols();
  const double qq = static_cast<double>(q);
  report.dropped_cols = static_cast<Eigen::Index>(qr.dropped.size());
  count_gemm(ops, dd, qq, 2.0 * rr);
  count_gemm(ops, dd, qq, qq);

  // 4. Galerkin particle step on the augmented basis
  MatrixXd WUb = apply_w(Ub);                          // d x q
  MatrixXd C = ens.U.transpose() * WUb;                // R x q
  MatrixXd carried = ens.Y * C;                        // P x q
  MatrixXd gain_coords = Mh * (S_U * ens.Y.transpose());  // R x P
  MatrixXd Ws = m.apply_sigma_sqrt(w.star, ops);       // d x P
  MatrixXd Vh = m.gain_half_adjoint(v.star, ops);      // d x P
  MatrixXd rhs = carried - dt * (gain_coords.transpose() * C) +
                 Ws.transpose() * WUb -
                 (Mh * (ens.U.transpose() * Vh)).transpose() * C;
  count_gemm(ops, rr, qq, dd);
  count_gemm(ops, pp, qq, rr);
  count_gemm(ops, rr, pp, rr);
  count_gemm(ops, rr, pp, rr);
  count_gemm(ops, pp, qq, rr);
  count_gemm(ops, pp, qq, dd);
  count_gemm(ops, rr, pp, dd);
  count_gemm(ops, rr, pp, rr);
  count_gemm(ops, pp, qq, rr);
  count_axpy(ops, 3.0 * pp * qq);
  MatrixXd AUb = m.A_sp * Ub;
  count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()), qq);
  MatrixXd reduced_lhs =
      MatrixXd::Identity(q, q) - dt * (Ub.transpose() * AUb);
  count_gemm(ops, qq, qq, dd);
  Eigen::FullPivLU<MatrixXd> lu(reduced_lhs);
  if (!lu.isInvertible())
    throw SolveFailed("bug_step: reduced particle system is singular");
  MatrixXd y_aug = lu.solve(rhs.transpose()).transpose();  // P x q
  if (ops) ops->add(2.0 / 3.0 * qq * qq * qq + 2.0 * qq * qq * pp);

  // 5. rank-R truncation; coordinate means fold back into the mean
  const Eigen::Index r_avail = std::min<Eigen::Index>(R, std::min(q, P));
  MatrixXd u_next, y_next;
  if (y_aug.lpNorm<Eigen::Infinity>() == 0.0) {
    // no fluctuations at all: keep the leading basis columns verbatim
    u_next = Ub.leftCols(r_avail);
    y_next = MatrixXd::Zero(P, r_avail);
    report.discarded = VectorXd::Zero(std::min(q, P) - r_avail);
  } else {
    TruncatedSvd tr = truncate_svd(y_aug, r_avail);
    u_next = Ub * tr.rotation;
    count_gemm(ops, dd, static_cast<double>(r_avail), qq);
    y_next = tr.V * tr.values.asDiagonal();
    count_axpy(ops, 0.5 * pp * static_cast<double>(r_avail));
    report.discarded = tr.tail;
    if (ops) ops->add(6.0 * pp * qq * qq);
  }
  report.truncation_error = report.discarded.norm();

  // degenerate truncation: refill missing directions from a fixed-seed
  // complement so the stored rank stays R; the new columns carry no particles
  if (r_avail < R) {
    NoiseStream pad(UINT64_C(0x7061645f62617369));
    MatrixXd cand(m.d, R);
    cand.leftCols(r_avail) = u_next;
    cand.rightCols(R - r_avail) = pad.normal_matrix(m.d, R - r_avail);
    WeightedQr pq = m.has_mass() ? weighted_qr(cand, *m.mass, drop_tol)
                                 : weighted_qr(cand, drop_tol);
    if (pq.Q.cols() < R)
      throw EmptyBasis("bug_step: could not complete a degenerate basis");
    u_next = pq.Q;
    y_next.conservativeResize(P, R);
    y_next.rightCols(R - r_avail).setZero();
    report.padded_cols = R - r_avail;
  }

  VectorXd ym = y_next.colwise().mean().transpose();
  u0_next += u_next * ym;
  y_next.rowwise() -= ym.transpose();
  count_gemv(ops, dd, rr);
  count_axpy(ops, 0.5 * pp * rr + dd);

  if (!u0_next.allFinite() || !u_next.allFinite() || !y_next.allFinite())
    throw NonFiniteState("bug_step: non-finite state");
  report.orthonormal_defect =
      (u_next.transpose() * apply_w(u_next) -
       MatrixXd::Identity(u_next.cols(), u_next.cols()))
          .norm();
  ens.U0 = std::move(u0_next);
  ens.U = std::move(u_next);
  ens.Y = std::move(y_next);
  return report;
}

}  // namespace lrkb
