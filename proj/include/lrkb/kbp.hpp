#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrkb/flops.hpp"
#include "lrkb/linalg.hpp"
#include "lrkb/model.hpp"
#include "lrkb/rng.hpp"

namespace lrkb {

/// Ensemble operations need at least two particles for a covariance.
struct TooFewParticles : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Catastrophic filter divergence: a state update produced NaN or Inf.
struct NonFiniteState : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Full-order conditional Gaussian state: mean and covariance of the
/// Kalman-Bucy posterior.
struct KbState {
  VectorXd mean;
  MatrixXd cov;
};

/// One explicit Euler step of the matrix Riccati equation
///   dP/dt = A P + P A^T - P S P + Sigma,  S = Hgain Gamma^-1 H,
/// resymmetrized after the update to keep roundoff from accumulating.
inline void riccati_step(const LinearAffineModel& m, MatrixXd& P, double dt,
                         OpCount* ops = nullptr) {
  const double d = static_cast<double>(m.d);
  MatrixXd AP = m.A * P;
  count_gemm(ops, d, d, d);
  MatrixXd SP = m.S * P;
  count_gemm(ops, d, d, d);
  MatrixXd PSP = P * SP;
  count_gemm(ops, d, d, d);
  P += dt * (AP + AP.transpose() - PSP + m.Sigma);
  if (ops) ops->add(5.0 * d * d);
  resymmetrize(P);
  if (!P.allFinite()) throw NonFiniteState("riccati_step: non-finite covariance");
}

/// One explicit Euler step of the Kalman-Bucy mean equation driven by the
/// observation increment dZ over [t, t+dt]:
///   m <- m + dt (A m + f) + P Hgain Gamma^-1 (dZ - H m dt).
/// The covariance P is the value at the start of the step.
inline void kb_mean_step(const LinearAffineModel& m, VectorXd& mean,
                         const MatrixXd& P, const VectorXd& dZ, double dt,
                         OpCount* ops = nullptr) {
  const double d = static_cast<double>(m.d);
  VectorXd innovation = dZ - dt * m.apply_H(mean, ops);
  VectorXd gain_dir = m.gain_adjoint(innovation, ops);
  mean += dt * (m.A * mean + m.f) + P * gain_dir;
  count_gemv(ops, d, d);
  count_gemv(ops, d, d);
  if (ops) ops->add(4.0 * d);
}

/// Moment-level step of the "deterministic" filter variant whose innovation
/// averages the state and the conditional mean. Evaluated at the mean the
/// average collapses, so this coincides with kb_mean_step; exposed under its
/// own name for API symmetry.
inline void deterministic_kbp_moment_step(const LinearAffineModel& m,
                                          VectorXd& mean, const MatrixXd& P,
                                          const VectorXd& dZ, double dt,
                                          OpCount* ops = nullptr) {
  kb_mean_step(m, mean, P, dZ, dt, ops);
}

/// Coupled mean + covariance step; both use the covariance frozen at the
/// start of the step.
inline void kb_step(const LinearAffineModel& m, KbState& st, const VectorXd& dZ,
                    double dt, OpCount* ops = nullptr) {
  kb_mean_step(m, st.mean, st.cov, dZ, dt, ops);
  riccati_step(m, st.cov, dt, ops);
}

/// Run the full-order filter along an observation path. Returns the final
/// state; when `history` is non-null it receives mean and covariance after
/// every step (entry 0 is the initial state).
inline KbState run_kb_filter(const LinearAffineModel& m, KbState st,
                             const ObservationPath& obs,
                             std::vector<KbState>* history = nullptr,
                             OpCount* ops = nullptr) {
  if (history) {
    history->clear();
    history->push_back(st);
  }
  for (Eigen::Index n = 0; n < obs.steps(); ++n) {
    kb_step(m, st, VectorXd(obs.dZ.row(n)), obs.dt, ops);
    if (history) history->push_back(st);
  }
  return st;
}

inline VectorXd ensemble_mean(const MatrixXd& X) {
  if (X.cols() < 1) throw TooFewParticles("ensemble_mean: empty ensemble");
  return X.rowwise().mean();
}

/// Unbiased sample covariance (X - mean)(X - mean)^T / (P - 1).
inline MatrixXd ensemble_cov(const MatrixXd& X, OpCount* ops = nullptr) {
  const double d = static_cast<double>(X.rows());
  const double p = static_cast<double>(X.cols());
  if (X.cols() < 2) throw TooFewParticles("ensemble_cov: needs >= 2 particles");
  MatrixXd centered = X.colwise() - VectorXd(X.rowwise().mean());
  MatrixXd cov = centered * centered.transpose() / (p - 1.0);
  count_gemm(ops, d, d, p);
  resymmetrize(cov);
  return cov;
}

/// Per-particle noise streams for ensemble filters. Particle p draws from
/// its own keyed stream, so enlarging the ensemble or reordering the update
/// loop never changes the increments any existing particle sees.
struct EnsembleNoise {
  std::vector<NoiseStream> w;  // signal noise, one stream per particle
  std::vector<NoiseStream> v;  // observation noise, one stream per particle

  EnsembleNoise(const RngPlan& plan, Eigen::Index n_particles,
                std::uint64_t replicate = 0) {
    w.reserve(n_particles);
    v.reserve(n_particles);
    for (Eigen::Index p = 0; p < n_particles; ++p) {
      w.push_back(plan.stream("enkf-w", replicate, static_cast<std::uint64_t>(p)));
      v.push_back(plan.stream("enkf-v", replicate, static_cast<std::uint64_t>(p)));
    }
  }

  /// dim x P matrix of Brownian increments over dt, column p from stream p.
  static MatrixXd draw(std::vector<NoiseStream>& streams, Eigen::Index dim,
                       double dt) {
    MatrixXd out(dim, static_cast<Eigen::Index>(streams.size()));
    for (size_t p = 0; p < streams.size(); ++p)
      out.col(static_cast<Eigen::Index>(p)) = streams[p].brownian(dim, dt);
    return out;
  }

  MatrixXd draw_w(Eigen::Index dim, double dt) { return draw(w, dim, dt); }
  MatrixXd draw_v(Eigen::Index dim, double dt) { return draw(v, dim, dt); }
};

namespace detail {

/// Shared particle update: every column of X moves by
///   x <- x + dt (A x + f) + Sigma^{1/2} dw
///          + P Hgain Gamma^-1 (dZ - H x dt - Gamma^{1/2} dv)          (explicit)
/// or the semi-implicit weak form
///   (W - dt A) x' = W [x + Sigma^{1/2} dw + P Hgain Gamma^-1 (...)] + dt f.
/// The same column-at-a-time arithmetic serves one stochastic filter path
/// (n = 1, P the Riccati covariance) and the ensemble filter (P = sample
/// covariance), which makes the mean-field consistency between the two
/// exact in floating point, not just in expectation.
inline void particle_update_with_cov(const LinearAffineModel& m, MatrixXd& X,
                                     const MatrixXd& P, const VectorXd& dZ,
                                     const MatrixXd& dW, const MatrixXd& dV,
                                     double dt, const SemiImplicitSolver* solver,
                                     OpCount* ops) {
  const double d = static_cast<double>(m.d);
  if (dW.cols() != X.cols() || dV.cols() != X.cols())
    throw std::invalid_argument("particle update: increment column mismatch");
  for (Eigen::Index p = 0; p < X.cols(); ++p) {
    VectorXd x = X.col(p);
    VectorXd innovation =
        dZ - dt * m.apply_H(VectorXd(x), ops) -
        VectorXd(m.apply_gamma_sqrt(MatrixXd(dV.col(p)), ops));
    VectorXd forcing =
        VectorXd(m.apply_sigma_sqrt(MatrixXd(dW.col(p)), ops)) +
        P * m.gain_adjoint(innovation, ops);
    count_gemv(ops, d, d);
    if (solver) {
      VectorXd rhs = x + forcing;
      if (m.has_mass()) {
        rhs = *m.mass * rhs;
        count_sparse(ops, static_cast<double>(m.mass->nonZeros()));
      }
      rhs += dt * m.f;
      X.col(p) = solver->solve(rhs);
      count_sparse(ops, 2.0 * static_cast<double>(m.A_sp.nonZeros()));
    } else {
      VectorXd drift = m.A_sp * x;
      count_sparse(ops, static_cast<double>(m.A_sp.nonZeros()));
      X.col(p) = x + dt * (drift + m.f) + forcing;
    }
    count_axpy(ops, 2.0 * d);
  }
  if (!X.allFinite())
    throw NonFiniteState("particle update: non-finite ensemble state");
}

}  // namespace detail

/// One Euler-Maruyama step of a single Kalman-Bucy process realization with
/// an externally propagated covariance P:
///   x <- x + dt (A x + f) + Sigma^{1/2} dW
///          + P Hgain Gamma^-1 (dZ - H x dt - Gamma^{1/2} dV).
inline void kbp_process_step(const LinearAffineModel& m, VectorXd& x,
                             const MatrixXd& P, const VectorXd& dZ,
                             const VectorXd& dW, const VectorXd& dV, double dt,
                             OpCount* ops = nullptr) {
  MatrixXd X = x;
  detail::particle_update_with_cov(m, X, P, dZ, MatrixXd(dW), MatrixXd(dV), dt,
                                   nullptr, ops);
  x = X.col(0);
}

/// One explicit Euler-Maruyama step of the ensemble Kalman-Bucy filter.
/// The sample covariance is computed once (the synchronization barrier),
/// then every particle is updated independently.
/// dW, dV are d x P and k x P matrices of Brownian increments over dt.
inline void enkf_step(const LinearAffineModel& m, MatrixXd& X,
                      const VectorXd& dZ, const MatrixXd& dW,
                      const MatrixXd& dV, double dt, OpCount* ops = nullptr) {
  MatrixXd Phat = ensemble_cov(X, ops);
  detail::particle_update_with_cov(m, X, Phat, dZ, dW, dV, dt, nullptr, ops);
}

/// Semi-implicit ensemble step for weak-form (mass matrix) models; see
/// particle_update_with_cov for the per-particle formula.
inline void enkf_step_semi_implicit(const LinearAffineModel& m,
                                    const SemiImplicitSolver& solver,
                                    MatrixXd& X, const VectorXd& dZ,
                                    const MatrixXd& dW, const MatrixXd& dV,
                                    double dt, OpCount* ops = nullptr) {
  MatrixXd Phat = ensemble_cov(X, ops);
  detail::particle_update_with_cov(m, X, Phat, dZ, dW, dV, dt, &solver, ops);
}

}  // namespace lrkb
