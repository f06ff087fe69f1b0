#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "lrkb/kbp.hpp"
#include "lrkb/model.hpp"
#include "lrkb/rng.hpp"

using namespace lrkb;

namespace {

LinearAffineModel small_random_model(int d, int k, std::uint64_t seed) {
  RngPlan plan{seed};
  auto s = plan.stream("model");
  Eigen::MatrixXd A = s.normal_matrix(d, d);
  A -= (d + 1.0) * Eigen::MatrixXd::Identity(d, d);  // make it stable-ish
  Eigen::VectorXd f = s.normal_vector(d);
  Eigen::MatrixXd G = s.normal_matrix(d, d);
  Eigen::MatrixXd Sigma = G * G.transpose() / d;
  Eigen::MatrixXd H = s.normal_matrix(k, d);
  Eigen::MatrixXd Gk = s.normal_matrix(k, k);
  Eigen::MatrixXd Gamma =
      Gk * Gk.transpose() / k + Eigen::MatrixXd::Identity(k, k);
  return build_model(A, f, Sigma, H, Gamma);
}

}  // namespace

TEST(Kbp, RiccatiStepMatchesDenseFormula) {
  auto m = small_random_model(4, 3, 2024);
  RngPlan plan{1};
  auto s = plan.stream("state");
  Eigen::MatrixXd G = s.normal_matrix(4, 4);
  Eigen::MatrixXd P = G * G.transpose();
  Eigen::MatrixXd P0 = P;
  const double dt = 1e-3;
  riccati_step(m, P, dt);
  Eigen::MatrixXd expected =
      P0 + dt * (m.A * P0 + P0 * m.A.transpose() - P0 * m.S * P0 + m.Sigma);
  EXPECT_LT((P - expected).norm(), 1e-13 * expected.norm());
  EXPECT_LT((P - P.transpose()).norm(), 1e-14);
}

TEST(Kbp, RiccatiScalarReachesClosedFormSteadyState) {
  // dP/dt = 2 a P - s P^2 + q has fixed point (a + sqrt(a^2 + s q)) / s,
  // and an explicit Euler fixed point is a fixed point of the flow itself.
  const double a = -1.0, q = 0.2, gamma = 2.0;
  const double s = 1.0 / gamma;
  auto m = build_model(Eigen::MatrixXd::Constant(1, 1, a),
                       Eigen::VectorXd::Zero(1),
                       Eigen::MatrixXd::Constant(1, 1, q),
                       Eigen::MatrixXd::Identity(1, 1),
                       Eigen::MatrixXd::Constant(1, 1, gamma));
  Eigen::MatrixXd P = Eigen::MatrixXd::Constant(1, 1, 3.0);
  const double dt = 1e-3;
  for (int n = 0; n < 20000; ++n) riccati_step(m, P, dt);
  const double expected = (a + std::sqrt(a * a + s * q)) / s;
  EXPECT_NEAR(P(0, 0), expected, 1e-10);
}

TEST(Kbp, RiccatiReducesToLyapunovDecayWithoutNoiseAndData) {
  const int d = 2;
  auto m = build_model(-Eigen::MatrixXd::Identity(d, d), Eigen::VectorXd::Zero(d),
                       Eigen::MatrixXd::Zero(d, d), Eigen::MatrixXd::Identity(d, d),
                       1e12 * Eigen::MatrixXd::Identity(d, d));
  Eigen::MatrixXd P0(d, d);
  P0 << 2.0, 0.5, 0.5, 1.0;
  Eigen::MatrixXd P = P0;
  const double dt = 1e-3;
  const int n = 500;
  for (int i = 0; i < n; ++i) riccati_step(m, P, dt);
  // dP/dt = A P + P A^T = -2P discretizes to the exact geometric decay
  const double factor = std::pow(1.0 - 2.0 * dt, n);
  EXPECT_LT((P - factor * P0).norm(), 1e-8);
}

TEST(Kbp, MeanStepMatchesDenseFormula) {
  auto m = small_random_model(5, 3, 7);
  RngPlan plan{2};
  auto s = plan.stream("state");
  Eigen::VectorXd mean = s.normal_vector(5);
  Eigen::VectorXd mean0 = mean;
  Eigen::MatrixXd G = s.normal_matrix(5, 5);
  Eigen::MatrixXd P = G * G.transpose();
  Eigen::VectorXd dZ = s.normal_vector(3);
  const double dt = 1e-3;
  kb_mean_step(m, mean, P, dZ, dt);
  Eigen::VectorXd expected =
      mean0 + dt * (m.A * mean0 + m.f) +
      P * (m.H.transpose() * m.Gamma.inverse() * (dZ - dt * m.H * mean0));
  EXPECT_LT((mean - expected).norm(), 1e-13 * expected.norm());
}

TEST(Kbp, FilterRecoversSignalUnderInformativeObservations) {
  const int d = 20;
  auto m = build_upwind_model(d, 10.0, 0.1, 0.03, 0.0, 1e-2);
  auto ic = advection_initial_condition(d, 10.0, 5);
  RngPlan plan{99};
  auto sig_stream = plan.stream("signal");
  auto ic_stream = plan.stream("ic");
  Eigen::VectorXd x0 = sample_low_rank_ic(ic, ic_stream);
  const double dt = 1e-4;
  const int steps = 5000;
  auto traj = simulate_signal(m, x0, steps, dt, sig_stream);
  auto obs_stream = plan.stream("obs");
  auto obs = simulate_observations(m, traj, dt, obs_stream);

  KbState st;
  st.mean = ic.mean;  // filter starts from the prior mean, not the draw
  st.cov = ic.U * ic.MY * ic.U.transpose();
  const double err0 = (st.mean - x0).norm();
  st = run_kb_filter(m, std::move(st), obs);
  const double err1 = (st.mean - traj.row(steps).transpose()).norm();
  EXPECT_LT(err1, 0.25 * err0);
  EXPECT_LT(err1 / std::sqrt(static_cast<double>(d)), 0.2);
  // posterior covariance should have contracted markedly as well
  EXPECT_LT(st.cov.trace(), 0.1 * ic.MY.trace());
}

TEST(Kbp, EnsembleCovMatchesDefinition) {
  RngPlan plan{5};
  auto s = plan.stream("x");
  Eigen::MatrixXd X = s.normal_matrix(4, 7);
  Eigen::MatrixXd cov = ensemble_cov(X);
  Eigen::VectorXd mean = X.rowwise().mean();
  Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(4, 4);
  for (int p = 0; p < 7; ++p) {
    Eigen::VectorXd c = X.col(p) - mean;
    expected += c * c.transpose();
  }
  expected /= 6.0;
  EXPECT_LT((cov - expected).norm(), 1e-13);
  EXPECT_THROW(ensemble_cov(X.col(0)), std::invalid_argument);
}

TEST(Kbp, EnsembleNoiseStreamsAreParticleStable) {
  RngPlan plan{17};
  EnsembleNoise small(plan, 4, 3);
  EnsembleNoise large(plan, 8, 3);
  Eigen::MatrixXd a = small.draw_w(6, 0.01);
  Eigen::MatrixXd b = large.draw_w(6, 0.01);
  EXPECT_EQ((a - b.leftCols(4)).norm(), 0.0);
  // distinct replicate id gives distinct noise
  EnsembleNoise other(plan, 4, 4);
  EXPECT_GT((a - other.draw_w(6, 0.01)).norm(), 1e-3);
}

TEST(Kbp, EnkfStepMatchesManualComputation) {
  auto m = small_random_model(3, 2, 11);
  RngPlan plan{8};
  auto s = plan.stream("x");
  Eigen::MatrixXd X = s.normal_matrix(3, 4);
  Eigen::MatrixXd X0 = X;
  Eigen::MatrixXd dW = 0.01 * s.normal_matrix(3, 4);
  Eigen::MatrixXd dV = 0.01 * s.normal_matrix(2, 4);
  Eigen::VectorXd dZ = 0.01 * s.normal_vector(2);
  const double dt = 1e-3;
  enkf_step(m, X, dZ, dW, dV, dt);

  Eigen::MatrixXd Phat = ensemble_cov(X0);
  Eigen::MatrixXd Ginv = m.Gamma.inverse();
  Eigen::MatrixXd Gsqrt = sym_sqrt_psd(m.Gamma);
  for (int p = 0; p < 4; ++p) {
    Eigen::VectorXd innov = dZ - dt * m.H * X0.col(p) - Gsqrt * dV.col(p);
    Eigen::VectorXd expected = X0.col(p) + dt * (m.A * X0.col(p) + m.f) +
                               m.Sigma_sqrt * dW.col(p) +
                               Phat * m.H.transpose() * Ginv * innov;
    EXPECT_LT((X.col(p) - expected).norm(), 1e-12 * expected.norm())
        << "particle " << p;
  }
}

TEST(Kbp, CollapsedEnsembleFollowsMeanOde) {
  auto m = small_random_model(3, 3, 21);
  Eigen::VectorXd x = Eigen::VectorXd::Ones(3);
  Eigen::MatrixXd X = x.replicate(1, 5);
  const double dt = 1e-3;
  Eigen::MatrixXd zW = Eigen::MatrixXd::Zero(3, 5);
  Eigen::MatrixXd zV = Eigen::MatrixXd::Zero(3, 5);
  Eigen::VectorXd dZ = Eigen::VectorXd::Zero(3);
  for (int n = 0; n < 10; ++n) {
    enkf_step(m, X, dZ, zW, zV, dt);
    x += dt * (m.A * x + m.f);  // Phat = 0, gain inert, pure drift
  }
  for (int p = 0; p < 5; ++p)
    EXPECT_LT((X.col(p) - x).norm(), 1e-12);
}

TEST(Kbp, SemiImplicitEnkfStepMatchesManualComputation) {
  const int d = 3;
  Eigen::MatrixXd A(d, d);
  A << -1.0, 0.2, 0.0, 0.1, -0.8, 0.0, 0.0, 0.3, -1.5;
  Eigen::VectorXd f(d);
  f << 0.5, 0.0, -0.2;
  SparseMat mass(d, d);
  for (int i = 0; i < d; ++i) mass.insert(i, i) = 1.0 + 0.5 * i;
  mass.makeCompressed();
  Eigen::MatrixXd Hgain = Eigen::MatrixXd(mass);
  auto m = build_model(A, f, 0.3 * Eigen::MatrixXd::Identity(d, d),
                       Eigen::MatrixXd::Identity(d, d),
                       2.0 * Eigen::MatrixXd::Identity(d, d), Hgain, mass);
  const double dt = 0.05;
  SemiImplicitSolver solver(m, dt);

  RngPlan plan{33};
  auto s = plan.stream("x");
  Eigen::MatrixXd X = s.normal_matrix(d, 4);
  Eigen::MatrixXd X0 = X;
  Eigen::MatrixXd dW = 0.1 * s.normal_matrix(d, 4);
  Eigen::MatrixXd dV = 0.1 * s.normal_matrix(d, 4);
  Eigen::VectorXd dZ = 0.1 * s.normal_vector(d);
  enkf_step_semi_implicit(m, solver, X, dZ, dW, dV, dt);

  Eigen::MatrixXd Phat = ensemble_cov(X0);
  Eigen::MatrixXd W = Eigen::MatrixXd(mass);
  Eigen::MatrixXd lhs = W - dt * A;
  const double gsqrt = std::sqrt(2.0);
  for (int p = 0; p < 4; ++p) {
    Eigen::VectorXd innov = dZ - dt * X0.col(p) - gsqrt * dV.col(p);
    Eigen::VectorXd forcing = std::sqrt(0.3) * dW.col(p) +
                              Phat * (Hgain * innov) / 2.0;
    Eigen::VectorXd expected = lhs.lu().solve(W * (X0.col(p) + forcing) + dt * f);
    EXPECT_LT((X.col(p) - expected).norm(), 1e-12) << "particle " << p;
  }
}

TEST(Kbp, DeterministicMomentStepEqualsMeanStep) {
  auto m = small_random_model(4, 2, 31);
  RngPlan plan{3};
  auto s = plan.stream("state");
  Eigen::VectorXd mean1 = s.normal_vector(4);
  Eigen::VectorXd mean2 = mean1;
  Eigen::MatrixXd G = s.normal_matrix(4, 4);
  Eigen::MatrixXd P = G * G.transpose();
  Eigen::VectorXd dZ = s.normal_vector(2);
  kb_mean_step(m, mean1, P, dZ, 1e-3);
  deterministic_kbp_moment_step(m, mean2, P, dZ, 1e-3);
  EXPECT_EQ((mean1 - mean2).norm(), 0.0);
}

TEST(Kbp, ProcessStepSharesEnkfArithmeticBitForBit) {
  auto m = small_random_model(4, 3, 13);
  RngPlan plan{6};
  auto s = plan.stream("x");
  Eigen::MatrixXd X = s.normal_matrix(4, 5);
  Eigen::MatrixXd dW = 0.03 * s.normal_matrix(4, 5);
  Eigen::MatrixXd dV = 0.03 * s.normal_matrix(3, 5);
  Eigen::VectorXd dZ = 0.01 * s.normal_vector(3);
  const double dt = 1e-3;

  Eigen::MatrixXd Phat = ensemble_cov(X);
  Eigen::MatrixXd ens = X;
  enkf_step(m, ens, dZ, dW, dV, dt);
  for (int p = 0; p < 5; ++p) {
    Eigen::VectorXd x = X.col(p);
    kbp_process_step(m, x, Phat, dZ, dW.col(p), dV.col(p), dt);
    EXPECT_EQ((x - ens.col(p)).norm(), 0.0) << "particle " << p;
  }
}

TEST(Kbp, ProcessStepWithZeroNoiseAndGainIsModelPropagation) {
  const int d = 3;
  Eigen::MatrixXd A(d, d);
  A << -1.0, 0.5, 0.0, 0.0, -2.0, 0.1, 0.0, 0.0, -0.7;
  Eigen::VectorXd f(d);
  f << 0.2, 0.0, -0.1;
  auto m = build_model(A, f, Eigen::MatrixXd::Zero(d, d),
                       Eigen::MatrixXd::Identity(d, d),
                       Eigen::MatrixXd::Identity(d, d));
  Eigen::VectorXd x(d);
  x << 1.0, 2.0, 3.0;
  Eigen::VectorXd x0 = x;
  const double dt = 0.01;
  kbp_process_step(m, x, Eigen::MatrixXd::Zero(d, d),
                   Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d),
                   Eigen::VectorXd::Zero(d), dt);
  EXPECT_LT((x - (x0 + dt * (A * x0 + f))).norm(), 1e-15);
}

TEST(Kbp, EnkfExchangeabilityUnderParticlePermutation) {
  auto m = small_random_model(4, 4, 19);
  RngPlan plan{9};
  auto s = plan.stream("x");
  const int P = 6;
  Eigen::MatrixXd X = s.normal_matrix(4, P);
  Eigen::MatrixXd dW = 0.03 * s.normal_matrix(4, P);
  Eigen::MatrixXd dV = 0.03 * s.normal_matrix(4, P);
  Eigen::VectorXd dZ = 0.01 * s.normal_vector(4);
  const double dt = 1e-3;

  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Eigen::MatrixXd Xp(4, P), dWp(4, P), dVp(4, P);
  for (int p = 0; p < P; ++p) {
    Xp.col(p) = X.col(perm[p]);
    dWp.col(p) = dW.col(perm[p]);
    dVp.col(p) = dV.col(perm[p]);
  }
  enkf_step(m, X, dZ, dW, dV, dt);
  enkf_step(m, Xp, dZ, dWp, dVp, dt);
  for (int p = 0; p < P; ++p)
    EXPECT_LT((Xp.col(p) - X.col(perm[p])).norm(), 1e-12)
        << "particle " << p;
}

TEST(Kbp, NonFiniteStatesAreFlagged) {
  auto m = small_random_model(3, 3, 23);
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(3, 3);
  P(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(riccati_step(m, P, 1e-3), NonFiniteState);

  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(3, 3);
  X(1, 2) = std::numeric_limits<double>::quiet_NaN();
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(3, 3);
  EXPECT_THROW(enkf_step(m, X, Eigen::VectorXd::Zero(3), z, z, 1e-3),
               NonFiniteState);
}

TEST(Kbp, ProcessRealizationsReproduceFilterMoments) {
  const int d = 2;
  Eigen::MatrixXd A(d, d);
  A << -1.0, 0.2, 0.0, -0.6;
  Eigen::VectorXd f(d);
  f << 0.1, 0.0;
  auto m = build_model(A, f, 0.4 * Eigen::MatrixXd::Identity(d, d),
                       Eigen::MatrixXd::Identity(d, d),
                       Eigen::MatrixXd::Identity(d, d));
  const double dt = 1e-3;
  const int steps = 100;
  RngPlan plan{404};
  auto sig = plan.stream("signal");
  Eigen::VectorXd x0(d);
  x0 << 0.5, -0.5;
  auto traj = simulate_signal(m, x0, steps, dt, sig);
  auto obs_stream = plan.stream("obs");
  auto obs = simulate_observations(m, traj, dt, obs_stream);

  const int N = 10000;
  Eigen::VectorXd m0 = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd P0 = 0.3 * Eigen::MatrixXd::Identity(d, d);
  // realizations share the observation path; covariance is propagated
  // exactly once since it does not depend on the realizations
  std::vector<Eigen::MatrixXd> Ps(steps);
  Eigen::MatrixXd P = P0;
  KbState kb{m0, P0};
  Eigen::MatrixXd X(d, N);
  auto ic_stream = plan.stream("ic");
  X = m0.replicate(1, N) + std::sqrt(0.3) * ic_stream.normal_matrix(d, N);
  EnsembleNoise noise(plan, N);
  for (int n = 0; n < steps; ++n) {
    Ps[n] = P;
    riccati_step(m, P, dt);
  }
  for (int n = 0; n < steps; ++n) {
    Eigen::VectorXd dZ = obs.dZ.row(n);
    Eigen::MatrixXd dW = noise.draw_w(d, dt);
    Eigen::MatrixXd dV = noise.draw_v(d, dt);
    detail::particle_update_with_cov(m, X, Ps[n], dZ, dW, dV, dt, nullptr,
                                     nullptr);
    kb_step(m, kb, dZ, dt);
  }
  Eigen::VectorXd mhat = ensemble_mean(X);
  Eigen::MatrixXd chat = ensemble_cov(X);
  const double se = std::sqrt(kb.cov.trace() / N);
  EXPECT_LT((mhat - kb.mean).norm(), 4.0 * se);
  EXPECT_LT((chat - kb.cov).norm() / kb.cov.norm(), 0.08);
}

TEST(Kbp, LargeEnsembleTracksKalmanBucyMoments) {
  const int d = 2;
  Eigen::MatrixXd A(d, d);
  A << -1.0, 0.3, 0.0, -0.8;
  Eigen::VectorXd f(d);
  f << 0.1, -0.05;
  auto m = build_model(A, f, 0.5 * Eigen::MatrixXd::Identity(d, d),
                       Eigen::MatrixXd::Identity(d, d),
                       Eigen::MatrixXd::Identity(d, d));
  const double dt = 1e-3;
  const int steps = 300;
  RngPlan plan{2027};
  auto sig_stream = plan.stream("signal");
  Eigen::VectorXd x0(d);
  x0 << 1.0, -1.0;
  auto traj = simulate_signal(m, x0, steps, dt, sig_stream);
  auto obs_stream = plan.stream("obs");
  auto obs = simulate_observations(m, traj, dt, obs_stream);

  const int P = 3000;
  Eigen::VectorXd m0(d);
  m0 << 0.5, -0.5;
  Eigen::MatrixXd C0 = 0.4 * Eigen::MatrixXd::Identity(d, d);
  auto ic_stream = plan.stream("ic");
  Eigen::MatrixXd X =
      m0.replicate(1, P) + std::sqrt(0.4) * ic_stream.normal_matrix(d, P);

  KbState kb{m0, C0};
  EnsembleNoise noise(plan, P);
  for (int n = 0; n < steps; ++n) {
    Eigen::VectorXd dZ = obs.dZ.row(n);
    Eigen::MatrixXd dW = noise.draw_w(d, dt);
    Eigen::MatrixXd dV = noise.draw_v(d, dt);
    enkf_step(m, X, dZ, dW, dV, dt);
    kb_step(m, kb, dZ, dt);
  }
  Eigen::VectorXd mhat = ensemble_mean(X);
  Eigen::MatrixXd chat = ensemble_cov(X);
  EXPECT_LT((mhat - kb.mean).norm(), 0.05);
  EXPECT_LT((chat - kb.cov).norm() / kb.cov.norm(), 0.15);
}
