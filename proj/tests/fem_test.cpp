#include "lrkb/fem.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lrkb/io.hpp"
#include "lrkb/rng.hpp"

namespace {

using lrkb::MatrixXd;
using lrkb::SparseMat;
using lrkb::VectorXd;

TEST(FemMesh, CountsMatchStructuredGrid) {
  const lrkb::QuadMesh big = lrkb::build_mesh(21, 21);
  EXPECT_EQ(big.free_nodes(), 420);
  EXPECT_EQ(big.elements(), 400);
  EXPECT_EQ(big.coords.rows(), 420);
  EXPECT_DOUBLE_EQ(big.hx, 0.05);
  EXPECT_DOUBLE_EQ(big.hy, 0.05);

  const lrkb::QuadMesh small = lrkb::build_mesh(3, 3);
  EXPECT_EQ(small.free_nodes(), 6);
  EXPECT_EQ(small.elements(), 4);
}

TEST(FemMesh, RejectsTinyGrids) {
  EXPECT_THROW(lrkb::build_mesh(2, 5), lrkb::InvalidGrid);
  EXPECT_THROW(lrkb::build_mesh(5, 2), lrkb::InvalidGrid);
}

TEST(FemMesh, ConnectivityWrapsAroundInX) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(4, 3);  // 3 free columns
  // last element of row j spans x1 in [2/3, 1]; its right edge is column 0
  const auto& e = mesh.elems[2];
  EXPECT_EQ(e[0], 2);
  EXPECT_EQ(e[1], 0);
  EXPECT_EQ(e[2], 3);
  EXPECT_EQ(e[3], 5);
  // x2 boundary rows are not identified
  EXPECT_EQ(mesh.elems.size(), 6u);
}

TEST(FemAssembly, MassRowSumsIntegrateBasisFunctions) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(21, 21);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const double cell = mesh.hx * mesh.hy;
  const VectorXd row_sums = ops.M * VectorXd::Ones(mesh.free_nodes());
  for (Eigen::Index n = 0; n < mesh.free_nodes(); ++n) {
    const double x2 = mesh.coords(n, 1);
    const bool neumann_edge = x2 == 0.0 || x2 == 1.0;
    EXPECT_NEAR(row_sums(n), neumann_edge ? 0.5 * cell : cell, 1e-16)
        << "node " << n;
  }
  EXPECT_NEAR(row_sums.sum(), 1.0, 1e-13);  // total area of the domain
  EXPECT_EQ((MatrixXd(ops.M) - MatrixXd(ops.M).transpose()).norm(), 0.0);
}

TEST(FemAssembly, MassMatrixIsPositiveDefinite) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(5, 5);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig{MatrixXd(ops.M)};
  EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
}

TEST(FemAssembly, OperatorAnnihilatesConstants) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(21, 21);
  const VectorXd ones = VectorXd::Ones(420);
  for (const double bx : {0.0, 1.0}) {
    const lrkb::FemOperators ops =
        lrkb::assemble_operators(mesh, 0.1, {bx, 0.0});
    EXPECT_LE((ops.A * ones).cwiseAbs().maxCoeff(), 1e-14) << "b = " << bx;
  }
}

TEST(FemAssembly, SplitsIntoSymmetricDiffusionAndSkewAdvection) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(9, 7);
  const MatrixXd diff(
      lrkb::assemble_operators(mesh, 0.3, {0.0, 0.0}).A);
  EXPECT_EQ((diff - diff.transpose()).norm(), 0.0);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig{diff};
  EXPECT_LE(eig.eigenvalues().maxCoeff(), 1e-13);

  // periodic transport in x1 is skew-adjoint in the L2 pairing
  const MatrixXd adv(lrkb::assemble_operators(mesh, 0.0, {1.0, 0.0}).A);
  EXPECT_LE((adv + adv.transpose()).norm(), 1e-13);
}

TEST(FemAssembly, SparsityFollowsMeshAdjacency) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(21, 21);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  // interior nodes couple to a 3x3 stencil
  EXPECT_LE(ops.M.nonZeros(), 9 * mesh.free_nodes());
  const MatrixXd m(ops.M);
  for (Eigen::Index i = 0; i < 50; ++i)
    for (Eigen::Index j = 0; j < mesh.free_nodes(); ++j) {
      if (m(i, j) == 0.0) continue;
      double dx = std::abs(mesh.coords(i, 0) - mesh.coords(j, 0));
      dx = std::min(dx, 1.0 - dx);  // periodic distance
      const double dy = std::abs(mesh.coords(i, 1) - mesh.coords(j, 1));
      EXPECT_LE(dx, mesh.hx + 1e-12);
      EXPECT_LE(dy, mesh.hy + 1e-12);
    }
}

TEST(FemObservation, RowsIntegrateSquareAreas) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(21, 21);
  const auto squares = lrkb::default_observation_squares();
  ASSERT_EQ(squares.size(), 25u);
  const MatrixXd H = lrkb::assemble_partial_observation(mesh, squares);
  EXPECT_EQ(H.rows(), 25);
  EXPECT_EQ(H.cols(), 420);
  EXPECT_GE(H.minCoeff(), 0.0);
  for (Eigen::Index l = 0; l < H.rows(); ++l)
    EXPECT_NEAR(H.row(l).sum(), 0.12 * 0.12, 1e-15) << "square " << l;
}

TEST(FemObservation, FullDomainSquareMatchesMassRowSums) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(11, 11);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const MatrixXd H =
      lrkb::assemble_partial_observation(mesh, {{0.5, 0.5, 1.0}});
  const VectorXd phi_integrals = ops.M * VectorXd::Ones(mesh.free_nodes());
  EXPECT_LE((H.row(0).transpose() - phi_integrals).cwiseAbs().maxCoeff(),
            1e-15);
}

TEST(FemObservation, RejectsDegenerateSquares) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(11, 11);
  EXPECT_THROW(lrkb::assemble_partial_observation(mesh, {{0.5, 0.5, 0.0}}),
               lrkb::EmptySquare);
  EXPECT_THROW(lrkb::assemble_partial_observation(mesh, {{5.0, 5.0, 0.1}}),
               lrkb::EmptySquare);
}

TEST(FemNorm, MatchesMassQuadraticForm) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(11, 11);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const Eigen::Index d = mesh.free_nodes();
  EXPECT_NEAR(lrkb::h_norm(ops.M, VectorXd::Ones(d)), 1.0, 1e-13);
  EXPECT_EQ(lrkb::h_norm(ops.M, VectorXd::Zero(d)), 0.0);

  lrkb::NoiseStream stream(42);
  const VectorXd x = stream.normal_vector(d), y = stream.normal_vector(d);
  EXPECT_LE(lrkb::h_norm(ops.M, x + y),
            lrkb::h_norm(ops.M, x) + lrkb::h_norm(ops.M, y) + 1e-12);
  EXPECT_NEAR(lrkb::h_norm(ops.M, 3.0 * x), 3.0 * lrkb::h_norm(ops.M, x),
              1e-12);
}

TEST(FemNoise, QWienerIncrementMatchesMassScaledCovariance) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(3, 3);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const Eigen::Index d = mesh.free_nodes();
  const double dt = 0.3;

  lrkb::NoiseStream stream(7);
  const int n_draws = 40000;
  MatrixXd draws(d, n_draws);
  for (int k = 0; k < n_draws; ++k)
    draws.col(k) = lrkb::qwiener_increment(ops.M, stream, dt);
  const MatrixXd cov = draws * draws.transpose() / double(n_draws);
  const MatrixXd expected = dt * MatrixXd(ops.M) * MatrixXd(ops.M);
  EXPECT_LE((cov - expected).norm() / expected.norm(), 0.07);

  lrkb::NoiseStream zero_dt(9);
  EXPECT_EQ(lrkb::qwiener_increment(ops.M, zero_dt, 0.0).cwiseAbs().maxCoeff(),
            0.0);

  lrkb::NoiseStream s1(123), s2(123);
  EXPECT_EQ((lrkb::qwiener_increment(ops.M, s1, dt) -
             lrkb::qwiener_increment(ops.M, s2, dt))
                .norm(),
            0.0);
}

TEST(FemDynamics, SemiImplicitSolutionConvergesAtFirstOrder) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(11, 11);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0}, 0.0);
  const lrkb::LinearAffineModel model = lrkb::build_fem_model_full(ops, 1e-2);
  const Eigen::Index d = mesh.free_nodes();

  VectorXd x0(d);
  for (Eigen::Index n = 0; n < d; ++n) {
    const double x1 = mesh.coords(n, 0), x2 = mesh.coords(n, 1);
    x0(n) = std::exp(-(x1 - 0.5) * (x1 - 0.5) - (x2 - 0.5) * (x2 - 0.5));
  }

  const double t_end = 0.1;
  const auto run = [&](double dt) {
    const auto n = static_cast<Eigen::Index>(std::llround(t_end / dt));
    const lrkb::SemiImplicitSolver solver(model, dt);
    VectorXd x = x0;
    for (Eigen::Index k = 0; k < n; ++k)
      x = solver.solve(VectorXd(ops.M * x));
    return x;
  };

  const VectorXd ref = run(1e-5);
  const double e_coarse = lrkb::h_norm(ops.M, run(1e-2) - ref);
  const double e_fine = lrkb::h_norm(ops.M, run(1e-3) - ref);
  const double ratio = e_coarse / e_fine;
  EXPECT_GE(ratio, 8.0);
  EXPECT_LE(ratio, 12.0);
}

TEST(FemInitialCondition, BuildsMassOrthonormalModes) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(21, 21);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const lrkb::LowRankGaussian ic =
      lrkb::fem_initial_condition(mesh, 12, ops.M);
  ASSERT_EQ(ic.U.cols(), 12);
  ASSERT_EQ(ic.mean.size(), 420);

  EXPECT_LE((ic.U.transpose() * (ops.M * ic.U) - MatrixXd::Identity(12, 12))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);

  // the mean interpolates the Gaussian bump
  for (Eigen::Index n : {0, 57, 200, 419}) {
    const double x1 = mesh.coords(n, 0), x2 = mesh.coords(n, 1);
    EXPECT_DOUBLE_EQ(ic.mean(n), std::exp(-(x1 - 0.5) * (x1 - 0.5) -
                                          (x2 - 0.5) * (x2 - 0.5)));
  }

  // U MY U^T reproduces B B^T for the generating modes
  MatrixXd B(420, 12);
  for (Eigen::Index n = 0; n < 420; ++n)
    for (Eigen::Index i = 1; i <= 12; ++i)
      B(n, i - 1) =
          std::sin(i * std::numbers::pi * mesh.coords(n, 0)) *
          std::cos(i * std::numbers::pi * mesh.coords(n, 1)) / double(i * i);
  lrkb::NoiseStream stream(5);
  const VectorXd v = stream.normal_vector(420);
  const VectorXd via_ic = ic.U * (ic.MY * (ic.U.transpose() * (ops.M * v)));
  const VectorXd direct = B * (B.transpose() * (ops.M * v));
  EXPECT_LE((via_ic - direct).norm(), 1e-12 * direct.norm());
}

TEST(FemModel, BuildersWireObservationGeometry) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(5, 5);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0}, 1e-5);
  const Eigen::Index d = mesh.free_nodes();
  lrkb::NoiseStream stream(11);

  const lrkb::LinearAffineModel full = lrkb::build_fem_model_full(ops, 1e-2);
  EXPECT_EQ(full.d, d);
  EXPECT_EQ(full.k, d);
  ASSERT_TRUE(full.has_mass());
  EXPECT_TRUE(full.H_identity);
  EXPECT_DOUBLE_EQ(full.sigma_scalar, 1e-5);
  const VectorXd v = stream.normal_vector(d);
  EXPECT_LE((full.gain_adjoint(v) - MatrixXd(ops.M) * v / 1e-2).norm(),
            1e-12 * v.norm());

  const MatrixXd H =
      lrkb::assemble_partial_observation(mesh,
                                         lrkb::default_observation_squares());
  const lrkb::LinearAffineModel part =
      lrkb::build_fem_model_partial(ops, H, 1e-2);
  EXPECT_EQ(part.k, 25);
  ASSERT_TRUE(part.has_mass());
  const VectorXd w = stream.normal_vector(25);
  EXPECT_LE((part.gain_adjoint(w) - H.transpose() * w / 1e-2).norm(),
            1e-12 * w.norm());
  EXPECT_LE((part.S - H.transpose() * H / 1e-2).norm(), 1e-12 * part.S.norm());
}

TEST(FemIo, OperatorExportRoundTripsThroughMatrixMarket) {
  const lrkb::QuadMesh mesh = lrkb::build_mesh(3, 3);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0});
  const auto path = std::filesystem::temp_directory_path() / "lrkb_mass.mtx";
  lrkb::write_matrix_market(path, ops.M);

  std::ifstream in(path);
  ASSERT_TRUE(in.good());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "%%MatrixMarket matrix coordinate real general");
  Eigen::Index rows = 0, cols = 0, nnz = 0;
  in >> rows >> cols >> nnz;
  EXPECT_EQ(rows, 6);
  EXPECT_EQ(cols, 6);
  EXPECT_EQ(nnz, ops.M.nonZeros());
  std::vector<Eigen::Triplet<double>> trip;
  for (Eigen::Index k = 0; k < nnz; ++k) {
    Eigen::Index i = 0, j = 0;
    double v = 0.0;
    in >> i >> j >> v;
    trip.emplace_back(i - 1, j - 1, v);
  }
  SparseMat back(rows, cols);
  back.setFromTriplets(trip.begin(), trip.end());
  EXPECT_EQ((MatrixXd(back) - MatrixXd(ops.M)).norm(), 0.0);
  std::filesystem::remove(path);
}

TEST(FemDynamics, NoisySignalStaysFinite) {
  // 21 nodes per side: the slowest grid that resolves all 12 noise modes
  const lrkb::QuadMesh mesh = lrkb::build_mesh(21, 21);
  const lrkb::FemOperators ops =
      lrkb::assemble_operators(mesh, 0.1, {1.0, 0.0}, 1e-5);
  const lrkb::LinearAffineModel model = lrkb::build_fem_model_full(ops, 1e-2);
  const lrkb::LowRankGaussian ic =
      lrkb::fem_initial_condition(mesh, 12, ops.M);

  lrkb::NoiseStream stream(3);
  const MatrixXd traj = lrkb::simulate_signal(model, ic.mean, 100, 1e-2,
                                              stream);
  EXPECT_TRUE(traj.allFinite());
  // advection-diffusion with tiny noise keeps the profile bounded
  EXPECT_LE(traj.cwiseAbs().maxCoeff(), 2.0);
}

}  // namespace
