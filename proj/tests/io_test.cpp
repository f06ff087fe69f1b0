#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "lrkb/io.hpp"
#include "lrkb/rng.hpp"

using namespace lrkb;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("lrkb_io_test_" + name);
}
}  // namespace

TEST(Io, FmtDoubleIsShortestRoundTrip) {
  EXPECT_EQ(io_detail::fmt_double(0.1), "0.1");
  EXPECT_EQ(io_detail::fmt_double(2.0), "2");
  EXPECT_EQ(io_detail::fmt_double(-0.25), "-0.25");
  const double third = 1.0 / 3.0;
  EXPECT_EQ(std::stod(io_detail::fmt_double(third)), third);
  const double tiny = 6.02e-23;
  EXPECT_EQ(std::stod(io_detail::fmt_double(tiny)), tiny);
}

TEST(Io, TrajectoryCsvRoundTrip) {
  RngPlan plan{31};
  auto s = plan.stream("io");
  Eigen::MatrixXd states = s.normal_matrix(6, 3);
  Eigen::VectorXd times = Eigen::VectorXd::LinSpaced(6, 0.0, 0.5);
  const auto path = temp_file("traj.csv");
  write_trajectory_csv(path, times, states, "m");

  CsvTable t = read_csv(path);
  ASSERT_EQ(t.header.size(), 4u);
  EXPECT_EQ(t.header[0], "t");
  EXPECT_EQ(t.header[1], "m_0");
  EXPECT_EQ(t.header[3], "m_2");
  ASSERT_EQ(t.data.rows(), 6);
  ASSERT_EQ(t.data.cols(), 4);
  EXPECT_EQ((t.data.col(0) - times).norm(), 0.0);
  EXPECT_EQ((t.data.rightCols(3) - states).norm(), 0.0);
  fs::remove(path);
}

TEST(Io, TrajectoryCsvRejectsMismatchedRows) {
  Eigen::MatrixXd states(3, 2);
  states.setZero();
  Eigen::VectorXd times(4);
  times.setZero();
  EXPECT_THROW(write_trajectory_csv(temp_file("bad.csv"), times, states),
               std::invalid_argument);
}

TEST(Io, BinaryMatrixRoundTripIsExact) {
  RngPlan plan{32};
  auto s = plan.stream("io");
  Eigen::MatrixXd m = s.normal_matrix(7, 5);
  const auto path = temp_file("mat.bin");
  write_matrix_binary(path, m);
  Eigen::MatrixXd back = read_matrix_binary(path);
  ASSERT_EQ(back.rows(), 7);
  ASSERT_EQ(back.cols(), 5);
  EXPECT_EQ((back - m).norm(), 0.0);
  fs::remove(path);
}

TEST(Io, BinaryMatrixRejectsForeignFiles) {
  const auto path = temp_file("foreign.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a matrix container";
  }
  EXPECT_THROW(read_matrix_binary(path), std::runtime_error);
  fs::remove(path);
}

TEST(Io, MatrixMarketCoordinateFormat) {
  Eigen::SparseMatrix<double> m(2, 3);
  m.insert(0, 0) = 1.5;
  m.insert(1, 2) = -2.0;
  m.makeCompressed();
  const auto path = temp_file("mat.mtx");
  write_matrix_market(path, m);

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_NE(line.find("MatrixMarket matrix coordinate real general"),
            std::string::npos);
  std::getline(in, line);
  EXPECT_EQ(line, "2 3 2");
  std::getline(in, line);
  EXPECT_EQ(line, "1 1 1.5");
  std::getline(in, line);
  EXPECT_EQ(line, "2 3 -2");
  fs::remove(path);
}
