#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "lrkb/model.hpp"

namespace lrkb {

struct InvalidGrid : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct AssemblyFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptySquare : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Structured bilinear quadrilateral mesh of the unit square, periodic in
/// x1 (the column at x1 = 1 is identified with x1 = 0) and free along x2
/// (homogeneous Neumann is natural for the weak form). Free nodes are
/// numbered row-major: id = j * (nx - 1) + i.
struct QuadMesh {
  Eigen::Index nx = 0;  // nodes per row before identification
  Eigen::Index ny = 0;  // nodes per column
  double hx = 0.0, hy = 0.0;
  MatrixXd coords;                                  // n_free x 2
  std::vector<std::array<Eigen::Index, 4>> elems;   // ccw free-node ids

  Eigen::Index free_nodes() const { return (nx - 1) * ny; }
  Eigen::Index elements() const {
    return static_cast<Eigen::Index>(elems.size());
  }
};

inline QuadMesh build_mesh(Eigen::Index nx, Eigen::Index ny) {
  if (nx < 3 || ny < 3)
    throw InvalidGrid("build_mesh: need at least 3 nodes per dimension");
  QuadMesh mesh;
  mesh.nx = nx;
  mesh.ny = ny;
  mesh.hx = 1.0 / static_cast<double>(nx - 1);
  mesh.hy = 1.0 / static_cast<double>(ny - 1);
  const Eigen::Index row = nx - 1;
  mesh.coords.resize(row * ny, 2);
  for (Eigen::Index j = 0; j < ny; ++j)
    for (Eigen::Index i = 0; i < row; ++i) {
      mesh.coords(j * row + i, 0) = static_cast<double>(i) * mesh.hx;
      mesh.coords(j * row + i, 1) = static_cast<double>(j) * mesh.hy;
    }
  const auto id = [row](Eigen::Index i, Eigen::Index j) {
    return j * row + (i % row);
  };
  mesh.elems.reserve(static_cast<size_t>((nx - 1) * (ny - 1)));
  for (Eigen::Index j = 0; j + 1 < ny; ++j)
    for (Eigen::Index i = 0; i < nx - 1; ++i)
      mesh.elems.push_back(
          {id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)});
  return mesh;
}

/// Assembled weak-form operators of du = (a Lap u + b . grad u) dt:
/// M from int(phi_i phi_j), A = -a int(grad phi_i . grad phi_j)
/// + int((b . grad phi_j) phi_i), 2x2 Gauss quadrature (exact for bilinear
/// elements on the uniform rectangular grid).
struct FemOperators {
  SparseMat M;
  SparseMat A;
  double a = 0.0;
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  double sigma = 0.0;
};

inline FemOperators assemble_operators(const QuadMesh& mesh, double a,
                                       const Eigen::Vector2d& b,
                                       double sigma = 0.0) {
  if (a < 0.0) throw std::invalid_argument("assemble_operators: a must be >= 0");
  if (!(mesh.hx > 0.0) || !(mesh.hy > 0.0))
    throw AssemblyFailure("assemble_operators: degenerate elements");

  // reference square [-1,1]^2, corner order (-,-), (+,-), (+,+), (-,+)
  const double g = 1.0 / std::sqrt(3.0);
  const std::array<double, 2> gp{-g, g};
  const std::array<double, 4> xi{-1.0, 1.0, 1.0, -1.0};
  const std::array<double, 4> eta{-1.0, -1.0, 1.0, 1.0};
  const double det = mesh.hx * mesh.hy / 4.0;

  Eigen::Matrix4d m_loc = Eigen::Matrix4d::Zero();
  Eigen::Matrix4d a_loc = Eigen::Matrix4d::Zero();
  for (double gx : gp)
    for (double gy : gp) {
      Eigen::Vector4d n, dx, dy;
      for (int i = 0; i < 4; ++i) {
        n(i) = 0.25 * (1.0 + xi[i] * gx) * (1.0 + eta[i] * gy);
        dx(i) = 0.25 * xi[i] * (1.0 + eta[i] * gy) * 2.0 / mesh.hx;
        dy(i) = 0.25 * eta[i] * (1.0 + xi[i] * gx) * 2.0 / mesh.hy;
      }
      m_loc += det * (n * n.transpose());
      a_loc += det * (-a * (dx * dx.transpose() + dy * dy.transpose()) +
                      n * (b(0) * dx + b(1) * dy).transpose());
    }

  std::vector<Eigen::Triplet<double>> tm, ta;
  tm.reserve(mesh.elems.size() * 16);
  ta.reserve(mesh.elems.size() * 16);
  for (const auto& e : mesh.elems)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        tm.emplace_back(e[static_cast<size_t>(i)], e[static_cast<size_t>(j)],
                        m_loc(i, j));
        ta.emplace_back(e[static_cast<size_t>(i)], e[static_cast<size_t>(j)],
                        a_loc(i, j));
      }
  FemOperators ops;
  const Eigen::Index d = mesh.free_nodes();
  ops.M.resize(d, d);
  ops.A.resize(d, d);
  ops.M.setFromTriplets(tm.begin(), tm.end());
  ops.A.setFromTriplets(ta.begin(), ta.end());
  ops.M.makeCompressed();
  ops.A.makeCompressed();
  ops.a = a;
  ops.b = b;
  ops.sigma = sigma;
  return ops;
}

/// Axis-aligned observation square.
struct ObsSquare {
  double cx = 0.0, cy = 0.0, side = 0.0;
};

/// 5x5 grid of squares of side 0.12 centered at ((2i+1)/10, (2j+1)/10).
inline std::vector<ObsSquare> default_observation_squares() {
  std::vector<ObsSquare> squares;
  squares.reserve(25);
  for (int j = 0; j < 5; ++j)
    for (int i = 0; i < 5; ++i)
      squares.push_back(
          {(2.0 * i + 1.0) / 10.0, (2.0 * j + 1.0) / 10.0, 0.12});
  return squares;
}

/// Indicator-average observation rows H(l, j) = int_D phi_j chi_l. Each
/// element is clipped against the square (rectangle-rectangle, exact) and
/// the bilinear shape functions are integrated in closed form on the clip.
inline MatrixXd assemble_partial_observation(
    const QuadMesh& mesh, const std::vector<ObsSquare>& squares) {
  const Eigen::Index d = mesh.free_nodes();
  MatrixXd H = MatrixXd::Zero(static_cast<Eigen::Index>(squares.size()), d);
  for (size_t l = 0; l < squares.size(); ++l) {
    const ObsSquare& s = squares[l];
    const double x0 = s.cx - 0.5 * s.side, x1 = s.cx + 0.5 * s.side;
    const double y0 = s.cy - 0.5 * s.side, y1 = s.cy + 0.5 * s.side;
    for (const auto& e : mesh.elems) {
      const double ex = mesh.coords(e[0], 0), ey = mesh.coords(e[0], 1);
      const double cx0 = std::max(x0, ex), cx1 = std::min(x1, ex + mesh.hx);
      const double cy0 = std::max(y0, ey), cy1 = std::min(y1, ey + mesh.hy);
      if (cx0 >= cx1 || cy0 >= cy1) continue;
      // local coordinates of the clipped cell
      const double s0 = (cx0 - ex) / mesh.hx, s1 = (cx1 - ex) / mesh.hx;
      const double t0 = (cy0 - ey) / mesh.hy, t1 = (cy1 - ey) / mesh.hy;
      const double is1 = 0.5 * (s1 * s1 - s0 * s0);  // int s ds
      const double is0 = (s1 - s0) - is1;            // int (1-s) ds
      const double it1 = 0.5 * (t1 * t1 - t0 * t0);
      const double it0 = (t1 - t0) - it1;
      const double scale = mesh.hx * mesh.hy;
      H(static_cast<Eigen::Index>(l), e[0]) += scale * is0 * it0;
      H(static_cast<Eigen::Index>(l), e[1]) += scale * is1 * it0;
      H(static_cast<Eigen::Index>(l), e[2]) += scale * is1 * it1;
      H(static_cast<Eigen::Index>(l), e[3]) += scale * is0 * it1;
    }
    if (H.row(static_cast<Eigen::Index>(l)).sum() <= 0.0)
      throw EmptySquare("assemble_partial_observation: square " +
                        std::to_string(l) + " intersects no element");
  }
  return H;
}

/// Weighted norm sqrt(x^T M x) induced by the mass matrix.
inline double h_norm(const SparseMat& M, const VectorXd& x) {
  return std::sqrt(std::max(0.0, x.dot(M * x)));
}

/// Assembled Q-Wiener forcing M * dW with dW per-node i.i.d. N(0, dt).
inline VectorXd qwiener_increment(const SparseMat& M, NoiseStream& stream,
                                  double dt) {
  return M * stream.brownian(M.rows(), dt);
}

/// Low-rank Gaussian initial state: a Gaussian bump mean plus modes
/// (1/i^2) sin(i pi x1) cos(i pi x2), i = 1..R, orthonormalized in the
/// mass inner product.
inline LowRankGaussian fem_initial_condition(const QuadMesh& mesh,
                                             Eigen::Index R,
                                             const SparseMat& M) {
  const Eigen::Index d = mesh.free_nodes();
  VectorXd mean(d);
  MatrixXd B(d, R);
  for (Eigen::Index n = 0; n < d; ++n) {
    const double x1 = mesh.coords(n, 0), x2 = mesh.coords(n, 1);
    mean(n) = std::exp(-(x1 - 0.5) * (x1 - 0.5) - (x2 - 0.5) * (x2 - 0.5));
    for (Eigen::Index i = 1; i <= R; ++i)
      B(n, i - 1) = std::sin(static_cast<double>(i) * std::numbers::pi * x1) *
                    std::cos(static_cast<double>(i) * std::numbers::pi * x2) /
                    static_cast<double>(i * i);
  }
  return make_low_rank_ic(std::move(mean), B, &M);
}

/// Weak-form filtering model with nodal (full) observations: H = I on the
/// degrees of freedom and gain direction M, so the assembled correction is
/// (1/gamma) M Phat M (dZ - X dt - ...).
inline LinearAffineModel build_fem_model_full(const FemOperators& ops,
                                              double gamma) {
  const Eigen::Index d = ops.M.rows();
  return build_model(MatrixXd(ops.A), VectorXd::Zero(d),
                     ops.sigma * MatrixXd::Identity(d, d),
                     MatrixXd::Identity(d, d),
                     gamma * MatrixXd::Identity(d, d), MatrixXd(ops.M),
                     ops.M);
}

/// Weak-form filtering model with indicator observations: H maps nodal
/// values to square averages and the gain direction is H^T, so the
/// assembled correction is (1/gamma) M Phat H^T (dZ - H X dt - ...).
inline LinearAffineModel build_fem_model_partial(const FemOperators& ops,
                                                 const MatrixXd& H_part,
                                                 double gamma) {
  const Eigen::Index d = ops.M.rows();
  const Eigen::Index k = H_part.rows();
  return build_model(MatrixXd(ops.A), VectorXd::Zero(d),
                     ops.sigma * MatrixXd::Identity(d, d), H_part,
                     gamma * MatrixXd::Identity(k, k), std::nullopt, ops.M);
}

}  // namespace lrkb
