#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

namespace lrkb {

namespace io_detail {
// shortest round-trip decimal form of a double
inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == x) {
    for (int prec = 1; prec < 17; ++prec) {
      char shorter[32];
      std::snprintf(shorter, sizeof(shorter), "%.*g", prec, x);
      std::sscanf(shorter, "%lf", &back);
      if (back == x) return shorter;
    }
  }
  return buf;
}
}  // namespace io_detail

/// CSV trajectory: header "t,x_0,...,x_{d-1}", one row per time point.
inline void write_trajectory_csv(const std::filesystem::path& path,
                                 const Eigen::VectorXd& times,
                                 const Eigen::MatrixXd& states,
                                 const std::string& prefix = "x") {
  if (times.size() != states.rows())
    throw std::invalid_argument("write_trajectory_csv: row count mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "t";
  for (Eigen::Index j = 0; j < states.cols(); ++j) out << "," << prefix << "_" << j;
  out << "\n";
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    out << io_detail::fmt_double(times[i]);
    for (Eigen::Index j = 0; j < states.cols(); ++j)
      out << "," << io_detail::fmt_double(states(i, j));
    out << "\n";
  }
}

struct CsvTable {
  std::vector<std::string> header;
  Eigen::MatrixXd data;
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty csv " + path.string());
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.header.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != t.header.size())
      throw std::runtime_error("ragged csv row in " + path.string());
    rows.push_back(std::move(row));
  }
  t.data.resize(static_cast<Eigen::Index>(rows.size()),
                static_cast<Eigen::Index>(t.header.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      t.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return t;
}

// Binary matrix container: 16-byte header (magic "LRKB", u32 version,
// u32 rows, u32 cols, little-endian), then row-major float64 payload.
inline constexpr std::uint32_t kBinaryVersion = 1;

inline void write_matrix_binary(const std::filesystem::path& path,
                                const Eigen::MatrixXd& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  const char magic[4] = {'L', 'R', 'K', 'B'};
  out.write(magic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  };
  put_u32(kBinaryVersion);
  put_u32(static_cast<std::uint32_t>(m.rows()));
  put_u32(static_cast<std::uint32_t>(m.cols()));
  using RowMajor =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor rm = m;
  out.write(reinterpret_cast<const char*>(rm.data()),
            static_cast<std::streamsize>(sizeof(double) * rm.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Eigen::MatrixXd read_matrix_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "LRKB", 4) != 0)
    throw std::runtime_error("bad magic in " + path.string());
  auto get_u32 = [&]() {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  };
  const std::uint32_t version = get_u32();
  if (version != kBinaryVersion)
    throw std::runtime_error("unsupported container version in " + path.string());
  const std::uint32_t rows = get_u32(), cols = get_u32();
  using RowMajor =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor rm(rows, cols);
  in.read(reinterpret_cast<char*>(rm.data()),
          static_cast<std::streamsize>(sizeof(double) * rm.size()));
  if (!in) throw std::runtime_error("truncated container " + path.string());
  return rm;
}

/// MatrixMarket coordinate export for sparse operators (mesh/assembly dumps).
inline void write_matrix_market(const std::filesystem::path& path,
                                const Eigen::SparseMatrix<double>& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << m.rows() << " " << m.cols() << " " << m.nonZeros() << "\n";
  for (int k = 0; k < m.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
      out << it.row() + 1 << " " << it.col() + 1 << " "
          << io_detail::fmt_double(it.value()) << "\n";
}

}  // namespace lrkb
