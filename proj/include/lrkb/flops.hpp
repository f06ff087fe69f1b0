#pragma once

namespace lrkb {

/// Accumulates floating point operation counts for the cost-scaling studies.
/// Step functions take an optional pointer and add analytic counts for the
/// operations they actually execute, with their actual dimensions.
struct OpCount {
  double flops = 0.0;
  void add(double f) { flops += f; }
  void gemm(double m, double n, double k) { flops += 2.0 * m * n * k; }
  void gemv(double m, double n) { flops += 2.0 * m * n; }
  void sparse_apply(double nnz, double ncols = 1.0) { flops += 2.0 * nnz * ncols; }
  void axpy(double n) { flops += 2.0 * n; }
};

inline void count_gemm(OpCount* c, double m, double n, double k) {
  if (c) c->gemm(m, n, k);
}
inline void count_gemv(OpCount* c, double m, double n) {
  if (c) c->gemv(m, n);
}
inline void count_sparse(OpCount* c, double nnz, double ncols = 1.0) {
  if (c) c->sparse_apply(nnz, ncols);
}
inline void count_axpy(OpCount* c, double n) {
  if (c) c->axpy(n);
}

}  // namespace lrkb
