/// \file linalg.hpp
/// Sparse and dense kernels for the solver core: CSR storage, the 7-point
/// Poisson operator, and the handful of BLAS-1 pieces GMRES needs.

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace resilab::runtime {
class RankCtx;
struct Comm;
}  // namespace resilab::runtime

namespace resilab::linalg {

using index_t = std::int64_t;

/// Compressed sparse row matrix. `row_offsets` has `n_rows + 1` entries;
/// column indices within a row are strictly increasing.
struct CsrMatrix {
  index_t n_rows = 0;
  index_t n_cols = 0;
  std::vector<index_t> row_offsets;
  std::vector<index_t> col_indices;
  std::vector<double> values;

  index_t nnz() const { return static_cast<index_t>(values.size()); }

  /// Throws std::invalid_argument if the structure is inconsistent
  /// (offset array length, monotonicity, column bounds, ordering).
  void validate() const;
};

/// Dense vector block. `global_offset` is the index of `values[0]` in the
/// distributed vector; a serial vector uses offset 0.
struct DenseVector {
  std::vector<double> values;
  index_t global_offset = 0;

  index_t size() const { return static_cast<index_t>(values.size()); }
  double* data() { return values.data(); }
  const double* data() const { return values.data(); }
  double& operator[](index_t i) { return values[static_cast<std::size_t>(i)]; }
  double operator[](index_t i) const { return values[static_cast<std::size_t>(i)]; }
};

/// Grid extents for the 7-point Poisson benchmark problem.
struct Poisson3DSpec {
  index_t nx = 1;
  index_t ny = 1;
  index_t nz = 1;

  index_t n() const { return nx * ny * nz; }
};

/// Half-open row interval [begin, end).
struct RowRange {
  index_t begin = 0;
  index_t end = 0;

  index_t size() const { return end - begin; }
  bool contains(index_t r) const { return r >= begin && r < end; }
};

/// Builds the full 7-point Laplacian on an nx*ny*nz grid with homogeneous
/// Dirichlet boundaries dropped outside the grid: diagonal 6, off-diagonal
/// -1 per in-grid neighbor. Grid point (i,j,k) maps to row i + nx*(j + ny*k).
/// Returns the matrix and the all-ones right-hand side.
std::pair<CsrMatrix, DenseVector> build_poisson3d(const Poisson3DSpec& spec);

/// Builds only rows [rows.begin, rows.end) of the same operator. Row indices
/// in the returned matrix are local (row 0 is global row rows.begin); column
/// indices stay global. Used by ranks to build their block without ever
/// materializing the full matrix.
CsrMatrix build_poisson3d_rows(const Poisson3DSpec& spec, const RowRange& rows);

/// y = A*x for a serial matrix; x.size() must equal A.n_cols. Row dot
/// products accumulate left to right so results are bitwise reproducible.
DenseVector spmv(const CsrMatrix& a, const DenseVector& x);

/// y = A_local * x_full where A_local holds a block of rows with global
/// column indices and x_full is the complete input vector. The output block
/// inherits `row_offset` as its global offset.
DenseVector spmv_local(const CsrMatrix& a_local, const std::vector<double>& x_full,
                       index_t row_offset);

/// sqrt(sum a_ij^2), accumulated in value-array order.
double frobenius_norm(const CsrMatrix& a);

double dot(const DenseVector& x, const DenseVector& y);
double norm2(const DenseVector& x);

/// y := alpha*x + y
void axpy(double alpha, const DenseVector& x, DenseVector& y);

/// x := alpha*x
void scale(double alpha, DenseVector& x);

/// Splits n_rows into n_ranks contiguous ranges; the first (n_rows mod
/// n_ranks) ranges get one extra row. Ranges tile [0, n_rows) in order.
std::vector<RowRange> partition_rows(index_t n_rows, int n_ranks);

// -- distributed kernels -------------------------------------------------------
//
// Vectors are distributed as contiguous row blocks matching partition_rows.
// All of these are collectives: every rank of the communicator must call
// them in step.

/// y_local = A_local * x where x is assembled by allgathering every rank's
/// block. The concatenation reproduces the serial input exactly and rows are
/// reduced in the same order, so the result is bitwise equal to spmv() on
/// the assembled matrix.
DenseVector dist_spmv(runtime::RankCtx& ctx, const runtime::Comm& comm,
                      const CsrMatrix& a_local, const DenseVector& x_local);

/// Global dot product: local partial reduced left to right, partials
/// combined by the runtime's fixed-order tree.
double dist_dot(runtime::RankCtx& ctx, const runtime::Comm& comm, const DenseVector& x_local,
                const DenseVector& y_local);

double dist_norm2(runtime::RankCtx& ctx, const runtime::Comm& comm,
                  const DenseVector& x_local);

}  // namespace resilab::linalg
