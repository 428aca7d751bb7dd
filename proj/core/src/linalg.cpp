#include "resilab/linalg.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "resilab/runtime.hpp"

namespace resilab::linalg {

void CsrMatrix::validate() const {
  if (static_cast<index_t>(row_offsets.size()) != n_rows + 1)
    throw std::invalid_argument("csr: row_offsets must have n_rows+1 entries");
  if (row_offsets.front() != 0 || row_offsets.back() != nnz())
    throw std::invalid_argument("csr: row_offsets must span [0, nnz]");
  if (col_indices.size() != values.size())
    throw std::invalid_argument("csr: col_indices/values length mismatch");
  for (index_t r = 0; r < n_rows; ++r) {
    if (row_offsets[r] > row_offsets[r + 1])
      throw std::invalid_argument("csr: row_offsets not monotone at row " + std::to_string(r));
    for (index_t p = row_offsets[r]; p < row_offsets[r + 1]; ++p) {
      index_t c = col_indices[static_cast<std::size_t>(p)];
      if (c < 0 || c >= n_cols)
        throw std::invalid_argument("csr: column index out of range in row " + std::to_string(r));
      if (p > row_offsets[r] && col_indices[static_cast<std::size_t>(p - 1)] >= c)
        throw std::invalid_argument("csr: columns not strictly increasing in row " +
                                    std::to_string(r));
    }
  }
}

namespace {

/// Appends one stencil row for grid point (i,j,k). Neighbor order follows
/// ascending global column index: z-1, y-1, x-1, center, x+1, y+1, z+1.
void append_stencil_row(const Poisson3DSpec& s, index_t i, index_t j, index_t k,
                        CsrMatrix& out) {
  const index_t row = i + s.nx * (j + s.ny * k);
  auto push = [&](index_t col, double v) {
    out.col_indices.push_back(col);
    out.values.push_back(v);
  };
  if (k > 0) push(row - s.nx * s.ny, -1.0);
  if (j > 0) push(row - s.nx, -1.0);
  if (i > 0) push(row - 1, -1.0);
  push(row, 6.0);
  if (i + 1 < s.nx) push(row + 1, -1.0);
  if (j + 1 < s.ny) push(row + s.nx, -1.0);
  if (k + 1 < s.nz) push(row + s.nx * s.ny, -1.0);
  out.row_offsets.push_back(out.nnz());
}

}  // namespace

std::pair<CsrMatrix, DenseVector> build_poisson3d(const Poisson3DSpec& spec) {
  CsrMatrix a = build_poisson3d_rows(spec, RowRange{0, spec.n()});
  DenseVector b;
  b.values.assign(static_cast<std::size_t>(spec.n()), 1.0);
  return {std::move(a), std::move(b)};
}

CsrMatrix build_poisson3d_rows(const Poisson3DSpec& spec, const RowRange& rows) {
  if (spec.nx < 1 || spec.ny < 1 || spec.nz < 1)
    throw std::invalid_argument("poisson3d: extents must be positive");
  if (rows.begin < 0 || rows.end > spec.n() || rows.begin > rows.end)
    throw std::invalid_argument("poisson3d: row range out of bounds");

  CsrMatrix a;
  a.n_rows = rows.size();
  a.n_cols = spec.n();
  a.row_offsets.reserve(static_cast<std::size_t>(rows.size()) + 1);
  a.row_offsets.push_back(0);
  a.col_indices.reserve(static_cast<std::size_t>(rows.size()) * 7);
  a.values.reserve(static_cast<std::size_t>(rows.size()) * 7);

  for (index_t row = rows.begin; row < rows.end; ++row) {
    const index_t i = row % spec.nx;
    const index_t j = (row / spec.nx) % spec.ny;
    const index_t k = row / (spec.nx * spec.ny);
    append_stencil_row(spec, i, j, k, a);
  }
  return a;
}

DenseVector spmv(const CsrMatrix& a, const DenseVector& x) {
  if (x.size() != a.n_cols) throw std::invalid_argument("spmv: length mismatch");
  DenseVector y = spmv_local(a, x.values, 0);
  return y;
}

DenseVector spmv_local(const CsrMatrix& a_local, const std::vector<double>& x_full,
                       index_t row_offset) {
  if (static_cast<index_t>(x_full.size()) != a_local.n_cols)
    throw std::invalid_argument("spmv_local: length mismatch");
  DenseVector y;
  y.global_offset = row_offset;
  y.values.resize(static_cast<std::size_t>(a_local.n_rows));
  for (index_t r = 0; r < a_local.n_rows; ++r) {
    double acc = 0.0;
    for (index_t p = a_local.row_offsets[r]; p < a_local.row_offsets[r + 1]; ++p) {
      acc += a_local.values[static_cast<std::size_t>(p)] *
             x_full[static_cast<std::size_t>(a_local.col_indices[static_cast<std::size_t>(p)])];
    }
    y.values[static_cast<std::size_t>(r)] = acc;
  }
  return y;
}

double frobenius_norm(const CsrMatrix& a) {
  double acc = 0.0;
  for (double v : a.values) acc += v * v;
  return std::sqrt(acc);
}

double dot(const DenseVector& x, const DenseVector& y) {
  if (x.size() != y.size()) throw std::invalid_argument("dot: length mismatch");
  double acc = 0.0;
  for (index_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

double norm2(const DenseVector& x) { return std::sqrt(dot(x, x)); }

void axpy(double alpha, const DenseVector& x, DenseVector& y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
  for (index_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale(double alpha, DenseVector& x) {
  for (double& v : x.values) v *= alpha;
}

DenseVector dist_spmv(runtime::RankCtx& ctx, const runtime::Comm& comm,
                      const CsrMatrix& a_local, const DenseVector& x_local) {
  const std::vector<double> x_full = ctx.allgather(comm, x_local.values);
  return spmv_local(a_local, x_full, x_local.global_offset);
}

double dist_dot(runtime::RankCtx& ctx, const runtime::Comm& comm, const DenseVector& x_local,
                const DenseVector& y_local) {
  return ctx.allreduce_sum(comm, dot(x_local, y_local));
}

double dist_norm2(runtime::RankCtx& ctx, const runtime::Comm& comm,
                  const DenseVector& x_local) {
  return std::sqrt(ctx.allreduce_sum(comm, dot(x_local, x_local)));
}

std::vector<RowRange> partition_rows(index_t n_rows, int n_ranks) {
  if (n_ranks < 1) throw std::invalid_argument("partition_rows: need at least one rank");
  if (n_rows < 0) throw std::invalid_argument("partition_rows: negative row count");
  std::vector<RowRange> parts;
  parts.reserve(static_cast<std::size_t>(n_ranks));
  const index_t base = n_rows / n_ranks;
  const index_t extra = n_rows % n_ranks;
  index_t at = 0;
  for (int r = 0; r < n_ranks; ++r) {
    const index_t len = base + (r < extra ? 1 : 0);
    parts.push_back(RowRange{at, at + len});
    at += len;
  }
  return parts;
}

}  // namespace resilab::linalg
