#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace testsupport {

std::vector<double> dense_solve(const resilab::linalg::CsrMatrix& a,
                                const std::vector<double>& b) {
  const std::size_t n = static_cast<std::size_t>(a.n_rows);
  if (a.n_rows != a.n_cols || b.size() != n) throw std::invalid_argument("dense_solve shape");

  std::vector<double> m(n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (auto p = a.row_offsets[r]; p < a.row_offsets[r + 1]; ++p)
      m[r * n + static_cast<std::size_t>(a.col_indices[static_cast<std::size_t>(p)])] =
          a.values[static_cast<std::size_t>(p)];

  std::vector<double> x = b;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::fabs(m[perm[col] * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double mag = std::fabs(m[perm[r] * n + col]);
      if (mag > best) {
        best = mag;
        pivot = r;
      }
    }
    if (best == 0.0) throw std::runtime_error("dense_solve: singular matrix");
    std::swap(perm[col], perm[pivot]);
    const double d = m[perm[col] * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m[perm[r] * n + col] / d;
      if (f == 0.0) continue;
      m[perm[r] * n + col] = 0.0;
      for (std::size_t c = col + 1; c < n; ++c) m[perm[r] * n + c] -= f * m[perm[col] * n + c];
      x[perm[r]] -= f * x[perm[col]];
    }
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t col = n; col-- > 0;) {
    double acc = x[perm[col]];
    for (std::size_t c = col + 1; c < n; ++c) acc -= m[perm[col] * n + c] * out[c];
    out[col] = acc / m[perm[col] * n + col];
  }
  return out;
}

std::vector<std::pair<std::int64_t, double>> stencil_row(std::int64_t nx, std::int64_t ny,
                                                         std::int64_t nz, std::int64_t x,
                                                         std::int64_t y, std::int64_t z) {
  const auto id = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return i + nx * (j + ny * k);
  };
  std::vector<std::pair<std::int64_t, double>> row;
  row.emplace_back(id(x, y, z), 6.0);
  const std::int64_t dx[6] = {-1, 1, 0, 0, 0, 0};
  const std::int64_t dy[6] = {0, 0, -1, 1, 0, 0};
  const std::int64_t dz[6] = {0, 0, 0, 0, -1, 1};
  for (int d = 0; d < 6; ++d) {
    const std::int64_t i = x + dx[d], j = y + dy[d], k = z + dz[d];
    if (i < 0 || i >= nx || j < 0 || j >= ny || k < 0 || k >= nz) continue;
    row.emplace_back(id(i, j, k), -1.0);
  }
  std::sort(row.begin(), row.end());
  return row;
}

resilab::runtime::WorldResult run_world(int ranks, int spares,
                                        const resilab::runtime::RankProgram& fn,
                                        double watchdog_seconds) {
  resilab::runtime::WorldOptions opts;
  opts.n_ranks = ranks;
  opts.n_spares = spares;
  opts.watchdog_seconds = watchdog_seconds;
  resilab::runtime::World world(opts);
  return world.run(fn);
}

}  // namespace testsupport
